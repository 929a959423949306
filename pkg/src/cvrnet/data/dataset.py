"""Dataset catalogues, stratified fold plans, class weights and batch streams."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .augment import AugmentConfig, augment
from .pnm import read_pnm, resize_nearest

IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm")
TENSOR_SUFFIX = ".cvrt"


class DatasetError(ValueError):
    pass


@dataclass
class DatasetIndex:
    """Sorted catalogue of (path, class id) pairs."""

    samples: list[tuple[str, int]]
    class_names: list[str]
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        k = len(self.class_names)
        paths = [p for p, _ in self.samples]
        if len(set(paths)) != len(paths):
            raise DatasetError("duplicate sample paths")
        if any(not 0 <= c < k for _, c in self.samples):
            raise DatasetError("class id outside [0, K)")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c for _, c in self.samples], dtype=np.int64)

    @property
    def counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def __len__(self) -> int:
        return len(self.samples)


def _readable(path: Path) -> str | None:
    try:
        with open(path, "rb") as f:
            f.read(1)
    except OSError as exc:
        return f"unreadable: {exc.strerror or exc}"
    return None


def _scan_class_dirs(root: Path, class_names: list[str] | None = None):
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    dirs = sorted(d.name for d in root.iterdir() if d.is_dir() and not d.name.startswith("."))
    if class_names is not None and dirs != class_names:
        raise DatasetError(f"class directories {dirs} under {root} differ from {class_names}")
    samples, skipped = [], []
    for cid, name in enumerate(dirs):
        found = 0
        for f in sorted((root / name).iterdir()):
            if f.name.startswith(".") or not f.is_file():
                continue
            if f.suffix.lower() not in IMAGE_SUFFIXES + (TENSOR_SUFFIX,):
                skipped.append((str(f), "unsupported file type"))
                continue
            problem = _readable(f)
            if problem:
                skipped.append((str(f), problem))
                continue
            samples.append((str(f), cid))
            found += 1
        if found == 0:
            raise DatasetError(f"class directory {root / name} contains no usable images")
    return dirs, samples, skipped


def scan_dataset(root) -> DatasetIndex:
    """Index ``<root>/<class_name>/<file>``; classes in sorted directory order."""
    root = Path(root)
    names, samples, skipped = _scan_class_dirs(root)
    if len(names) < 2:
        raise DatasetError(f"need at least 2 class directories under {root}, found {len(names)}")
    return DatasetIndex(samples, names, skipped)


def scan_fixed_split(root) -> tuple[DatasetIndex, list[int], list[int]]:
    """Index ``<root>/train/<class>/...`` and ``<root>/test/<class>/...``.

    Returns the combined (sorted) index plus the train and test sample ids.
    """
    root = Path(root)
    train = scan_dataset(root / "train")
    _, test_samples, test_skipped = _scan_class_dirs(root / "test", train.class_names)
    samples = sorted(train.samples + test_samples)
    index = DatasetIndex(samples, train.class_names, train.skipped + test_skipped)
    test_paths = {p for p, _ in test_samples}
    test_ids = [i for i, (p, _) in enumerate(samples) if p in test_paths]
    train_ids = [i for i, (p, _) in enumerate(samples) if p not in test_paths]
    return index, train_ids, test_ids


# ---------------------------------------------------------------------------
# Fold planning


@dataclass
class Fold:
    train: list[int]
    val: list[int]
    test: list[int]

    def role(self, name: str) -> list[int]:
        if name in ("validation", "val"):
            return self.val
        if name in ("train", "test"):
            return getattr(self, name)
        raise ValueError(f"unknown role {name!r}")


@dataclass
class FoldPlan:
    k: int
    seed: int
    folds: list[Fold]

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "seed": self.seed,
                           "folds": [{"train": f.train, "val": f.val, "test": f.test} for f in self.folds]},
                          indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        return cls(d["k"], d["seed"], [Fold(f["train"], f["val"], f["test"]) for f in d["folds"]])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "FoldPlan":
        return cls.from_json(Path(path).read_text())

    def fold(self, f: int) -> Fold:
        if not 0 <= f < len(self.folds):
            raise DatasetError(f"fold {f} out of range for a plan with {len(self.folds)} folds")
        return self.folds[f]


def _stratified_val(rest_by_class: list[list[int]], val_frac: float, rng) -> tuple[list[int], list[int]]:
    train, val = [], []
    for ids in rest_by_class:
        ids = list(rng.permutation(ids)) if ids else []
        nv = int(round(val_frac * len(ids)))
        val += ids[:nv]
        train += ids[nv:]
    return sorted(int(i) for i in train), sorted(int(i) for i in val)


def make_folds(labels: Sequence[int] | DatasetIndex, k: int = 5, seed: int = 0,
               val_frac: float = 0.1) -> FoldPlan:
    """Stratified k-way partition into test parts, with a stratified validation split.

    Each class is shuffled and cut into ``k`` parts whose sizes differ by at
    most one; the leftover samples of successive classes are dealt round-robin
    across folds so the test-set sizes also differ by at most one.
    """
    if isinstance(labels, DatasetIndex):
        labels = labels.labels
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise DatasetError(f"k must be >= 2, got {k}")
    if not 0.0 <= val_frac < 1.0:
        raise DatasetError(f"val_frac must lie in [0, 1), got {val_frac}")
    classes = np.unique(labels)
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[] for _ in range(k)]
    parts_by_class = []
    offset = 0
    for c in classes:
        ids = np.flatnonzero(labels == c)
        if len(ids) < k:
            raise DatasetError(f"class {int(c)} has {len(ids)} samples, fewer than k={k}")
        ids = rng.permutation(ids)
        base, extra = divmod(len(ids), k)
        sizes = [base] * k
        for e in range(extra):
            sizes[(offset + e) % k] += 1
        offset = (offset + extra) % k
        cuts = np.cumsum([0] + sizes)
        cls_parts = [ids[cuts[f] : cuts[f + 1]].tolist() for f in range(k)]
        parts_by_class.append(cls_parts)
        for f in range(k):
            parts[f] += cls_parts[f]
    folds = []
    for f in range(k):
        rest = [[i for g in range(k) if g != f for i in cp[g]] for cp in parts_by_class]
        train, val = _stratified_val(rest, val_frac, np.random.default_rng([seed, f]))
        folds.append(Fold(train, val, sorted(int(i) for i in parts[f])))
    return FoldPlan(k, seed, folds)


def fixed_split_plan(labels: Sequence[int] | DatasetIndex, train_ids, test_ids, seed: int = 0,
                     val_frac: float = 0.1) -> FoldPlan:
    """Single-fold plan honouring a given train/test split."""
    if isinstance(labels, DatasetIndex):
        labels = labels.labels
    labels = np.asarray(labels)
    classes = np.unique(labels)
    rest = [[int(i) for i in train_ids if labels[i] == c] for c in classes]
    train, val = _stratified_val(rest, val_frac, np.random.default_rng([seed, 0]))
    return FoldPlan(1, seed, [Fold(train, val, sorted(int(i) for i in test_ids))])


def check_fold_plan(plan: FoldPlan, labels: Sequence[int]) -> list[str]:
    """Every violated plan invariant, as messages (empty when the plan is valid)."""
    labels = np.asarray(labels)
    n = len(labels)
    everything = set(range(n))
    problems = []
    tests = []
    for f, fold in enumerate(plan.folds):
        tr, va, te = set(fold.train), set(fold.val), set(fold.test)
        if len(tr) + len(va) + len(te) != len(fold.train) + len(fold.val) + len(fold.test):
            problems.append(f"fold {f}: duplicate ids inside a role")
        if tr & va or tr & te or va & te:
            problems.append(f"fold {f}: roles overlap")
        if tr | va | te != everything:
            problems.append(f"fold {f}: roles do not cover all {n} samples")
        tests.append(te)
    if plan.k > 1:
        for a in range(len(tests)):
            for b in range(a + 1, len(tests)):
                if tests[a] & tests[b]:
                    problems.append(f"test sets of folds {a} and {b} intersect")
        if set().union(*tests) != everything:
            problems.append("union of test sets is not the whole dataset")
        for c in np.unique(labels):
            n_c = int(np.sum(labels == c))
            for f, te in enumerate(tests):
                got = int(np.sum(labels[list(te)] == c)) if te else 0
                if abs(got - n_c / plan.k) >= 1:
                    problems.append(f"fold {f}: class {int(c)} has {got} test samples, expected {n_c / plan.k:.2f} +- 1")
    return problems


# ---------------------------------------------------------------------------
# Class weights


@dataclass(frozen=True)
class ClassWeights:
    mode: str
    exact: tuple[Fraction, ...]

    @property
    def weights(self) -> np.ndarray:
        return np.array([float(w) for w in self.exact])


def class_weights(counts: Sequence[int], mode: str = "inverse_frequency") -> ClassWeights:
    """``inverse_frequency``: w_j = N / (K N_j).  ``paper_literal``: w_j = N_j / N."""
    counts = [int(c) for c in counts]
    if any(c <= 0 for c in counts):
        raise DatasetError(f"class counts must be positive, got {counts}")
    n, k = sum(counts), len(counts)
    if mode == "inverse_frequency":
        exact = tuple(Fraction(n, k * c) for c in counts)
    elif mode == "paper_literal":
        exact = tuple(Fraction(c, n) for c in counts)
    else:
        raise ValueError(f"unknown class-weight mode {mode!r}")
    return ClassWeights(mode, exact)


# ---------------------------------------------------------------------------
# Loading and batching


class ImageLoader:
    """Decode and resize images to ``size`` (int or (h, w)) x 3 float32, with a memo cache."""

    def __init__(self, size: int | tuple[int, int] = 224, cache: bool = True):
        self.size = size
        self._cache: dict[str, np.ndarray] | None = {} if cache else None

    def __call__(self, path: str) -> np.ndarray:
        if self._cache is not None and path in self._cache:
            return self._cache[path]
        img = load_and_resize(path, self.size)[0]
        img.setflags(write=False)
        if self._cache is not None:
            self._cache[path] = img
        return img


def load_image(path) -> np.ndarray:
    """H x W x C float32 in [0, 1] from a PGM/PPM or a raw-tensor sidecar."""
    path = Path(path)
    if path.suffix.lower() == TENSOR_SUFFIX:
        from ..checkpoint import read_tensor_file

        _, records = read_tensor_file(path)
        if "image" not in records:
            raise DatasetError(f"{path}: tensor file has no 'image' record")
        img = records["image"]
        if img.ndim == 2:
            img = img[:, :, None]
        return np.asarray(img, dtype=np.float32)
    return read_pnm(path)


def load_and_resize(path, size: int | tuple[int, int] = 224) -> np.ndarray:
    """1 x H x W x 3 float32: nearest-neighbour resize, grayscale replicated to 3 channels."""
    h, w = (size, size) if isinstance(size, int) else size
    img = load_image(path)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    elif img.shape[2] != 3:
        raise DatasetError(f"{path}: expected 1 or 3 channels, got {img.shape[2]}")
    return np.ascontiguousarray(resize_nearest(img, h, w))[None]


class Batch(NamedTuple):
    images: np.ndarray
    labels: np.ndarray
    ids: list[int]


def sample_seed(seed: int, epoch: int, sample_id: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, sample_id]).generate_state(1)[0])


def one_hot(labels, k: int, dtype=np.float32) -> np.ndarray:
    return np.eye(k, dtype=dtype)[np.asarray(labels)]


def batches(index: DatasetIndex, ids: Sequence[int], batch_size: int, *, shuffle_seed: int | None = None,
            epoch: int = 0, augment_config: AugmentConfig | None = None,
            loader: ImageLoader | None = None, dtype=np.float32) -> Iterator[Batch]:
    """Yield batches over ``ids`` (the final batch may be short).

    With ``shuffle_seed`` the order is a permutation drawn from
    ``(shuffle_seed, epoch)``; augmentation draws per-sample seeds from
    ``(shuffle_seed, epoch, sample_id)``, so the stream does not depend on
    how or where samples are loaded.
    """
    ids = [int(i) for i in ids]
    if not ids:
        raise DatasetError("empty role set")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if augment_config is not None and shuffle_seed is None:
        raise ValueError("augmentation needs a seed")
    loader = loader or ImageLoader()
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(ids))
        ids = [ids[i] for i in order]
    k = index.num_classes
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        imgs = []
        for i in chunk:
            img = loader(index.samples[i][0])
            if augment_config is not None:
                img = augment(img, augment_config, sample_seed(shuffle_seed, epoch, i))
            imgs.append(img)
        labels = one_hot([index.samples[i][1] for i in chunk], k, dtype)
        yield Batch(np.stack(imgs).astype(dtype, copy=False), labels, chunk)


def role_batches(index: DatasetIndex, plan: FoldPlan, fold: int, role: str, batch_size: int,
                 **kwargs) -> Iterator[Batch]:
    """:func:`batches` over one role of one fold; augmentation only for ``train``."""
    if kwargs.get("augment_config") is not None and role != "train":
        raise ValueError("augmentation is only permitted for the train role")
    return batches(index, plan.fold(fold).role(role), batch_size, **kwargs)


def write_dataset(root, images_by_class: dict[str, list[np.ndarray]]) -> None:
    """Write uint8 images as ``<root>/<class>/<nnnn>.pgm|ppm`` (used for fixtures and demos)."""
    from .pnm import write_pnm

    for name, images in images_by_class.items():
        d = Path(root) / name
        os.makedirs(d, exist_ok=True)
        for i, img in enumerate(images):
            ext = ".pgm" if img.ndim == 2 or img.shape[-1] == 1 else ".ppm"
            write_pnm(d / f"{i:05d}{ext}", img)
