"""Adam, plateau learning-rate schedule, and the per-fold training loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write, checkpoint_bytes, load_into
from .data import AugmentConfig, DatasetIndex, FoldPlan, ImageLoader, batches
from .model import CVRNet
from .params import ParamStore


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None, batch_ids=None, lr: float | None = None):
        super().__init__(message)
        self.epoch, self.batch_ids, self.lr = epoch, batch_ids, lr


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    amsgrad: bool = False
    plateau_patience: int = 12
    plateau_factor: float = 0.1
    plateau_min_delta: float = 1e-6
    min_lr: float = 1e-7
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    freeze_prefixes: tuple[str, ...] = ()

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if self.amsgrad:
            raise ValueError("the AMSGrad variant is not supported")
        if self.lr0 <= 0 or self.min_lr <= 0 or self.min_lr > self.lr0:
            raise ValueError("need 0 < min_lr <= lr0")


class Adam:
    """Bias-corrected Adam without the AMSGrad variant."""

    def __init__(self, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def update(self, params: ParamStore, lr: float, frozen=()) -> None:
        """One step over every trainable parameter; each needs a gradient slot."""
        self.step += 1
        t = self.step
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name, value in params.trainable():
            if frozen and name.startswith(tuple(frozen)):
                continue
            if name not in params.grads:
                raise KeyError(f"missing gradient slot for {name}")
            g = params.grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(value)
                self.v[name] = np.zeros_like(value)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            value -= (lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)).astype(value.dtype, copy=False)


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    lr: float = 1e-4
    factor: float = 0.1
    patience: int = 12
    min_lr: float = 1e-7
    min_delta: float = 1e-6
    best: float = math.inf
    epochs_since_improvement: int = 0

    def step(self, val_loss: float) -> float:
        if math.isnan(val_loss):
            raise NumericalError("validation loss is NaN", lr=self.lr)
        if self.best - val_loss >= self.min_delta:
            self.best = val_loss
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
            if self.epochs_since_improvement >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.epochs_since_improvement = 0
        return self.lr


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lr: float
    wall_time: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_checkpoint: str | None = None

    def to_jsonl(self, timing: bool = True) -> str:
        """One JSON object per epoch; ``timing=False`` writes wall_time as 0 for byte-stable output."""
        rows = (asdict(r) if timing else {**asdict(r), "wall_time": 0.0} for r in self.epochs)
        return "".join(json.dumps(row) + "\n" for row in rows)

    def deterministic_view(self) -> list[dict]:
        """Records without wall-clock time, for reproducibility comparisons."""
        return [{k: v for k, v in asdict(r).items() if k != "wall_time"} for r in self.epochs]


def _check_loss(loss: float, epoch: int, ids, lr: float) -> None:
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss} at epoch {epoch}, lr {lr}, batch ids {list(ids)}",
                             epoch, list(ids), lr)


def evaluate_loss(model: CVRNet, index: DatasetIndex, ids, batch_size: int, class_weights=None,
                  loader: ImageLoader | None = None) -> tuple[float, float, np.ndarray]:
    """Infer-mode (sample-weighted mean loss, accuracy, predictions) over ``ids``."""
    loader = loader or ImageLoader((model.config.input_h, model.config.input_w))
    total, n, preds = 0.0, 0, []
    for b in batches(index, ids, batch_size, loader=loader, dtype=model.params.dtype):
        out = model.forward(b.images, train=False)
        total += model.loss(out, b.labels, class_weights) * len(b.ids)
        n += len(b.ids)
        preds.append(np.argmax(out.ensemble, axis=1))
    preds = np.concatenate(preds)
    acc = float(np.mean(preds == index.labels[list(ids)]))
    return total / n, acc, preds


def fit(model: CVRNet, index: DatasetIndex, plan: FoldPlan, fold: int, config: TrainConfig,
        augment_config: AugmentConfig | None = AugmentConfig(), class_weights=None,
        out_dir=None, loader: ImageLoader | None = None, restore_best: bool = True,
        log=None, timing: bool = True) -> tuple[TrainReport, bytes]:
    """Train ``model`` on one fold; returns the report and the best checkpoint bytes.

    With ``out_dir`` the per-epoch JSON lines go to ``train_report.jsonl`` and
    the best checkpoint to ``best.ckpt`` (both written atomically); with
    ``timing=False`` the file's wall times are zeroed so reruns are byte-identical.
    """
    f = plan.fold(fold)
    if not f.train or not f.val:
        raise ValueError(f"fold {fold} needs non-empty train and validation sets")
    loader = loader or ImageLoader((model.config.input_h, model.config.input_w))
    cw = None if class_weights is None else np.asarray(class_weights, dtype=model.params.dtype)
    opt = Adam(config.beta1, config.beta2, config.epsilon)
    sched = PlateauScheduler(config.lr0, config.plateau_factor, config.plateau_patience,
                             config.min_lr, config.plateau_min_delta)
    report = TrainReport()
    best_loss, best_bytes = math.inf, b""
    out = Path(out_dir) if out_dir is not None else None
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        lr = sched.lr
        total, n = 0.0, 0
        for b in batches(index, f.train, config.batch_size, shuffle_seed=config.seed, epoch=epoch,
                         augment_config=augment_config, loader=loader, dtype=model.params.dtype):
            loss, _ = model.loss_and_grads(b.images, b.labels, cw)
            _check_loss(loss, epoch, b.ids, lr)
            opt.update(model.params, lr, config.freeze_prefixes)
            total += loss * len(b.ids)
            n += len(b.ids)
        val_loss, val_acc, _ = evaluate_loss(model, index, f.val, config.batch_size, cw, loader)
        _check_loss(val_loss, epoch, f.val, lr)
        sched.step(val_loss)
        rec = EpochRecord(epoch, total / n, val_loss, val_acc, lr, time.perf_counter() - t0)
        report.epochs.append(rec)
        if log is not None:
            log(f"epoch {epoch:3d}  train {rec.train_loss:.4f}  val {val_loss:.4f}  acc {val_acc:.3f}  lr {lr:.1e}")
        if val_loss < best_loss:
            best_loss, report.best_epoch = val_loss, epoch
            best_bytes = checkpoint_bytes(model, opt)
            if out is not None:
                atomic_write(out / "best.ckpt", best_bytes)
                report.best_checkpoint = str(out / "best.ckpt")
        if out is not None:
            atomic_write(out / "train_report.jsonl", report.to_jsonl(timing).encode())
    if restore_best and best_bytes:
        load_into(model, best_bytes)
    return report, best_bytes


def overfit_single_batch(model: CVRNet, images: np.ndarray, labels: np.ndarray, steps: int,
                         lr: float = 1e-3, class_weights=None) -> list[float]:
    """Repeated Adam steps on one fixed batch; returns the loss before each step."""
    if len(images) > 8:
        raise ValueError("overfit diagnostic expects a batch of at most 8 samples")
    opt = Adam()
    trace = []
    for _ in range(steps):
        loss, _ = model.loss_and_grads(images, labels, class_weights)
        _check_loss(loss, 0, range(len(images)), lr)
        trace.append(loss)
        opt.update(model.params, lr)
    return trace
