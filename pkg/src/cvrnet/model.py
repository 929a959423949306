"""The two-encoder, five-head ensemble classifier."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import ops
from .blocks import FCLHead, encoder1, encoder2
from .params import ParamStore

# (head name, tap(s) it reads)
HEADS = (
    ("P1", ("E13",)),
    ("P2", ("E14",)),
    ("P3", ("E15", "E25")),
    ("P4", ("E23",)),
    ("P5", ("E24",)),
)
TAPS = ("E13", "E14", "E15", "E23", "E24", "E25")


@dataclass(frozen=True)
class ModelConfig:
    input_h: int = 224
    input_w: int = 224
    num_classes: int = 2
    width_multiplier: Fraction = Fraction(1)
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "width_multiplier", Fraction(self.width_multiplier))
        if self.input_h % 32 or self.input_w % 32 or self.input_h < 32 or self.input_w < 32:
            raise ValueError(f"input size {self.input_h}x{self.input_w} must be a positive multiple of 32")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        if np.dtype(self.dtype) not in (np.float32, np.float64):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    def to_json(self) -> str:
        d = asdict(self)
        d["width_multiplier"] = str(self.width_multiplier)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        d["width_multiplier"] = Fraction(d["width_multiplier"])
        return cls(**d)


@dataclass
class HeadOutputs:
    logits: list[np.ndarray]
    probs: list[np.ndarray]
    ensemble: np.ndarray
    taps: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    cache: object = field(default=None, repr=False)

    def __getitem__(self, name: str) -> np.ndarray:
        """``out["P3"]`` is head 3's probabilities, ``out["P"]`` the ensemble."""
        if name == "P":
            return self.ensemble
        return self.probs[int(name[1:]) - 1]


class CVRNet:
    """Encoders, heads, and their parameters.

    Build with :func:`build`. Parameters live in ``self.params``.
    """

    def __init__(self, config: ModelConfig, params: ParamStore | None = None, seed: int = 0):
        self.config = config
        self.seed = seed
        w = config.width_multiplier
        self.encoder1 = encoder1("enc1", w)
        self.encoder2 = encoder2("enc2", w)
        shapes = self.tap_shapes(batch=1)
        self.heads = []
        for name, taps in HEADS:
            cin = sum(shapes[t][3] for t in taps)
            self.heads.append(FCLHead(f"head.{name}", cin, config.num_classes))
        if params is None:
            params = ParamStore(config.dtype)
            rng = np.random.default_rng(seed)
            self.encoder1.init(params, rng)
            self.encoder2.init(params, rng)
            for h in self.heads:
                h.init(params, rng)
        self.params = params

    @property
    def input_shape(self) -> tuple:
        return (self.config.input_h, self.config.input_w, 3)

    def tap_shapes(self, batch: int = 1) -> dict[str, tuple]:
        """Shapes of every encoder tap for a batch of the configured size (no arithmetic)."""
        shape = (batch,) + self.input_shape
        out = self.encoder1.tap_shapes(shape)
        out.update(self.encoder2.tap_shapes(shape))
        return out

    def head_input_shapes(self, batch: int = 1) -> dict[str, tuple]:
        shapes = self.tap_shapes(batch)
        out = {}
        for name, taps in HEADS:
            s = shapes[taps[0]]
            out[name] = s[:3] + (sum(shapes[t][3] for t in taps),)
        return out

    # ------------------------------------------------------------------
    def forward(self, batch: np.ndarray, train: bool = False) -> HeadOutputs:
        expected = self.input_shape
        if batch.ndim != 4 or batch.shape[1:] != expected:
            raise ops.ShapeError(f"batch shape {batch.shape} does not match model input B x {expected}")
        x = batch.astype(self.params.dtype, copy=False)
        taps1, c1 = self.encoder1.forward(self.params, x, train)
        taps2, c2 = self.encoder2.forward(self.params, x, train)
        taps = {**taps1, **taps2}
        logits, probs, hcaches = [], [], []
        for head, (_, names) in zip(self.heads, HEADS):
            feat = taps[names[0]] if len(names) == 1 else ops.concat_channels(taps[names[0]], taps[names[1]])
            z, hc = head.forward(self.params, feat, train)
            logits.append(z)
            probs.append(ops.softmax(z))
            hcaches.append(hc)
        ensemble = np.mean(probs, axis=0)
        return HeadOutputs(logits, probs, ensemble, taps, (c1, c2, hcaches))

    def loss(self, outputs: HeadOutputs, labels: np.ndarray, class_weights=None) -> float:
        """Mean of the five heads' weighted cross-entropies (no term on the ensemble)."""
        k = self.config.num_classes
        if class_weights is not None and np.asarray(class_weights).shape != (k,):
            raise ValueError(f"class weight vector must have length {k}")
        total = 0.0
        for z in outputs.logits:
            total += ops.softmax_cross_entropy(z, labels, class_weights)[0]
        return total / len(outputs.logits)

    def backward(self, outputs: HeadOutputs, labels: np.ndarray, class_weights=None) -> None:
        """Accumulate d(loss)/d(params) into ``self.params.grads``."""
        c1, c2, hcaches = outputs.cache
        n = len(self.heads)
        dtaps: dict[str, np.ndarray] = {}

        def add(tap, g):
            dtaps[tap] = g if tap not in dtaps else dtaps[tap] + g

        for head, (_, names), p, hc in zip(self.heads, HEADS, outputs.probs, hcaches):
            dz = ops.softmax_cross_entropy_backward(p, labels, class_weights) / n
            dfeat = head.backward(self.params, dz.astype(self.params.dtype, copy=False), hc)
            if len(names) == 1:
                add(names[0], dfeat)
            else:
                a, b = ops.split_channels(dfeat, outputs.taps[names[0]].shape[-1])
                add(names[0], a)
                add(names[1], b)
        self.encoder1.backward(self.params, dtaps, c1)
        self.encoder2.backward(self.params, dtaps, c2)

    def loss_and_grads(self, batch, labels, class_weights=None, train=True) -> tuple[float, HeadOutputs]:
        self.params.zero_grad()
        out = self.forward(batch, train=train)
        value = self.loss(out, labels, class_weights)
        self.backward(out, labels, class_weights)
        return value, out

    def predict(self, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Infer-mode ensemble probabilities and arg-max labels (lowest index wins ties)."""
        p = self.forward(batch, train=False).ensemble
        return p, np.argmax(p, axis=1)

    def parameter_count(self, prefix: str = "") -> int:
        return self.params.count(prefix)


def build(config: ModelConfig, init_seed: int = 0) -> CVRNet:
    return CVRNet(config, seed=init_seed)
