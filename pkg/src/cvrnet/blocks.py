"""Network building blocks.

A layer owns a name prefix and hyperparameters; its weights live in a
:class:`~cvrnet.params.ParamStore`. Every layer offers

* ``init(store, rng)`` to register (and randomly initialize) its parameters,
* ``out_shape(shape)`` for shape propagation without any arithmetic,
* ``forward(store, x, train) -> (y, cache)``,
* ``backward(store, dy, cache) -> dx``, accumulating parameter gradients
  into ``store``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import ops
from .ops import ConvSpec, ShapeError
from .params import ParamStore

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3


def scaled(channels: int, width_multiplier) -> int:
    """Channel count at a given width multiplier (floor, at least 1)."""
    return max(1, int(Fraction(channels) * Fraction(width_multiplier)))


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype, gain: float = 1.0) -> np.ndarray:
    std = gain * np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape, dtype=np.float64) * std).astype(dtype)


class Layer:
    def __init__(self, name: str):
        self.name = name

    def init(self, store: ParamStore, rng: np.random.Generator) -> None:
        pass

    def out_shape(self, shape: tuple) -> tuple:
        return shape

    def forward(self, store: ParamStore, x, train: bool):
        raise NotImplementedError

    def backward(self, store: ParamStore, dy, cache):
        raise NotImplementedError

    def param_names(self, store: ParamStore) -> list[str]:
        prefix = self.name + "."
        return [n for n in store.names() if n.startswith(prefix)]


# ---------------------------------------------------------------------------
# Primitive layers


class Conv(Layer):
    def __init__(self, name, cin, cout, kernel=3, stride=1, bias=False):
        super().__init__(name)
        self.cin, self.cout, self.kernel, self.stride, self.bias = cin, cout, kernel, stride, bias
        self.spec = ConvSpec(kernel, kernel, stride, "same")

    def init(self, store, rng):
        k = self.kernel
        store.add(f"{self.name}.weights", he_normal(rng, (k, k, self.cin, self.cout), k * k * self.cin, store.dtype))
        if self.bias:
            store.add(f"{self.name}.bias", np.zeros(self.cout))

    def out_shape(self, shape):
        b, h, w, c = shape
        if c != self.cin:
            raise ShapeError(f"{self.name}: expected {self.cin} input channels, got {c}")
        return (b, ops.conv_output_extent(h, self.kernel, self.stride, "same"),
                ops.conv_output_extent(w, self.kernel, self.stride, "same"), self.cout)

    def forward(self, store, x, train):
        bias = store[f"{self.name}.bias"] if self.bias else None
        return ops.conv2d_forward(x, store[f"{self.name}.weights"], bias, self.spec)

    def backward(self, store, dy, cache):
        dx, dw, db = ops.conv2d_backward(dy, cache)
        store.accumulate(f"{self.name}.weights", dw)
        if self.bias:
            store.accumulate(f"{self.name}.bias", db)
        return dx


class SepConv(Layer):
    """Depthwise 3x3 followed by pointwise 1x1, without biases (BN follows)."""

    def __init__(self, name, cin, cout, kernel=3):
        super().__init__(name)
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.spec = ConvSpec(kernel, kernel, 1, "same", groups=cin)

    def init(self, store, rng):
        k = self.kernel
        store.add(f"{self.name}.dw_weights", he_normal(rng, (k, k, self.cin, 1), k * k, store.dtype))
        store.add(f"{self.name}.pw_weights", he_normal(rng, (1, 1, self.cin, self.cout), self.cin, store.dtype))

    def out_shape(self, shape):
        if shape[3] != self.cin:
            raise ShapeError(f"{self.name}: expected {self.cin} input channels, got {shape[3]}")
        return shape[:3] + (self.cout,)

    def forward(self, store, x, train):
        return ops.depthwise_separable_conv_forward(
            x, store[f"{self.name}.dw_weights"], store[f"{self.name}.pw_weights"], None, None, self.spec)

    def backward(self, store, dy, cache):
        dx, ddw, dpw, _, _ = ops.depthwise_separable_conv_backward(dy, cache)
        store.accumulate(f"{self.name}.dw_weights", ddw)
        store.accumulate(f"{self.name}.pw_weights", dpw)
        return dx


class BatchNorm(Layer):
    def __init__(self, name, channels, momentum=BN_MOMENTUM, epsilon=BN_EPSILON):
        super().__init__(name)
        self.channels, self.momentum, self.epsilon = channels, momentum, epsilon

    def init(self, store, rng):
        c = self.channels
        store.add(f"{self.name}.gamma", np.ones(c))
        store.add(f"{self.name}.beta", np.zeros(c))
        store.add(f"{self.name}.running_mean", np.zeros(c), trainable=False)
        store.add(f"{self.name}.running_var", np.ones(c), trainable=False)

    def forward(self, store, x, train):
        n = self.name
        return ops.batch_norm_forward(x, store[f"{n}.gamma"], store[f"{n}.beta"], store[f"{n}.running_mean"],
                                      store[f"{n}.running_var"], train, self.momentum, self.epsilon)

    def backward(self, store, dy, cache):
        dx, dgamma, dbeta = ops.batch_norm_backward(dy, cache)
        store.accumulate(f"{self.name}.gamma", dgamma)
        store.accumulate(f"{self.name}.beta", dbeta)
        return dx


class ReLU(Layer):
    def __init__(self, name="relu"):
        super().__init__(name)

    def forward(self, store, x, train):
        return ops.relu_forward(x)

    def backward(self, store, dy, cache):
        return ops.relu_backward(dy, cache)


class MaxPool(Layer):
    def __init__(self, name, pool=3, stride=2):
        super().__init__(name)
        self.pool, self.stride = pool, stride

    def out_shape(self, shape):
        b, h, w, c = shape
        return (b, ops.conv_output_extent(h, self.pool, self.stride, "same"),
                ops.conv_output_extent(w, self.pool, self.stride, "same"), c)

    def forward(self, store, x, train):
        return ops.maxpool2d_forward(x, self.pool, self.pool, self.stride)

    def backward(self, store, dy, cache):
        return ops.maxpool2d_backward(dy, cache)


class Dense(Layer):
    def __init__(self, name, cin, cout, init_gain=1.0):
        super().__init__(name)
        self.cin, self.cout, self.init_gain = cin, cout, init_gain

    def init(self, store, rng):
        w = he_normal(rng, (self.cin, self.cout), self.cin, store.dtype, self.init_gain)
        store.add(f"{self.name}.weights", w)
        store.add(f"{self.name}.bias", np.zeros(self.cout))

    def out_shape(self, shape):
        if shape[1] != self.cin:
            raise ShapeError(f"{self.name}: expected {self.cin} features, got {shape[1]}")
        return (shape[0], self.cout)

    def forward(self, store, x, train):
        return ops.dense_forward(x, store[f"{self.name}.weights"], store[f"{self.name}.bias"])

    def backward(self, store, dy, cache):
        dx, dw, db = ops.dense_backward(dy, cache)
        store.accumulate(f"{self.name}.weights", dw)
        store.accumulate(f"{self.name}.bias", db)
        return dx


class Sequential(Layer):
    def __init__(self, name, layers):
        super().__init__(name)
        self.layers = list(layers)

    def init(self, store, rng):
        for layer in self.layers:
            layer.init(store, rng)

    def out_shape(self, shape):
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def forward(self, store, x, train):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(store, x, train)
            caches.append(c)
        return x, caches

    def backward(self, store, dy, caches):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(store, dy, c)
        return dy


def conv_bn(name, cin, cout, kernel, stride=1, relu=True) -> list[Layer]:
    layers = [Conv(f"{name}.conv", cin, cout, kernel, stride), BatchNorm(f"{name}.bn", cout)]
    if relu:
        layers.append(ReLU())
    return layers


def sep_bn(name, cin, cout, relu=True) -> list[Layer]:
    layers = [SepConv(f"{name}.sep", cin, cout), BatchNorm(f"{name}.bn", cout)]
    if relu:
        layers.append(ReLU())
    return layers


class Residual(Layer):
    """``ReLU(main(x) + skip(x))``; ``skip=None`` is the identity."""

    def __init__(self, name, main: Sequential, skip: Sequential | None, downsample: int = 1):
        super().__init__(name)
        self.main, self.skip, self.downsample = main, skip, downsample

    def init(self, store, rng):
        self.main.init(store, rng)
        if self.skip is not None:
            self.skip.init(store, rng)

    def _check_extent(self, shape):
        if self.downsample > 1 and (shape[1] % self.downsample or shape[2] % self.downsample):
            raise ShapeError(f"{self.name}: spatial extent {shape[1]}x{shape[2]} not divisible by {self.downsample}")

    def out_shape(self, shape):
        self._check_extent(shape)
        out = self.main.out_shape(shape)
        skip = shape if self.skip is None else self.skip.out_shape(shape)
        if out != skip:
            raise ShapeError(f"{self.name}: main path {out} and skip path {skip} disagree")
        return out

    def forward(self, store, x, train):
        self._check_extent(x.shape)
        m, mc = self.main.forward(store, x, train)
        if self.skip is None:
            s, sc = x, None
        else:
            s, sc = self.skip.forward(store, x, train)
        if m.shape != s.shape:
            raise ShapeError(f"{self.name}: main path {m.shape} and skip path {s.shape} disagree")
        y, mask = ops.relu_forward(m + s)
        return y, (mc, sc, mask)

    def backward(self, store, dy, cache):
        mc, sc, mask = cache
        dsum = ops.relu_backward(dy, mask)
        dx = self.main.backward(store, dsum, mc)
        dx = dx + (dsum if self.skip is None else self.skip.backward(store, dsum, sc))
        return dx


# ---------------------------------------------------------------------------
# Encoder-1 vocabulary (bottleneck residual design)


def stem(name, width, cin=3) -> Sequential:
    """7x7 stride-2 conv + BN + ReLU, then 3x3 stride-2 max-pool: M x N -> M/4 x N/4."""
    return Sequential(name, conv_bn(f"{name}.conv1", cin, width, 7, 2) + [MaxPool(f"{name}.pool", 3, 2)])


def residual_identity_block(name, channels, bottleneck) -> Residual:
    """Shape-preserving bottleneck block: 1x1 reduce, 3x3, 1x1 expand, identity skip."""
    main = Sequential(f"{name}.main", conv_bn(f"{name}.conv1", channels, bottleneck, 1)
                      + conv_bn(f"{name}.conv2", bottleneck, bottleneck, 3)
                      + conv_bn(f"{name}.conv3", bottleneck, channels, 1, relu=False))
    return Residual(name, main, None)


def residual_conv_block(name, cin, bottleneck, cout, stride=2, projection=True) -> Residual:
    """Bottleneck block whose first 1x1 conv and skip projection carry ``stride``."""
    main = Sequential(f"{name}.main", conv_bn(f"{name}.conv1", cin, bottleneck, 1, stride)
                      + conv_bn(f"{name}.conv2", bottleneck, bottleneck, 3)
                      + conv_bn(f"{name}.conv3", bottleneck, cout, 1, relu=False))
    if projection:
        skip = Sequential(f"{name}.skip", conv_bn(f"{name}.proj", cin, cout, 1, stride, relu=False))
    else:
        if stride != 1 or cin != cout:
            raise ShapeError(f"{name}: identity skip needs stride 1 and cin == cout")
        skip = None
    return Residual(name, main, skip, downsample=stride)


# ---------------------------------------------------------------------------
# Encoder-2 vocabulary (depthwise-separable entry / middle / exit flows)


def entry_flow_stem(name, w1, w2, cin=3) -> Sequential:
    return Sequential(name, conv_bn(f"{name}.conv1", cin, w1, 3, 2) + conv_bn(f"{name}.conv2", w1, w2, 3))


def entry_flow_unit(name, cin, cout, widen_first=True) -> Residual:
    """Two separable convs and a 3x3 stride-2 max-pool; strided 1x1 projection skip.

    The width change happens in the first separable conv, or in the second
    when ``widen_first`` is False (the exit-flow arrangement).
    """
    mid = cout if widen_first else cin
    main = Sequential(f"{name}.main", sep_bn(f"{name}.sep1", cin, mid)
                      + sep_bn(f"{name}.sep2", mid, cout, relu=False) + [MaxPool(f"{name}.pool", 3, 2)])
    skip = Sequential(f"{name}.skip", conv_bn(f"{name}.proj", cin, cout, 1, 2, relu=False))
    return Residual(name, main, skip, downsample=2)


def middle_flow_unit(name, channels) -> Residual:
    """Three separable convs with an identity skip; shape preserving."""
    main = Sequential(f"{name}.main", sep_bn(f"{name}.sep1", channels, channels)
                      + sep_bn(f"{name}.sep2", channels, channels)
                      + sep_bn(f"{name}.sep3", channels, channels, relu=False))
    return Residual(name, main, None)


def exit_flow(name, cin, widths) -> Sequential:
    """Downsampling residual unit to ``widths[0]``, then two widening separable convs."""
    w0, w1, w2 = widths
    unit = entry_flow_unit(f"{name}.unit", cin, w0, widen_first=False)
    return Sequential(name, [unit] + sep_bn(f"{name}.sep3", w0, w1) + sep_bn(f"{name}.sep4", w1, w2))


# ---------------------------------------------------------------------------
# Prediction head


HEAD_WIDTHS = (256, 128, 64)


class FCLHead(Layer):
    """Global average pooling followed by four dense layers; returns raw logits."""

    def __init__(self, name, cin, num_classes, widths=HEAD_WIDTHS):
        super().__init__(name)
        if num_classes < 2:
            raise ValueError(f"{name}: need at least 2 classes, got {num_classes}")
        dims = (cin,) + tuple(widths)
        layers: list[Layer] = []
        for i in range(len(widths)):
            layers += [Dense(f"{name}.fc{i + 1}", dims[i], dims[i + 1]), ReLU()]
        # small logit layer: fresh heads start close to the uniform distribution
        layers.append(Dense(f"{name}.fc{len(widths) + 1}", dims[-1], num_classes, init_gain=0.1))
        self.mlp = Sequential(name, layers)
        self.cin, self.num_classes = cin, num_classes

    def init(self, store, rng):
        self.mlp.init(store, rng)

    def out_shape(self, shape):
        return self.mlp.out_shape((shape[0], shape[3]))

    def forward(self, store, x, train):
        pooled, xshape = ops.global_avg_pool_forward(x)
        logits, caches = self.mlp.forward(store, pooled, train)
        return logits, (xshape, caches)

    def backward(self, store, dy, cache):
        xshape, caches = cache
        return ops.global_avg_pool_backward(self.mlp.backward(store, dy, caches), xshape)


def head_parameter_count(cin: int, num_classes: int, widths=HEAD_WIDTHS) -> int:
    dims = (cin,) + tuple(widths) + (num_classes,)
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


# ---------------------------------------------------------------------------
# Encoders


@dataclass(frozen=True)
class BlockConfig:
    """Stage plan of one encoder: output widths and block repetitions per stage."""

    widths: tuple[int, ...]
    repetitions: tuple[int, ...]
    width_multiplier: Fraction = Fraction(1)

    def __post_init__(self):
        if len(self.widths) != len(self.repetitions):
            raise ValueError("widths and repetitions must have equal length")
        if any(r < 1 for r in self.repetitions):
            raise ValueError("repetitions must be >= 1")
        if Fraction(self.width_multiplier) <= 0:
            raise ValueError("width multiplier must be positive")

    def width(self, i: int) -> int:
        return scaled(self.widths[i], self.width_multiplier)


ENCODER1_PLAN = ((256, 512, 1024, 2048), (3, 4, 6, 3))
# entry-flow unit widths, middle-flow width and repetitions, exit-flow widths
ENCODER2_PLAN = ((128, 512, 1024), (1024, 8), (1024, 1536, 2048))


class Encoder(Layer):
    """Ordered stages, each producing a named tap."""

    def __init__(self, name, stages: list[tuple[str, Layer]]):
        super().__init__(name)
        self.stages = stages

    @property
    def tap_names(self) -> list[str]:
        return [t for t, _ in self.stages]

    def init(self, store, rng):
        for _, s in self.stages:
            s.init(store, rng)

    def tap_shapes(self, shape) -> dict[str, tuple]:
        out = {}
        for tap, s in self.stages:
            shape = s.out_shape(shape)
            out[tap] = shape
        return out

    def out_shape(self, shape):
        return list(self.tap_shapes(shape).values())[-1]

    def forward(self, store, x, train):
        taps, caches = {}, []
        for tap, s in self.stages:
            x, c = s.forward(store, x, train)
            taps[tap] = x
            caches.append(c)
        return taps, caches

    def backward(self, store, dtaps: dict, caches):
        """``dtaps`` maps tap names to cotangents; absent taps contribute nothing."""
        dy = None
        for (tap, s), c in zip(reversed(self.stages), reversed(caches)):
            g = dtaps.get(tap)
            if g is not None:
                dy = g if dy is None else dy + g
            if dy is not None:
                dy = s.backward(store, dy, c)
        return dy


def encoder1(name, width_multiplier, stem_width=64, plan=ENCODER1_PLAN) -> Encoder:
    cfg = BlockConfig(plan[0], plan[1], Fraction(width_multiplier))
    w = cfg.width_multiplier
    c = scaled(stem_width, w)
    stages: list[tuple[str, Layer]] = []
    for i, reps in enumerate(cfg.repetitions):
        cout = cfg.width(i)
        bott = max(1, cout // 4)
        stride = 1 if i == 0 else 2
        blocks: list[Layer] = []
        if i == 0:
            blocks.append(stem(f"{name}.stem", c))
        blocks.append(residual_conv_block(f"{name}.stage{i + 2}.block0", c, bott, cout, stride))
        blocks += [residual_identity_block(f"{name}.stage{i + 2}.block{r}", cout, bott) for r in range(1, reps)]
        stages.append((f"E1{i + 2}", Sequential(f"{name}.stage{i + 2}", blocks)))
        c = cout
    return Encoder(name, stages)


def encoder2(name, width_multiplier, plan=ENCODER2_PLAN) -> Encoder:
    w = Fraction(width_multiplier)
    entry, (mid_width, mid_reps), exit_widths = plan
    s1, s2 = scaled(32, w), scaled(64, w)
    e = [scaled(c, w) for c in entry]
    m = scaled(mid_width, w)
    ex = tuple(scaled(c, w) for c in exit_widths)
    if e[2] != m:
        raise ValueError("last entry-flow width must equal the middle-flow width")
    middle = [middle_flow_unit(f"{name}.middle.unit{r}", m) for r in range(mid_reps)]
    stages: list[tuple[str, Layer]] = [
        ("E21", entry_flow_stem(f"{name}.entry.stem", s1, s2)),
        ("E22", entry_flow_unit(f"{name}.entry.unit1", s2, e[0])),
        ("E23", entry_flow_unit(f"{name}.entry.unit2", e[0], e[1])),
        ("E24", Sequential(f"{name}.flow", [entry_flow_unit(f"{name}.entry.unit3", e[1], e[2])] + middle)),
        ("E25", exit_flow(f"{name}.exit", m, ex)),
    ]
    return Encoder(name, stages)
