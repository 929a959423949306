"""On-demand verification suites: tap-shape conformance and finite-difference gradient checks.

Each gradient case builds small float64 inputs from a seed, projects the
output onto a fixed random direction ``r`` so the scalar ``sum(y * r)`` has
gradient ``backward(r)``, and compares that against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from . import blocks, ops
from .gradcheck import GradCheckResult, check_gradients
from .model import ModelConfig, build
from .params import ParamStore

LINEAR_TOL = 1e-5
NONLINEAR_TOL = 1e-4
MODEL_TOL = 1e-3

# Tap (and concatenated head input) shapes of the full-width model at 224 x 224.
REFERENCE_SHAPES = {
    "E13": (28, 28, 512),
    "E14": (14, 14, 1024),
    "E15": (7, 7, 2048),
    "E23": (28, 28, 512),
    "E24": (14, 14, 1024),
    "E25": (7, 7, 2048),
    "P3": (7, 7, 4096),
}


@dataclass
class CheckOutcome:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# Shapes


def run_shapes_suite() -> list[CheckOutcome]:
    t0 = time.perf_counter()
    model = build(ModelConfig(224, 224, 2, Fraction(1)), init_seed=0)
    taps = model.tap_shapes(1)
    heads = model.head_input_shapes(1)
    got = {name: taps[name][1:] for name in taps}
    got["P3"] = heads["P3"][1:]
    dt = time.perf_counter() - t0
    out = []
    for name, want in REFERENCE_SHAPES.items():
        have = got[name]
        out.append(CheckOutcome(f"shape {name}", have == want, f"{have} (expected {want})", dt))
    return out


# ---------------------------------------------------------------------------
# Gradient cases


@dataclass
class GradCase:
    name: str
    linear: bool
    run: Callable[[int], list[GradCheckResult]]
    tol_override: float | None = None

    @property
    def tol(self) -> float:
        if self.tol_override is not None:
            return self.tol_override
        return LINEAR_TOL if self.linear else NONLINEAR_TOL


def _rng(seed):
    return np.random.default_rng([seed, 7919])


def _op_case(fwd, bwd, make_inputs, samples=8):
    """Generic operator case: ``fwd(**arrays)`` -> (y, cache); ``bwd(dy, cache)`` -> grads in key order."""

    def run(seed):
        rng = _rng(seed)
        arrays = make_inputs(rng)
        y, cache = fwd(**arrays)
        r = rng.standard_normal(y.shape)
        grads = bwd(r, cache)
        if not isinstance(grads, tuple):
            grads = (grads,)
        analytic = {k: g for k, g in zip(arrays, grads) if g is not None}
        checked = {k: arrays[k] for k in analytic}

        def f():
            return float(np.sum(fwd(**arrays)[0] * r))

        return check_gradients(f, checked, analytic, samples=samples, rng=rng)

    return run


def _conv_inputs(rng, kernel=3, cin=3, cout=4, bias=True):
    d = {"x": rng.standard_normal((2, 7, 6, cin)), "weights": rng.standard_normal((kernel, kernel, cin, cout))}
    d["bias"] = rng.standard_normal(cout) if bias else None
    return d


def _conv_case(kernel, stride, padding):
    spec = ops.ConvSpec(kernel, kernel, stride, padding)

    def fwd(x, weights, bias):
        return ops.conv2d_forward(x, weights, bias, spec)

    return _op_case(fwd, ops.conv2d_backward, lambda rng: _conv_inputs(rng, kernel))


def _depthwise_case(stride):
    spec = ops.ConvSpec(3, 3, stride, "same", groups=4)

    def fwd(x, weights, bias):
        return ops.depthwise_conv2d_forward(x, weights, bias, spec)

    def inputs(rng):
        return {"x": rng.standard_normal((2, 6, 7, 4)), "weights": rng.standard_normal((3, 3, 4, 1)),
                "bias": rng.standard_normal(4)}

    return _op_case(fwd, ops.depthwise_conv2d_backward, inputs)


def _separable_case():
    spec = ops.ConvSpec(3, 3, 1, "same", groups=3)

    def fwd(x, dw_weights, pw_weights, dw_bias, pw_bias):
        return ops.depthwise_separable_conv_forward(x, dw_weights, pw_weights, dw_bias, pw_bias, spec)

    def inputs(rng):
        return {"x": rng.standard_normal((2, 5, 5, 3)), "dw_weights": rng.standard_normal((3, 3, 3, 1)),
                "pw_weights": rng.standard_normal((1, 1, 3, 5)), "dw_bias": rng.standard_normal(3),
                "pw_bias": rng.standard_normal(5)}

    return _op_case(fwd, ops.depthwise_separable_conv_backward, inputs)


def _maxpool_case(stride):
    def fwd(x):
        return ops.maxpool2d_forward(x, 3, 3, stride)

    # distinct values keep the arg-max away from ties
    def inputs(rng):
        n = 2 * 7 * 6 * 3
        return {"x": (rng.permutation(n).reshape(2, 7, 6, 3) + rng.uniform(0.1, 0.4, (2, 7, 6, 3))) / 10.0}

    return _op_case(fwd, ops.maxpool2d_backward, inputs)


def _gap_case():
    def fwd(x):
        return ops.global_avg_pool_forward(x)

    return _op_case(fwd, ops.global_avg_pool_backward, lambda rng: {"x": rng.standard_normal((3, 4, 5, 6))})


def _bn_case(train):
    def run(seed):
        rng = _rng(seed)
        x = rng.standard_normal((4, 3, 3, 5)) * 2.0 + 0.5
        gamma = rng.uniform(0.5, 1.5, 5)
        beta = rng.standard_normal(5)
        rm, rv = rng.standard_normal(5), rng.uniform(0.5, 2.0, 5)

        def fwd():
            return ops.batch_norm_forward(x, gamma, beta, rm.copy(), rv.copy(), train)

        y, cache = fwd()
        r = rng.standard_normal(y.shape)
        dx, dg, db = ops.batch_norm_backward(r, cache)
        return check_gradients(lambda: float(np.sum(fwd()[0] * r)), {"x": x, "gamma": gamma, "beta": beta},
                               {"x": dx, "gamma": dg, "beta": db}, samples=10, rng=rng)

    return run


def _dense_case():
    return _op_case(ops.dense_forward, ops.dense_backward,
                    lambda rng: {"x": rng.standard_normal((4, 6)), "weights": rng.standard_normal((6, 3)),
                                 "bias": rng.standard_normal(3)})


def _relu_case():
    def fwd(x):
        return ops.relu_forward(x)

    def inputs(rng):
        x = rng.standard_normal((3, 4, 4, 2))
        return {"x": np.where(np.abs(x) < 1e-3, 0.5, x)}

    return _op_case(fwd, ops.relu_backward, inputs, samples=12)


def _softmax_ce_case(weighted):
    def run(seed):
        rng = _rng(seed)
        k = 2 + seed % 3
        z = rng.standard_normal((5, k)) * 2.0
        labels = np.eye(k)[rng.integers(0, k, 5)]
        cw = rng.uniform(0.2, 3.0, k) if weighted else None
        _, p = ops.softmax_cross_entropy(z, labels, cw)
        dz = ops.softmax_cross_entropy_backward(p, labels, cw)
        return check_gradients(lambda: ops.softmax_cross_entropy(z, labels, cw)[0], {"logits": z}, {"logits": dz},
                               rng=rng)

    return run


def _concat_case():
    def run(seed):
        rng = _rng(seed)
        a, b = rng.standard_normal((2, 3, 3, 2)), rng.standard_normal((2, 3, 3, 4))
        r = rng.standard_normal((2, 3, 3, 6))
        da, db = ops.split_channels(r, 2)
        return check_gradients(lambda: float(np.sum(ops.concat_channels(a, b) * r)), {"a": a, "b": b},
                               {"a": da, "b": db}, samples=8, rng=rng)

    return run


OP_CASES = [
    GradCase("conv2d 3x3 s1 same", True, _conv_case(3, 1, "same")),
    GradCase("conv2d 3x3 s2 same", True, _conv_case(3, 2, "same")),
    GradCase("conv2d 1x1 s2 same", True, _conv_case(1, 2, "same")),
    GradCase("conv2d 3x3 s1 valid", True, _conv_case(3, 1, "valid")),
    GradCase("depthwise 3x3 s1", True, _depthwise_case(1)),
    GradCase("depthwise 3x3 s2", True, _depthwise_case(2)),
    GradCase("separable conv", True, _separable_case()),
    GradCase("dense", True, _dense_case()),
    GradCase("global avg pool", True, _gap_case()),
    GradCase("concat channels", True, _concat_case()),
    GradCase("maxpool 3x3 s2", False, _maxpool_case(2)),
    GradCase("maxpool 3x3 s1", False, _maxpool_case(1)),
    GradCase("relu", False, _relu_case()),
    GradCase("batch norm train", False, _bn_case(True)),
    GradCase("batch norm infer", True, _bn_case(False)),
    GradCase("softmax cross-entropy", False, _softmax_ce_case(False)),
    GradCase("weighted softmax cross-entropy", False, _softmax_ce_case(True)),
]


def _layer_case(make_layer, in_shape, samples=6):
    """A layer's input and parameter gradients, in train mode, on a float64 store."""

    def run(seed):
        rng = _rng(seed)
        layer = make_layer()
        store = ParamStore(np.float64)
        layer.init(store, np.random.default_rng(seed))
        # perturb BN affine terms so they are not trivially 1 / 0
        for name, value in store.items():
            if name.endswith(".gamma"):
                value[...] = rng.uniform(0.5, 1.5, value.shape)
            elif name.endswith(".beta"):
                value[...] = rng.standard_normal(value.shape) * 0.3
        x = rng.standard_normal(in_shape)
        y, cache = layer.forward(store, x, True)
        r = rng.standard_normal(y.shape)
        store.zero_grad()
        dx = layer.backward(store, r, cache)
        arrays = {"input": x}
        analytic = {"input": dx}
        for name, value in store.trainable():
            arrays[name] = value
            analytic[name] = store.grad(name)

        def f():
            return float(np.sum(layer.forward(store, x, True)[0] * r))

        return check_gradients(f, arrays, analytic, samples=samples, rng=rng)

    return run


BLOCK_CASES = [
    GradCase("conv-bn-relu", False, _layer_case(lambda: blocks.Sequential("cbr", blocks.conv_bn("cbr", 4, 6, 3)),
                                                 (2, 8, 8, 4))),
    GradCase("stem", False, _layer_case(lambda: blocks.stem("stem", 4, cin=3), (2, 16, 16, 3), samples=4)),
    GradCase("residual identity block", False,
             _layer_case(lambda: blocks.residual_identity_block("rid", 8, 2), (1, 8, 8, 8), samples=4)),
    GradCase("residual conv block s2", False,
             _layer_case(lambda: blocks.residual_conv_block("rcb", 4, 2, 8, stride=2), (1, 8, 8, 4), samples=4)),
    GradCase("residual conv block s1", False,
             _layer_case(lambda: blocks.residual_conv_block("rc1", 4, 2, 8, stride=1), (1, 8, 8, 4), samples=4)),
    GradCase("separable conv-bn", False,
             _layer_case(lambda: blocks.Sequential("sb", blocks.sep_bn("sb", 4, 6)), (2, 6, 6, 4))),
    GradCase("entry flow stem", False,
             _layer_case(lambda: blocks.entry_flow_stem("efs", 4, 6, cin=3), (2, 8, 8, 3), samples=4)),
    GradCase("entry flow unit", False,
             _layer_case(lambda: blocks.entry_flow_unit("efu", 4, 6), (1, 8, 8, 4), samples=4)),
    GradCase("middle flow unit", False,
             _layer_case(lambda: blocks.middle_flow_unit("mfu", 4), (1, 8, 8, 4), samples=4)),
    GradCase("exit flow", False,
             _layer_case(lambda: blocks.exit_flow("exf", 4, (6, 8, 10)), (1, 8, 8, 4), samples=4)),
    GradCase("FCL head", False, _layer_case(lambda: blocks.FCLHead("head", 6, 3), (4, 2, 2, 6), samples=4)),
]


def model_gradcheck(seed: int = 0, samples: int = 3, params_per_seed: int = 12) -> list[GradCheckResult]:
    """End-to-end loss gradient of a tiny float64 model (sampled parameters)."""
    cfg = ModelConfig(32, 32, 2, Fraction(1, 16), "float64")
    model = build(cfg, init_seed=seed)
    rng = _rng(seed)
    x = rng.standard_normal((2, 32, 32, 3))
    labels = np.eye(2)[[0, 1]]
    cw = np.array([0.7, 1.6])
    model.loss_and_grads(x, labels, cw, train=True)
    names = [n for n, _ in model.params.trainable()]
    pick = [names[i] for i in sorted(rng.choice(len(names), size=min(params_per_seed, len(names)), replace=False))]
    arrays = {n: model.params[n] for n in pick}
    analytic = {n: model.params.grad(n).copy() for n in pick}

    def f():
        return model.loss(model.forward(x, train=True), labels, cw)

    return check_gradients(f, arrays, analytic, samples=samples, rng=rng)


MODEL_CASE = GradCase("end-to-end model", False, model_gradcheck, MODEL_TOL)


def run_case(case: GradCase, seeds) -> CheckOutcome:
    t0 = time.perf_counter()
    worst, worst_name, worst_seed = 0.0, "", None
    for s in seeds:
        for res in case.run(s):
            if res.max_rel_error >= worst:
                worst, worst_name, worst_seed = res.max_rel_error, res.name, s
    ok = worst < case.tol
    detail = f"max rel err {worst:.2e} (tol {case.tol:.0e}) at {worst_name}, seed {worst_seed}"
    return CheckOutcome(f"grad {case.name}", ok, detail, time.perf_counter() - t0)


def run_gradcheck_suite(n_seeds: int = 20, include_model: bool = True) -> list[CheckOutcome]:
    seeds = range(n_seeds)
    out = [run_case(c, seeds) for c in OP_CASES + BLOCK_CASES]
    if include_model:
        out.append(run_case(MODEL_CASE, range(2)))
    return out


def format_table(outcomes: list[CheckOutcome]) -> str:
    width = max(len(o.name) for o in outcomes)
    lines = [f"{'check':<{width}}  result  detail"]
    for o in outcomes:
        lines.append(f"{o.name:<{width}}  {'PASS' if o.ok else 'FAIL':<6}  {o.detail}")
    return "\n".join(lines)
