"""Differentiable operators on NHWC numpy arrays.

Every operator comes as a ``*_forward`` / ``*_backward`` pair. The forward
returns ``(output, cache)``; the backward takes the upstream cotangent and the
cache and returns cotangents for each differentiable input, in argument order.
Blocks compose these pairs by hand; there is no tape.

Tensors are plain ``numpy.ndarray`` objects laid out as B x H x W x C (vectors
as B x C). Operators compute in the dtype of their input, so the same code path
serves float32 training and float64 gradient checks.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "ConvSpec",
    "same_padding",
    "conv_output_extent",
    "check_finite_enabled",
    "conv2d_forward",
    "conv2d_backward",
    "conv2d",
    "depthwise_conv2d_forward",
    "depthwise_conv2d_backward",
    "depthwise_separable_conv_forward",
    "depthwise_separable_conv_backward",
    "depthwise_separable_conv",
    "maxpool2d_forward",
    "maxpool2d_backward",
    "maxpool2d",
    "global_avg_pool_forward",
    "global_avg_pool_backward",
    "global_avg_pool",
    "batch_norm_forward",
    "batch_norm_backward",
    "dense_forward",
    "dense_backward",
    "dense",
    "relu_forward",
    "relu_backward",
    "softmax",
    "softmax_cross_entropy",
    "softmax_cross_entropy_backward",
    "concat_channels",
    "split_channels",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised in checking mode when an operator produces NaN or Inf."""


_CHECK_FINITE = os.environ.get("CVRNET_CHECK_FINITE", "") == "1"


def check_finite_enabled(flag: bool | None = None) -> bool:
    """Query, or set when ``flag`` is given, the NaN/Inf assertion mode."""
    global _CHECK_FINITE
    if flag is not None:
        _CHECK_FINITE = bool(flag)
    return _CHECK_FINITE


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite values in output of shape {arr.shape}")
    return arr


def _require_rank(x: np.ndarray, rank: int, what: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{what}: expected rank {rank}, got shape {x.shape}")
    if any(d < 1 for d in x.shape):
        raise ShapeError(f"{what}: zero-sized extent in shape {x.shape}")


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: str = "same"
    groups: int = 1

    def __post_init__(self) -> None:
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError(f"kernel extents must be positive, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.groups < 1:
            raise ValueError(f"groups must be positive, got {self.groups}")


def conv_output_extent(extent: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        out = math.ceil(extent / stride)
    else:
        out = (extent - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"zero-sized output: extent {extent}, kernel {kernel}, stride {stride}, padding {padding}"
        )
    return out


def same_padding(extent: int, kernel: int, stride: int) -> tuple[int, int]:
    """(before, after) zero padding; the odd pixel goes after (bottom/right)."""
    out = math.ceil(extent / stride)
    total = max((out - 1) * stride + kernel - extent, 0)
    return total // 2, total - total // 2


def _pads(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    ho = conv_output_extent(h, kh, stride, padding)
    wo = conv_output_extent(w, kw, stride, padding)
    if padding == "same":
        ph, pw = same_padding(h, kh, stride), same_padding(w, kw, stride)
    else:
        ph, pw = (0, 0), (0, 0)
    return ho, wo, ph, pw


def _pad(x: np.ndarray, ph, pw, value=0.0) -> np.ndarray:
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), ph, pw, (0, 0)), constant_values=value)


def _unpad(xp: np.ndarray, ph, pw, h: int, w: int) -> np.ndarray:
    return xp[:, ph[0] : ph[0] + h, pw[0] : pw[0] + w, :]


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """View of shape B x Ho x Wo x C x kh x kw over the padded input."""
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


# ---------------------------------------------------------------------------
# Standard convolution


def conv2d_forward(x, weights, bias, spec: ConvSpec):
    """Cross-correlation of ``x`` (B,H,W,Cin) with ``weights`` (kh,kw,Cin,Cout).

    ``bias`` may be None. Returns ``(y, cache)``.
    """
    _require_rank(x, 4, "conv2d input")
    _require_rank(weights, 4, "conv2d weights")
    if spec.groups != 1:
        raise ShapeError(f"conv2d requires groups == 1, got {spec.groups}")
    kh, kw, cin, cout = weights.shape
    if (kh, kw) != (spec.kernel_h, spec.kernel_w):
        raise ShapeError(f"conv2d: weights kernel {kh}x{kw} != spec {spec.kernel_h}x{spec.kernel_w}")
    b, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels but weights expect {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho, wo, ph, pw = _pads(h, w, kh, kw, spec.stride, spec.padding)
    s = spec.stride

    if kh == 1 and kw == 1:
        xs = x[:, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s, :] if s > 1 else x
        cols = np.ascontiguousarray(xs).reshape(b * ho * wo, cin)
    else:
        xp = _pad(x, ph, pw)
        win = _windows(xp, kh, kw, s, ho, wo)  # B,Ho,Wo,C,kh,kw
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * ho * wo, kh * kw * cin)
    y = cols @ weights.reshape(kh * kw * cin, cout)
    if bias is not None:
        y += bias
    y = y.reshape(b, ho, wo, cout)
    cache = (cols, weights, x.shape, spec, ph, pw, bias is not None)
    return _finite(y, "conv2d"), cache


def conv2d_backward(dy, cache):
    """Returns ``(dx, dweights, dbias)``; ``dbias`` is None when no bias was used."""
    cols, weights, xshape, spec, ph, pw, has_bias = cache
    kh, kw, cin, cout = weights.shape
    b, h, w, _ = xshape
    _, ho, wo, _ = dy.shape
    s = spec.stride
    dy2 = dy.reshape(b * ho * wo, cout)
    dweights = (cols.T @ dy2).reshape(weights.shape)
    dbias = dy2.sum(axis=0) if has_bias else None
    dcols = dy2 @ weights.reshape(kh * kw * cin, cout).T

    if kh == 1 and kw == 1:
        dcols = dcols.reshape(b, ho, wo, cin)
        if s == 1:
            dx = dcols
        else:
            dx = np.zeros(xshape, dtype=dy.dtype)
            dx[:, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s, :] = dcols
        return dx, dweights, dbias

    dcols = dcols.reshape(b, ho, wo, kh, kw, cin)
    dxp = np.zeros((b, h + ph[0] + ph[1], w + pw[0] + pw[1], cin), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s, :] += dcols[:, :, :, i, j, :]
    return _unpad(dxp, ph, pw, h, w), dweights, dbias


def conv2d(x, weights, bias, spec: ConvSpec):
    return conv2d_forward(x, weights, bias, spec)[0]


# ---------------------------------------------------------------------------
# Depthwise and depthwise-separable convolution


def depthwise_conv2d_forward(x, weights, bias, spec: ConvSpec):
    """Per-channel convolution; ``weights`` is (kh,kw,C,1)."""
    _require_rank(x, 4, "depthwise input")
    _require_rank(weights, 4, "depthwise weights")
    kh, kw, c, mult = weights.shape
    if mult != 1:
        raise ShapeError(f"depthwise weights must have depth multiplier 1, got {mult}")
    if x.shape[3] != c:
        raise ShapeError(f"depthwise: input has {x.shape[3]} channels but weights expect {c}")
    if spec.groups != c:
        raise ShapeError(f"depthwise stage requires groups == {c}, got {spec.groups}")
    if bias is not None and bias.shape != (c,):
        raise ShapeError(f"depthwise: bias shape {bias.shape} != ({c},)")
    b, h, w, _ = x.shape
    ho, wo, ph, pw = _pads(h, w, kh, kw, spec.stride, spec.padding)
    s = spec.stride
    xp = _pad(x, ph, pw)
    k = weights[:, :, :, 0]
    y = np.zeros((b, ho, wo, c), dtype=np.result_type(x, weights))
    for i in range(kh):
        for j in range(kw):
            y += xp[:, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s, :] * k[i, j]
    if bias is not None:
        y += bias
    return _finite(y, "depthwise_conv2d"), (xp, weights, x.shape, spec, ph, pw, bias is not None)


def depthwise_conv2d_backward(dy, cache):
    xp, weights, xshape, spec, ph, pw, has_bias = cache
    kh, kw, c, _ = weights.shape
    b, h, w, _ = xshape
    _, ho, wo, _ = dy.shape
    s = spec.stride
    k = weights[:, :, :, 0]
    dk = np.empty((kh, kw, c), dtype=dy.dtype)
    dxp = np.zeros(xp.shape, dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(i, i + (ho - 1) * s + 1, s), slice(j, j + (wo - 1) * s + 1, s))
            dk[i, j] = (xp[sl] * dy).sum(axis=(0, 1, 2))
            dxp[sl] += dy * k[i, j]
    dbias = dy.sum(axis=(0, 1, 2)) if has_bias else None
    return _unpad(dxp, ph, pw, h, w), dk[..., None], dbias


def depthwise_separable_conv_forward(x, dw_weights, pw_weights, dw_bias, pw_bias, spec: ConvSpec):
    """Depthwise (kh,kw,C,1) stage followed by a pointwise (1,1,C,Cout) stage."""
    c = x.shape[-1]
    dspec = ConvSpec(spec.kernel_h, spec.kernel_w, spec.stride, spec.padding, groups=c)
    mid, dcache = depthwise_conv2d_forward(x, dw_weights, dw_bias, dspec)
    if pw_weights.shape[:2] != (1, 1):
        raise ShapeError(f"pointwise weights must be 1x1, got {pw_weights.shape}")
    y, pcache = conv2d_forward(mid, pw_weights, pw_bias, ConvSpec(1, 1))
    return y, (dcache, pcache)


def depthwise_separable_conv_backward(dy, cache):
    """Returns ``(dx, d_dw_weights, d_pw_weights, d_dw_bias, d_pw_bias)``."""
    dcache, pcache = cache
    dmid, dpw, dpb = conv2d_backward(dy, pcache)
    dx, ddw, ddb = depthwise_conv2d_backward(dmid, dcache)
    return dx, ddw, dpw, ddb, dpb


def depthwise_separable_conv(x, dw_weights, pw_weights, dw_bias, pw_bias, spec: ConvSpec):
    return depthwise_separable_conv_forward(x, dw_weights, pw_weights, dw_bias, pw_bias, spec)[0]


# ---------------------------------------------------------------------------
# Pooling


def maxpool2d_forward(x, pool_h: int, pool_w: int, stride: int, padding: str = "same"):
    """Windowed maximum. Padding cells never win: they are filled with -inf."""
    _require_rank(x, 4, "maxpool input")
    if pool_h < 1 or pool_w < 1 or stride < 1:
        raise ValueError(f"invalid pool window {pool_h}x{pool_w} / stride {stride}")
    b, h, w, c = x.shape
    ho, wo, ph, pw = _pads(h, w, pool_h, pool_w, stride, padding)
    if max(ph) >= pool_h or max(pw) >= pool_w:
        raise ValueError("pool window smaller than its padding")
    xp = _pad(x, ph, pw, value=-np.inf)
    win = _windows(xp, pool_h, pool_w, stride, ho, wo).reshape(b, ho, wo, c, pool_h * pool_w)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return _finite(y, "maxpool2d"), (arg, x.shape, xp.shape, pool_h, pool_w, stride, ph, pw)


def maxpool2d_backward(dy, cache):
    """Routes each cotangent to the first arg-max position of its window."""
    arg, xshape, xpshape, kh, kw, s, ph, pw = cache
    _, ho, wo, _ = dy.shape
    dxp = np.zeros(xpshape, dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            hit = arg == i * kw + j
            if hit.any():
                dxp[:, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s, :] += np.where(hit, dy, 0)
    return _unpad(dxp, ph, pw, xshape[1], xshape[2])


def maxpool2d(x, pool_h: int, pool_w: int, stride: int, padding: str = "same"):
    return maxpool2d_forward(x, pool_h, pool_w, stride, padding)[0]


def global_avg_pool_forward(x):
    _require_rank(x, 4, "global_avg_pool input")
    return x.mean(axis=(1, 2)), x.shape


def global_avg_pool_backward(dy, xshape):
    b, h, w, c = xshape
    return np.broadcast_to((dy / (h * w))[:, None, None, :], xshape).copy()


def global_avg_pool(x):
    return global_avg_pool_forward(x)[0]


# ---------------------------------------------------------------------------
# Batch normalization


def batch_norm_forward(x, gamma, beta, running_mean, running_var, train: bool,
                       momentum: float = 0.99, epsilon: float = 1e-3):
    """Per-channel normalization over every axis but the last.

    In train mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``
    (the running variance takes the unbiased batch estimate).
    """
    if epsilon <= 0:
        raise ValueError(f"batch_norm epsilon must be positive, got {epsilon}")
    c = x.shape[-1]
    for name, p in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if p.shape != (c,):
            raise ShapeError(f"batch_norm: {name} shape {p.shape} != ({c},)")
    axes = tuple(range(x.ndim - 1))
    if train:
        n = x.size // c
        mean = x.mean(axis=axes)
        xc = x - mean
        var = (xc * xc).mean(axis=axes)
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * unbiased
    else:
        xc = x - running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * inv_std
    y = gamma * xhat + beta
    return _finite(y.astype(x.dtype, copy=False), "batch_norm"), (xhat, inv_std, gamma, train)


def batch_norm_backward(dy, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, train = cache
    axes = tuple(range(dy.ndim - 1))
    dbeta = dy.sum(axis=axes)
    dgamma = (dy * xhat).sum(axis=axes)
    if not train:
        return dy * (gamma * inv_std), dgamma, dbeta
    n = dy.size // dy.shape[-1]
    dx = (gamma * inv_std / n) * (n * dy - dbeta - xhat * dgamma)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Dense, activations, loss


def dense_forward(x, weights, bias):
    _require_rank(x, 2, "dense input")
    if weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weights.shape[1]},)")
    return _finite(x @ weights + bias, "dense"), (x, weights)


def dense_backward(dy, cache):
    x, weights = cache
    return dy @ weights.T, x.T @ dy, dy.sum(axis=0)


def dense(x, weights, bias):
    return dense_forward(x, weights, bias)[0]


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(dy, mask):
    return np.where(mask, dy, 0).astype(dy.dtype, copy=False)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(labels, logits):
    if logits.ndim != 2:
        raise ShapeError(f"logits must be B x K, got {logits.shape}")
    if logits.shape[1] < 2:
        raise ValueError(f"need at least 2 classes, got K={logits.shape[1]}")
    if labels.shape != logits.shape:
        raise ShapeError(f"labels shape {labels.shape} != logits shape {logits.shape}")
    if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
        raise ValueError("every label row must be one-hot")


def softmax_cross_entropy(logits, labels, class_weights=None):
    """Class-weighted cross-entropy averaged over the batch.

    ``loss = mean_i w[y_i] * -log p[i, y_i]``. Returns ``(loss, probs)``.
    """
    _check_labels(labels, logits)
    k = logits.shape[1]
    if class_weights is None:
        class_weights = np.ones(k, dtype=logits.dtype)
    class_weights = np.asarray(class_weights)
    if class_weights.shape != (k,):
        raise ShapeError(f"class weight vector has length {class_weights.size}, expected {k}")
    if np.any(class_weights <= 0):
        raise ValueError("class weights must be positive")
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    w = labels @ class_weights
    loss = float(np.mean(w * -(labels * log_probs).sum(axis=1)))
    return loss, np.exp(log_probs)


def softmax_cross_entropy_backward(probs, labels, class_weights=None):
    """Cotangent of the batch-mean weighted loss w.r.t. the logits."""
    b, k = probs.shape
    if class_weights is None:
        w = np.ones(b, dtype=probs.dtype)
    else:
        w = labels @ np.asarray(class_weights, dtype=probs.dtype)
    return (w[:, None] * (probs - labels) / b).astype(probs.dtype, copy=False)


def concat_channels(a, b):
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_channels: leading dims differ, {a.shape} vs {b.shape}")
    if a.shape[-1] < 1 or b.shape[-1] < 1:
        raise ShapeError("concat_channels: zero-channel operand")
    return np.concatenate([a, b], axis=-1)


def split_channels(x, first: int):
    """Inverse of :func:`concat_channels`; also its backward."""
    if not 0 < first < x.shape[-1]:
        raise ShapeError(f"split point {first} outside (0, {x.shape[-1]})")
    return x[..., :first], x[..., first:]
