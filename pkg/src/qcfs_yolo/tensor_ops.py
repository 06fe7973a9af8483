"""Dense NCHW tensor primitives with hand-written backward passes.

Tensors are plain :class:`numpy.ndarray` objects in NCHW layout.  Every
forward op is pure; the ``*_backward`` companions take the upstream gradient
and whatever the forward needed, and return gradients in the same layout.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "ConvSpec",
    "BatchNormSpec",
    "conv2d",
    "conv2d_reference",
    "conv2d_backward",
    "batch_norm_infer",
    "batch_norm_infer_backward",
    "batch_norm_train",
    "batch_norm_train_backward",
    "fold_batchnorm",
    "avg_pool2d",
    "avg_pool2d_backward",
    "max_pool2d",
    "max_pool2d_backward",
    "leaky_relu",
    "leaky_relu_backward",
    "upsample_nearest",
    "upsample_nearest_backward",
]


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""

    def __init__(self, message, *shapes):
        detail = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{message}: {detail}" if shapes else message)
        self.shapes = shapes


@dataclass
class ConvSpec:
    """Weights and geometry of a square-kernel 2D convolution."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.bias = np.asarray(self.bias)
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ShapeError("conv weights must be (out, in, k, k)", self.weights.shape)
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("bias length must equal out_channels", self.bias.shape, self.weights.shape)
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid stride={self.stride} / padding={self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


@dataclass
class BatchNormSpec:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = field(default=0.1)

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma)
        self.beta = np.asarray(self.beta)
        self.running_mean = np.asarray(self.running_mean)
        self.running_var = np.asarray(self.running_var)
        n = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != n:
                raise ShapeError(f"batch-norm {name} length differs from gamma", getattr(self, name).shape, n)
        if np.any(self.running_var < 0):
            raise ValueError("running_var entries must be >= 0")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, eps: float = 1e-5):
        return cls(
            np.ones(channels, dtype), np.zeros(channels, dtype),
            np.zeros(channels, dtype), np.ones(channels, dtype), eps,
        )


def _check_nchw(x, channels=None, what="input"):
    if x.ndim != 4:
        raise ShapeError(f"{what} must be 4-D NCHW", x.shape)
    if channels is not None and x.shape[1] != channels:
        raise ShapeError(f"{what} channel count mismatch", x.shape, (x.shape[0], channels, "H", "W"))


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


# --------------------------------------------------------------------------
# convolution


def _check_conv(x, spec):
    _check_nchw(x)
    if x.shape[1] != spec.in_channels:
        raise ShapeError("input channels differ from conv weights", x.shape, spec.weights.shape)
    if x.shape[2] + 2 * spec.padding < spec.kernel_size or x.shape[3] + 2 * spec.padding < spec.kernel_size:
        raise ShapeError("padded input smaller than kernel", x.shape, spec.weights.shape)


def conv2d_reference(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Direct convolution with 64-bit accumulation; the semantic reference."""
    _check_conv(x, spec)
    n, c, h, w = x.shape
    k, s = spec.kernel_size, spec.stride
    xp = _pad(x.astype(np.float64), spec.padding)
    wt = spec.weights.astype(np.float64)
    ho, wo = spec.output_hw(h, w)
    out = np.empty((n, spec.out_channels, ho, wo))
    for b in range(n):
        for o in range(spec.out_channels):
            for i in range(ho):
                for j in range(wo):
                    window = xp[b, :, i * s:i * s + k, j * s:j * s + k]
                    out[b, o, i, j] = np.sum(window * wt[o]) + spec.bias[o]
    return out.astype(np.result_type(x.dtype, spec.weights.dtype))


def _im2col(x, spec):
    """Patches as ``(N, C*k*k, Ho*Wo)`` so a batched matmul yields NCHW."""
    n, c, h, w = x.shape
    k, s = spec.kernel_size, spec.stride
    ho, wo = spec.output_hw(h, w)
    xp = _pad(x, spec.padding)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)
    return cols, ho, wo


def conv2d(x: np.ndarray, spec: ConvSpec, return_cols: bool = False):
    """im2col convolution; matches :func:`conv2d_reference` to float rounding."""
    _check_conv(x, spec)
    n, _, h, w = x.shape
    cols, ho, wo = _im2col(x, spec)
    wmat = spec.weights.reshape(spec.out_channels, -1).astype(cols.dtype, copy=False)
    out = np.matmul(wmat, cols)
    out += spec.bias.astype(cols.dtype, copy=False)[:, None]
    out = out.reshape(n, spec.out_channels, ho, wo)
    if return_cols:
        return out, cols
    return out


def conv2d_backward(grad_out, x, spec: ConvSpec, cols=None):
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    n, c, h, w = x.shape
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    ho, wo = spec.output_hw(h, w)
    if grad_out.shape != (n, spec.out_channels, ho, wo):
        raise ShapeError("conv grad_out shape mismatch", grad_out.shape, (n, spec.out_channels, ho, wo))
    if cols is None:
        cols, _, _ = _im2col(x, spec)
    g = grad_out.reshape(n, spec.out_channels, ho * wo)
    wmat = spec.weights.reshape(spec.out_channels, -1).astype(g.dtype, copy=False)
    # sum over the batch in a fixed order
    grad_w = np.zeros(wmat.shape, dtype=np.result_type(g.dtype, cols.dtype))
    for b in range(n):
        grad_w += g[b] @ cols[b].T
    grad_w = grad_w.reshape(spec.weights.shape)
    grad_b = g.sum(axis=(0, 2))
    dcols = np.matmul(wmat.T, g).reshape(n, c, k, k, ho, wo)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, :, i, j]
    if p:
        dxp = dxp[:, :, p:-p, p:-p]
    return np.ascontiguousarray(dxp), grad_w, grad_b


# --------------------------------------------------------------------------
# batch normalization


def _bn_shape(v):
    return v.reshape(1, -1, 1, 1)


def _check_bn(x, spec):
    if x.ndim < 2 or x.shape[1] != spec.channels:
        raise ShapeError("batch-norm channel mismatch", x.shape, spec.gamma.shape)


def batch_norm_infer(x: np.ndarray, spec: BatchNormSpec) -> np.ndarray:
    """``gamma * (x - mean) / sqrt(var + eps) + beta`` with running statistics."""
    _check_bn(x, spec)
    vecs = (spec.gamma, spec.beta, spec.running_mean, spec.running_var)
    if not all(np.all(np.isfinite(v)) for v in vecs) or not np.isfinite(spec.eps):
        raise ValueError("batch-norm spec contains non-finite values")
    shape = (1, -1) + (1,) * (x.ndim - 2)
    scale = spec.gamma / np.sqrt(spec.running_var.astype(np.float64) + spec.eps)
    shift = spec.beta - spec.running_mean * scale
    out = x * scale.astype(x.dtype).reshape(shape) + shift.astype(x.dtype).reshape(shape)
    return out


def batch_norm_infer_backward(grad_out, spec: BatchNormSpec):
    scale = spec.gamma / np.sqrt(spec.running_var.astype(np.float64) + spec.eps)
    return grad_out * _bn_shape(scale.astype(grad_out.dtype))


def batch_norm_train(x: np.ndarray, spec: BatchNormSpec, update_running: bool = True):
    """Normalize with batch statistics. Returns ``(out, cache)``.

    Running statistics are updated in place (unbiased variance) unless
    ``update_running`` is false.
    """
    _check_bn(x, spec)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.mean(axis=(0, 2, 3)).astype(np.float64)
    var = x.var(axis=(0, 2, 3)).astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + spec.eps)
    xhat = (x - _bn_shape(mean).astype(x.dtype)) * _bn_shape(inv_std).astype(x.dtype)
    out = xhat * _bn_shape(spec.gamma).astype(x.dtype) + _bn_shape(spec.beta).astype(x.dtype)
    if update_running:
        mom = spec.momentum
        unbiased = var * m / max(m - 1, 1)
        spec.running_mean[...] = (1 - mom) * spec.running_mean + mom * mean
        spec.running_var[...] = (1 - mom) * spec.running_var + mom * unbiased
    return out, (xhat, inv_std.astype(x.dtype))


def batch_norm_train_backward(grad_out, spec: BatchNormSpec, cache):
    """Return ``(grad_input, grad_gamma, grad_beta)`` for batch-statistics BN."""
    xhat, inv_std = cache
    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    dxhat = grad_out * _bn_shape(spec.gamma).astype(grad_out.dtype)
    dx = (_bn_shape(inv_std) / m) * (
        m * dxhat
        - _bn_shape(dxhat.sum(axis=(0, 2, 3)))
        - xhat * _bn_shape((dxhat * xhat).sum(axis=(0, 2, 3)))
    )
    return dx, grad_gamma, grad_beta


def fold_batchnorm(conv: ConvSpec, bn: BatchNormSpec) -> ConvSpec:
    """Merge an inference-mode BN that follows ``conv`` into its weights."""
    if bn.channels != conv.out_channels:
        raise ShapeError("cannot fold BN into conv", bn.gamma.shape, conv.weights.shape)
    dtype = conv.weights.dtype
    scale = bn.gamma.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    w = conv.weights.astype(np.float64) * scale.reshape(-1, 1, 1, 1)
    b = (conv.bias.astype(np.float64) - bn.running_mean) * scale + bn.beta
    return ConvSpec(w.astype(dtype), b.astype(dtype), conv.stride, conv.padding)


# --------------------------------------------------------------------------
# pooling


def _check_pool(x, k, s):
    if k < 1 or s < 1:
        raise ValueError(f"pool kernel and stride must be positive, got k={k}, s={s}")
    _check_nchw(x)
    if x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"spatial dims smaller than pool kernel {k}", x.shape)


def _windows(x, k, s):
    ho = (x.shape[2] - k) // s + 1
    wo = (x.shape[3] - k) // s + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
    return win, ho, wo


def avg_pool2d(x: np.ndarray, k: int, s: int) -> np.ndarray:
    _check_pool(x, k, s)
    win, _, _ = _windows(x, k, s)
    return win.mean(axis=(4, 5), dtype=np.float64).astype(x.dtype)


def avg_pool2d_backward(grad_out, input_shape, k: int, s: int):
    ho, wo = grad_out.shape[2:]
    dx = np.zeros(input_shape, dtype=grad_out.dtype)
    g = grad_out / (k * k)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += g
    return dx


def max_pool2d(x: np.ndarray, k: int, s: int) -> np.ndarray:
    _check_pool(x, k, s)
    win, _, _ = _windows(x, k, s)
    return win.max(axis=(4, 5))


def max_pool2d_backward(grad_out, x, k: int, s: int):
    """Route each gradient to the first maximal element of its window."""
    win, ho, wo = _windows(x, k, s)
    arg = win.reshape(win.shape[:4] + (k * k,)).argmax(axis=-1)
    dx = np.zeros_like(x, dtype=grad_out.dtype)
    for idx in range(k * k):
        i, j = divmod(idx, k)
        dx[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += grad_out * (arg == idx)
    return dx


# --------------------------------------------------------------------------
# elementwise / resampling


def leaky_relu(x: np.ndarray, slope: float = 0.1) -> np.ndarray:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must lie in [0, 1), got {slope}")
    x = np.asarray(x)
    return np.where(x >= 0, x, x * slope)


def leaky_relu_backward(grad_out, x, slope: float = 0.1):
    return np.where(x >= 0, grad_out, grad_out * slope)


def upsample_nearest(x: np.ndarray, factor: int = 2) -> np.ndarray:
    _check_nchw(x)
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample_nearest_backward(grad_out, factor: int = 2):
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))
