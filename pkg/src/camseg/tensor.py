"""Dense layer primitives with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects. Spatial layers accept either a
single ``(C, H, W)`` map or a batch ``(N, C, H, W)``; the batch axis is added
and stripped transparently.
"""
from __future__ import annotations

import os
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray

PRECISIONS = {"single": np.float32, "double": np.float64}


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


def precision_dtype(mode: str | None = None) -> np.dtype:
    """Return the float dtype for ``mode`` (defaults to ``$CAMSEG_PRECISION`` or single)."""
    if mode is None:
        mode = os.environ.get("CAMSEG_PRECISION", "single")
    try:
        return np.dtype(PRECISIONS[mode])
    except KeyError:
        raise ValueError(f"unknown precision mode {mode!r}; expected one of {sorted(PRECISIONS)}") from None


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> Tensor:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a (C,H,W) or (N,C,H,W) array, got shape {x.shape}")


# -- convolution -------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pad(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _check_conv(x: Tensor, kernels: Tensor, bias: Tensor | None, stride: int, padding: int) -> None:
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be (C_out, C_in, kh, kw), got {kernels.shape}")
    if x.shape[1] != kernels.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels but kernels expect {kernels.shape[1]}")
    if bias is not None and bias.shape != (kernels.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {kernels.shape[0]} output channels")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    kh, kw = kernels.shape[2:]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {x.shape[2:]} (padding {padding})")


def conv2d_forward(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` with ``kernels`` (no kernel flip)."""
    xb, single = _as_batch(x)
    _check_conv(xb, kernels, bias, stride, padding)
    kh, kw = kernels.shape[2:]
    # (N, C, H', W', kh, kw)
    windows = sliding_window_view(_pad(xb, padding), (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, kernels, axes=([1, 4, 5], [1, 2, 3]))  # (N, H', W', C_out)
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def conv2d_backward(
    x: Tensor, kernels: Tensor, upstream: Tensor, stride: int = 1, padding: int = 0
) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(input_grad, kernel_grad, bias_grad)`` for a convolution."""
    xb, single = _as_batch(x)
    dy, _ = _as_batch(upstream)
    _check_conv(xb, kernels, None, stride, padding)
    n, _, h, w = xb.shape
    c_out, _, kh, kw = kernels.shape
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if dy.shape != (n, c_out, ho, wo):
        raise ShapeError(f"upstream gradient shape {dy.shape} != conv output shape {(n, c_out, ho, wo)}")

    xp = _pad(xb, padding)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    kernel_grad = np.tensordot(dy, windows, axes=([0, 2, 3], [0, 2, 3]))  # (C_out, C_in, kh, kw)
    bias_grad = dy.sum(axis=(0, 2, 3))

    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            # (N, H', W', C_in)
            contrib = np.tensordot(dy, kernels[:, :, i, j], axes=([1], [0]))
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
    dx = np.ascontiguousarray(dx)
    return (dx[0] if single else dx), kernel_grad, bias_grad


# -- elementwise / pooling ---------------------------------------------------

def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(x: Tensor, upstream: Tensor) -> Tensor:
    # gradient at exactly 0 is 0
    return upstream * (x > 0)


def maxpool_forward(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    stride = window if stride is None else stride
    xb, single = _as_batch(x)
    if window > xb.shape[2] or window > xb.shape[3]:
        raise ShapeError(f"pool window {window} larger than input {xb.shape[2:]}")
    windows = sliding_window_view(xb, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    out = windows.max(axis=(4, 5))
    return out[0] if single else out


def maxpool_backward(x: Tensor, upstream: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Route each window's gradient to its first row-major argmax."""
    stride = window if stride is None else stride
    xb, single = _as_batch(x)
    dy, _ = _as_batch(upstream)
    windows = sliding_window_view(xb, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    if dy.shape != (n, c, ho, wo):
        raise ShapeError(f"upstream gradient shape {dy.shape} != pool output shape {(n, c, ho, wo)}")
    flat_arg = windows.reshape(n, c, ho, wo, window * window).argmax(axis=-1)
    di, dj = np.divmod(flat_arg, window)
    rows = np.arange(ho)[None, None, :, None] * stride + di
    cols = np.arange(wo)[None, None, None, :] * stride + dj
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    dx = np.zeros_like(xb)
    if stride >= window:
        dx[nn, cc, rows, cols] = dy
    else:
        np.add.at(dx, (nn, cc, rows, cols), dy)
    return dx[0] if single else dx


# -- global average pooling ----------------------------------------------------

def gap_forward(features: Tensor) -> Tensor:
    """Average each feature map over its spatial extent: ``(..., n, x, y) -> (..., n)``."""
    if features.ndim < 2 or features.shape[-1] < 1 or features.shape[-2] < 1:
        raise ShapeError(f"GAP needs non-empty spatial dims, got shape {features.shape}")
    return features.mean(axis=(-2, -1))


def gap_backward(upstream: Tensor, x: int, y: int) -> Tensor:
    """Spread ``upstream[k] / (x*y)`` uniformly over map ``k``."""
    scale = upstream / (x * y)
    return np.broadcast_to(scale[..., None, None], upstream.shape + (x, y)).copy()


# -- dense ---------------------------------------------------------------------

def dense_forward(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``y = W x + b`` for ``x`` of shape ``(in,)`` or ``(N, in)``."""
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense shapes incompatible: x {x.shape}, W {weights.shape}, b {bias.shape}")
    return x @ weights.T + bias


def dense_backward(x: Tensor, weights: Tensor, upstream: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    if upstream.shape[-1] != weights.shape[0] or upstream.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"upstream gradient {upstream.shape} incompatible with x {x.shape}, W {weights.shape}")
    dx = upstream @ weights
    if x.ndim == 1:
        return dx, np.outer(upstream, x), upstream.copy()
    return dx, upstream.T @ x, upstream.sum(axis=0)


# -- loss ----------------------------------------------------------------------

def softmax(logits: Tensor) -> Tensor:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, label) -> tuple[float, Tensor]:
    """Stabilized softmax cross-entropy.

    For a batch ``(N, C)`` with an array of labels the loss and gradient are
    averaged over the batch.
    """
    labels = np.atleast_1d(np.asarray(label))
    batch = logits.ndim == 2
    z = np.atleast_2d(logits)
    if labels.shape[0] != z.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {z.shape[0]} logit rows")
    n_classes = z.shape[1]
    if np.any((labels < 0) | (labels >= n_classes)):
        raise ValueError(f"label out of range for {n_classes} classes: {labels}")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = log_norm - shifted[rows, labels]
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1
    if batch:
        return float(losses.mean()), grad / z.shape[0]
    return float(losses[0]), grad[0]


# -- verification ---------------------------------------------------------------

def numerical_gradient(f: Callable[[Tensor], float], x: Tensor, eps: float = 1e-4) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x`` (``x`` is restored afterwards)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        g[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-8) -> float:
    """Max elementwise relative error; entries with ``|analytic| < floor`` are compared absolutely."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    scale = np.abs(analytic)
    small = scale < floor
    rel = np.where(small, diff, diff / np.where(small, 1.0, scale))
    return float(rel.max()) if rel.size else 0.0


def finite_difference_check(f: Callable[[Tensor], float], x: Tensor, analytic: Tensor, eps: float = 1e-4) -> float:
    """Compare ``analytic`` against central differences of ``f`` at ``x``; return max relative error."""
    if analytic.shape != x.shape:
        raise ShapeError(f"analytic gradient shape {analytic.shape} != input shape {x.shape}")
    return relative_error(analytic, numerical_gradient(f, x, eps))
