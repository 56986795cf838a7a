"""Dense array math: convolution, affine maps, activations, losses and Adam.

Arrays are plain ``numpy.ndarray`` objects. Image-like tensors use the
``(batch, height, width, channels)`` layout; single images ``(H, W, C)`` are
accepted by :func:`conv2d` and promoted internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CLAMP_EPS = 1e-12


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


def ensure_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# convolution


def conv2d(
    x: np.ndarray,
    filters: np.ndarray,
    stride: int = 1,
    bias: np.ndarray | None = None,
) -> np.ndarray:
    """Valid cross-correlation, averaged over input channels.

    ``x`` is ``(N, H, W, C)`` or ``(H, W, C)``; ``filters`` is ``(F, f, f, C)``
    (a list of ``(f, f, C)`` arrays also works). Each filter is correlated
    with every input channel separately and the per-channel maps are reduced
    by their arithmetic mean, so one filter yields one 2-D map.
    """
    filters = np.asarray(filters)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or filters.ndim != 4:
        raise ValueError(f"conv2d expects (N,H,W,C) input and (F,f,f,C) filters, got {x.shape}, {filters.shape}")
    n_filters, fh, fw, fc = filters.shape
    _, h, w, c = x.shape
    if fc != c:
        raise ValueError(f"filter channels {fc} != input channels {c}")
    if fh > h or fw > w:
        raise ValueError(f"filter {fh}x{fw} larger than input {h}x{w}")
    if stride < 1:
        raise ValueError("stride must be >= 1")

    cols = _im2col(x, fh, fw, stride)  # (N, Ho, Wo, C*fh*fw)
    kernel = filters.transpose(3, 1, 2, 0).reshape(c * fh * fw, n_filters)
    out = cols @ kernel / c
    if bias is not None:
        out = out + bias
    return out[0] if single else out


def _im2col(x: np.ndarray, fh: int, fw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(x, (fh, fw), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo = win.shape[:3]
    # win: (N, Ho, Wo, C, fh, fw) -> flatten the patch as (C, fh, fw)
    return win.reshape(n, ho, wo, -1)


def conv2d_backward(
    x: np.ndarray, filters: np.ndarray, grad_out: np.ndarray, stride: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d` w.r.t. input, filters and bias."""
    n_filters, fh, fw, c = filters.shape
    n, ho, wo, _ = grad_out.shape
    cols = _im2col(x, fh, fw, stride).reshape(-1, c * fh * fw)
    g = grad_out.reshape(-1, n_filters)
    d_kernel = (cols.T @ g) / c  # (C*fh*fw, F)
    d_filters = d_kernel.reshape(c, fh, fw, n_filters).transpose(3, 1, 2, 0)
    d_bias = g.sum(axis=0)

    dx = np.zeros_like(x)
    for i in range(fh):
        for j in range(fw):
            # (N, Ho, Wo, F) @ (F, C)
            contrib = grad_out @ filters[:, i, j, :] / c
            dx[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += contrib
    return dx, d_filters, d_bias


def maxpool2d(x: np.ndarray, size: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pooling with floor semantics for odd sizes.

    Returns the pooled map and the flat argmax index inside each window
    (first maximum wins on ties), which :func:`maxpool2d_backward` consumes.
    """
    n, h, w, c = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ValueError(f"pool size {size} larger than map {h}x{w}")
    crop = x[:, : ho * size, : wo * size, :]
    win = crop.reshape(n, ho, size, wo, size, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, size * size)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2d_backward(grad_out: np.ndarray, idx: np.ndarray, input_shape: tuple, size: int = 2) -> np.ndarray:
    n, h, w, c = input_shape
    ho, wo = grad_out.shape[1:3]
    win = np.zeros((n, ho, wo, c, size * size), dtype=grad_out.dtype)
    np.put_along_axis(win, idx[..., None], grad_out[..., None], axis=-1)
    win = win.reshape(n, ho, wo, c, size, size).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * size, wo * size, c)
    dx = np.zeros(input_shape, dtype=grad_out.dtype)
    dx[:, : ho * size, : wo * size, :] = win
    return dx


# ---------------------------------------------------------------------------
# affine, activations


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map ``x @ weights + bias`` for a vector or a batch of rows."""
    if x.shape[-1] != weights.shape[0]:
        raise ValueError(f"dense: input dim {x.shape[-1]} != weight rows {weights.shape[0]}")
    if bias.shape != (weights.shape[1],):
        raise ValueError(f"dense: bias shape {bias.shape} != ({weights.shape[1]},)")
    return x @ weights + bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def logsumexp(x: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


# ---------------------------------------------------------------------------
# losses (mean over elements) and their gradients w.r.t. the prediction


def _check_same(pred: np.ndarray, target: np.ndarray) -> None:
    if np.shape(pred) != np.shape(target):
        raise ValueError(f"shape mismatch: pred {np.shape(pred)} vs target {np.shape(target)}")


def binary_cross_entropy(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    _check_same(pred, target)
    p = np.clip(pred, CLAMP_EPS, 1 - CLAMP_EPS)
    loss = -(target * np.log(p) + (1 - target) * np.log1p(-p))
    return float(ensure_finite(np.mean(loss), "binary cross-entropy"))


def binary_cross_entropy_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    _check_same(pred, target)
    # float64 so the clamp survives when pred is float32
    p = np.clip(pred.astype(np.float64), CLAMP_EPS, 1 - CLAMP_EPS)
    return ((p - target) / (p * (1 - p)) / pred.size).astype(pred.dtype)


def mean_absolute_error(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    _check_same(pred, target)
    return float(ensure_finite(np.mean(np.abs(pred - target)), "mean absolute error"))


def mean_absolute_error_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    _check_same(pred, target)
    return (np.sign(pred - target) / pred.size).astype(pred.dtype)


def categorical_cross_entropy(pred, onehot) -> float:
    """Mean over rows of ``-sum(onehot * log(pred))``."""
    pred, onehot = np.asarray(pred, dtype=float), np.asarray(onehot, dtype=float)
    _check_same(pred, onehot)
    p = np.clip(pred, CLAMP_EPS, 1 - CLAMP_EPS)
    loss = -np.sum(onehot * np.log(p), axis=-1)
    return float(ensure_finite(np.mean(loss), "categorical cross-entropy"))


def categorical_cross_entropy_grad(pred: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    _check_same(pred, onehot)
    p = np.clip(pred.astype(np.float64), CLAMP_EPS, 1 - CLAMP_EPS)
    rows = pred.shape[0] if pred.ndim > 1 else 1
    return (-onehot / p / rows).astype(pred.dtype)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Per-parameter Adam moments plus hyperparameters."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), **hyper)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are untouched."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"adam_step: shape mismatch {params.shape}, {grads.shape}, {state.m.shape}")
    if state.step < 0:
        raise ValueError("adam_step: negative step counter")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    update = (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params.dtype, copy=False)
    new = params - update
    ensure_finite(new, "adam update")
    return new, AdamState(
        m=m.astype(params.dtype, copy=False),
        v=v.astype(params.dtype, copy=False),
        step=t,
        lr=state.lr,
        beta1=b1,
        beta2=b2,
        eps=state.eps,
    )


# ---------------------------------------------------------------------------
# initialisation


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float = 1.0) -> np.ndarray:
    limit = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def xavier_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
