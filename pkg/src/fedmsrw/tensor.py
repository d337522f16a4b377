"""Dense float64 layer primitives with hand-paired backward passes.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout. Every forward
function returns ``(out, cache)`` and the matching ``*_backward`` consumes the
cache. Batch statistics use the biased variance (divide by N).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import as_strided


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    # a finite sum rules out NaN/Inf cheaply; only scan element-wise otherwise
    if not math.isfinite(float(arr.sum())) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")
    return arr


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, padding: int = 0):
    """Stride-1 cross-correlation. Returns ``(out, cache)``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-d input and kernel, got input {x.shape} and kernel {kernel.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d kernel must be square with odd size, got {kernel.shape}")
    if bias.shape != (O,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match kernel {kernel.shape}")
    if padding < 0:
        raise ValueError("padding must be non-negative")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < kh or Wp < kw:
        raise ValueError(f"conv2d input {x.shape} too small for kernel {kernel.shape} "
                         f"with padding {padding}")

    if padding:
        xp = np.zeros((B, C, Hp, Wp))
        xp[:, :, padding:padding + H, padding:padding + W] = x
    else:
        xp = x
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    # columns laid out (B, C*k*k, Ho*Wo) so forward and backward are batched matmuls
    sb, sc, sh, sw = xp.strides
    win = as_strided(xp, (B, C, kh, kw, Ho, Wo), (sb, sc, sh, sw, sh, sw), writeable=False)
    cols = win.reshape(B, C * kh * kw, Ho * Wo)
    out = kernel.reshape(O, -1) @ cols + bias[None, :, None]
    out = out.reshape(B, O, Ho, Wo)
    cache = (x.shape, cols, kernel, padding)
    return check_finite(out, "conv2d"), cache


def conv2d_backward(dout: np.ndarray, cache):
    """Returns ``(dx, dkernel, dbias)``."""
    xshape, cols, kernel, padding = cache
    B, C, H, W = xshape
    O, _, k, _ = kernel.shape
    _, _, Ho, Wo = dout.shape
    dflat = dout.reshape(B, O, Ho * Wo)
    dbias = dflat.sum(axis=(0, 2))
    dkernel = np.einsum("bop,bcp->oc", dflat, cols, optimize=True).reshape(kernel.shape)
    dcols = (kernel.reshape(O, -1).T @ dflat).reshape(B, C, k, k, Ho, Wo)
    dxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + Ho, j:j + Wo] += dcols[:, :, i, j]
    dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
    return np.ascontiguousarray(dx), dkernel, dbias


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics.

    The arrays may be shared with a :class:`~fedmsrw.model.ParamSet`; the
    running statistics are updated in place during train-mode forwards.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    num_batches_tracked: np.ndarray = field(default_factory=lambda: np.zeros(1))
    eps: float = 1e-5
    stat_momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, **kw) -> "BatchNormState":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels),
                   np.ones(channels), **kw)


def batchnorm(x: np.ndarray, state: BatchNormState, mode: str = "train"):
    """Normalize per channel over (B, H, W). Returns ``(out, cache)``."""
    if x.ndim != 4 or x.shape[1] != state.gamma.shape[0]:
        raise ValueError(f"batchnorm input {x.shape} does not match "
                         f"{state.gamma.shape[0]} channels")
    if mode == "train":
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise ValueError("batchnorm in train mode needs at least 2 values per channel")
        mean = x.sum(axis=(0, 2, 3)) / n
        centered = x - mean[:, None, None]
        var = np.einsum("bchw,bchw->c", centered, centered) / n
        m = state.stat_momentum
        state.running_mean *= 1.0 - m
        state.running_mean += m * mean
        state.running_var *= 1.0 - m
        state.running_var += m * var
        state.num_batches_tracked += 1
    elif mode == "eval":
        mean, var = state.running_mean, state.running_var
        if np.any(var <= 0):
            raise ValueError("batchnorm running_var must be strictly positive")
        centered = x - mean[:, None, None]
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv_std[:, None, None]
    out = xhat * state.gamma[:, None, None] + state.beta[:, None, None]
    cache = (xhat, inv_std, state.gamma, mode)
    return check_finite(out, "batchnorm"), cache


def batchnorm_backward(dout: np.ndarray, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, mode = cache
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if mode == "eval":
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    n = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    dx = (inv_std[None, :, None, None] / n) * (
        n * dxhat
        - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, dout, 0.0)


def sigmoid(x: np.ndarray):
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out, out


def sigmoid_backward(dout: np.ndarray, out: np.ndarray) -> np.ndarray:
    return dout * out * (1.0 - out)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable, grad: Callable, params, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(params)`` returns the scalar loss and ``grad(params)`` maps parameter
    name to its analytic gradient. ``params`` is either a ``ParamSet`` (only
    trainable entries are perturbed; non-trainable entries such as running
    statistics are restored after every call) or a plain ``dict`` of arrays.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    if hasattr(params, "entries"):
        arrays = {e.name: e.value for e in params.entries if e.trainable}
        frozen = {e.name: e.value for e in params.entries if not e.trainable}
    else:
        arrays, frozen = dict(params), {}
    saved = {k: v.copy() for k, v in frozen.items()}

    def restore():
        for k, v in saved.items():
            frozen[k][...] = v

    def loss() -> float:
        value = float(f(params))
        restore()
        if not math.isfinite(value):
            raise NonFiniteError("grad_check: loss is not finite")
        return value

    loss()
    grads = grad(params)
    restore()
    analytic = {k: np.array(grads[k], dtype=np.float64, copy=True) for k in arrays}
    worst = 0.0
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        numeric = np.empty(flat.size)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            lp = loss()
            flat[idx] = orig - h
            lm = loss()
            flat[idx] = orig
            numeric[idx] = (lp - lm) / (2.0 * h)
        err = relative_error(analytic[name].reshape(-1), numeric)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
