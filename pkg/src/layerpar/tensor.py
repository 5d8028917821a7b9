"""Dense f64 kernels with forward, VJP and JVP rules.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 and rank <= 3.
Products go through the selected kernel backend (see ``_backend``), which
accumulates inner sums left to right; everything else is vectorized numpy
and therefore deterministic for a fixed shape and memory layout.

Conventions: a linear map stores ``weight`` as ``[out, in]`` and computes
``x @ weight.T + bias`` on the last axis.  GELU uses the tanh approximation

    gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _backend

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(x) -> np.ndarray:
    """Validate and convert to a float64 array of rank 1..3."""
    arr = np.asarray(x, dtype=np.float64)
    if not 1 <= arr.ndim <= 3:
        raise DimensionError(f"tensors have rank 1..3, got shape {arr.shape}")
    return arr


@dataclass
class LinearParams:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"linear params: weight {self.weight.shape} / bias {self.bias.shape}"
            )


# -- products ----------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")
    return _backend.active.matmul(a, b)


def bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm: {a.shape} x {b.shape}")
    return _backend.active.bmm(a, b)


def matmul_vjp(a, b, upstream):
    """Cotangents of ``a @ b`` with respect to ``a`` and ``b``."""
    if upstream.shape != (a.shape[0], b.shape[1]):
        raise DimensionError("matmul_vjp: upstream shape mismatch")
    return matmul(upstream, b.T), matmul(a.T, upstream)


def matmul_jvp(a, b, da, db):
    return matmul(da, b) + matmul(a, db)


def bmm_vjp(a, b, upstream):
    if upstream.shape != (a.shape[0], a.shape[1], b.shape[2]):
        raise DimensionError("bmm_vjp: upstream shape mismatch")
    return bmm(upstream, b.transpose(0, 2, 1)), bmm(a.transpose(0, 2, 1), upstream)


def bmm_jvp(a, b, da, db):
    return bmm(da, b) + bmm(a, db)


# -- linear ------------------------------------------------------------------


def linear(x: np.ndarray, p: LinearParams) -> np.ndarray:
    if x.shape[-1] != p.weight.shape[1]:
        raise DimensionError(f"linear: input dim {x.shape[-1]} vs weight {p.weight.shape}")
    x2 = x.reshape(-1, x.shape[-1])
    out = matmul(x2, p.weight.T) + p.bias
    return out.reshape(x.shape[:-1] + (p.weight.shape[0],))


def linear_vjp(x, p: LinearParams, upstream):
    """Returns ``(dx, LinearParams(dweight, dbias))``."""
    x2 = x.reshape(-1, x.shape[-1])
    u2 = upstream.reshape(-1, p.weight.shape[0])
    if u2.shape[0] != x2.shape[0]:
        raise DimensionError("linear_vjp: upstream shape mismatch")
    dx = matmul(u2, p.weight).reshape(x.shape)
    dw = matmul(u2.T, x2)
    db = u2.sum(axis=0)
    return dx, LinearParams(dw, db)


def linear_jvp(x, p: LinearParams, dx, dp: LinearParams):
    x2 = x.reshape(-1, x.shape[-1])
    dx2 = dx.reshape(-1, x.shape[-1])
    out = matmul(dx2, p.weight.T) + matmul(x2, dp.weight.T) + dp.bias
    return out.reshape(x.shape[:-1] + (p.weight.shape[0],))


# -- layer norm --------------------------------------------------------------


def _ln_stats(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc, inv


def layer_norm(x, gain, bias, eps: float = LN_EPS):
    if gain.shape != (x.shape[-1],) or bias.shape != gain.shape:
        raise DimensionError("layer_norm: gain/bias must match the last axis")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    xc, inv = _ln_stats(x, eps)
    return xc * inv * gain + bias


def layer_norm_vjp(x, gain, bias, upstream, eps: float = LN_EPS):
    """Returns ``(dx, dgain, dbias)``; parameter cotangents sum over rows."""
    if upstream.shape != x.shape:
        raise DimensionError("layer_norm_vjp: upstream shape mismatch")
    xc, inv = _ln_stats(x, eps)
    xhat = xc * inv
    gx = upstream * gain
    dx = inv * (
        gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
    )
    d = x.shape[-1]
    dgain = (upstream * xhat).reshape(-1, d).sum(axis=0)
    dbias = upstream.reshape(-1, d).sum(axis=0)
    return dx, dgain, dbias


def layer_norm_jvp(x, gain, bias, dx, dgain, dbias, eps: float = LN_EPS):
    xc, inv = _ln_stats(x, eps)
    dxc = dx - dx.mean(axis=-1, keepdims=True)
    dvar = 2.0 * (xc * dxc).mean(axis=-1, keepdims=True)
    dinv = -0.5 * inv**3 * dvar
    dxhat = dxc * inv + xc * dinv
    return dxhat * gain + xc * inv * dgain + dbias


# -- softmax -----------------------------------------------------------------


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_vjp_from_output(y, upstream):
    return y * (upstream - (upstream * y).sum(axis=-1, keepdims=True))


def softmax_vjp(x, upstream):
    if upstream.shape != x.shape:
        raise DimensionError("softmax_vjp: upstream shape mismatch")
    return softmax_vjp_from_output(softmax_rows(x), upstream)


def softmax_jvp(x, dx):
    y = softmax_rows(x)
    return y * (dx - (y * dx).sum(axis=-1, keepdims=True))


# -- GELU --------------------------------------------------------------------


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))


def _gelu_grad(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


def gelu_vjp(x, upstream):
    if upstream.shape != x.shape:
        raise DimensionError("gelu_vjp: upstream shape mismatch")
    return upstream * _gelu_grad(x)


def gelu_jvp(x, dx):
    return dx * _gelu_grad(x)
