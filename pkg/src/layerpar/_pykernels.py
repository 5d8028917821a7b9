"""Pure-Python (numpy) twins of the compiled kernels.

The products loop over the inner index in Python and vectorize over the
output, which reproduces the compiled accumulation order exactly.
"""
import numpy as np


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ ({a.shape[1]} vs {b.shape[0]})")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


def bmm(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError("bmm: incompatible shapes")
    out = np.zeros((a.shape[0], a.shape[1], b.shape[2]))
    for k in range(a.shape[2]):
        out += a[:, :, k, None] * b[:, None, k, :]
    return out


def scalar_block_step(z, a, b, h):
    """One step of the elementwise block z + h*tanh(a*z + b)."""
    return z + h * np.tanh(a * z + b)
