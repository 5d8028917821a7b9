"""Independent reference implementations used by the tests.

These avoid the package's kernels and code paths: plain Python loops,
extended precision, closed forms and brute force.
"""
import math

import mpmath
import numpy as np


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s = s + float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def layer_norm_direct(x, gain, bias, eps):
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape[:-1]):
        row = [float(v) for v in x[idx]]
        mean = math.fsum(row) / len(row)
        var = math.fsum((v - mean) ** 2 for v in row) / len(row)
        out[idx] = [(v - mean) / math.sqrt(var + eps) * g + b for v, g, b in zip(row, gain, bias)]
    return out


def softmax_mp(x, dps=50):
    """Unstabilized softmax in extended precision."""
    with mpmath.workdps(dps):
        out = np.empty(x.shape)
        for i in range(x.shape[0]):
            e = [mpmath.exp(mpmath.mpf(float(v))) for v in x[i]]
            s = mpmath.fsum(e)
            out[i] = [float(v / s) for v in e]
    return out


def central_fd(f, x, v, step=1e-6):
    return (f(x + step * v) - f(x - step * v)) / (2 * step)


def power_iteration_sigma(a, iters=3000):
    v = np.ones(a.shape[1]) / math.sqrt(a.shape[1])
    for _ in range(iters):
        v = a.T @ (a @ v)
        v /= np.linalg.norm(v)
    return float(np.linalg.norm(a @ v))


def euler_products(coeffs, h, z0):
    """Closed form of ``z_{n+1} = (1 + h a_n) z_n``."""
    out = [z0]
    for a in coeffs:
        out.append(out[-1] * (1.0 + h * a))
    return out


def dense_coarse_error(g, r):
    """Solve ``e_0 = r_0, e_k - g e_{k-1} = r_k`` by dense forward substitution."""
    n = len(r)
    a = np.eye(n) - np.diag(np.full(n - 1, g), -1)
    e = np.zeros(n)
    for k in range(n):
        e[k] = (r[k] - a[k, :k] @ e[:k]) / a[k, k]
    return e


def fcf_exact_front(coeffs, h, cf, sweeps):
    """Largest index ``j`` with ``u[0..j]`` exact after ``sweeps`` FCF sweeps (brute force).

    Starts from exact ``u[0]`` and zeros elsewhere; tracks exactness by
    comparing against the closed form.
    """
    n = len(coeffs)
    exact = euler_products(coeffs, h, 1.0)
    u = [1.0] + [0.0] * n
    step = lambda k, z: z * (1.0 + h * coeffs[k])

    def f_sweep():
        for c in range(0, n, cf):
            for j in range(c + 1, min(c + cf, n)):
                u[j] = step(j - 1, u[j - 1])

    def c_sweep():
        for c in range(cf, n + 1, cf):
            u[c] = step(c - 1, u[c - 1])

    for _ in range(sweeps):
        f_sweep()
        c_sweep()
        f_sweep()
    j = 0
    while j + 1 <= n and u[j + 1] == exact[j + 1]:
        j += 1
    return j


def attention_oracle(xq, xkv, p, heads, causal):
    """Per-example, per-head loops over the same primitives."""
    from layerpar.tensor import linear, softmax_rows

    batch, s, d = xq.shape
    dh = d // heads
    q, k, v = linear(xq, p.q), linear(xkv, p.k), linear(xkv, p.v)
    o = np.zeros_like(q)
    for b in range(batch):
        for hd in range(heads):
            cols = slice(hd * dh, (hd + 1) * dh)
            sc = (q[b][:, cols] @ k[b][:, cols].T) * (1.0 / math.sqrt(dh))
            if causal:
                sc = np.where(np.tril(np.ones(sc.shape, dtype=bool)), sc, -np.inf)
            o[b][:, cols] = softmax_rows(sc) @ v[b][:, cols]
    return linear(o, p.o)
