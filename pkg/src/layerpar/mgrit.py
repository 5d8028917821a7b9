"""Multigrid reduction in time over the layer dimension.

Level ``l`` discretizes the same propagation with ``N_l = N / cf**l`` steps of
size ``cf**l * h``; coarse step ``k`` evaluates the fine layer ``k * cf**l``
(parameters injected at coarse points).  Each level stores its states
``u[0..N_l]`` with ``u[0]`` holding the initial condition, so the level-0
system is ``u[n] = Phi_n(u[n-1])``, ``n = 1..N``.

Coarse levels solve the nonlinear FAS system

    u[k] = Phi_k(u[k-1]) + v0[k] - Phi_k(v0[k-1]) + r[k]

where ``v0`` is the injected fine solution and ``r`` the injected fine
residual.  The right-hand side is applied as ``v0 + ((Phi(u) - Phi(v0)) + r)``
so a solution that is already exact stays bitwise unchanged.  In the linear
case this is exactly the error equation ``A_1 e = r``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import _backend
from .parallel import SERIAL, Executor, Task


class Propagator(Protocol):
    n_steps: int

    def step(self, n: int, stride: int, z): ...


# -- propagators -------------------------------------------------------------


class StackPropagator:
    """Layers ``start..stop-1`` of a :class:`~layerpar.blocks.LayerStack`."""

    def __init__(self, stack, start: int = 0, stop: int | None = None):
        stop = len(stack) if stop is None else stop
        hs = set(stack.h[start:stop])
        if len(hs) != 1:
            raise ValueError("a parallel segment needs one uniform step size")
        self.stack, self.start, self.stop = stack, start, stop
        self.h = hs.pop()
        self.n_steps = stop - start

    def step(self, n, stride, z):
        return self.stack.step(self.start + n, z, stride * self.h)

    def vjp(self, n, stride, z, lam):
        return self.stack.step_vjp(self.start + n, z, lam, stride * self.h)


class LinearScalarPropagator:
    """Forward Euler for ``z' = a_n z``: ``z + H a_n z`` (the linear test problem)."""

    def __init__(self, coeffs, h: float):
        self.coeffs = np.asarray(coeffs, dtype=np.float64)
        self.h = h
        self.n_steps = len(self.coeffs)

    @classmethod
    def constant(cls, lam: float, h: float, n_steps: int):
        return cls(np.full(n_steps, lam), h)

    def step(self, n, stride, z):
        return z + (stride * self.h) * self.coeffs[n] * z

    def vjp(self, n, stride, z, lam):
        hh = stride * self.h
        return lam + hh * self.coeffs[n] * lam, np.array([hh * float(np.sum(z * lam))])


class ScalarBlockPropagator:
    """Elementwise blocks ``z + H tanh(a_n z + b_n)`` on a long vector.

    Used as the relaxation benchmark workload: every step is a compiled (or
    numpy) loop that runs without the GIL.
    """

    def __init__(self, a, b, h: float, kernels=None):
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.h = h
        self.n_steps = len(self.a)
        self.kernels = kernels or _backend.active

    def step(self, n, stride, z):
        return self.kernels.scalar_block_step(z, float(self.a[n]), float(self.b[n]), stride * self.h)


class ZeroPropagator:
    """``F = 0``: every step is the identity."""

    def __init__(self, n_steps: int):
        self.n_steps = n_steps

    def step(self, n, stride, z):
        return z


# -- hierarchy ---------------------------------------------------------------


@dataclass
class Level:
    stride: int
    n_steps: int
    u: list
    v0: list | None = None
    phi0: list | None = None
    r: list | None = None

    def rhs(self, k, phi):
        """New value of ``u[k]`` given ``phi = Phi(u[k-1])``."""
        if self.v0 is None:
            return phi
        return self.v0[k] + ((phi - self.phi0[k]) + self.r[k])


@dataclass
class GridHierarchy:
    prop: object
    cf: int
    levels: list
    executor: Executor = field(default_factory=lambda: SERIAL)

    @property
    def n_levels(self):
        return len(self.levels)

    def step(self, l, k, z):
        stride = self.levels[l].stride
        return self.prop.step(k * stride, stride, z)

    @property
    def solution(self):
        return self.levels[0].u


@dataclass
class ResidualTrace:
    norms: list = field(default_factory=list)

    def append(self, value: float):
        self.norms.append(float(value))

    def __len__(self):
        return len(self.norms)


class HierarchyError(ValueError):
    pass


def build_hierarchy(prop, z0, cf: int, n_levels: int, initial_guess="broadcast", executor=None):
    """Set up levels and the level-0 initial guess.

    ``initial_guess`` is ``"broadcast"`` (copies of ``z0``), ``"zeros"``, or a
    list of ``N + 1`` states (warm start); entry 0 is always ``z0``.
    """
    n = prop.n_steps
    if cf < 2:
        raise HierarchyError("coarsening factor must be >= 2")
    if n_levels < 1:
        raise HierarchyError("need at least one level")
    if n < cf ** (n_levels - 1):
        raise HierarchyError(f"{n_levels} levels too deep for {n} steps with cf={cf}")
    if n % cf ** (n_levels - 1):
        raise HierarchyError(f"{n} steps not divisible by cf^(L-1) = {cf ** (n_levels - 1)}")
    z0 = np.asarray(z0, dtype=np.float64)
    if isinstance(initial_guess, str):
        if initial_guess == "broadcast":
            u = [z0] * (n + 1)
        elif initial_guess == "zeros":
            u = [z0] + [np.zeros_like(z0)] * n
        else:
            raise HierarchyError(f"unknown initial guess policy {initial_guess!r}")
    else:
        u = list(initial_guess)
        if len(u) != n + 1:
            raise HierarchyError("warm start must provide N + 1 states")
        u[0] = z0
    levels = [Level(1, n, u)]
    for l in range(1, n_levels):
        stride = cf**l
        levels.append(Level(stride, n // stride, u[::stride]))
    return GridHierarchy(prop, cf, levels, executor or SERIAL)


# -- relaxation --------------------------------------------------------------


def _chunks(n_steps, cf):
    """Coarse-interval starts ``0, cf, 2cf, ...`` below ``n_steps``."""
    return range(0, n_steps, cf)


def f_relax(hier: GridHierarchy, l: int):
    """Propagate from every coarse point up to (not including) the next one."""
    lev, cf = hier.levels[l], hier.cf
    u = lev.u

    def chunk(n0):
        stop = min(n0 + cf - 1, lev.n_steps)
        z, out = u[n0], []
        for k in range(n0, stop):
            z = lev.rhs(k + 1, hier.step(l, k, z))
            out.append(z)
        return n0, out

    tasks = [
        Task(range(n0 + 1, min(n0 + cf, lev.n_steps + 1)), (lambda n0=n0: chunk(n0)))
        for n0 in _chunks(lev.n_steps, cf)
    ]
    for n0, states in hier.executor.parallel_for_chunks(tasks):
        u[n0 + 1 : n0 + 1 + len(states)] = states
    return u


def c_relax(hier: GridHierarchy, l: int):
    """Update every coarse point from its fine predecessor."""
    lev, cf = hier.levels[l], hier.cf
    u = lev.u
    points = range(cf, lev.n_steps + 1, cf)
    tasks = [
        Task(range(k, k + 1), (lambda k=k: lev.rhs(k, hier.step(l, k - 1, u[k - 1]))))
        for k in points
    ]
    for k, z in zip(points, hier.executor.parallel_for_chunks(tasks)):
        u[k] = z
    return u


def fcf_relax(hier: GridHierarchy, l: int):
    f_relax(hier, l)
    c_relax(hier, l)
    return f_relax(hier, l)


def relaxation_chunks(n_steps: int, cf: int) -> int:
    """Independent tasks per F- or C-phase."""
    return n_steps // cf


# -- residual / restriction --------------------------------------------------


def _sqnorm(x) -> float:
    v = np.ravel(x)
    return float(np.dot(v, v))


def residual(hier: GridHierarchy, l: int, coarse_only: bool = False):
    """Residual ``r[n] = rhs_n(Phi(u[n-1])) - u[n]`` and its global L2 norm.

    ``r[0]`` is zero.  ``coarse_only`` skips fine points, whose residual is
    exactly zero right after an F-relaxation.
    """
    lev, cf = hier.levels[l], hier.cf
    u = lev.u
    zero = np.zeros_like(u[0])

    def chunk(n0):
        out = []
        for n in range(n0 + 1, min(n0 + cf, lev.n_steps) + 1):
            if coarse_only and n % cf:
                out.append(zero)
            else:
                out.append(lev.rhs(n, hier.step(l, n - 1, u[n - 1])) - u[n])
        return out

    tasks = [
        Task(range(n0 + 1, min(n0 + cf, lev.n_steps) + 1), (lambda n0=n0: chunk(n0)))
        for n0 in _chunks(lev.n_steps, cf)
    ]
    r = [zero]
    for part in hier.executor.parallel_for_chunks(tasks):
        r.extend(part)
    total = 0.0
    for x in r:
        total += _sqnorm(x)
    return r, float(np.sqrt(total))


def restrict_injection(r_fine: list, cf: int) -> list:
    """``r_coarse[k] = r_fine[k * cf]``."""
    return r_fine[::cf]


# -- coarse solve / cycle ----------------------------------------------------


def _serial_sweep(hier, l):
    lev = hier.levels[l]
    u = lev.u
    for k in range(lev.n_steps):
        u[k + 1] = lev.rhs(k + 1, hier.step(l, k, u[k]))


def coarse_solve(hier: GridHierarchy, l: int, r: list) -> list:
    """Error correction ``e`` on level ``l >= 1`` for restricted residual ``r``.

    The coarsest level is solved by forward substitution; intermediate levels
    apply one V-cycle recursively.
    """
    if l < 1:
        raise ValueError("coarse_solve works on levels >= 1")
    fine, lev, cf = hier.levels[l - 1], hier.levels[l], hier.cf
    v0 = fine.u[::cf]
    tasks = [
        Task(range(k, k + 1), (lambda k=k: hier.step(l, k - 1, v0[k - 1])))
        for k in range(1, lev.n_steps + 1)
    ]
    lev.phi0 = [None] + hier.executor.parallel_for_chunks(tasks)
    lev.v0, lev.r = v0, r
    lev.u = list(v0)
    if l == hier.n_levels - 1:
        _serial_sweep(hier, l)
    else:
        _cycle(hier, l, None)
    return [uk - vk for uk, vk in zip(lev.u, v0)]


def _cycle(hier, l, trace):
    lev, cf = hier.levels[l], hier.cf
    if l == hier.n_levels - 1:
        if trace is not None:
            trace.append(residual(hier, l)[1])
        _serial_sweep(hier, l)
        return
    fcf_relax(hier, l)
    r, norm = residual(hier, l, coarse_only=True)
    if trace is not None:
        trace.append(norm)
    e = coarse_solve(hier, l + 1, restrict_injection(r, cf))
    u = lev.u
    for k in range(1, len(e)):
        u[k * cf] = u[k * cf] + e[k]
    f_relax(hier, l)


def v_cycle(hier: GridHierarchy, trace: ResidualTrace | None = None) -> GridHierarchy:
    """FCF-relax, restrict, coarse-correct, F-relax; records the fine residual."""
    _cycle(hier, 0, trace)
    return hier


def solve_forward(hier: GridHierarchy, max_iters: int, tol: float = 0.0):
    """V-cycles until ``||r_k|| <= tol * ||r_1||`` or ``max_iters``.

    Returns ``(states, trace, converged)``.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    trace = ResidualTrace()
    converged = False
    for _ in range(max_iters):
        v_cycle(hier, trace)
        if trace.norms[-1] <= tol * trace.norms[0]:
            converged = True
            break
    return hier.solution, trace, converged


class TraceTooShort(ValueError):
    pass


def convergence_factor(trace) -> float:
    """Ratio of the last two fine-level residual norms (0 if the earlier is 0)."""
    norms = trace.norms if isinstance(trace, ResidualTrace) else list(trace)
    if len(norms) < 2:
        raise TraceTooShort("need at least two residual norms")
    prev, last = norms[-2], norms[-1]
    if prev == 0.0:
        return 0.0
    return last / prev


def serial_solution(prop, z0):
    """Reference states from plain sequential propagation."""
    u = [np.asarray(z0, dtype=np.float64)]
    for n in range(prop.n_steps):
        u.append(prop.step(n, 1, u[-1]))
    return u


# -- benchmark workload ------------------------------------------------------


def relaxation_workload(n_layers=256, width=1 << 16, cf=2, seed=0, kernels=None):
    """FCF relaxation over a scalar-block stack, keyed for :func:`parallel.benchmark`."""
    rng = np.random.default_rng(seed)
    prop = ScalarBlockPropagator(
        rng.uniform(-1.0, 1.0, n_layers), rng.uniform(-0.5, 0.5, n_layers), 1.0 / n_layers, kernels
    )
    z0 = rng.standard_normal(width)

    def fcf(executor):
        hier = build_hierarchy(prop, z0, cf, 2, "broadcast", executor)
        fcf_relax(hier, 0)
        return hier

    return {"fcf_relax": fcf}
