"""MGRIT on the discrete adjoint, run backward over the layers.

The adjoint recurrence ``lam_n = lam_{n+1} + h (dF/dz at W[n])^T lam_{n+1}``
is solved as a forward problem in reversed time ``mu_m = lam_{N-m}`` with the
same V-cycle machinery.  Coarse adjoint steps pull back through the coarse
forward step that starts at the (injected) forward state.  Jacobians are taken
at whatever forward states were supplied, exact or not.
"""
from __future__ import annotations

from dataclasses import dataclass

from .mgrit import ResidualTrace, build_hierarchy, solve_forward
from .parallel import SERIAL, Task, partition_layers


class AdjointPropagator:
    def __init__(self, forward, states):
        if len(states) != forward.n_steps + 1:
            raise ValueError("need forward states W[0..N]")
        self.forward = forward
        self.states = states
        self.n_steps = forward.n_steps

    def step(self, m, stride, mu):
        n = self.n_steps - m - stride
        return self.forward.vjp(n, stride, self.states[n], mu)[0]


@dataclass
class AdjointState:
    """``lam[n]`` for n = 0..N, per-layer gradients and the solver trace."""

    lam: list
    grads: list
    trace: ResidualTrace
    converged: bool
    reversed_states: list

    @property
    def terminal(self):
        return self.lam[-1]


def adjoint_propagator(forward, n: int, lam_next, states, h_stride: int = 1):
    """``(lam_n, grads_n)`` for layer ``n`` at forward state ``states[n]``."""
    if states[n] is None:
        raise ValueError(f"missing forward state for layer {n}")
    return forward.vjp(n, h_stride, states[n], lam_next)


def layer_gradients(forward, states, lam, executor=None):
    """Parameter gradients of every layer, merged in ascending layer order."""
    executor = executor or SERIAL
    n = forward.n_steps
    part = partition_layers(n, min(max(executor.workers, 1), n))
    tasks = [
        Task(r, (lambda r=r: [forward.vjp(i, 1, states[i], lam[i + 1])[1] for i in r]))
        for r in part.ranges
    ]
    grads = []
    for block in executor.parallel_for_chunks(tasks):
        grads.extend(block)
    return grads


def solve_backward(
    forward,
    states,
    lam_terminal,
    cf: int,
    n_levels: int,
    max_iters: int,
    tol: float = 0.0,
    initial_guess="broadcast",
    executor=None,
) -> AdjointState:
    """Adjoint states and parameter gradients from ``max_iters`` V-cycles.

    ``initial_guess`` follows :func:`~layerpar.mgrit.build_hierarchy` and is
    expressed in reversed time (a previous ``reversed_states`` for warm start).
    """
    adj = AdjointPropagator(forward, states)
    hier = build_hierarchy(adj, lam_terminal, cf, n_levels, initial_guess, executor)
    mu, trace, converged = solve_forward(hier, max_iters, tol)
    lam = mu[::-1]
    grads = layer_gradients(forward, states, lam, executor)
    return AdjointState(lam, grads, trace, converged, list(mu))


def serial_adjoint(forward, states, lam_terminal):
    """Reference: plain backpropagation through every layer."""
    n = forward.n_steps
    lam = [None] * (n + 1)
    grads = [None] * n
    lam[n] = lam_terminal
    for i in range(n - 1, -1, -1):
        lam[i], grads[i] = forward.vjp(i, 1, states[i], lam[i + 1])
    return lam, grads
