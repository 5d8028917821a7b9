"""Self-check suite: fixed point, finite termination, gradients, determinism.

Each check reports a measured value against a tolerance; ``verify_suite``
collects them and ``format_report`` renders a machine-readable table.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tree
from .data import TaskSpec, make_dataset
from .lipschitz import estimate_lipschitz
from .mgrit import (
    LinearScalarPropagator,
    build_hierarchy,
    relaxation_workload,
    residual,
    serial_solution,
    v_cycle,
)
from .model import MGRITConfig, Model, ModelConfig, flat_params, layer_parallel_loss_grad, serial_loss_grad, set_flat_params
from .parallel import Executor

# Tolerances shared with the acceptance tests.
EQUIVALENCE_TOL = 1e-10
FD_STEP = 1e-6
FD_TOL = 1e-5
FIXED_POINT_TOL = 1e-12
TERMINATION_TOL = 1e-14
HOMOGENEITY_TOL = 1e-12
SOLVE_TOL = 1e-12


@dataclass
class Check:
    name: str
    group: str
    measured: float
    tolerance: float
    passed: bool


def _check(name, group, measured, tol):
    return Check(name, group, float(measured), tol, bool(measured <= tol))


# -- test problems -----------------------------------------------------------


def linear_problem(n_steps=64, lam_h=-0.5):
    """``z' = lam z`` with ``lam * h = lam_h`` and ``z(0) = 1``."""
    return LinearScalarPropagator.constant(lam_h, 1.0, n_steps), np.ones(1)


def toy_case(arch: str, full: bool = False, init_std: float = 0.2, batch: int = 4):
    """A small model and batch per architecture; ``full`` gives the larger sizes."""
    if arch == "encoder":
        spec = TaskSpec("token_classification", vocab=16, seq_len=8, classes=4, train_size=16)
        cfg = ModelConfig("encoder", 16, 4, 8, d=32, heads=2, ff=64, layers=32 if full else 8)
    elif arch == "decoder":
        spec = TaskSpec("copy_sequence", vocab=8, seq_len=4, train_size=16)
        n = 20 if full else 8
        cfg = ModelConfig("decoder", 9, 8, 8, d=16, heads=2, ff=32, layers=n, buffer_open=2, buffer_close=2)
    elif arch == "encdec":
        spec = TaskSpec("tiny_translation", vocab=8, seq_len=6, train_size=16)
        k = 6 if full else 2
        cfg = ModelConfig("encdec", 8, 8, 6, tgt_vocab=9, tgt_len=6, d=16, heads=2, ff=32, enc_layers=k, dec_layers=k)
    else:
        raise ValueError(f"unknown arch {arch!r}")
    cfg.init_std = init_std
    ds = make_dataset(spec)
    return Model.create(cfg, 0), ds.train.take(np.arange(batch))


def converged_mgrit(cf=2, levels=2):
    return MGRITConfig(cf, levels, 200, 200, SOLVE_TOL, SOLVE_TOL, "broadcast")


def _rel(a, b):
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) / scale


# -- checks --------------------------------------------------------------------


def fixed_point_error(cf, n_steps=64, levels=2):
    """Residual after one V-cycle seeded with the serial solution, over ``||G_0||``."""
    prop, z0 = linear_problem(n_steps)
    hier = build_hierarchy(prop, z0, cf, levels, serial_solution(prop, z0))
    v_cycle(hier)
    return residual(hier, 0)[1] / float(np.linalg.norm(z0))


def termination_error(cf, n_steps=64, levels=2):
    """Max deviation from serial after the cycle budget; returns ``(error, budget)``."""
    prop, z0 = linear_problem(n_steps)
    exact = serial_solution(prop, z0)
    budget = math.ceil((n_steps // cf) / 2) + 1
    hier = build_hierarchy(prop, z0, cf, levels, "broadcast")
    for _ in range(budget):
        v_cycle(hier)
    err = max(float(np.max(np.abs(u - e))) for u, e in zip(hier.solution, exact))
    return err / max(float(np.max(np.abs(e))) for e in exact), budget


def equivalence_error(model, batch, mg=None, executor=None):
    """Relative loss and gradient mismatch between MGRIT and serial."""
    s = serial_loss_grad(model, batch)
    p = layer_parallel_loss_grad(model, batch, mg or converged_mgrit(), executor)
    loss_err = abs(p.loss - s.loss) / abs(s.loss)
    return loss_err, _rel(tree.flatten(p.grads), tree.flatten(s.grads))


def fd_errors(model, batch, directions=20, seed=1, mg=None, step=FD_STEP):
    """Relative error of ``g . v`` against central differences along random ``v``."""
    g = tree.flatten(layer_parallel_loss_grad(model, batch, mg or converged_mgrit()).grads)
    x0 = flat_params(model)
    rng = np.random.default_rng(seed)
    errs = []
    try:
        for _ in range(directions):
            v = rng.standard_normal(x0.size)
            v /= np.linalg.norm(v)
            set_flat_params(model, x0 + step * v)
            lp = model.loss(batch)
            set_flat_params(model, x0 - step * v)
            lm = model.loss(batch)
            fd = (lp - lm) / (2 * step)
            an = float(g @ v)
            errs.append(abs(fd - an) / max(abs(an), abs(fd), 1e-300))
    finally:
        set_flat_params(model, x0)
    return errs


def determinism_mismatch(workers=(1, 2, 4)):
    """Count of states differing bitwise from the one-worker result."""
    wl = relaxation_workload(n_layers=32, width=1024)["fcf_relax"]
    model, batch = toy_case("encoder")
    mg = MGRITConfig(2, 2, 2, 1, 0.0, 0.0, "broadcast")
    ref_u = ref_g = None
    bad = 0
    for p in workers:
        with Executor(p) as ex:
            u = np.concatenate(wl(ex).solution)
            g = tree.flatten(layer_parallel_loss_grad(model, batch, mg, ex).grads)
        if ref_u is None:
            ref_u, ref_g = u, g
        bad += int(np.sum(u != ref_u)) + int(np.sum(g != ref_g))
    return bad


def homogeneity_error(alpha=-3.5, d=8, samples=64):
    a = np.random.default_rng(5).standard_normal((d, d))
    base = estimate_lipschitz(lambda x: a @ x, (d,), samples, seed=2).estimate
    scaled = estimate_lipschitz(lambda x: alpha * (a @ x), (d,), samples, seed=2).estimate
    return abs(scaled - abs(alpha) * base) / (abs(alpha) * base)


def _suite():
    """``(label, run)`` pairs; the label holds every check name and group a run yields."""
    for cf in (2, 4):
        yield f"fixed_point fixed_point_cf{cf}", lambda cf=cf: [
            _check(f"fixed_point_cf{cf}", "fixed_point", fixed_point_error(cf), FIXED_POINT_TOL)
        ]
        yield f"termination finite_termination_cf{cf}", lambda cf=cf: [
            _check(f"finite_termination_cf{cf}", "termination", termination_error(cf)[0], TERMINATION_TOL)
        ]
    for arch in ("encoder", "decoder", "encdec"):

        def eq(arch=arch):
            loss_err, grad_err = equivalence_error(*toy_case(arch))
            return [
                _check(f"equivalence_loss_{arch}", "equivalence", loss_err, EQUIVALENCE_TOL),
                _check(f"equivalence_grad_{arch}", "equivalence", grad_err, EQUIVALENCE_TOL),
            ]

        def fd(arch=arch):
            return [_check(f"gradient_fd_{arch}", "gradient", max(fd_errors(*toy_case(arch), 5)), FD_TOL)]

        yield f"equivalence equivalence_loss_{arch} equivalence_grad_{arch}", eq
        yield f"gradient gradient_fd_{arch}", fd
    yield "determinism determinism_workers", lambda: [
        _check("determinism_workers", "determinism", determinism_mismatch(), 0)
    ]
    yield "lipschitz lipschitz_homogeneity", lambda: [
        _check("lipschitz_homogeneity", "lipschitz", homogeneity_error(), HOMOGENEITY_TOL)
    ]


def verify_suite(pattern: str | None = None) -> list:
    """Run every check whose name or group contains ``pattern``."""
    out = []
    for label, run in _suite():
        if pattern is not None and pattern not in label:
            continue
        out.extend(c for c in run() if pattern is None or pattern in f"{c.group} {c.name}")
    return out


def format_report(checks) -> str:
    lines = ["name,group,measured,tolerance,status"]
    for c in checks:
        lines.append(f"{c.name},{c.group},{c.measured!r},{c.tolerance!r},{'pass' if c.passed else 'FAIL'}")
    passed = sum(c.passed for c in checks)
    lines.append(f"# {passed}/{len(checks)} passed")
    return "\n".join(lines)
