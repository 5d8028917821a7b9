"""Monitoring the inexactness of layer-parallel training.

Every ``probe_period`` batches the batch is run with twice the nominal MGRIT
iteration counts and the ratio of the last two fine-level residual norms is
recorded for each phase.  A ratio above the threshold means the extra
iterations stopped helping; the controller then either doubles the nominal
counts (up to a cap) or asks the trainer to fall back to serial propagation.
"""
from __future__ import annotations

from dataclasses import dataclass

from .mgrit import convergence_factor

KEEP = "keep"
INCREASE = "increase_iterations"
SWITCH = "switch_serial"
POLICIES = (INCREASE, SWITCH)


@dataclass
class IndicatorConfig:
    probe_period: int = 500
    threshold: float = 1.0
    policy: str = SWITCH
    max_iter_cap: int = 8
    enabled: bool = True
    use_probe_gradient: bool = True

    def __post_init__(self):
        if self.probe_period < 1:
            raise ValueError("probe_period must be >= 1")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")


@dataclass
class IndicatorReport:
    batch: int
    fwd_factor: float | None
    bwd_factor: float | None
    fwd_iters: int = 0
    bwd_iters: int = 0
    decision: str = ""


@dataclass(frozen=True)
class Decision:
    action: str
    fwd_iters: int
    bwd_iters: int


def should_probe(batch: int, cfg: IndicatorConfig) -> bool:
    return cfg.enabled and batch % cfg.probe_period == 0


def _phase_factor(trace, converged):
    if len(trace) >= 2:
        return convergence_factor(trace)
    if len(trace) == 1 and converged:
        return 0.0
    return None  # serial phase


def probe(run_batch, batch: int, fwd_iters: int, bwd_iters: int):
    """Run ``run_batch(2*fwd, 2*bwd)`` and measure both convergence factors.

    ``run_batch`` returns an object with ``fwd_trace``, ``bwd_trace``,
    ``fwd_converged`` and ``bwd_converged``.  The nominal counts are not
    modified.  Returns ``(report, result)``.
    """
    result = run_batch(2 * fwd_iters, 2 * bwd_iters)
    report = IndicatorReport(
        batch,
        _phase_factor(result.fwd_trace, result.fwd_converged),
        _phase_factor(result.bwd_trace, result.bwd_converged),
        fwd_iters,
        bwd_iters,
    )
    return report, result


def decide(report: IndicatorReport, cfg: IndicatorConfig) -> Decision:
    fwd_bad = report.fwd_factor is not None and report.fwd_factor > cfg.threshold
    bwd_bad = report.bwd_factor is not None and report.bwd_factor > cfg.threshold
    f, b = report.fwd_iters, report.bwd_iters
    if not (fwd_bad or bwd_bad):
        return Decision(KEEP, f, b)
    if cfg.policy == SWITCH:
        return Decision(SWITCH, f, b)
    f2 = 2 * f if fwd_bad else f
    b2 = 2 * b if bwd_bad else b
    if f2 > cfg.max_iter_cap or b2 > cfg.max_iter_cap:
        return Decision(SWITCH, f, b)
    return Decision(INCREASE, f2, b2)
