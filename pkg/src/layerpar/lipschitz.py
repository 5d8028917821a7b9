"""Monte-Carlo Lipschitz estimates per layer and buffer-layer selection."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .blocks import LayerStack


@dataclass
class LipschitzEstimate:
    layer: int
    estimate: float
    samples: int
    input_scale: float
    perturbation: float
    seed: int

    def amplification(self, h: float) -> float:
        """Euler error amplification bound ``1 + h * L``."""
        return 1.0 + h * self.estimate


def estimate_lipschitz(
    fn,
    shape,
    samples: int = 256,
    perturbation: float = 1e-2,
    input_scale: float = 1.0,
    seed: int = 0,
    layer: int = -1,
) -> LipschitzEstimate:
    """``max ||fn(x + d) - fn(x)|| / ||d||`` over sampled pairs.

    ``x ~ input_scale * N(0, I)``, ``d ~ perturbation * N(0, I)``.  Samples are
    drawn one pair at a time from a single stream, so a run with more samples
    extends (never reorders) the sample set of a shorter run.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng([seed, 11])
    best = 0.0
    for _ in range(samples):
        x = input_scale * rng.standard_normal(shape)
        d = perturbation * rng.standard_normal(shape)
        dn = float(np.linalg.norm(d))
        if dn == 0.0:
            continue
        ratio = float(np.linalg.norm(fn(x + d) - fn(x))) / dn
        best = max(best, ratio)
    return LipschitzEstimate(layer, best, samples, input_scale, perturbation, seed)


def layer_residual_fn(stack: LayerStack, n: int):
    """The residual branch ``F_n`` of layer ``n`` (the step with h = 1, minus identity)."""
    return lambda z: stack.step(n, z, 1.0) - z


def estimate_stack(stack: LayerStack, shape, samples=256, perturbation=1e-2, input_scales=None, seed=0):
    """One estimate per layer; ``input_scales`` gives a per-layer input RMS."""
    out = []
    for n in range(len(stack)):
        scale = 1.0 if input_scales is None else float(input_scales[n])
        out.append(
            estimate_lipschitz(layer_residual_fn(stack, n), shape, samples, perturbation, scale, seed, n)
        )
    return out


@dataclass
class BufferAnnotation:
    flags: list
    k_open: int
    k_close: int
    warning: str | None = None

    @property
    def interior(self) -> int:
        return len(self.flags) - self.k_open - self.k_close


def select_buffer_layers(estimates, k_open: int, k_close: int) -> BufferAnnotation:
    """Flag the first ``k_open`` and last ``k_close`` layers for serial execution.

    Warns when an interior layer has a larger estimate than every buffered one.
    """
    values = [e.estimate if isinstance(e, LipschitzEstimate) else float(e) for e in estimates]
    n = len(values)
    if k_open < 0 or k_close < 0 or k_open + k_close >= n:
        raise ValueError(f"cannot buffer {k_open}+{k_close} of {n} layers")
    flags = [i < k_open or i >= n - k_close for i in range(n)]
    warning = None
    buffered = [v for v, f in zip(values, flags) if f]
    if buffered:
        interior = [v for v, f in zip(values, flags) if not f]
        if max(interior) > max(buffered):
            worst = k_open + int(np.argmax(interior))
            warning = (
                f"interior layer {worst} has Lipschitz estimate {max(interior):.4g} "
                f"above every buffer layer ({max(buffered):.4g})"
            )
            warnings.warn(warning, stacklevel=2)
    return BufferAnnotation(flags, k_open, k_close, warning)


def recommend_buffers(estimates, ratio: float = 2.0):
    """Leading and trailing runs of layers whose estimate exceeds ``ratio`` x median."""
    values = np.array([e.estimate if isinstance(e, LipschitzEstimate) else e for e in estimates])
    cut = ratio * float(np.median(values))
    k_open = 0
    while k_open < len(values) - 1 and values[k_open] > cut:
        k_open += 1
    k_close = 0
    while k_close < len(values) - 1 - k_open and values[-1 - k_close] > cut:
        k_close += 1
    return k_open, k_close


def _relative(w, w0):
    base = float(np.sqrt(sum(float(np.vdot(a, a)) for a in w0)))
    if base == 0.0:
        return float("nan")
    diff = float(np.sqrt(sum(float(np.vdot(a - b, a - b)) for a, b in zip(w, w0))))
    return diff / base


def _components(block):
    attn = [block.attn.q.weight, block.attn.k.weight, block.attn.v.weight, block.attn.o.weight]
    comps = {"attention": attn, "mlp": [block.mlp_in.weight, block.mlp_out.weight]}
    if hasattr(block, "cross"):
        c = block.cross
        comps["cross_attention"] = [c.q.weight, c.k.weight, c.v.weight, c.o.weight]
    return comps


def track_weight_change(blocks, blocks0):
    """Rows ``(layer, component, ||w - w0|| / ||w0||)``; NaN when ``||w0|| == 0``."""
    rows = []
    for n, (b, b0) in enumerate(zip(blocks, blocks0)):
        c, c0 = _components(b), _components(b0)
        for name in c:
            rows.append((n, name, _relative(c[name], c0[name])))
    return rows


def write_lipschitz_csv(path, estimates, h):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["layer", "estimate", "amplification", "samples", "seed"])
        for e, hn in zip(estimates, h):
            w.writerow([e.layer, repr(e.estimate), repr(e.amplification(hn)), e.samples, e.seed])
