"""Serial, layer-parallel and switching training loops.

All randomness derives from the run seed and the batch index: data order
from ``(task seed, epoch)``, dropout masks from ``(run seed, batch)`` and
initialization from the run seed.  Mode and worker count never enter.
"""
from __future__ import annotations

import csv
import dataclasses
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tree
from .checkpoint import read_checkpoint, write_checkpoint
from .config import ConfigError, TrainConfig, dump
from .controller import INCREASE, SWITCH, IndicatorReport, decide, probe, should_probe
from .data import make_dataset
from .mgrit import HierarchyError, convergence_factor
from .model import Model, layer_parallel_loss_grad, serial_loss_grad
from .optim import make_optimizer
from .parallel import Executor

METRIC_COLUMNS = ["batch", "loss", "val_metric", "mode", "fwd_iters", "bwd_iters", "fwd_factor", "bwd_factor"]
INDICATOR_COLUMNS = ["batch", "fwd_factor", "bwd_factor", "decision"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    metrics: list
    indicator: list
    model: Model
    optimizer: object
    switch_batch: int | None = None
    files: dict = field(default_factory=dict)


def validate(cfg: TrainConfig):
    """Reject configurations the solver cannot run, before any training."""
    mcfg = cfg.model_config()
    n = mcfg.n_layers
    if mcfg.buffer_open + mcfg.buffer_close >= n:
        raise ConfigError("[model] buffer layers leave no interior")
    if cfg.run.mode == "serial":
        return
    mg = cfg.mgrit
    if mg.init_guess not in ("broadcast", "zeros", "warm"):
        raise ConfigError(f"[mgrit] unknown init_guess {mg.init_guess!r}")
    if mg.fwd_iters < 0 or mg.bwd_iters < 0:
        raise ConfigError("[mgrit] iteration counts must be >= 0")
    interior = n - mcfg.buffer_open - mcfg.buffer_close
    if mg.cf < 2 or mg.levels < 1:
        raise ConfigError("[mgrit] need cf >= 2 and levels >= 1")
    span = mg.cf ** (mg.levels - 1)
    if interior < span or interior % span:
        raise ConfigError(
            f"[mgrit] {interior} interior layers not divisible into {mg.levels} levels with cf={mg.cf}"
        )


def _fmt(x):
    return "" if x is None else repr(float(x))


def _factor(trace):
    return convergence_factor(trace) if len(trace) >= 2 else None


def apply_stress(model: Model, layers: int, scale: float):
    """Scale the attention and MLP weights of the last ``layers`` blocks in place."""
    for block in model.params.blocks[len(model.params.blocks) - layers :]:
        mats = [block.attn.q, block.attn.k, block.attn.v, block.attn.o, block.mlp_in, block.mlp_out]
        if hasattr(block, "cross"):
            mats += [block.cross.q, block.cross.k, block.cross.v, block.cross.o]
        for lin in mats:
            lin.weight *= scale


def _state_tensors(model, opt):
    return list(tree.leaves(model.params, "param")) + opt.state_tensors()


def save_checkpoint(path, cfg, model, opt, batch):
    write_checkpoint(path, dump(cfg), {"batch": batch, "step": opt.t}, _state_tensors(model, opt))


def load_state(path, model, opt):
    """Restore parameters and optimizer state; returns the saved batch index."""
    _, meta, tensors = read_checkpoint(path)
    for name, x in tree.leaves(model.params, "param"):
        x[...] = tensors[name]
    opt.load_state(meta["step"], tensors)
    return meta["batch"]


def _write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] for c in columns])


def run_training(cfg: TrainConfig, out_dir=None, resume=None) -> TrainResult:
    """Train per ``cfg``; with ``out_dir`` write metrics, indicator log and checkpoints.

    ``resume`` is a checkpoint path; training restarts at its batch index
    with its parameters and optimizer state.
    """
    validate(cfg)
    run = cfg.run
    ds = make_dataset(cfg.task)
    model = Model.create(cfg.model_config(), run.seed)
    opt = make_optimizer(cfg.optimizer, model.params)
    start = load_state(resume, model, opt) if resume else 0
    nb = ds.n_batches(run.batch_size)
    if nb == 0:
        raise ConfigError("[run] batch_size exceeds the training set")
    ind = cfg.indicator
    parallel = run.mode != "serial"
    fwd_iters, bwd_iters = cfg.mgrit.fwd_iters, cfg.mgrit.bwd_iters
    warm = {}
    metrics, reports = [], []
    switch_batch = None
    files = {}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    def lp(batch, f, b):
        mg = dataclasses.replace(cfg.mgrit, fwd_iters=f, bwd_iters=b)
        return layer_parallel_loss_grad(model, batch, mg, ex, warm)

    with Executor(run.workers) as ex:
        for epoch in range(run.epochs):
            for i, batch in enumerate(ds.batches(epoch, run.batch_size)):
                b = epoch * nb + i
                if b < start:
                    continue
                if b == cfg.stress.at and not (resume and b == start):
                    apply_stress(model, cfg.stress.layers, cfg.stress.scale)
                model.new_batch(b)
                result = None
                if parallel:
                    action = None
                    if run.mode == "switching" and b == run.switch_at:
                        action = SWITCH
                    elif should_probe(b, ind):
                        report, res = probe(lambda f, g: lp(batch, f, g), b, fwd_iters, bwd_iters)
                        dec = decide(report, ind)
                        action = dec.action
                        if action == SWITCH and run.mode != "switching":
                            action = "switch_ignored"
                        report.decision = action
                        reports.append(report)
                        if action == INCREASE:
                            fwd_iters, bwd_iters = dec.fwd_iters, dec.bwd_iters
                        if action != SWITCH and ind.use_probe_gradient:
                            result = res
                    if action == SWITCH:
                        parallel = False
                        switch_batch = b
                        result = None
                        if out_dir is not None:
                            files["switch_checkpoint"] = os.path.join(out_dir, "switch.mglp")
                            save_checkpoint(files["switch_checkpoint"], cfg, model, opt, b)
                    elif result is None:
                        result = lp(batch, fwd_iters, bwd_iters)
                if result is None:
                    result = serial_loss_grad(model, batch)
                if not math.isfinite(result.loss):
                    raise TrainingDiverged(f"non-finite loss at batch {b}")
                opt.step(model.params, result.grads)
                row = {
                    "batch": b,
                    "loss": repr(result.loss),
                    "val_metric": "",
                    "mode": "layer_parallel" if parallel else "serial",
                    "fwd_iters": len(result.fwd_trace),
                    "bwd_iters": len(result.bwd_trace),
                    "fwd_factor": _fmt(_factor(result.fwd_trace)),
                    "bwd_factor": _fmt(_factor(result.bwd_trace)),
                }
                if i == nb - 1:
                    row["val_metric"] = repr(model.accuracy(ds.val))
                metrics.append(row)

    if out_dir is not None:
        files["metrics"] = os.path.join(out_dir, "metrics.csv")
        files["indicator"] = os.path.join(out_dir, "indicator.csv")
        files["checkpoint"] = os.path.join(out_dir, "final.mglp")
        _write_csv(files["metrics"], METRIC_COLUMNS, metrics)
        _write_csv(files["indicator"], INDICATOR_COLUMNS, [_report_row(r) for r in reports])
        save_checkpoint(files["checkpoint"], cfg, model, opt, run.epochs * nb)
    return TrainResult(metrics, reports, model, opt, switch_batch, files)


def _report_row(r: IndicatorReport):
    return {"batch": r.batch, "fwd_factor": _fmt(r.fwd_factor), "bwd_factor": _fmt(r.bwd_factor), "decision": r.decision}


def switching_replay(cfg: TrainConfig, switch_batch: int, out_dir=None) -> TrainResult:
    """Run layer-parallel, forcing the switch to serial at ``switch_batch``."""
    if switch_batch < 0:
        raise ValueError("switch_batch must be >= 0")
    run = dataclasses.replace(cfg.run, mode="switching", switch_at=switch_batch)
    return run_training(dataclasses.replace(cfg, run=run), out_dir)


def serial_from_checkpoint(cfg: TrainConfig, checkpoint, out_dir=None) -> TrainResult:
    """Serial run restarted from ``checkpoint`` (the switch-point state)."""
    run = dataclasses.replace(cfg.run, mode="serial", switch_at=-1)
    return run_training(dataclasses.replace(cfg, run=run), out_dir, resume=checkpoint)


def final_accuracy(result: TrainResult) -> float:
    vals = [r["val_metric"] for r in result.metrics if r["val_metric"] != ""]
    return float(vals[-1]) if vals else float("nan")


def losses(result: TrainResult) -> np.ndarray:
    return np.array([float(r["loss"]) for r in result.metrics])


__all__ = [
    "HierarchyError",
    "TrainResult",
    "TrainingDiverged",
    "apply_stress",
    "final_accuracy",
    "load_state",
    "losses",
    "run_training",
    "save_checkpoint",
    "serial_from_checkpoint",
    "switching_replay",
    "validate",
]
