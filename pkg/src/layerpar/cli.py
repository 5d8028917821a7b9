"""``layerpar`` command line: train, verify, bench, probe.

Exit codes: 0 success, 1 validation error, 2 invariant failure.
"""
from __future__ import annotations

import argparse
import os
import sys
import warnings

import numpy as np

from . import _backend, tree
from .blocks import serial_forward
from .checkpoint import CheckpointError, read_checkpoint
from .config import ConfigError, RunManifest, load, parse_text
from .data import make_dataset
from .lipschitz import estimate_stack, recommend_buffers, select_buffer_layers, write_lipschitz_csv
from .mgrit import HierarchyError, relaxation_workload
from .model import Model
from .parallel import benchmark, cpu_count, write_benchmark_csv
from .training import TrainingDiverged, run_training
from .verify import format_report, verify_suite

OK, INVALID, INVARIANT = 0, 1, 2


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _out_dir(args, manifest_hash):
    return args.out or os.path.join("runs", manifest_hash[:12])


def cmd_train(args) -> int:
    try:
        cfg = load(args.config, args.set)
    except ConfigError as exc:
        _err(exc)
        return INVALID
    manifest = RunManifest.create(cfg, "")
    out = _out_dir(args, manifest.config_hash)
    manifest.out_dir = out
    os.makedirs(out, exist_ok=True)
    manifest.write(os.path.join(out, "manifest.txt"))
    try:
        result = run_training(cfg, out, resume=args.resume)
    except (ConfigError, CheckpointError, HierarchyError) as exc:
        _err(exc)
        return INVALID
    except TrainingDiverged as exc:
        _err(exc)
        return INVARIANT
    if not result.metrics:
        print(f"nothing to train: checkpoint is past the last batch; out={out}")
        return OK
    last = result.metrics[-1]
    print(f"batches={len(result.metrics)} loss={float(last['loss']):.6g} val={last['val_metric']} out={out}")
    if result.switch_batch is not None:
        print(f"switched to serial at batch {result.switch_batch}")
    return OK


def cmd_verify(args) -> int:
    checks = verify_suite(args.filter)
    print(format_report(checks))
    if not checks:
        _err(f"no checks match {args.filter!r}")
        return INVALID
    return OK if all(c.passed for c in checks) else INVARIANT


def _parse_workers(text):
    try:
        workers = [int(w) for w in text.split(",") if w.strip()]
    except ValueError:
        raise ConfigError(f"invalid worker list {text!r}") from None
    if not workers or min(workers) < 1:
        raise ConfigError("worker counts must be >= 1")
    return workers


def cmd_bench(args) -> int:
    try:
        workers = _parse_workers(args.workers)
        cf = load(args.config, args.set).mgrit.cf if args.config else 2
        kernels = _backend.get(args.backend) if args.backend else _backend.active
    except (ConfigError, ValueError) as exc:
        _err(exc)
        return INVALID
    cores = cpu_count()
    if max(workers) > cores:
        warnings.warn(f"{max(workers)} workers requested on a host with {cores} core(s)", stacklevel=1)
    workload = relaxation_workload(args.layers, args.width, cf, kernels=kernels)
    rows = benchmark(workload, workers, args.repeats)
    out = args.out or "runs"
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "bench.csv")
    write_benchmark_csv(path, rows)
    for w, phase, ms, speedup in rows:
        print(f"workers={w} {phase} median_ms={ms:.3f} speedup={speedup:.3f}")
    print(f"backend={args.backend or _backend.NAME} wrote {path}")
    return OK


def _probe_model(args):
    if args.checkpoint:
        text, _, tensors = read_checkpoint(args.checkpoint)
        cfg = parse_text(text)
        model = Model.create(cfg.model_config(), cfg.run.seed)
        for name, x in tree.leaves(model.params, "param"):
            if name not in tensors or tensors[name].shape != x.shape:
                raise CheckpointError(f"{args.checkpoint}: missing or mismatched tensor {name}")
            x[...] = tensors[name]
        return cfg, model
    cfg = load(args.config, args.set)
    return cfg, Model.create(cfg.model_config(), cfg.run.seed)


def cmd_probe(args) -> int:
    try:
        cfg, model = _probe_model(args)
    except (ConfigError, CheckpointError) as exc:
        _err(exc)
        return INVALID
    if args.samples < 1:
        _err("samples must be >= 1")
        return INVALID
    # activation-matched input scales from a warm-up validation batch
    val = make_dataset(cfg.task).val.take(np.arange(min(8, cfg.task.val_size)))
    states = serial_forward(model.eval_stack, model.embed(val))
    scales = [float(np.sqrt(np.mean(s * s))) for s in states[:-1]]
    shape = (1,) + states[0].shape[1:]
    est = estimate_stack(model.eval_stack, shape, args.samples, args.perturbation, scales, args.seed)
    out = args.out or "runs"
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "lipschitz.csv")
    write_lipschitz_csv(path, est, model.eval_stack.h)
    k_open, k_close = recommend_buffers(est, args.ratio)
    if k_open + k_close >= len(est):
        k_open = k_close = 0
    note = ""
    if k_open or k_close:
        with warnings.catch_warnings(record=True):
            ann = select_buffer_layers(est, k_open, k_close)
        note = ann.warning or ""
    with open(os.path.join(out, "recommendation.txt"), "w", encoding="utf-8") as f:
        f.write(f"k_open={k_open}\nk_close={k_close}\n")
        if note:
            f.write(f"warning={note}\n")
    print(f"layers={len(est)} wrote {path}")
    print(f"recommendation: k_open={k_open} k_close={k_close}")
    if note:
        print(f"warning: {note}")
    return OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are validation errors
        self.print_usage(sys.stderr)
        self.exit(INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="layerpar", description="Layer-parallel transformer training with MGRIT.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run a training job")
    t.add_argument("--config", required=True)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--out", help="output directory (default runs/<config hash>)")
    t.add_argument("--resume", help="checkpoint to restart from")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="run the invariant suite")
    v.add_argument("--filter", help="only checks whose name or group contains this")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="time parallel FCF relaxation")
    b.add_argument("--config")
    b.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    b.add_argument("--workers", default="1,2,4,8")
    b.add_argument("--layers", type=int, default=256)
    b.add_argument("--width", type=int, default=1 << 16)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--backend", choices=["compiled", "python"])
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("probe", help="per-layer Lipschitz estimates")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--config", help="probe a freshly initialized model")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--samples", type=int, default=256)
    r.add_argument("--perturbation", type=float, default=1e-2)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--ratio", type=float, default=2.0, help="buffer when estimate > ratio x median")
    r.add_argument("--out")
    r.set_defaults(func=cmd_probe)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
