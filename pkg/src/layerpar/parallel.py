"""Single-machine stand-in for the multi-device layer distribution.

Layers are split into contiguous ranges, one per worker, and each relaxation
phase is a fork-join over independent chunks.  Chunks are grouped into one
contiguous block per worker; results come back in ascending chunk order, so
the output never depends on the worker count.  Threads are enough because
the kernels release the GIL.
"""
from __future__ import annotations

import csv
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence


class ContractViolation(RuntimeError):
    """Two tasks of one phase declared overlapping write ranges."""


@dataclass(frozen=True)
class Task:
    writes: range
    fn: Callable[[], object]


@dataclass
class LayerPartition:
    workers: int
    ranges: list
    coarse_points: list


def partition_layers(n_layers: int, workers: int, cf: int = 1) -> LayerPartition:
    """Contiguous balanced split of ``n_layers`` over ``workers``.

    Range sizes differ by at most one, larger ranges first.  Each worker owns
    the coarse points (multiples of ``cf``) inside its range, i.e. it stores
    the initial guesses there.
    """
    if workers < 1 or workers > max(1, n_layers // cf):
        raise ValueError(f"cannot place {n_layers} layers (cf={cf}) on {workers} workers")
    base, extra = divmod(n_layers, workers)
    ranges, start = [], 0
    for w in range(workers):
        size = base + (1 if w < extra else 0)
        ranges.append(range(start, start + size))
        start += size
    coarse = [[n for n in r if n % cf == 0] for r in ranges]
    return LayerPartition(workers, ranges, coarse)


def check_disjoint(tasks: Sequence[Task]):
    spans = sorted((t.writes.start, t.writes.stop, i) for i, t in enumerate(tasks) if len(t.writes))
    for (s0, e0, i0), (s1, e1, i1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise ContractViolation(
                f"tasks {i0} and {i1} both write indices {s1}..{min(e0, e1) - 1}"
            )


class Executor:
    """Fork-join pool with a deterministic, ordered result contract."""

    def __init__(self, workers: int = 1):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.workers = workers
        self._pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def parallel_for_chunks(self, tasks: Sequence[Task]) -> list:
        check_disjoint(tasks)
        if self._pool is None or len(tasks) < 2:
            return [t.fn() for t in tasks]
        groups = partition_layers(len(tasks), min(self.workers, len(tasks))).ranges

        def run(group):
            return [tasks[i].fn() for i in group]

        futures = [self._pool.submit(run, g) for g in groups]
        out = []
        for f in futures:
            out.extend(f.result())
        return out

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


SERIAL = Executor(1)


def benchmark(workload: dict, worker_counts, repeats: int = 5):
    """Median wall time per worker count and phase.

    ``workload`` maps a phase name to ``fn(executor)``.  Returns rows
    ``(workers, phase, median_ms, speedup)`` where speedup is relative to the
    first worker count.
    """
    rows, base = [], {}
    for p in worker_counts:
        with Executor(p) as ex:
            for phase, fn in workload.items():
                fn(ex)  # warm-up
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    fn(ex)
                    times.append((time.perf_counter() - t0) * 1e3)
                med = statistics.median(times)
                base.setdefault(phase, med)
                rows.append((p, phase, med, base[phase] / med))
    return rows


def write_benchmark_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["workers", "phase", "median_ms", "speedup"])
        for p, phase, med, sp in rows:
            w.writerow([p, phase, f"{med:.4f}", f"{sp:.4f}"])


def cpu_count() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover
        return os.cpu_count() or 1
