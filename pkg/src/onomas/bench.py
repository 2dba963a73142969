"""Inference benchmarks: throughput cells and latency percentiles, plus an energy proxy."""
from __future__ import annotations

import json
import logging
import os
import resource
import statistics
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .data.text import Vocab, encode_batch

log = logging.getLogger(__name__)

DEFAULT_BATCHES = (1, 8, 32, 128, 256, 1024)
DEFAULT_WATTS_PER_CORE = 10.0


@dataclass
class Cell:
    batch: int
    threads: int
    samples_per_second: float  # median over repetitions
    min: float
    max: float
    reps: int
    iterations: int

    @property
    def spread(self) -> float:
        return self.max / self.min if self.min > 0 else float("inf")


@dataclass
class BenchReport:
    label: str
    cells: list[Cell]
    latency_ms: dict[str, float]
    peak_rss_bytes: int
    cpu_seconds: float
    watts_per_core: float
    warmup_batches: int
    reps: int
    hardware_threads: int
    warnings: list[str] = field(default_factory=list)

    @property
    def energy_joules(self) -> float:
        """Proxy: CPU seconds times the configured per-core power. Not a measurement."""
        return self.cpu_seconds * self.watts_per_core

    def cell(self, batch: int, threads: int = 1) -> Cell:
        for c in self.cells:
            if c.batch == batch and c.threads == threads:
                return c
        raise KeyError((batch, threads))

    def best_cell(self, threads: int = 1) -> Cell:
        return max((c for c in self.cells if c.threads == threads), key=lambda c: c.samples_per_second)

    def scaling(self, batch: int) -> dict[int, dict[str, float]]:
        """Throughput per thread count, relative to the 1-thread cell, and its efficiency."""
        base = self.cell(batch, 1).samples_per_second
        out = {}
        for c in sorted((c for c in self.cells if c.batch == batch), key=lambda c: c.threads):
            ratio = c.samples_per_second / base
            out[c.threads] = {"ratio": ratio, "efficiency": ratio / c.threads}
        return out

    def to_dict(self) -> dict:
        d = {
            "label": self.label,
            "cells": [asdict(c) | {"spread": c.spread} for c in self.cells],
            "latency_ms": self.latency_ms,
            "peak_rss_bytes": self.peak_rss_bytes,
            "cpu_seconds": self.cpu_seconds,
            "watts_per_core": self.watts_per_core,
            "energy_joules_proxy": self.energy_joules,
            "warmup_batches": self.warmup_batches,
            "reps": self.reps,
            "hardware_threads": self.hardware_threads,
            "warnings": self.warnings,
        }
        if self.cells:
            best = self.best_cell(min(c.threads for c in self.cells))
            d["argmax_cell"] = {"batch": best.batch, "threads": best.threads}
        return d

    def to_tsv(self, compare: "BenchReport | None" = None) -> str:
        best = self.best_cell(min(c.threads for c in self.cells)) if self.cells else None
        head = ["batch", "threads", "samples_per_s", "min", "max", "spread", "reps", "best"]
        if compare is not None:
            head.append(f"speedup_vs_{compare.label}")
        rows = ["\t".join(head)]
        for c in self.cells:
            row = [
                str(c.batch),
                str(c.threads),
                f"{c.samples_per_second:.1f}",
                f"{c.min:.1f}",
                f"{c.max:.1f}",
                f"{c.spread:.3f}",
                str(c.reps),
                "*" if c is best else "",
            ]
            if compare is not None:
                try:
                    row.append(f"{c.samples_per_second / compare.cell(c.batch, c.threads).samples_per_second:.3f}")
                except KeyError:
                    row.append("")
            rows.append("\t".join(row))
        return "\n".join(rows) + "\n"

    def write(self, prefix: str | Path, compare: "BenchReport | None" = None) -> list[Path]:
        tsv, js = Path(f"{prefix}.tsv"), Path(f"{prefix}.json")
        tsv.write_text(self.to_tsv(compare), encoding="utf-8")
        d = self.to_dict()
        if compare is not None:
            d["speedup_vs"] = {
                "label": compare.label,
                "cells": {
                    f"{c.batch}x{c.threads}": c.samples_per_second / compare.cell(c.batch, c.threads).samples_per_second
                    for c in self.cells
                    if any(o.batch == c.batch and o.threads == c.threads for o in compare.cells)
                },
            }
        js.write_text(json.dumps(d, indent=2), encoding="utf-8")
        return [tsv, js]


def hardware_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _limit_torch_threads(n: int) -> None:
    import sys

    torch = sys.modules.get("torch")  # only if the model already pulled it in
    if torch is not None:
        torch.set_num_threads(n)


def make_runner(model, vocab: Vocab | None = None) -> Callable[[Sequence[str]], np.ndarray]:
    """End-to-end names -> probabilities, tokenization included."""
    vocab = vocab or model.vocab
    engine = model.inference_engine()
    max_len = model.config.max_len

    def run(names: Sequence[str]) -> np.ndarray:
        ids, lengths = encode_batch(names, vocab, max_len)
        return engine.predict_proba(ids, lengths)

    return run


def _batches(names: Sequence[str], batch: int, count: int, offset: int) -> list[list[str]]:
    n = len(names)
    return [[names[(offset + i * batch + j) % n] for j in range(batch)] for i in range(count)]


def _measure_cell(run, names, batch: int, threads: int, iterations: int, warmup: int, reps: int) -> Cell:
    rates = []
    for rep in range(reps):
        # each worker owns a private shard of input batches
        shards = [_batches(names, batch, warmup + iterations, offset=(w * 7919 + rep * 104729)) for w in range(threads)]
        for shard in shards:
            for b in shard[:warmup]:
                run(b)
        if threads == 1:
            t0 = time.perf_counter()
            for b in shards[0][warmup:]:
                run(b)
            wall = time.perf_counter() - t0
        else:
            barrier = threading.Barrier(threads + 1)
            errors: list[BaseException] = []

            def work(shard):
                barrier.wait()
                try:
                    for b in shard[warmup:]:
                        run(b)
                except BaseException as exc:  # surfaced after join
                    errors.append(exc)

            workers = [threading.Thread(target=work, args=(s,)) for s in shards]
            for w in workers:
                w.start()
            barrier.wait()
            t0 = time.perf_counter()
            for w in workers:
                w.join()
            wall = time.perf_counter() - t0
            if errors:
                raise errors[0]
        rates.append(threads * iterations * batch / wall)
    return Cell(batch, threads, statistics.median(rates), min(rates), max(rates), reps, iterations)


def latency(run, names: Sequence[str], samples: int = 200, warmup: int = 3) -> dict[str, float]:
    """Single-name end-to-end latency percentiles in milliseconds."""
    for i in range(warmup):
        run([names[i % len(names)]])
    times = []
    for i in range(samples):
        t0 = time.perf_counter()
        run([names[i % len(names)]])
        times.append((time.perf_counter() - t0) * 1e3)
    p50, p95, p99 = np.percentile(times, [50, 95, 99])
    return {"p50": float(p50), "p95": float(p95), "p99": float(p99), "samples": samples}


def _cpu_seconds() -> float:
    r = resource.getrusage(resource.RUSAGE_SELF)
    return r.ru_utime + r.ru_stime


def bench_run(
    model,
    names: Sequence[str],
    batch_sizes: Sequence[int] = DEFAULT_BATCHES,
    threads: Sequence[int] = (1,),
    iterations: int | None = None,
    min_samples: int = 1024,
    reps: int = 3,
    warmup: int = 3,
    watts_per_core: float = DEFAULT_WATTS_PER_CORE,
    latency_samples: int = 200,
    label: str = "model",
    vocab: Vocab | None = None,
) -> BenchReport:
    """Measure every (batch, threads) cell; each cell is the median of ``reps`` runs.

    Without ``iterations``, each repetition runs ``ceil(min_samples / batch)``
    batches per worker.
    """
    if reps < 3:
        raise ValueError("at least 3 repetitions per cell are required")
    if warmup < 1:
        raise ValueError("at least one warmup batch per cell is required")
    if not names:
        raise ValueError("no input names")
    hw = hardware_threads()
    notes = []
    for t in threads:
        if t > hw:
            msg = f"{t} threads requested but only {hw} hardware threads are available"
            log.warning(msg)
            notes.append(msg)
    run = make_runner(model, vocab)
    cells = []
    cpu0 = _cpu_seconds()
    for t in threads:
        # one BLAS/torch thread per worker; parallelism comes from the workers
        with threadpool_limits(limits=1):
            _limit_torch_threads(1)
            for b in batch_sizes:
                it = iterations or max(1, -(-min_samples // b))
                cells.append(_measure_cell(run, names, b, t, it, warmup, reps))
    with threadpool_limits(limits=1):
        _limit_torch_threads(1)
        lat = latency(run, names, latency_samples)
    cpu = _cpu_seconds() - cpu0
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    return BenchReport(label, cells, lat, peak, cpu, watts_per_core, warmup, reps, hw, notes)


def speedup(fast: BenchReport, slow: BenchReport, batch: int, threads: int = 1) -> float:
    return fast.cell(batch, threads).samples_per_second / slow.cell(batch, threads).samples_per_second
