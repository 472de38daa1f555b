"""Latency and throughput of sampled generation."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..model import SamplingConfig
from .export import DeployModel, memory_report

BENCH_FIELDS = ("mean_ms", "p50_ms", "p95_ms", "seq_per_s", "bytes_total")


@dataclass
class BenchResult:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    seq_per_s: float
    bytes_total: int
    repeats: int
    batch: int
    total_s: float
    times_ms: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def summarize(times_s, batch: int, bytes_total: int) -> BenchResult:
    """Per-sequence statistics from per-repeat wall times (seconds)."""
    t = np.asarray(times_s, dtype=np.float64)
    if t.size == 0:
        raise ValueError("no measurements")
    per_seq_ms = t * 1000.0 / batch
    total = float(t.sum())
    return BenchResult(
        mean_ms=float(per_seq_ms.mean()),
        p50_ms=float(np.percentile(per_seq_ms, 50)),
        p95_ms=float(np.percentile(per_seq_ms, 95)),
        seq_per_s=(t.size * batch) / total if total > 0 else float("inf"),
        bytes_total=int(bytes_total),
        repeats=int(t.size),
        batch=batch,
        total_s=total,
        times_ms=per_seq_ms.tolist(),
    )


def bench(deploy: DeployModel, src_ids, repeats: int = 10, warmup: int = 1, batch: int = 1,
          temperature: float = 0.7, max_new_tokens: int = 64, n_samples: int = 1,
          seed: int = 0) -> BenchResult:
    """Time ``repeats`` sampled generations of ``batch`` sequences each.

    Warmup iterations run first and are not measured. Repeats run one after
    another.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    src = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
    if src.shape[0] < batch:
        src = np.resize(src, (batch, src.shape[1]))
    src = src[:batch]
    seqs = batch * n_samples
    for i in range(warmup):
        deploy.generate(src, SamplingConfig(temperature, max_new_tokens, seed + i), n_samples)
    times = []
    for i in range(repeats):
        sampling = SamplingConfig(temperature, max_new_tokens, seed + warmup + i)
        t0 = time.perf_counter()
        deploy.generate(src, sampling, n_samples)
        times.append(time.perf_counter() - t0)
    return summarize(times, seqs, memory_report(deploy).total)
