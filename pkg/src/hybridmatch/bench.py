"""Per-stage wall-clock timing of the match pipeline across image sizes."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .model import Model, StageTimings
from .training.synth import synth_pair


@dataclass
class BenchRow:
    size: int
    stage: str
    median_ms: float
    runs: int


def bench(model: Model, sizes=(128, 256, 512), runs: int = 20, warmup: int = 2, seed: int = 0,
          single_thread: bool = False) -> list[BenchRow]:
    """Median per-stage milliseconds over ``runs`` timed calls after ``warmup`` untimed ones."""
    rows = []
    limit = threadpool_limits(1) if single_thread else contextlib.nullcontext()
    with limit:
        for size in sizes:
            img_a, img_b, _ = synth_pair(seed, size)
            for _ in range(warmup):
                model.match_pair(img_a, img_b)
            samples = {s: [] for s in StageTimings.STAGES}
            for _ in range(runs):
                _, t = model.match_pair(img_a, img_b)
                for s, ms in t.rows():
                    samples[s].append(ms)
            rows += [BenchRow(size, s, float(np.median(v)), runs) for s, v in samples.items()]
    return rows


def bench_csv(rows: list[BenchRow]) -> str:
    return "size,stage,median_ms,runs\n" + "".join(
        f"{r.size},{r.stage},{r.median_ms:.3f},{r.runs}\n" for r in rows)
