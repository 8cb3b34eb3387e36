"""Parallel-vs-sequential prompting benchmark on the bundled CT phantom."""

from __future__ import annotations

import io
import csv
import time
from dataclasses import dataclass

from .pipeline import PipelineConfig, desk_config, run
from .phantom import bench_volume


@dataclass
class BenchRecord:
    n_classes: int
    mode: str
    wall_ms: float
    forwards: int
    peak_bytes: int


def run_benchmark(class_counts=(1, 4, 24), modes=("parallel", "sequential"), repeats: int = 1,
                  cfg: PipelineConfig | None = None) -> list[BenchRecord]:
    cfg = cfg or desk_config()
    volume, prompts = bench_volume()
    records = []
    for n in class_counts:
        subset = prompts[:n]
        for mode in modes:
            walls, forwards, peaks = [], 0, 0
            for _ in range(max(1, repeats)):
                t0 = time.perf_counter()
                result = run(volume, subset, cfg, execution=mode)
                walls.append((time.perf_counter() - t0) * 1000.0)
                forwards = result.report.backbone_forwards
                peaks = result.report.peak_bytes
            records.append(BenchRecord(n_classes=n, mode=mode, wall_ms=min(walls),
                                       forwards=forwards, peak_bytes=peaks))
    return records


def to_csv(records: list[BenchRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["n_classes", "mode", "wall_ms", "forwards", "peak_bytes"])
    for r in records:
        writer.writerow([r.n_classes, r.mode, f"{r.wall_ms:.3f}", r.forwards, r.peak_bytes])
    return buf.getvalue()


def summary(records: list[BenchRecord]) -> dict:
    """Per class count: sequential/parallel wall-clock and forward ratios."""
    by_n: dict = {}
    for r in records:
        by_n.setdefault(r.n_classes, {})[r.mode] = r
    out = {}
    for n, modes in sorted(by_n.items()):
        if "parallel" in modes and "sequential" in modes:
            par, seq = modes["parallel"], modes["sequential"]
            out[n] = {
                "speedup": seq.wall_ms / par.wall_ms if par.wall_ms > 0 else float("inf"),
                "forward_ratio": seq.forwards / par.forwards if par.forwards else float("inf"),
            }
    return out
