"""Multiply-add counts and timings for full 2D versus axial attention.

Counts come from the instrumented contraction kernels, not from formulas, and
are compared against the closed forms below. The attention stage (scores plus
value aggregation) costs ``2 (HW)^2 d`` for full attention and
``2 HW (H + W) d`` for a height+width axial pair. Per query that is ``HW``
versus ``H + W`` keys, which is the sense in which axial attention is linear
in the number of pixels.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import astuple, dataclass

import numpy as np

from . import tensor as T
from .attention import AxialAttentionLayer, Axis, Full2DAttentionLayer

VARIANTS = ("full2d", "axial")
CSV_HEADER = ("variant", "H", "W", "d_model", "heads", "flops", "wall_ns_median")


class UnknownVariantError(ValueError):
    pass


@dataclass(frozen=True)
class FlopCount:
    score: int
    projection: int

    @property
    def total(self) -> int:
        return self.score + self.projection


@dataclass(frozen=True)
class BenchRecord:
    variant: str
    H: int
    W: int
    d_model: int
    heads: int
    flops: int
    wall_ns: int


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise UnknownVariantError(f"unknown variant {variant!r}; valid: {', '.join(VARIANTS)}")
    return variant


def closed_form(variant: str, H: int, W: int, d_model: int, heads: int = 1) -> FlopCount:
    check_variant(variant)
    hw = H * W
    if variant == "full2d":
        return FlopCount(score=2 * hw * hw * d_model, projection=4 * hw * d_model * d_model)
    return FlopCount(score=2 * hw * (H + W) * d_model, projection=8 * hw * d_model * d_model)


def _layers(variant: str, H: int, W: int, d_model: int, heads: int, seed: int):
    rng = np.random.default_rng(seed)
    if check_variant(variant) == "full2d":
        return [Full2DAttentionLayer.init(d_model, heads, H, W, rng, relpos=False)]
    return [
        AxialAttentionLayer.init(Axis.HEIGHT, d_model, heads, H, rng, relpos=False),
        AxialAttentionLayer.init(Axis.WIDTH, d_model, heads, W, rng, relpos=False),
    ]


def _run(layers, x):
    for layer in layers:
        x = layer(x)
    return x


def count_flops(variant: str, H: int, W: int, d_model: int, heads: int = 1, seed: int = 0) -> FlopCount:
    """Run the plain (position-free) attention once and read the kernel counters."""
    layers = _layers(variant, H, W, d_model, heads, seed)
    x = np.random.default_rng(seed + 1).standard_normal((d_model, H, W))
    with T.counting_flops() as counter:
        _run(layers, x)
    return FlopCount(score=counter["score"], projection=counter["projection"])


def run_sweep(sizes, variants, trials: int = 5, d_model: int = 8, heads: int = 2, seed: int = 0) -> list[BenchRecord]:
    """Square ``N x N`` inputs for every size and variant; flops are the attention stage."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    for n in sizes:
        if n < 4:
            raise ValueError(f"sizes must be >= 4, got {n}")
    variants = [check_variant(v) for v in variants]
    records = []
    for n in sizes:
        for variant in variants:
            layers = _layers(variant, n, n, d_model, heads, seed)
            x = np.random.default_rng(seed + 1).standard_normal((d_model, n, n))
            times, counts = [], set()
            for _ in range(trials):
                with T.counting_flops() as counter:
                    start = time.perf_counter_ns()
                    _run(layers, x)
                    times.append(time.perf_counter_ns() - start)
                counts.add(counter["score"])
            if len(counts) != 1:
                raise RuntimeError(f"flop counter not deterministic for {variant} at {n}x{n}: {counts}")
            records.append(BenchRecord(variant, n, n, d_model, heads, counts.pop(), int(statistics.median(times))))
    return records


def write_csv(records: list[BenchRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(astuple(r))


def loglog_slope(sizes, flops) -> float:
    """Least-squares slope of ``log flops`` against ``log N``."""
    return float(np.polyfit(np.log(np.asarray(sizes, float)), np.log(np.asarray(flops, float)), 1)[0])
