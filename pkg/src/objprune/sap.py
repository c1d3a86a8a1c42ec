"""Sample-adaptive pruning: cumulative-threshold retention and FLOPs accounting.

Objects are indexed from 0 and layers from 0. An object is pruned as a unit:
keeping it keeps all three of its visual tokens.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

# Slack on cumulative sums so that theta = 1 keeps all n objects despite
# rounding in the prefix sums.
CUMSUM_TOL = 1e-12


@dataclass
class PruningStrategy:
    thresholds: np.ndarray
    min_retain: int = 1
    monotone_depth: bool = True

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if self.thresholds.ndim != 1:
            raise ValueError("thresholds must be a vector")
        if np.any(self.thresholds < 0) or np.any(self.thresholds > 1):
            raise ValueError("thresholds must lie in [0, 1]")
        if self.min_retain < 0:
            raise ValueError("min_retain must be non-negative")

    @property
    def depth(self) -> int:
        return len(self.thresholds)

    def to_json(self) -> dict:
        return {
            "thresholds": self.thresholds.tolist(),
            "min_retain": int(self.min_retain),
            "monotone_depth": bool(self.monotone_depth),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PruningStrategy":
        return cls(obj["thresholds"], int(obj.get("min_retain", 1)), bool(obj.get("monotone_depth", True)))


@dataclass
class PruneSchedule:
    """Per-layer retained objects: layer ``k`` keeps ``order[:counts[k]]``."""

    order: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.order = np.asarray(self.order, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)

    @property
    def n(self) -> int:
        return len(self.order)

    @property
    def depth(self) -> int:
        return len(self.counts)

    def retained(self, layer: int) -> np.ndarray:
        return np.sort(self.order[: self.counts[layer]])

    @property
    def final_retained(self) -> np.ndarray:
        return self.retained(self.depth - 1)

    def is_nested(self) -> bool:
        return bool(np.all(np.diff(self.counts) <= 0))

    def average_pruning_ratio(self) -> float:
        return float(np.mean(1.0 - self.counts / self.n))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "retained_count", "retained_object_ids"])
        for k in range(self.depth):
            w.writerow([k, int(self.counts[k]), " ".join(str(i) for i in self.retained(k))])
        return buf.getvalue()


@dataclass(frozen=True)
class FlopsModel:
    """Decoder-layer cost model of the target language model.

    Per layer with ``N`` tokens: ``4 N d^2`` for the Q/K/V/O projections,
    ``2 N^2 d`` for scores and mixing, ``2 N d d_ff`` for the feed-forward.
    """

    depth: int = 32
    d_model: int = 4096
    d_ff: int = 11008

    def __post_init__(self):
        if min(self.depth, self.d_model, self.d_ff) <= 0:
            raise ValueError("FlopsModel dimensions must be positive")

    def layer_flops(self, tokens):
        N = np.asarray(tokens, dtype=np.float64)
        d = float(self.d_model)
        return 4.0 * N * d * d + 2.0 * N * N * d + 2.0 * N * d * self.d_ff


def descending_order(scores) -> np.ndarray:
    """Permutation sorting scores high to low, ties by ascending index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def retention_count(scores, theta: float, min_retain: int = 1) -> int:
    """Largest prefix of the sorted scores whose mass stays within ``theta``."""
    a = np.asarray(scores, dtype=np.float64)
    n = len(a)
    csum = np.cumsum(a[descending_order(a)])
    r = int(np.count_nonzero(csum <= theta + CUMSUM_TOL))
    return min(max(r, min_retain), n)


def build_schedule(scores, strategy: PruningStrategy) -> PruneSchedule:
    a = np.asarray(scores, dtype=np.float64)
    order = descending_order(a)
    csum = np.cumsum(a[order])
    n = len(a)
    counts = np.count_nonzero(csum[None, :] <= strategy.thresholds[:, None] + CUMSUM_TOL, axis=1)
    counts = np.clip(counts, min(strategy.min_retain, n), n)
    if strategy.monotone_depth:
        counts = np.minimum.accumulate(counts)
    return PruneSchedule(order, counts)


def keep_all_schedule(n: int, depth: int) -> PruneSchedule:
    return PruneSchedule(np.arange(n), np.full(depth, n))


def fixed_ratio_baseline(scores, drop_layer: int, ratio: float, depth: int, min_retain: int = 1) -> PruneSchedule:
    """Keep everything before ``drop_layer``, then the top ``ceil((1-ratio) n)``."""
    a = np.asarray(scores, dtype=np.float64)
    n = len(a)
    # round away float noise such as (1 - 0.7) * 10 = 3.0000000000000004
    keep = math.ceil(round((1.0 - ratio) * n, 9))
    keep = min(max(keep, min_retain), n)
    counts = np.where(np.arange(depth) < drop_layer, n, keep)
    return PruneSchedule(descending_order(a), counts)


def visual_tokens_per_layer(schedule: PruneSchedule | None, n: int, depth: int) -> np.ndarray:
    if schedule is None:
        return np.full(depth, 3 * n, dtype=np.float64)
    if schedule.depth != depth:
        raise ValueError(f"schedule depth {schedule.depth} != model depth {depth}")
    return 3.0 * schedule.counts


def visual_flops(model: FlopsModel, n: int, text_len: int, schedule: PruneSchedule | None = None) -> float:
    """FLOPs attributable to visual tokens, summed over layers."""
    v = visual_tokens_per_layer(schedule, n, model.depth)
    tau = float(text_len)
    return float(np.sum(model.layer_flops(v + tau) - model.layer_flops(tau)))


def flops_reduction(model: FlopsModel, n: int, text_len: int, schedule: PruneSchedule) -> float:
    full = visual_flops(model, n, text_len, None)
    return 1.0 - visual_flops(model, n, text_len, schedule) / full


def average_pruning_ratio(drop_layer: int, ratio: float, depth: int) -> float:
    """Token-averaged fraction pruned when ``ratio`` is dropped from ``drop_layer`` on."""
    if not 1 <= drop_layer <= depth:
        raise ValueError("drop_layer must be in [1, depth]")
    if not 0 <= ratio <= 1:
        raise ValueError("ratio must be in [0, 1]")
    return ratio * (depth - drop_layer) / depth
