"""Bisection search over the threshold scale under a FLOPs budget."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyBatch
from .sap import FlopsModel, PruningStrategy, build_schedule, descending_order, visual_flops

# (predicted importance, text length) for one validation sample
BatchItem = tuple[np.ndarray, int]


@dataclass(frozen=True)
class SearchConfig:
    epsilon: float = 1e-4
    alpha_min: float = 0.0
    alpha_max: float = 2.0
    budget: float = 0.1
    budget_is_fraction: bool = True
    max_iters: int = 200
    min_retain: int = 1
    monotone_depth: bool = True

    def __post_init__(self):
        if not self.alpha_min < self.alpha_max:
            raise ValueError("alpha_min must be below alpha_max")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.budget > 0:
            raise ValueError("budget must be positive")


@dataclass
class SearchResult:
    alpha_star: float
    strategy: PruningStrategy
    achieved_flops: float
    budget_flops: float
    iterations: int
    feasible: bool
    trace: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "alpha_star": self.alpha_star,
            "strategy": self.strategy.to_json(),
            "achieved_flops": self.achieved_flops,
            "budget_flops": self.budget_flops,
            "iterations": self.iterations,
            "feasible": self.feasible,
        }

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "alpha_low", "alpha_high", "cost"])
        for row in self.trace:
            w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])
        return buf.getvalue()


def init_baseline_from_static(static_counts: Sequence[int], batch_scores: Sequence[np.ndarray]) -> np.ndarray:
    """Batch-max mass of the top ``r_k`` predicted scores, per layer.

    Counts above a sample's object count are clamped to that count.
    """
    if len(batch_scores) == 0:
        raise EmptyBatch("need at least one sample")
    counts = np.asarray(static_counts, dtype=np.int64)
    if np.any(counts < 1):
        raise ValueError("static retention counts must be >= 1")
    theta = np.zeros(len(counts))
    for a in batch_scores:
        a = np.asarray(a, dtype=np.float64)
        csum = np.cumsum(a[descending_order(a)])
        mass = csum[np.minimum(counts, len(a)) - 1]
        np.maximum(theta, mass, out=theta)
    return np.minimum(theta, 1.0)


def scaled_strategy(alpha: float, base_thresholds: np.ndarray, min_retain: int = 1, monotone_depth: bool = True) -> PruningStrategy:
    return PruningStrategy(np.clip(alpha * np.asarray(base_thresholds), 0.0, 1.0), min_retain, monotone_depth)


def batch_cost(batch: Sequence[BatchItem], strategy: PruningStrategy | None, model: FlopsModel) -> float:
    """Summed visual FLOPs over the batch; ``strategy=None`` means no pruning."""
    total = 0.0
    for scores, text_len in batch:
        schedule = None if strategy is None else build_schedule(scores, strategy)
        total += visual_flops(model, len(scores), text_len, schedule)
    return total


def bisect(cost: Callable[[float], float], budget: float, alpha_min: float, alpha_max: float,
           epsilon: float, max_iters: int = 200):
    """Largest alpha (up to epsilon) with ``cost(alpha) <= budget``.

    Returns ``(alpha, feasible, iterations, trace)``. ``cost`` must be
    non-decreasing.
    """
    if cost(alpha_min) > budget:
        return alpha_min, False, 0, []
    low, high = alpha_min, alpha_max
    trace = []
    it = 0
    while high - low > epsilon and it < max_iters:
        mid = 0.5 * (low + high)
        c = cost(mid)
        if c <= budget:
            low = mid
        else:
            high = mid
        it += 1
        trace.append((it, low, high, c))
    return low, True, it, trace


def iteration_bound(alpha_min: float, alpha_max: float, epsilon: float) -> int:
    return math.ceil(math.log2((alpha_max - alpha_min) / epsilon)) + 1


def search(batch: Sequence[BatchItem], base_thresholds, config: SearchConfig, model: FlopsModel) -> SearchResult:
    if len(batch) == 0:
        raise EmptyBatch("validation batch is empty")
    base = np.asarray(base_thresholds, dtype=np.float64)
    if config.budget_is_fraction:
        budget = config.budget * batch_cost(batch, None, model)
    else:
        budget = config.budget

    def f(alpha):
        return batch_cost(batch, scaled_strategy(alpha, base, config.min_retain, config.monotone_depth), model)

    alpha, feasible, iters, trace = bisect(
        f, budget, config.alpha_min, config.alpha_max, config.epsilon, config.max_iters
    )
    strategy = scaled_strategy(alpha, base, config.min_retain, config.monotone_depth)
    return SearchResult(
        alpha_star=alpha,
        strategy=strategy,
        achieved_flops=batch_cost(batch, strategy, model),
        budget_flops=budget,
        iterations=iters,
        feasible=feasible,
        trace=trace,
    )
