import json

import numpy as np
import pytest

from objprune.errors import EmptyBatch
from objprune.sap import FlopsModel, PruningStrategy, fixed_ratio_baseline, visual_flops
from objprune.search import (
    SearchConfig,
    batch_cost,
    bisect,
    init_baseline_from_static,
    iteration_bound,
    scaled_strategy,
    search,
)
from oracles import random_simplex

SMALL = FlopsModel(depth=6, d_model=32, d_ff=80)


def random_batch(rng, size=8, n_max=30):
    return [(random_simplex(rng, int(rng.integers(2, n_max))), int(rng.integers(4, 20))) for _ in range(size)]


# -- baseline thresholds --------------------------------------------------------

def test_baseline_uniform():
    np.testing.assert_allclose(init_baseline_from_static([2], [np.full(4, 0.25)]), [0.5])


def test_baseline_takes_batch_max():
    batch = [np.array([0.4, 0.2, 0.2, 0.2]), np.array([0.6, 0.3, 0.1])]
    np.testing.assert_allclose(init_baseline_from_static([2], batch), [0.9])


def test_baseline_full_count_is_one(rng):
    a = random_simplex(rng, 6)
    np.testing.assert_allclose(init_baseline_from_static([6, 6], [a]), [1.0, 1.0])


def test_baseline_empty_batch():
    with pytest.raises(EmptyBatch):
        init_baseline_from_static([1], [])


def test_baseline_from_fixed_ratio_profile(rng):
    batch = [random_simplex(rng, 20) for _ in range(5)]
    counts = fixed_ratio_baseline(batch[0], 2, 0.8, 6).counts
    theta = init_baseline_from_static(counts, batch)
    assert theta[0] == 1.0 and np.all(theta[2:] == theta[2])


# -- batch cost ------------------------------------------------------------------

def test_cost_all_ones_is_unpruned(rng):
    batch = random_batch(rng)
    assert batch_cost(batch, PruningStrategy(np.ones(6)), SMALL) == batch_cost(batch, None, SMALL)


def test_cost_all_zeros_keeps_one_object(rng):
    batch = random_batch(rng)
    expected = sum(
        float(np.sum(SMALL.layer_flops(np.full(6, 3.0 + tau)) - SMALL.layer_flops(np.full(6, float(tau)))))
        for _, tau in batch
    )
    assert batch_cost(batch, PruningStrategy(np.zeros(6)), SMALL) == pytest.approx(expected, rel=1e-15)


def test_cost_monotone_in_alpha_100_batches(rng):
    for _ in range(100):
        batch = random_batch(rng, size=4)
        base = np.sort(rng.random(6))[::-1]
        alphas = np.sort(rng.uniform(0, 2, 6))
        costs = [batch_cost(batch, scaled_strategy(a, base), SMALL) for a in alphas]
        assert all(c0 <= c1 for c0, c1 in zip(costs, costs[1:]))


def test_scaled_strategy_clamps():
    s = scaled_strategy(2.0, np.array([0.8, 0.3]))
    np.testing.assert_array_equal(s.thresholds, [1.0, 0.6])


# -- bisection -------------------------------------------------------------------

def test_linear_cost_matches_grid_oracle():
    alpha, feasible, iters, _ = bisect(lambda a: a, 0.37, 0.0, 1.0, 1e-6)
    grid = np.linspace(0.0, 1.0, 1_000_001)
    oracle = grid[grid <= 0.37].max()
    assert feasible
    assert abs(alpha - oracle) <= 1e-6
    assert iters <= iteration_bound(0.0, 1.0, 1e-6)


def test_whole_interval_feasible():
    alpha, feasible, _, _ = bisect(lambda a: a, 10.0, 0.0, 2.0, 1e-4)
    assert feasible and abs(alpha - 2.0) <= 1e-4


def test_infeasible_budget():
    alpha, feasible, iters, trace = bisect(lambda a: a + 1.0, 0.5, 0.0, 2.0, 1e-4)
    assert not feasible and alpha == 0.0 and iters == 0 and trace == []


def test_iteration_bound_holds(rng):
    for _ in range(50):
        eps = 10.0 ** rng.uniform(-8, -1)
        hi = float(rng.uniform(0.5, 5))
        budget = float(rng.uniform(0, hi))
        _, _, iters, _ = bisect(lambda a: a, budget, 0.0, hi, eps)
        assert iters <= iteration_bound(0.0, hi, eps)


def test_step_cost_tightness(rng):
    steps = np.sort(rng.uniform(0, 2, 15))

    def f(a):
        return float(np.searchsorted(steps, a, side="right"))

    for budget in range(15):
        alpha, feasible, _, _ = bisect(f, budget, 0.0, 2.0, 1e-6)
        assert feasible and f(alpha) <= budget
        if alpha + 1e-6 <= 2.0:
            assert f(alpha + 1e-6) > budget


# -- full search -----------------------------------------------------------------

def test_search_respects_budget_and_is_tight(rng):
    cfg = SearchConfig(epsilon=1e-4, budget=0.3)
    for _ in range(20):
        batch = random_batch(rng)
        base = init_baseline_from_static(fixed_ratio_baseline(batch[0][0], 2, 0.5, 6).counts, [a for a, _ in batch])
        res = search(batch, base, cfg, SMALL)
        assert res.feasible
        assert res.achieved_flops <= res.budget_flops
        up = scaled_strategy(res.alpha_star + cfg.epsilon, base)
        if res.alpha_star + cfg.epsilon <= cfg.alpha_max:
            assert batch_cost(batch, up, SMALL) > res.budget_flops
        assert res.iterations <= iteration_bound(cfg.alpha_min, cfg.alpha_max, cfg.epsilon)


def test_search_is_pure(rng):
    batch = random_batch(rng)
    base = np.full(6, 0.5)
    a = search(batch, base, SearchConfig(), SMALL)
    b = search(batch, base, SearchConfig(), SMALL)
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())
    assert a.trace_csv() == b.trace_csv()


def test_search_absolute_budget(rng):
    batch = random_batch(rng)
    full = batch_cost(batch, None, SMALL)
    res = search(batch, np.full(6, 0.6), SearchConfig(budget=0.5 * full, budget_is_fraction=False), SMALL)
    assert res.budget_flops == 0.5 * full
    assert res.achieved_flops <= res.budget_flops


def test_search_infeasible_flag(rng):
    batch = random_batch(rng)
    res = search(batch, np.full(6, 0.6), SearchConfig(budget=1.0, budget_is_fraction=False), SMALL)
    assert not res.feasible and res.alpha_star == 0.0


def test_search_empty_batch():
    with pytest.raises(EmptyBatch):
        search([], np.ones(6), SearchConfig(), SMALL)


def test_search_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(alpha_min=1.0, alpha_max=1.0)
    with pytest.raises(ValueError):
        SearchConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        SearchConfig(budget=0.0)


def test_trace_csv_header(rng):
    res = search(random_batch(rng), np.full(6, 0.5), SearchConfig(epsilon=0.5), SMALL)
    lines = res.trace_csv().splitlines()
    assert lines[0] == "iteration,alpha_low,alpha_high,cost"
    assert len(lines) == res.iterations + 1


def test_visual_flops_consistent_with_cost(rng):
    batch = random_batch(rng, size=1)
    a, tau = batch[0]
    assert batch_cost(batch, None, SMALL) == visual_flops(SMALL, len(a), tau)
