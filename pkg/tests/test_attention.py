import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from objprune.attention import (
    AttentionStack,
    ImportanceMap,
    aggregate_mean,
    build_oracle,
    component_scores,
    prompt_importance,
    self_importance,
    sharpen,
    text_importance,
)
from objprune.errors import (
    DegenerateAttention,
    EmptyGeneration,
    EmptyPrompt,
    EmptyStack,
    ZeroConfidence,
)
from oracles import mean_loop, prompt_loop, random_causal_stochastic, self_loop, text_loop


def random_stack(rng, n, m, t, L, H):
    N = 3 * n + m + t
    mats = np.stack([np.stack([random_causal_stochastic(rng, N) for _ in range(H)]) for _ in range(L)])
    return AttentionStack(mats, n, m, t, rng.uniform(0.5, 1.0, t))


# -- aggregate_mean ----------------------------------------------------------

def test_mean_single_matrix_is_identity(rng):
    m = random_causal_stochastic(rng, 7)
    np.testing.assert_array_equal(aggregate_mean(m[None, None]), m)


def test_mean_two_layers():
    mats = np.array([[[[1, 0], [0.4, 0.6]]], [[[1, 0], [0.6, 0.4]]]])
    expected = mean_loop(mats)
    np.testing.assert_allclose(expected, [[1, 0], [0.5, 0.5]], atol=1e-15)
    np.testing.assert_allclose(aggregate_mean(mats), expected, atol=1e-15)


def test_mean_of_identical_layers(rng):
    m = random_causal_stochastic(rng, 6)
    mats = np.broadcast_to(m, (32, 1, 6, 6))
    np.testing.assert_allclose(aggregate_mean(mats), m, atol=1e-15)


def test_mean_matches_loop_oracle(rng):
    for _ in range(20):
        n, L, H = rng.integers(1, 9), rng.integers(1, 5), rng.integers(1, 5)
        stack = random_stack(rng, n, 2, 1, L, H)
        np.testing.assert_allclose(aggregate_mean(stack), mean_loop(stack.matrices), atol=1e-12, rtol=0)


def test_mean_empty_stack():
    with pytest.raises(EmptyStack):
        aggregate_mean(np.zeros((0, 4, 3, 3)))


def test_mean_keeps_causal_support(rng):
    stack = random_stack(rng, 3, 2, 2, 3, 2)
    a = aggregate_mean(stack)
    assert np.all(np.triu(a, k=1) == 0)


# -- the three components ----------------------------------------------------

def test_self_identity():
    np.testing.assert_allclose(self_importance(np.eye(3), 3), [1 / 3, 1 / 2, 1])


def test_self_hand_value():
    a = np.array([[1, 0], [0.5, 0.5]])
    np.testing.assert_allclose(self_loop(a, 2), [0.75, 0.5])
    np.testing.assert_allclose(self_importance(a, 2), [0.75, 0.5])


def test_self_uses_top_left_block_only(rng):
    a = random_causal_stochastic(rng, 12)
    np.testing.assert_allclose(self_importance(a, 9), self_loop(a[:9, :9], 9), atol=1e-12)


def test_prompt_single_row(rng):
    row = rng.random((1, 6))
    np.testing.assert_array_equal(prompt_importance(row), row[0])


def test_prompt_hand_value():
    np.testing.assert_allclose(prompt_importance([[0.2, 0.8], [0.6, 0.4]]), [0.4, 0.6])


def test_prompt_uniform_rows():
    np.testing.assert_allclose(prompt_importance(np.full((4, 5), 0.2)), np.full(5, 0.2))


def test_prompt_empty():
    with pytest.raises(EmptyPrompt):
        prompt_importance(np.zeros((0, 3)))


def test_text_single_row(rng):
    row = rng.random((1, 6))
    np.testing.assert_allclose(text_importance(row, [0.37]), row[0], atol=1e-15)


def test_text_hand_value():
    np.testing.assert_allclose(text_importance([[0.2, 0.8], [0.6, 0.4]], [3, 1]), [0.3, 0.7])


def test_text_equal_confidence_is_plain_mean(rng):
    block = rng.random((5, 9))
    np.testing.assert_allclose(text_importance(block, np.full(5, 0.8)), block.mean(axis=0), atol=1e-15)


def test_text_errors():
    with pytest.raises(EmptyGeneration):
        text_importance(np.zeros((0, 3)), [])
    with pytest.raises(ZeroConfidence):
        text_importance(np.ones((2, 3)), [0.0, 0.0])


def test_components_match_loop_oracles_1000(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 5))
        m = int(rng.integers(1, 4))
        t = int(rng.integers(1, 4))
        N = 3 * n + m + t
        a = random_causal_stochastic(rng, N)
        v = 3 * n
        s = rng.uniform(0.5, 1.0, t)
        np.testing.assert_allclose(self_importance(a, v), self_loop(a, v), atol=1e-12, rtol=0)
        np.testing.assert_allclose(prompt_importance(a[v:v + m, :v]), prompt_loop(a[v:v + m, :v]), atol=1e-12, rtol=0)
        np.testing.assert_allclose(text_importance(a[v + m:, :v], s), text_loop(a[v + m:, :v], s), atol=1e-12, rtol=0)


# -- build_oracle --------------------------------------------------------------

def _stack_with_components(n, m, t):
    stack = AttentionStack(np.zeros((1, 1, 3 * n + m + t, 3 * n + m + t)), n, m, t, np.ones(t))
    return stack


def test_oracle_scale_invariance(rng):
    from objprune.attention import ComponentScores

    v = rng.random(9)
    comps = ComponentScores(v, v, v)
    out = build_oracle(_stack_with_components(3, 1, 1), comps)
    pooled = v.reshape(3, 3).mean(axis=1)
    np.testing.assert_allclose(out.scores, pooled / pooled.sum())


def test_oracle_hand_pooling():
    from objprune.attention import ComponentScores

    z = np.zeros(6)
    comps = ComponentScores(np.array([0.1, 0.2, 0.3, 0.4, 0.4, 0.4]), z, z)
    out = build_oracle(_stack_with_components(2, 1, 1), comps)
    np.testing.assert_allclose(out.scores, [1 / 3, 2 / 3])


def test_oracle_degenerate():
    from objprune.attention import ComponentScores

    z = np.zeros(6)
    with pytest.raises(DegenerateAttention):
        build_oracle(_stack_with_components(2, 1, 1), ComponentScores(z, z, z))


def test_oracle_is_simplex_and_triplet_symmetric(rng):
    for _ in range(50):
        n = int(rng.integers(1, 6))
        stack = random_stack(rng, n, 2, 2, 2, 2)
        stack.validate()
        a = build_oracle(stack).scores
        assert np.all(a >= 0) and abs(a.sum() - 1) < 1e-9
        comps = component_scores(stack)
        k = int(rng.integers(n))
        perm = np.arange(3 * n)
        perm[3 * k:3 * k + 3] = rng.permutation(perm[3 * k:3 * k + 3])
        from objprune.attention import ComponentScores

        shuffled = ComponentScores(comps.self_scores[perm], comps.prompt_scores[perm], comps.text_scores[perm])
        np.testing.assert_allclose(build_oracle(stack, shuffled).scores, a, atol=1e-15)


# -- sharpen -----------------------------------------------------------------

def test_sharpen_identity(rng):
    a = rng.dirichlet(np.ones(5))
    np.testing.assert_allclose(sharpen(a, 1.0).scores, a)


def test_sharpen_hand_value():
    np.testing.assert_allclose(sharpen([0.25, 0.75], 0.5).scores, [0.1, 0.9])


def test_sharpen_uniform():
    np.testing.assert_allclose(sharpen(np.full(4, 0.25), 0.3).scores, np.full(4, 0.25))


def test_sharpen_zero_stays_zero():
    out = sharpen([0.0, 0.4, 0.6], 0.5).scores
    assert out[0] == 0.0


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=20, unique=True),
    st.floats(0.05, 5.0),
)
def test_sharpen_preserves_ranking(values, temperature):
    a = np.array(values) / np.sum(values)
    out = sharpen(a, temperature).scores
    lo, hi = np.meshgrid(np.arange(len(a)), np.arange(len(a)), indexing="ij")
    below = a[lo] < a[hi]
    # no pair is ever inverted
    assert not np.any(below & (out[lo] > out[hi]))
    # pairs separated by more than rounding keep their strict order
    clear = below & (a[hi] - a[lo] > 1e-9 * a[hi])
    assert np.all(out[lo][clear] < out[hi][clear])


# -- serialization -------------------------------------------------------------

def test_stack_json_round_trip(rng):
    stack = random_stack(rng, 2, 2, 1, 2, 3)
    back = AttentionStack.from_json(json.loads(json.dumps(stack.to_json())))
    np.testing.assert_array_equal(back.matrices, stack.matrices)
    np.testing.assert_array_equal(back.confidences, stack.confidences)
    assert (back.n, back.m, back.t) == (2, 2, 1)


def test_stack_binary_round_trip(rng, tmp_path):
    stack = random_stack(rng, 2, 1, 2, 2, 2)
    stack.save(tmp_path / "stack.bin")
    back = AttentionStack.load(tmp_path / "stack.bin")
    np.testing.assert_array_equal(back.matrices, stack.matrices)
    manifest = json.loads((tmp_path / "stack.bin.json").read_text())
    assert manifest["layout"] == "row-major" and manifest["dtype"] == "<f8"


def test_importance_map_json():
    m = ImportanceMap([0.2, 0.8])
    assert m.to_json() == {"scores": [0.2, 0.8]}
    np.testing.assert_array_equal(ImportanceMap.from_json(m.to_json()).scores, m.scores)


def test_validate_rejects_non_causal(rng):
    stack = random_stack(rng, 1, 1, 1, 1, 1)
    stack.matrices[0, 0, 0, 1] = 0.1
    with pytest.raises(ValueError):
        stack.validate()
