import numpy as np
import pytest

from prunekit.errors import ContractViolationError, InsufficientLayersError
from prunekit.policy import (
    LayerPolicy,
    compute_probabilities,
    resolve_priority_list,
    sample_layers,
    update_policy,
)


def test_hand_example():
    probs = compute_probabilities(np.array([100, 300]), np.array([0.0, 0.5]), 1.0)
    np.testing.assert_allclose(probs, [100 / 250, 150 / 250])


def test_equal_inputs_uniform():
    probs = compute_probabilities(np.array([50, 50, 50]), np.array([0.2, 0.2, 0.2]), 1.0)
    np.testing.assert_allclose(probs, [1 / 3] * 3)


def test_sensitivity_above_threshold_excluded():
    probs = compute_probabilities(np.array([100, 100]), np.array([2.0, 0.1]), 1.0)
    assert probs[0] == 0.0
    assert probs[1] == 1.0


def test_all_clamped_falls_back_uniform_over_eligible():
    probs = compute_probabilities(
        np.array([10, 20, 30]), np.array([5.0, 5.0, 5.0]), 1.0,
        eligible=np.array([True, False, True]))
    np.testing.assert_allclose(probs, [0.5, 0.0, 0.5])


def test_probabilities_normalized_and_monotone():
    rng = np.random.default_rng(21)
    for _ in range(200):
        n = int(rng.integers(2, 12))
        sizes = rng.integers(1, 10_000, n).astype(float)
        sens = rng.uniform(0, 2.0, n)
        probs = compute_probabilities(sizes, sens, 1.0)
        assert probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert (probs >= 0).all()
        # equal sensitivities: larger size never gets smaller probability
        flat = compute_probabilities(sizes, np.full(n, 0.3), 1.0)
        order = np.argsort(sizes)
        assert (np.diff(flat[order]) >= -1e-15).all()


def test_empty_layer_set():
    with pytest.raises(ContractViolationError):
        compute_probabilities(np.array([]), np.array([]), 1.0)


def test_sample_degenerate():
    policy = LayerPolicy("constant", ["a", "b", "c"])
    policy.probabilities = np.array([1.0, 0.0, 0.0])
    rng = np.random.default_rng(0)
    assert all(sample_layers(policy, rng)[0] == "a" for _ in range(20))


def test_sample_statistics():
    policy = LayerPolicy("constant", ["a", "b", "c", "d"])
    policy.probabilities = np.full(4, 0.25)
    rng = np.random.default_rng(123)
    counts = {n: 0 for n in "abcd"}
    trials = 100_000
    for _ in range(trials):
        counts[sample_layers(policy, rng)[0]] += 1
    for n in "abcd":
        assert abs(counts[n] / trials - 0.25) < 0.02


def test_sample_exhaustion_is_permutation():
    policy = LayerPolicy("constant", ["a", "b", "c", "d"])
    policy.probabilities = np.array([0.4, 0.3, 0.2, 0.1])
    rng = np.random.default_rng(5)
    drawn = sample_layers(policy, rng, count=4)
    assert sorted(drawn) == ["a", "b", "c", "d"]


def test_sample_insufficient():
    policy = LayerPolicy("constant", ["a", "b"])
    policy.probabilities = np.array([1.0, 0.0])
    with pytest.raises(InsufficientLayersError):
        sample_layers(policy, np.random.default_rng(0), count=2)


def _update(policy, sens, drop):
    sizes = {"a": 100, "b": 300, "c": 600}
    eligible = {n: True for n in sizes}
    return update_policy(policy, sizes, sens, 1.0, drop, eligible)


def test_constant_mode_frozen():
    policy = LayerPolicy("constant", ["a", "b", "c"])
    policy = _update(policy, {"a": 0.0, "b": 0.0, "c": 0.0}, 0.0)
    first = policy.probabilities.copy()
    policy = _update(policy, {"a": 0.9, "b": 0.1, "c": 0.5}, 0.4)
    np.testing.assert_array_equal(policy.probabilities, first)


def test_dynamic_mode_recomputes():
    policy = LayerPolicy("dynamic", ["a", "b", "c"])
    policy = _update(policy, {"a": 0.0, "b": 0.0, "c": 0.0}, 0.0)
    first = policy.probabilities.copy()
    policy = _update(policy, {"a": 0.9, "b": 0.1, "c": 0.5}, 0.4)
    assert not np.array_equal(policy.probabilities, first)


def test_prioritized_restricts_then_opens():
    policy = LayerPolicy("prioritized", ["a", "b", "c"], priority_list=["c"],
                         priority_drop=0.9)
    sens = {"a": 0.0, "b": 0.0, "c": 0.0}
    policy = _update(policy, sens, 0.3)
    np.testing.assert_allclose(policy.probabilities, [0.0, 0.0, 1.0])
    # drop crosses the budget: support switches to all layers
    policy = _update(policy, sens, 0.95)
    assert (policy.probabilities > 0).all()
    assert not policy.priority_active


def test_prioritized_requires_list():
    with pytest.raises(ContractViolationError):
        LayerPolicy("prioritized", ["a"], priority_list=[])


def test_resolve_priority_list():
    sizes = {"small": 10, "mid": 100, "big": 1000}
    assert resolve_priority_list("2-largest", sizes) == ["big", "mid"]
    assert resolve_priority_list(["mid"], sizes) == ["mid"]
    with pytest.raises(ContractViolationError):
        resolve_priority_list("two-largest", sizes)
