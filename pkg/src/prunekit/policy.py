"""Categorical layer-selection policy from layer sizes and sensitivities.

A layer's unnormalized selection weight is
``size * max(0, drop_budget - sensitivity)``: bigger layers with less
measured accuracy impact are picked more often. Three modes: ``constant``
(computed once), ``dynamic`` (recomputed every iteration), ``prioritized``
(mass restricted to a priority list until a drop budget is spent, then
dynamic over all eligible layers).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError, InsufficientLayersError

MODES = ("constant", "dynamic", "prioritized")


@dataclass
class LayerPolicy:
    mode: str
    layer_names: list[str]
    probabilities: np.ndarray | None = None
    priority_list: list[str] = field(default_factory=list)
    priority_drop: float = 0.0
    priority_active: bool = False

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ContractViolationError(f"unknown policy mode {self.mode!r}")
        if self.mode == "prioritized":
            if not self.priority_list:
                raise ContractViolationError("prioritized mode needs a non-empty priority list")
            unknown = set(self.priority_list) - set(self.layer_names)
            if unknown:
                raise ContractViolationError(f"priority list names unknown layers: {unknown}")
            self.priority_active = True


def compute_probabilities(sizes: np.ndarray, sensitivities: np.ndarray,
                          threshold: float, eligible: np.ndarray | None = None) -> np.ndarray:
    """Normalized selection probabilities over the layer set.

    ``eligible`` marks layers that may receive mass at all (fully pruned
    layers are excluded by callers). When every weight clamps to zero the
    distribution falls back to uniform over the eligible layers.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    sens = np.asarray(sensitivities, dtype=np.float64)
    if sizes.size == 0:
        raise ContractViolationError("empty layer set")
    if sizes.size != sens.size:
        raise ContractViolationError("sizes and sensitivities length mismatch")
    if threshold <= 0:
        raise ContractViolationError(f"threshold must be positive, got {threshold}")
    if (sizes <= 0).any():
        raise ContractViolationError("layer sizes must be positive")
    if eligible is None:
        eligible = np.ones(sizes.size, dtype=bool)
    else:
        eligible = np.asarray(eligible, dtype=bool)
    if not eligible.any():
        raise InsufficientLayersError("no eligible layers remain")

    weights = sizes * np.maximum(0.0, threshold - sens)
    weights[~eligible] = 0.0
    total = weights.sum()
    if total == 0.0:
        probs = eligible.astype(np.float64)
        return probs / probs.sum()
    return weights / total


def update_policy(policy: LayerPolicy, sizes: dict[str, int],
                  sensitivities: dict[str, float], threshold: float,
                  accuracy_drop_so_far: float, eligible: dict[str, bool]) -> LayerPolicy:
    """Refresh the policy's probabilities according to its mode."""
    names = policy.layer_names
    size_vec = np.array([sizes[n] for n in names], dtype=np.float64)
    sens_vec = np.array([sensitivities[n] for n in names], dtype=np.float64)
    elig_vec = np.array([eligible[n] for n in names], dtype=bool)

    if policy.mode == "constant":
        if policy.probabilities is None:
            policy.probabilities = compute_probabilities(size_vec, sens_vec, threshold, elig_vec)
        return policy

    if policy.mode == "prioritized" and policy.priority_active:
        if accuracy_drop_so_far > policy.priority_drop:
            policy.priority_active = False  # budget spent; fall through to dynamic
        else:
            in_priority = np.array([n in policy.priority_list for n in names], dtype=bool)
            restricted = elig_vec & in_priority
            if restricted.any():
                policy.probabilities = compute_probabilities(
                    size_vec, sens_vec, threshold, restricted
                )
                return policy
            policy.priority_active = False  # every priority layer exhausted

    policy.probabilities = compute_probabilities(size_vec, sens_vec, threshold, elig_vec)
    return policy


def sample_layers(policy: LayerPolicy, rng: np.random.Generator, count: int = 1) -> list[str]:
    """Draw ``count`` distinct layers from the categorical distribution."""
    if policy.probabilities is None:
        raise ContractViolationError("policy has no probabilities yet; call update_policy first")
    if count < 1:
        raise ContractViolationError(f"count must be >= 1, got {count}")
    support = int(np.count_nonzero(policy.probabilities))
    if count > support:
        raise InsufficientLayersError(
            f"asked for {count} layers but only {support} have positive probability"
        )
    idx = rng.choice(len(policy.layer_names), size=count, replace=False,
                     p=policy.probabilities)
    return [policy.layer_names[int(i)] for i in idx]


def resolve_priority_list(spec: list[str] | str, sizes: dict[str, int]) -> list[str]:
    """Resolve a priority spec: explicit layer names or ``"<N>-largest"``."""
    if isinstance(spec, str):
        head, _, tail = spec.partition("-")
        if tail != "largest" or not head.isdigit():
            raise ContractViolationError(f"bad priority selector {spec!r}")
        n = int(head)
        ordered = sorted(sizes, key=lambda name: (-sizes[name], name))
        return ordered[:n]
    return list(spec)
