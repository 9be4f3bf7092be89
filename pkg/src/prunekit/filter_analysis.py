"""Post-search refinement from filter activation statistics.

Measures each output filter's mean absolute post-activation response over
an evaluation set, globally and per class, then masks whole filters that
fall below an importance threshold everywhere. A filter that matters for
even one class is never touched, and the whole refinement reverts if the
accuracy cost exceeds the configured budget (zero by default).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, ContractViolationError
from .model_store import ModelSnapshot, weighted_sparsity
from .pruning_ops import mask_out_channels


def _normalize_importance(means: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a degenerate layer counts every filter as important."""
    lo = float(means.min())
    hi = float(means.max())
    if hi == lo:
        return np.ones_like(means, dtype=np.float64)
    return (means.astype(np.float64) - lo) / (hi - lo)


@dataclass
class FilterContribution:
    layer_name: str
    filter_index: int
    mean_abs_activation: float
    normalized_importance: float


@dataclass
class ClassActivationProfile:
    class_id: int
    activations: dict[str, np.ndarray]  # layer -> per-filter mean |activation|
    importances: dict[str, np.ndarray]  # layer -> min-max normalized


def _activation_capable(evaluator) -> None:
    if not evaluator.capabilities.supports_activations:
        raise CapabilityError("evaluator does not expose activation summaries")


def compute_filter_contributions(model: ModelSnapshot, evaluator,
                                 split: str = "test") -> dict[str, list[FilterContribution]]:
    """Per-layer filter contributions over the whole evaluation set."""
    _activation_capable(evaluator)
    out: dict[str, list[FilterContribution]] = {}
    for layer in model.layers:
        means = np.asarray(evaluator.activation_means(layer.name, split))
        importance = _normalize_importance(means)
        out[layer.name] = [
            FilterContribution(layer.name, i, float(means[i]), float(importance[i]))
            for i in range(means.size)
        ]
    return out


def compute_class_profiles(model: ModelSnapshot, evaluator,
                           split: str = "test") -> list[ClassActivationProfile]:
    """One activation profile per class present in the evaluation set."""
    _activation_capable(evaluator)
    profiles = []
    for class_id in evaluator.present_classes(split):
        activations: dict[str, np.ndarray] = {}
        importances: dict[str, np.ndarray] = {}
        for layer in model.layers:
            means = np.asarray(evaluator.activation_means(layer.name, split, class_id=class_id))
            activations[layer.name] = means
            importances[layer.name] = _normalize_importance(means)
        profiles.append(ClassActivationProfile(class_id, activations, importances))
    return profiles


@dataclass
class RefinementResult:
    additional_pruned: int
    reverted: bool
    pre_top1: float
    post_top1: float
    pre_weighted_sparsity: float
    post_weighted_sparsity: float
    masked_filters: dict[str, list[int]]


def refine_pruning(model: ModelSnapshot, evaluator,
                   contributions: dict[str, list[FilterContribution]],
                   profiles: list[ClassActivationProfile], tau: float,
                   drop_budget: float = 0.0, split: str = "test") -> RefinementResult:
    """Mask filters unimportant both globally and in every class profile.

    Reverts to the exact pre-refinement masks when the post-refinement top-1
    drops more than ``drop_budget`` below the pre-refinement top-1.
    """
    if not 0.0 <= tau < 1.0:
        raise ContractViolationError(f"tau {tau} outside [0, 1)")
    pre_masks = model.copy_masks()
    pre_eval = evaluator.evaluate(split)
    pre_ws = weighted_sparsity(model)

    candidates: dict[str, list[int]] = {}
    for name, contribs in contributions.items():
        picked = []
        for contrib in contribs:
            if contrib.normalized_importance >= tau:
                continue
            if all(p.importances[name][contrib.filter_index] < tau for p in profiles):
                picked.append(contrib.filter_index)
        if picked:
            candidates[name] = picked

    before = sum(model.masks[n].pruned_count for n in model.layer_names())
    for name, filters in candidates.items():
        mask_out_channels(model, model.masks, name, filters)
    after = sum(model.masks[n].pruned_count for n in model.layer_names())

    post_eval = evaluator.evaluate(split)
    if pre_eval.top1 - post_eval.top1 > drop_budget:
        model.restore_masks(pre_masks)
        return RefinementResult(0, True, pre_eval.top1, post_eval.top1,
                                pre_ws, pre_ws, {})
    return RefinementResult(after - before, False, pre_eval.top1, post_eval.top1,
                            pre_ws, weighted_sparsity(model), candidates)


def contributions_to_json(contributions: dict[str, list[FilterContribution]]) -> dict:
    return {
        name: [
            {"filter": c.filter_index, "mean_abs_activation": c.mean_abs_activation,
             "normalized_importance": c.normalized_importance}
            for c in contribs
        ]
        for name, contribs in contributions.items()
    }


def profiles_to_json(profiles: list[ClassActivationProfile]) -> list[dict]:
    return [
        {
            "class_id": p.class_id,
            "layers": {
                name: {"activations": [float(v) for v in p.activations[name]],
                       "importances": [float(v) for v in p.importances[name]]}
                for name in p.activations
            },
        }
        for p in profiles
    ]
