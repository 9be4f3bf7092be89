"""Fine-grain pruning steps, gradient-informed selection, and channel removal.

Step operations convert the step fraction to a pruned-weight delta once
(``round(step * parameter_count)``, half to even) and move the layer's
pruned count by that delta, so a prune followed by a reverse of the same
step restores the previous mask bit for bit. Masks are always recomputed
from the pristine weights by magnitude rank; nothing is destroyed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ChannelRemovalRefusedError,
    ContractViolationError,
    UnsupportedKindError,
)
from .model_store import (
    LayerTensor,
    ModelSnapshot,
    PruneMask,
    magnitude_kept,
    sparsity_to_count,
)


def _minmax(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a degenerate (constant) vector maps to 0."""
    lo = float(values.min())
    hi = float(values.max())
    if hi == lo:
        return np.zeros_like(values, dtype=np.float64)
    return (values.astype(np.float64) - lo) / (hi - lo)


def set_layer_sparsity(model: ModelSnapshot, layer_name: str, sparsity: float) -> float:
    """Set a layer's sparsity to an absolute fraction via magnitude rank."""
    layer = model.layer(layer_name)
    count = sparsity_to_count(sparsity, layer.parameter_count)
    model.masks[layer_name] = PruneMask(
        layer_name, magnitude_kept(layer.flat_pristine, count), from_magnitude=True
    )
    return count / layer.parameter_count


def prune_layer_by_step(model: ModelSnapshot, layer_name: str, step: float) -> float:
    """Raise a layer's sparsity by ``step`` (clamped at 1); returns the new sparsity."""
    if step <= 0:
        raise ContractViolationError(f"step must be positive, got {step}")
    layer = model.layer(layer_name)
    n = layer.parameter_count
    delta = sparsity_to_count(min(float(step), 1.0), n)
    new_count = min(n, model.masks[layer_name].pruned_count + delta)
    model.masks[layer_name] = PruneMask(
        layer_name, magnitude_kept(layer.flat_pristine, new_count), from_magnitude=True
    )
    return new_count / n


def reverse_prune_by_step(model: ModelSnapshot, layer_name: str, step: float) -> float:
    """Lower a layer's sparsity by ``step`` (clamped at 0); returns the new sparsity."""
    if step <= 0:
        raise ContractViolationError(f"step must be positive, got {step}")
    layer = model.layer(layer_name)
    n = layer.parameter_count
    delta = sparsity_to_count(min(float(step), 1.0), n)
    new_count = max(0, model.masks[layer_name].pruned_count - delta)
    model.masks[layer_name] = PruneMask(
        layer_name, magnitude_kept(layer.flat_pristine, new_count), from_magnitude=True
    )
    return new_count / n


def apply_sparsities(model: ModelSnapshot, sparsities: dict[str, float]) -> None:
    """Set every listed layer to its absolute sparsity (magnitude masks)."""
    for name, frac in sparsities.items():
        set_layer_sparsity(model, name, frac)


# --------------------------------------------------------------------------
# gradient-informed selection
# --------------------------------------------------------------------------

def gradient_informed_kept(flat_weights: np.ndarray, importance: np.ndarray,
                           pruned_count: int, alpha: float) -> np.ndarray:
    """Kept-array pruning the lowest blend of magnitude and gradient importance.

    Scores are ``alpha * minmax(|w|) + (1 - alpha) * minmax(importance)``.
    Ties fall back to |w| and then to flat index, so uniform importances
    reduce to the plain magnitude mask for every alpha.
    """
    if flat_weights.size != importance.size:
        raise ContractViolationError(
            f"importance length {importance.size} != weight count {flat_weights.size}"
        )
    if not np.isfinite(importance).all():
        raise ContractViolationError("gradient importances contain non-finite values")
    if (importance < 0).any():
        raise ContractViolationError("gradient importances must be non-negative")
    if not 0.0 <= alpha <= 1.0:
        raise ContractViolationError(f"alpha {alpha} outside [0, 1]")
    absw = np.abs(flat_weights).astype(np.float64)
    score = alpha * _minmax(absw) + (1.0 - alpha) * _minmax(importance)
    order = np.lexsort((absw, score))  # score major, |w| minor, index last (stable)
    kept = np.ones(flat_weights.size, dtype=bool)
    if pruned_count:
        kept[order[:pruned_count]] = False
    return kept


def gradient_informed_mask(layer: LayerTensor, target_sparsity: float,
                           importance: np.ndarray, alpha: float = 0.5) -> PruneMask:
    """Mask for ``target_sparsity`` ranking weights by the magnitude/gradient blend."""
    count = sparsity_to_count(target_sparsity, layer.parameter_count)
    kept = gradient_informed_kept(layer.flat_pristine, np.asarray(importance).reshape(-1),
                                  count, alpha)
    return PruneMask(layer.name, kept, from_magnitude=(alpha == 1.0))


# --------------------------------------------------------------------------
# structural channel scoring and removal
# --------------------------------------------------------------------------

@dataclass
class ChannelScore:
    """Importance of one output channel of a conv layer.

    ``l1`` sums |w| over the channel's weights; ``variance`` is the spread of
    the per-input-channel kernel L1 energies inside the channel. ``combined``
    adds the two after min-max normalization across the layer's channels, so
    it lies in [0, 2] and the lowest value marks the best removal candidate.
    """

    layer_name: str
    channel_index: int
    l1: float
    variance: float
    combined: float


def score_channel_array(weights: np.ndarray, layer_name: str) -> list[ChannelScore]:
    """Score the output channels of a 4-D conv weight array."""
    if weights.ndim != 4:
        raise UnsupportedKindError(f"channel scoring needs a 4-D conv tensor, got {weights.shape}")
    energies = np.abs(weights.astype(np.float64)).sum(axis=(2, 3))  # (out, in) kernel L1s
    l1 = energies.sum(axis=1)
    variance = energies.var(axis=1)
    l1_n = _minmax(l1)
    var_n = _minmax(variance)
    return [
        ChannelScore(layer_name, i, float(l1[i]), float(variance[i]), float(l1_n[i] + var_n[i]))
        for i in range(weights.shape[0])
    ]


def score_channels(layer: LayerTensor) -> list[ChannelScore]:
    """Score a conv layer's output channels on its pristine weights."""
    if layer.kind != "conv2d":
        raise UnsupportedKindError(f"layer {layer.name!r} is {layer.kind}, not conv2d")
    return score_channel_array(layer.pristine_weights, layer.name)


def fully_masked_channels(model: ModelSnapshot, layer_name: str,
                          masks: dict[str, PruneMask] | None = None) -> set[int]:
    layer = model.layer(layer_name)
    kept = (masks or model.masks)[layer_name].kept.reshape(layer.shape)
    axes = tuple(range(1, kept.ndim))
    return {int(i) for i in np.flatnonzero(~kept.any(axis=axes))}


def select_channels_to_remove(scores: list[ChannelScore], already_removed: set[int],
                              fraction: float) -> list[int]:
    """Lowest-combined channels to remove this round, counted over the remaining ones."""
    if not 0.0 < fraction < 1.0:
        raise ContractViolationError(f"fraction {fraction} outside (0, 1)")
    remaining = [s for s in scores if s.channel_index not in already_removed]
    count = max(1, int(round(fraction * len(remaining))))
    if count >= len(remaining):
        raise ChannelRemovalRefusedError(
            f"removing {count} of {len(remaining)} remaining channels would zero the layer"
        )
    ordered = sorted(remaining, key=lambda s: (s.combined, s.channel_index))
    return [s.channel_index for s in ordered[:count]]


def downstream_layer(model: ModelSnapshot, layer_name: str) -> str | None:
    """Name of the next conv/dense layer after ``layer_name`` in the op graph."""
    seen = False
    for op in model.arch_graph:
        name = op.get("layer")
        if name == layer_name:
            seen = True
            continue
        if seen and name is not None:
            return name
    return None


def mask_out_channels(model: ModelSnapshot, masks: dict[str, PruneMask],
                      layer_name: str, channels: list[int]) -> None:
    layer = model.layer(layer_name)
    kept = masks[layer_name].kept.reshape(layer.shape).copy()
    kept[np.array(channels, dtype=int)] = False
    masks[layer_name] = PruneMask(layer_name, kept.reshape(-1), from_magnitude=False)


def mask_downstream_inputs(model: ModelSnapshot, masks: dict[str, PruneMask],
                           layer_name: str, channels: list[int]) -> None:
    """Mask the downstream layer's weights that consume the removed channels."""
    next_name = downstream_layer(model, layer_name)
    if next_name is None:
        return
    nxt = model.layer(next_name)
    kept = masks[next_name].kept.reshape(nxt.shape).copy()
    if nxt.kind == "conv2d":
        kept[:, np.array(channels, dtype=int)] = False
    else:
        out_channels = model.layer(layer_name).shape[0]
        in_features = nxt.shape[1]
        if in_features % out_channels != 0:
            raise ContractViolationError(
                f"dense layer {next_name!r} input size {in_features} does not tile "
                f"{out_channels} upstream channels"
            )
        block = in_features // out_channels
        for ch in channels:
            kept[:, ch * block : (ch + 1) * block] = False
    masks[next_name] = PruneMask(next_name, kept.reshape(-1), from_magnitude=False)


def remove_channels(model: ModelSnapshot, layer_name: str, fraction: float) -> list[int]:
    """Mask out the lowest-scored output channels plus their downstream consumers.

    Returns the removed channel indices. The removal count is
    ``round(fraction * remaining_channels)``, at least 1; removing every
    remaining channel is refused.
    """
    layer = model.layer(layer_name)
    if layer.kind != "conv2d":
        raise UnsupportedKindError(f"layer {layer_name!r} is {layer.kind}, not conv2d")
    scores = score_channels(layer)
    removed = fully_masked_channels(model, layer_name)
    chosen = select_channels_to_remove(scores, removed, fraction)
    mask_out_channels(model, model.masks, layer_name, chosen)
    mask_downstream_inputs(model, model.masks, layer_name, chosen)
    return chosen
