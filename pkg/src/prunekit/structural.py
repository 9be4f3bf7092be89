"""Iterative channel removal with retraining.

Each round scores the remaining output channels of every eligible conv
layer on the trainer's current effective weights, masks out the
lowest-scored fraction (plus the downstream weights that consume them),
retrains, and re-evaluates. A round whose post-retrain drop exceeds the
budget is rolled back entirely and the loop stops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, ContractViolationError, EvaluatorError
from .pruning_ops import (
    fully_masked_channels,
    mask_downstream_inputs,
    mask_out_channels,
    score_channel_array,
    select_channels_to_remove,
)
from .retrain import RunCheckpointer, ScheduleLogRow


@dataclass
class StructuralConfig:
    fraction_per_iter: float = 0.1
    drop_budget: float = 1.0
    retrain_epochs: int = 1
    max_iterations: int = 20
    masking: bool = True


@dataclass
class StructuralResult:
    baseline_top1: float
    final_top1: float
    iterations_accepted: int
    removed_channels: dict[str, list[int]]
    remaining_channels: dict[str, int]
    total_channels: dict[str, int]
    channel_fraction_removed: float
    parameter_fraction_removed: float
    log: list[ScheduleLogRow] = field(default_factory=list)
    completed: bool = True


def _conv_layers(trainer) -> list[str]:
    return [lt.name for lt in trainer.model.layers if lt.kind == "conv2d"]


def _effective(trainer, name: str) -> np.ndarray:
    layer = trainer.model.layer(name)
    flat = trainer.weights[name].reshape(-1).copy()
    flat[~trainer.masks[name].kept] = 0.0
    return flat.reshape(layer.shape)


def run_structural(trainer, config: StructuralConfig, *, log_path=None,
                   checkpoint_path=None, resume_from=None,
                   stop_after=None) -> StructuralResult:
    if not trainer.capabilities.supports_retrain:
        raise CapabilityError("structural pruning needs a retraining-capable trainer")
    conv_names = _conv_layers(trainer)
    if not conv_names:
        raise ContractViolationError("model has no conv2d layers")

    ck = RunCheckpointer("structural", trainer, ScheduleLogRow.HEADER,
                         log_path, checkpoint_path, resume_from)
    totals = {n: trainer.model.layer(n).shape[0] for n in conv_names}
    log: list[ScheduleLogRow] = []
    completed = True
    if ck.fresh:
        baseline = trainer.evaluate("test")
        ck.set_baseline(baseline.top1, baseline.top5)
        removed = {n: [] for n in conv_names}
        accepted = 0
        done = False
        ck.capture(0, {"removed": removed, "accepted": accepted, "done": done})
    else:
        removed = {n: list(v) for n, v in ck.extra["removed"].items()}
        accepted = int(ck.extra["accepted"])
        done = bool(ck.extra["done"])

    try:
        for iteration in range(ck.start_epoch, config.max_iterations + 1):
            if done:
                break
            eligible = [
                n for n in conv_names
                if totals[n] - len(fully_masked_channels(trainer.model, n, trainer.masks)) > 1
            ]
            if not eligible:
                break
            saved = trainer.snapshot_state()
            round_removed: dict[str, list[int]] = {}
            for name in eligible:
                scores = score_channel_array(_effective(trainer, name), name)
                already = fully_masked_channels(trainer.model, name, trainer.masks)
                chosen = select_channels_to_remove(scores, already, config.fraction_per_iter)
                mask_out_channels(trainer.model, trainer.masks, name, chosen)
                mask_downstream_inputs(trainer.model, trainer.masks, name, chosen)
                round_removed[name] = chosen
            result = trainer.train_epochs(config.retrain_epochs, masking=config.masking)
            drop = ck.baseline_top1 - result.top1
            if drop <= config.drop_budget:
                accepted += 1
                ck.set_final(result.top1, result.top5)
                for name, chans in round_removed.items():
                    removed[name].extend(chans)
                    row = ScheduleLogRow(iteration, name, len(chans), 0.0, drop,
                                         "remove", trainer.layer_sparsity(name),
                                         result.top1)
                    log.append(row)
                    ck.write_row(row)
            else:
                trainer.restore_state(saved)
                row = ScheduleLogRow(iteration, "*", 0, 0.0, drop, "revert",
                                     trainer.weighted_sparsity(), result.top1)
                log.append(row)
                ck.write_row(row)
                done = True
            ck.capture(iteration, {"removed": removed, "accepted": accepted, "done": done})
            if done:
                break
            if (stop_after is not None and iteration >= stop_after
                    and iteration < config.max_iterations):
                completed = False
                break
    except EvaluatorError:
        ck.on_failure()
        raise
    finally:
        ck.close()

    total_channels = sum(totals.values())
    removed_channels = sum(len(v) for v in removed.values())
    return StructuralResult(
        baseline_top1=ck.baseline_top1,
        final_top1=ck.final_top1,
        iterations_accepted=accepted,
        removed_channels=removed,
        remaining_channels={n: totals[n] - len(removed[n]) for n in conv_names},
        total_channels=totals,
        channel_fraction_removed=removed_channels / total_channels,
        parameter_fraction_removed=trainer.weighted_sparsity(),
        log=log,
        completed=completed,
    )


def summary_to_json(result: StructuralResult) -> dict:
    return {
        "baseline_top1": result.baseline_top1,
        "final_top1": result.final_top1,
        "iterations_accepted": result.iterations_accepted,
        "removed_channels": result.removed_channels,
        "remaining_channels": result.remaining_channels,
        "total_channels": result.total_channels,
        "channel_fraction_removed": result.channel_fraction_removed,
        "parameter_fraction_removed": result.parameter_fraction_removed,
    }
