"""Retraining schedules: simple, progressive, boosted, and gradient-informed.

All schedules drive a trainer object that owns working weights and masks
(the built-in trainer or an external session). With gradient masking on,
pruned positions receive no updates and stay at zero effective magnitude,
so the pruned pool grows monotonically while sparsity rises; without
masking, updated weights may re-enter the kept set at the next prune event.

Every runner checkpoints at epoch boundaries when given a checkpoint path
(full trainer state included), aborts with a consistent checkpoint on
trainer failure, and resumes to a byte-identical log.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import (
    decode_rng_state,
    encode_rng_state,
    load_checkpoint,
    save_checkpoint,
)
from .errors import CapabilityError, ContractViolationError, EvaluatorError
from .policy import LayerPolicy, resolve_priority_list, sample_layers, update_policy
from .runlog import CsvLog, truncate_rows
from .sensitivity import (
    DEFAULT_GAIN,
    DEFAULT_STEP_MAX,
    DEFAULT_STEP_MIN,
    DEFAULT_WINDOW,
    SensitivityState,
)


def apply_gradient_mask(gradients: np.ndarray, kept: np.ndarray) -> np.ndarray:
    """Zero the gradient entries at pruned positions; kept entries untouched."""
    gradients = np.asarray(gradients)
    kept = np.asarray(kept, dtype=bool)
    if gradients.size != kept.size:
        raise ContractViolationError(
            f"gradient length {gradients.size} != mask length {kept.size}"
        )
    out = gradients.reshape(-1).copy()
    out[~kept] = 0
    return out.reshape(gradients.shape)


@dataclass
class RetrainPolicy:
    """Which schedule to run and how to train between prune events."""

    mode: str = "simple"  # simple | simple_masked | progressive | boosted | gradient_informed
    masking: bool = False
    epochs: int = 10
    learning_rate: float | None = None
    sparsity: float = 0.2  # simple modes: the one-shot uniform sparsity
    progressive_start: float = 0.1
    progressive_increment: float = 0.01


@dataclass
class ScheduleLogRow:
    epoch: int
    layer: str
    attempt: int
    step: float
    drop: float
    action: str
    sparsity: float
    top1: float

    HEADER = ["epoch", "layer", "attempt", "step", "drop", "action", "sparsity", "top1"]

    def values(self):
        return [self.epoch, self.layer, self.attempt, self.step, self.drop,
                self.action, self.sparsity, self.top1]


@dataclass
class RetrainResult:
    baseline_top1: float
    final_top1: float
    final_top5: float | None
    weighted_sparsity: float
    sparsities: dict[str, float]
    log: list[ScheduleLogRow]
    completed: bool = True


class RunCheckpointer:
    """Epoch-boundary checkpointing shared by the schedule runners.

    Captures a consistent payload (trainer state plus runner extras) after
    every epoch; on trainer failure the last boundary payload is persisted
    so the run can resume without replaying a half-applied epoch. Resume
    truncates the log file back to the boundary, keeping it byte-identical
    to an uninterrupted run.
    """

    def __init__(self, kind: str, trainer, header: list[str],
                 log_path: str | Path | None, checkpoint_path: str | Path | None,
                 resume_from: str | Path | None):
        self.kind = kind
        self.trainer = trainer
        self.checkpoint_path = checkpoint_path
        self.rows_written = 0
        self.start_epoch = 1
        self.extra: dict = {}
        self.baseline_top1 = 0.0
        self.baseline_top5: float | None = None
        self.final_top1 = 0.0
        self.final_top5: float | None = None
        self.fresh = resume_from is None
        self._stashed: dict | None = None
        if not self.fresh:
            payload = load_checkpoint(resume_from, expect_kind=kind)
            trainer.load_state_dict(payload["trainer"])
            self.start_epoch = int(payload["epoch"]) + 1
            self.rows_written = int(payload["rows_written"])
            self.extra = payload.get("extra", {})
            self.baseline_top1 = float(payload["baseline_top1"])
            self.baseline_top5 = payload.get("baseline_top5")
            self.final_top1 = float(payload["final_top1"])
            self.final_top5 = payload.get("final_top5")
            if log_path is not None:
                truncate_rows(log_path, self.rows_written)
        self.log = (CsvLog(log_path, header, append=not self.fresh)
                    if log_path is not None else None)

    def set_baseline(self, top1: float, top5: float | None) -> None:
        self.baseline_top1 = top1
        self.baseline_top5 = top5
        self.final_top1 = top1
        self.final_top5 = top5

    def set_final(self, top1: float, top5: float | None) -> None:
        self.final_top1 = top1
        self.final_top5 = top5

    def write_row(self, row: ScheduleLogRow) -> None:
        if self.log is not None:
            self.log.write(row.values())
        self.rows_written += 1

    def capture(self, epoch: int, extra: dict) -> None:
        if self.checkpoint_path is None:
            return
        payload = {
            "epoch": epoch,
            "rows_written": self.rows_written,
            "baseline_top1": self.baseline_top1,
            "baseline_top5": self.baseline_top5,
            "final_top1": self.final_top1,
            "final_top5": self.final_top5,
            "extra": extra,
            "trainer": self.trainer.state_dict(),
        }
        self._stashed = payload
        save_checkpoint(self.kind, payload, self.checkpoint_path)

    def on_failure(self) -> None:
        if self.checkpoint_path is not None and self._stashed is not None:
            save_checkpoint(self.kind, self._stashed, self.checkpoint_path)

    def close(self) -> None:
        if self.log is not None:
            self.log.close()


def _require_retrain(trainer) -> None:
    if not trainer.capabilities.supports_retrain:
        raise CapabilityError("trainer does not support retraining")


def _layer_names(trainer) -> list[str]:
    return trainer.model.layer_names()


def _result(ck: RunCheckpointer, trainer, log, completed: bool) -> RetrainResult:
    return RetrainResult(ck.baseline_top1, ck.final_top1, ck.final_top5,
                         trainer.weighted_sparsity(), trainer.sparsities(), log,
                         completed=completed)


def run_simple(trainer, sparsity: float, epochs: int, masking: bool,
               epoch_callback=None, *, log_path=None, checkpoint_path=None,
               resume_from=None, stop_after=None) -> RetrainResult:
    """One-shot uniform pruning followed by plain retraining epochs."""
    _require_retrain(trainer)
    ck = RunCheckpointer("retrain-simple", trainer, ScheduleLogRow.HEADER,
                         log_path, checkpoint_path, resume_from)
    log: list[ScheduleLogRow] = []
    completed = True
    try:
        if ck.fresh:
            baseline = trainer.evaluate("test")
            ck.set_baseline(baseline.top1, baseline.top5)
            for name in _layer_names(trainer):
                trainer.set_sparsity(name, sparsity)
            ck.capture(0, {})
        for epoch in range(ck.start_epoch, epochs + 1):
            final = trainer.train_epochs(1, masking=masking)
            ck.set_final(final.top1, final.top5)
            row = ScheduleLogRow(epoch, "*", 0, 0.0, ck.baseline_top1 - final.top1,
                                 "retrain", trainer.weighted_sparsity(), final.top1)
            log.append(row)
            ck.write_row(row)
            ck.capture(epoch, {})
            if epoch_callback is not None:
                epoch_callback(epoch, trainer)
            if stop_after is not None and epoch >= stop_after and epoch < epochs:
                completed = False
                break
    except EvaluatorError:
        ck.on_failure()
        raise
    finally:
        ck.close()
    return _result(ck, trainer, log, completed)


def run_progressive(trainer, start: float, increment: float, epochs: int,
                    masking: bool, epoch_callback=None, *, log_path=None,
                    checkpoint_path=None, resume_from=None,
                    stop_after=None) -> RetrainResult:
    """Uniform sparsity ramp: prune to ``start``, then to ``start + increment*e``
    before each epoch's retraining pass."""
    _require_retrain(trainer)
    final_target = start + increment * epochs
    if final_target > 1.0 + 1e-12:
        raise ContractViolationError(
            f"progressive schedule ends above full sparsity: {final_target}"
        )
    ck = RunCheckpointer("retrain-progressive", trainer, ScheduleLogRow.HEADER,
                         log_path, checkpoint_path, resume_from)
    log: list[ScheduleLogRow] = []
    completed = True
    try:
        if ck.fresh:
            baseline = trainer.evaluate("test")
            ck.set_baseline(baseline.top1, baseline.top5)
            for name in _layer_names(trainer):
                trainer.set_sparsity(name, start)
            ck.capture(0, {})
        for epoch in range(ck.start_epoch, epochs + 1):
            target = start + increment * epoch
            for name in _layer_names(trainer):
                trainer.set_sparsity(name, target)
            final = trainer.train_epochs(1, masking=masking)
            ck.set_final(final.top1, final.top5)
            row = ScheduleLogRow(epoch, "*", 0, increment,
                                 ck.baseline_top1 - final.top1, "prune",
                                 trainer.weighted_sparsity(), final.top1)
            log.append(row)
            ck.write_row(row)
            ck.capture(epoch, {})
            if epoch_callback is not None:
                epoch_callback(epoch, trainer)
            if stop_after is not None and epoch >= stop_after and epoch < epochs:
                completed = False
                break
    except EvaluatorError:
        ck.on_failure()
        raise
    finally:
        ck.close()
    return _result(ck, trainer, log, completed)


# --------------------------------------------------------------------------
# boosted schedule
# --------------------------------------------------------------------------

@dataclass
class BoostSchedule:
    """Priority-walk schedule with geometrically shrinking prune steps.

    Per epoch each non-skipped priority layer gets up to ``scales * steps``
    prune attempts, validated after each one; an attempt whose drop reaches
    ``threshold0`` is reversed exactly and skips the layer for the epoch.
    A layer skipped ``threshold1`` times is skipped permanently. The working
    step restarts at ``step_value`` per layer and shrinks by
    ``reduction_factor`` after each scale pass.
    """

    priority_list: list[str]
    scales: int = 2
    steps: int = 12
    step_value: float = 0.05
    reduction_factor: float = 0.5
    threshold0: float = 1.0
    threshold1: int = 3
    skip_counts: dict[str, int] = field(default_factory=dict)
    permanently_skipped: set[str] = field(default_factory=set)

    def __post_init__(self) -> None:
        if not 0.0 < self.reduction_factor < 1.0:
            raise ContractViolationError("reduction_factor must lie in (0, 1)")
        for name in self.priority_list:
            self.skip_counts.setdefault(name, 0)


def run_boosted(trainer, schedule: BoostSchedule, epochs: int, masking: bool = True,
                epoch_callback=None, *, log_path=None, checkpoint_path=None,
                resume_from=None, stop_after=None) -> RetrainResult:
    _require_retrain(trainer)
    ck = RunCheckpointer("retrain-boosted", trainer, ScheduleLogRow.HEADER,
                         log_path, checkpoint_path, resume_from)
    log: list[ScheduleLogRow] = []
    completed = True
    if ck.fresh:
        baseline_val = trainer.validate().top1
        baseline = trainer.evaluate("test")
        ck.set_baseline(baseline.top1, baseline.top5)
        ck.capture(0, _boost_extra(schedule, baseline_val))
    else:
        baseline_val = float(ck.extra["baseline_val"])
        schedule.skip_counts = dict(ck.extra["skip_counts"])
        schedule.permanently_skipped = set(ck.extra["permanently_skipped"])
    try:
        for epoch in range(ck.start_epoch, epochs + 1):
            for layer in schedule.priority_list:
                if layer in schedule.permanently_skipped:
                    continue
                step = schedule.step_value
                stopped = False
                attempt_no = 0
                for _scale in range(schedule.scales):
                    for _ in range(schedule.steps):
                        attempt_no += 1
                        pre_mask = trainer.masks[layer].copy()
                        sparsity = trainer.prune_step(layer, step)
                        val = trainer.validate()
                        drop = baseline_val - val.top1
                        if drop >= schedule.threshold0:
                            trainer.masks[layer] = pre_mask  # reverse the attempt exactly
                            schedule.skip_counts[layer] += 1
                            if schedule.skip_counts[layer] >= schedule.threshold1:
                                schedule.permanently_skipped.add(layer)
                            row = ScheduleLogRow(epoch, layer, attempt_no, step, drop,
                                                 "reverse", trainer.layer_sparsity(layer),
                                                 val.top1)
                            log.append(row)
                            ck.write_row(row)
                            stopped = True
                            break
                        row = ScheduleLogRow(epoch, layer, attempt_no, step, drop,
                                             "prune", sparsity, val.top1)
                        log.append(row)
                        ck.write_row(row)
                    if stopped:
                        break
                    step *= schedule.reduction_factor
            final = trainer.train_epochs(1, masking=masking)
            ck.set_final(final.top1, final.top5)
            ck.capture(epoch, _boost_extra(schedule, baseline_val))
            if epoch_callback is not None:
                epoch_callback(epoch, trainer)
            if stop_after is not None and epoch >= stop_after and epoch < epochs:
                completed = False
                break
    except EvaluatorError:
        ck.on_failure()
        raise
    finally:
        ck.close()
    return _result(ck, trainer, log, completed)


def _boost_extra(schedule: BoostSchedule, baseline_val: float) -> dict:
    return {
        "baseline_val": baseline_val,
        "skip_counts": dict(schedule.skip_counts),
        "permanently_skipped": sorted(schedule.permanently_skipped),
    }


# --------------------------------------------------------------------------
# gradient-informed schedule
# --------------------------------------------------------------------------

@dataclass
class GradientInformedConfig:
    epochs: int = 30
    drop_threshold: float = 1.0
    init_sparsity: float = 0.3
    init_step: float = 0.05
    alpha: float = 0.5
    policy_mode: str = "constant"
    masking: bool = True
    seed: int = 0
    window_size: int = DEFAULT_WINDOW
    gain: float = DEFAULT_GAIN
    step_min: float = DEFAULT_STEP_MIN
    step_max: float = DEFAULT_STEP_MAX


def run_gradient_informed(trainer, config: GradientInformedConfig,
                          epoch_callback=None, *, log_path=None, checkpoint_path=None,
                          resume_from=None, stop_after=None) -> RetrainResult:
    """Per epoch: pick a layer, prune (or reverse) by its adaptive step using
    the magnitude/gradient blend, evaluate, adapt, then retrain one epoch
    with gradient masking."""
    _require_retrain(trainer)
    if not trainer.capabilities.supports_gradients:
        raise CapabilityError("trainer does not report gradient statistics")

    names = _layer_names(trainer)
    sizes = {n: trainer.model.layer(n).parameter_count for n in names}
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA16]))
    policy = LayerPolicy(mode=config.policy_mode, layer_names=names)
    ck = RunCheckpointer("retrain-gradient-informed", trainer, ScheduleLogRow.HEADER,
                         log_path, checkpoint_path, resume_from)
    log: list[ScheduleLogRow] = []
    completed = True

    if ck.fresh:
        baseline = trainer.evaluate("test")
        ck.set_baseline(baseline.top1, baseline.top5)
        for name in names:
            trainer.set_sparsity(name, config.init_sparsity)
        current_top1 = trainer.evaluate("test").top1
        sens = {
            n: SensitivityState(n, window_size=config.window_size, step=config.init_step,
                                gain=config.gain, step_min=config.step_min,
                                step_max=config.step_max)
            for n in names
        }
        last_pruned: list[str] = []
        ck.capture(0, _gradient_extra(sens, last_pruned, rng, policy, current_top1))
    else:
        extra = ck.extra
        sens = {n: SensitivityState.from_dict(d) for n, d in extra["sens"].items()}
        last_pruned = list(extra["last_pruned"])
        rng.bit_generator.state = decode_rng_state(extra["rng_state"])
        probs = extra["policy_probabilities"]
        policy.probabilities = None if probs is None else np.array(probs, dtype=np.float64)
        current_top1 = float(extra["current_top1"])

    try:
        for epoch in range(ck.start_epoch, config.epochs + 1):
            drop_now = ck.baseline_top1 - current_top1
            eligible = {n: trainer.layer_sparsity(n) < 1.0 for n in names}
            policy = update_policy(policy, sizes, {n: sens[n].sensitivity for n in names},
                                   config.drop_threshold, drop_now, eligible)
            if drop_now < config.drop_threshold or not last_pruned:
                layers = sample_layers(policy, rng, 1)
                action = "prune"
            else:
                layers = last_pruned
                action = "reverse"
            steps_used = {}
            for name in layers:
                importance = trainer.gradient_stats(name)
                steps_used[name] = sens[name].step
                if action == "prune":
                    trainer.prune_step(name, sens[name].step, importance=importance,
                                       alpha=config.alpha)
                else:
                    trainer.reverse_step(name, sens[name].step, importance=importance,
                                         alpha=config.alpha)
            res = trainer.evaluate("test")
            for name in layers:
                sens[name].record_impact(ck.baseline_top1, res.top1)
                sens[name].update_step(config.drop_threshold)
            if action == "prune":
                last_pruned = layers
            current_top1 = res.top1
            final = trainer.train_epochs(1, masking=config.masking)
            ck.set_final(final.top1, final.top5)
            for name in layers:
                row = ScheduleLogRow(epoch, name, 0, steps_used[name],
                                     ck.baseline_top1 - res.top1, action,
                                     trainer.layer_sparsity(name), res.top1)
                log.append(row)
                ck.write_row(row)
            ck.capture(epoch, _gradient_extra(sens, last_pruned, rng, policy, current_top1))
            if epoch_callback is not None:
                epoch_callback(epoch, trainer)
            if stop_after is not None and epoch >= stop_after and epoch < config.epochs:
                completed = False
                break
    except EvaluatorError:
        ck.on_failure()
        raise
    finally:
        ck.close()
    return _result(ck, trainer, log, completed)


def _gradient_extra(sens, last_pruned, rng, policy, current_top1) -> dict:
    return {
        "sens": {n: s.to_dict() for n, s in sens.items()},
        "last_pruned": list(last_pruned),
        "rng_state": encode_rng_state(rng.bit_generator.state),
        "policy_probabilities": (None if policy.probabilities is None
                                 else [float(p) for p in policy.probabilities]),
        "current_top1": current_top1,
    }


def boost_schedule_from_policy(trainer, priority_spec, **kwargs) -> BoostSchedule:
    sizes = {n: trainer.model.layer(n).parameter_count for n in _layer_names(trainer)}
    return BoostSchedule(priority_list=resolve_priority_list(priority_spec, sizes), **kwargs)


def run_retrain(trainer, policy: RetrainPolicy,
                boost_schedule: BoostSchedule | None = None,
                gradient_config: GradientInformedConfig | None = None,
                epoch_callback=None, **run_kwargs) -> RetrainResult:
    """Dispatch a retraining run according to the policy's mode."""
    if policy.mode == "simple":
        return run_simple(trainer, policy.sparsity, policy.epochs, policy.masking,
                          epoch_callback, **run_kwargs)
    if policy.mode == "simple_masked":
        return run_simple(trainer, policy.sparsity, policy.epochs, True,
                          epoch_callback, **run_kwargs)
    if policy.mode == "progressive":
        return run_progressive(trainer, policy.progressive_start,
                               policy.progressive_increment, policy.epochs,
                               policy.masking, epoch_callback, **run_kwargs)
    if policy.mode == "boosted":
        if boost_schedule is None:
            raise ContractViolationError("boosted mode needs a BoostSchedule")
        return run_boosted(trainer, boost_schedule, policy.epochs, policy.masking,
                           epoch_callback, **run_kwargs)
    if policy.mode == "gradient_informed":
        if gradient_config is None:
            gradient_config = GradientInformedConfig(epochs=policy.epochs,
                                                     masking=policy.masking)
        return run_gradient_informed(trainer, gradient_config, epoch_callback,
                                     **run_kwargs)
    raise ContractViolationError(f"unknown retrain mode {policy.mode!r}")
