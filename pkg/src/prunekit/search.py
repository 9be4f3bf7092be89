"""Iterated prune/reverse search over per-layer sparsities.

Each iteration samples a layer from the selection policy, prunes it by its
adaptive step while the model's accuracy drop is inside the budget (and
reverses the most recent prune otherwise), evaluates, and decides whether
the new sparsity vector becomes the working solution: improvements are
always taken, worse solutions are taken with a probability that anneals
toward zero, and occasionally the search restarts from a ranked list of the
best feasible solutions seen so far. Deterministic under a fixed seed, and
resumable from a checkpoint without perturbing the trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import decode_rng_state, encode_rng_state, load_checkpoint, save_checkpoint
from .errors import EvaluatorError
from .model_store import ModelSnapshot, weighted_sparsity
from .policy import LayerPolicy, sample_layers, update_policy
from .pruning_ops import apply_sparsities, prune_layer_by_step, reverse_prune_by_step
from .runlog import CsvLog, truncate_rows
from .sensitivity import (
    DEFAULT_GAIN,
    DEFAULT_STEP,
    DEFAULT_STEP_MAX,
    DEFAULT_STEP_MIN,
    DEFAULT_WINDOW,
    SensitivityState,
)

TRACE_HEADER = ["iteration", "layer", "action", "step", "sparsity", "top1",
                "fitness", "accepted", "temperature"]


@dataclass
class SparsityGenotype:
    """A search solution: the per-layer sparsity vector plus cached metrics."""

    sparsities: dict[str, float]
    fitness: float
    top1: float
    feasible: bool

    def key(self) -> tuple:
        return tuple(sorted(self.sparsities.items()))

    def to_dict(self) -> dict:
        return {"sparsities": self.sparsities, "fitness": self.fitness,
                "top1": self.top1, "feasible": self.feasible}

    @classmethod
    def from_dict(cls, data: dict) -> "SparsityGenotype":
        return cls(dict(data["sparsities"]), float(data["fitness"]),
                   float(data["top1"]), bool(data["feasible"]))


@dataclass
class RankedList:
    """Top-k feasible solutions by fitness, duplicates excluded."""

    capacity: int
    entries: list[SparsityGenotype] = field(default_factory=list)

    def insert(self, genotype: SparsityGenotype) -> bool:
        if not genotype.feasible:
            return False
        if any(e.key() == genotype.key() for e in self.entries):
            return False
        if len(self.entries) >= self.capacity and genotype.fitness <= self.entries[-1].fitness:
            return False
        self.entries.append(genotype)
        self.entries.sort(key=lambda e: -e.fitness)
        del self.entries[self.capacity :]
        return True

    def to_dict(self) -> dict:
        return {"capacity": self.capacity, "entries": [e.to_dict() for e in self.entries]}

    @classmethod
    def from_dict(cls, data: dict) -> "RankedList":
        return cls(int(data["capacity"]),
                   [SparsityGenotype.from_dict(e) for e in data["entries"]])


@dataclass
class AnnealingSchedule:
    """Geometric exploration schedule; disabled means pure hill climbing."""

    t0: float = 0.1
    decay: float = 0.97
    enabled: bool = True
    restart_prob: float = 0.1

    def __post_init__(self) -> None:
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if self.t0 <= 0:
            raise ValueError("t0 must be positive")

    def temperature(self, iteration: int) -> float:
        return self.t0 * self.decay**iteration


@dataclass
class SearchConfig:
    iterations: int = 150
    drop_threshold: float = 1.0
    policy_mode: str = "constant"
    priority_list: list[str] = field(default_factory=list)
    priority_drop: float = 0.0
    multi_layer_count: int = 1
    sa: AnnealingSchedule = field(default_factory=AnnealingSchedule)
    ranked_capacity: int = 10
    seed: int = 0
    eval_split: str = "test"
    window_size: int = DEFAULT_WINDOW
    initial_step: float = DEFAULT_STEP
    gain: float = DEFAULT_GAIN
    step_min: float = DEFAULT_STEP_MIN
    step_max: float = DEFAULT_STEP_MAX
    checkpoint_every: int = 10
    stop_after: int | None = None  # graceful stop for resumable runs


@dataclass
class TraceRow:
    iteration: int
    layer: str
    action: str
    step: float
    sparsity: float
    top1: float
    fitness: float
    accepted: bool
    temperature: float

    def values(self):
        return [self.iteration, self.layer, self.action, self.step, self.sparsity,
                self.top1, self.fitness, self.accepted, self.temperature]


@dataclass
class SearchResult:
    best: SparsityGenotype
    ranked: RankedList
    trace: list[TraceRow]
    baseline_top1: float
    baseline_top5: float | None
    completed: bool  # False when stopped early for a later resume


def acceptance_step(current: SparsityGenotype, candidate: SparsityGenotype,
                    ranked: RankedList, sa: AnnealingSchedule, iteration: int,
                    rng: np.random.Generator):
    """Pick the next working solution.

    Feasible improvements are always taken. Otherwise the candidate is taken
    with probability exp(-delta/T) (exploration), else a uniformly random
    ranked-list entry with the restart probability, else the current solution
    stays. Returns (next_solution, candidate_accepted, restarted).
    """
    if candidate.feasible and candidate.fitness > current.fitness:
        return candidate, True, False
    if sa.enabled:
        temp = sa.temperature(iteration)
        delta = max(0.0, current.fitness - candidate.fitness)
        prob = math.exp(-delta / temp) if temp > 0 else 0.0
        if rng.random() < prob:
            return candidate, True, False
        if ranked.entries and rng.random() < sa.restart_prob:
            pick = ranked.entries[int(rng.integers(len(ranked.entries)))]
            return pick, False, True
    return current, False, False


def update_ranked_list(ranked: RankedList, genotype: SparsityGenotype) -> RankedList:
    ranked.insert(genotype)
    return ranked


class _SearchState:
    """Everything the loop needs to continue, checkpointable as plain JSON."""

    def __init__(self, model: ModelSnapshot, config: SearchConfig):
        self.model = model
        self.config = config
        names = model.layer_names()
        self.sizes = {n: model.layer(n).parameter_count for n in names}
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EA2C4]))
        self.policy = LayerPolicy(
            mode=config.policy_mode, layer_names=names,
            priority_list=list(config.priority_list), priority_drop=config.priority_drop,
        )
        self.sens = {
            n: SensitivityState(n, window_size=config.window_size, step=config.initial_step,
                                gain=config.gain, step_min=config.step_min,
                                step_max=config.step_max)
            for n in names
        }
        self.ranked = RankedList(config.ranked_capacity)
        self.iteration = 0
        self.last_pruned: list[str] = []
        self.baseline_top1 = 0.0
        self.baseline_top5: float | None = None
        self.current: SparsityGenotype | None = None
        self.best: SparsityGenotype | None = None

    def to_payload(self) -> dict:
        return {
            "iteration": self.iteration,
            "rng_state": encode_rng_state(self.rng.bit_generator.state),
            "baseline_top1": self.baseline_top1,
            "baseline_top5": self.baseline_top5,
            "sensitivity": {n: s.to_dict() for n, s in self.sens.items()},
            "policy": {
                "probabilities": (None if self.policy.probabilities is None
                                  else [float(p) for p in self.policy.probabilities]),
                "priority_active": self.policy.priority_active,
            },
            "ranked": self.ranked.to_dict(),
            "current": self.current.to_dict(),
            "best": self.best.to_dict(),
            "last_pruned": self.last_pruned,
            "seed": self.config.seed,
            "iterations": self.config.iterations,
        }

    def restore_payload(self, payload: dict) -> None:
        self.iteration = int(payload["iteration"])
        self.rng.bit_generator.state = decode_rng_state(payload["rng_state"])
        self.baseline_top1 = float(payload["baseline_top1"])
        self.baseline_top5 = (None if payload["baseline_top5"] is None
                              else float(payload["baseline_top5"]))
        self.sens = {n: SensitivityState.from_dict(d)
                     for n, d in payload["sensitivity"].items()}
        probs = payload["policy"]["probabilities"]
        self.policy.probabilities = None if probs is None else np.array(probs, dtype=np.float64)
        self.policy.priority_active = bool(payload["policy"]["priority_active"])
        self.ranked = RankedList.from_dict(payload["ranked"])
        self.current = SparsityGenotype.from_dict(payload["current"])
        self.best = SparsityGenotype.from_dict(payload["best"])
        self.last_pruned = list(payload["last_pruned"])
        apply_sparsities(self.model, self.current.sparsities)



def _genotype_from_model(model: ModelSnapshot, top1: float, baseline_top1: float,
                         drop_threshold: float) -> SparsityGenotype:
    return SparsityGenotype(
        sparsities=model.sparsities(),
        fitness=weighted_sparsity(model),
        top1=top1,
        feasible=(baseline_top1 - top1) <= drop_threshold,
    )


def run_search(model: ModelSnapshot, evaluator, config: SearchConfig,
               trace_path: str | Path | None = None,
               checkpoint_path: str | Path | None = None,
               resume_from: str | Path | None = None) -> SearchResult:
    """Execute the search loop; see the module docstring for the recipe."""
    state = _SearchState(model, config)
    trace_rows: list[TraceRow] = []
    resuming = resume_from is not None
    if resuming:
        state.restore_payload(load_checkpoint(resume_from, expect_kind="search"))
        if trace_path is not None:
            truncate_rows(trace_path, state.iteration)
    else:
        baseline = evaluator.evaluate(config.eval_split)
        state.baseline_top1 = baseline.top1
        state.baseline_top5 = baseline.top5
        start = _genotype_from_model(model, baseline.top1, baseline.top1,
                                     config.drop_threshold)
        state.current = start
        state.best = start

    log = CsvLog(trace_path, TRACE_HEADER, append=resuming) if trace_path else None
    try:
        completed = _search_loop(state, evaluator, trace_rows, log, checkpoint_path)
    except EvaluatorError:
        if checkpoint_path is not None:
            save_checkpoint("search", state.to_payload(), checkpoint_path)
        raise
    finally:
        if log:
            log.close()
    return SearchResult(best=state.best, ranked=state.ranked, trace=trace_rows,
                        baseline_top1=state.baseline_top1,
                        baseline_top5=state.baseline_top5, completed=completed)


def _search_loop(state: _SearchState, evaluator, trace_rows: list[TraceRow],
                 log: CsvLog | None, checkpoint_path) -> bool:
    config = state.config
    model = state.model
    names = model.layer_names()

    while state.iteration < config.iterations:
        it = state.iteration
        drop_now = state.baseline_top1 - state.current.top1
        eligible = {n: model.masks[n].sparsity < 1.0 for n in names}
        state.policy = update_policy(
            state.policy, state.sizes,
            {n: state.sens[n].sensitivity for n in names},
            config.drop_threshold, drop_now, eligible,
        )

        if drop_now < config.drop_threshold or not state.last_pruned:
            act_layers = sample_layers(state.policy, state.rng, config.multi_layer_count)
            action = "prune"
        else:
            act_layers = list(state.last_pruned)
            action = "reverse"

        steps_used = []
        sparsities_after = []
        for name in act_layers:
            step = state.sens[name].step
            steps_used.append(step)
            if action == "prune":
                sparsities_after.append(prune_layer_by_step(model, name, step))
            else:
                sparsities_after.append(reverse_prune_by_step(model, name, step))

        result = evaluator.evaluate(config.eval_split)
        candidate = _genotype_from_model(model, result.top1, state.baseline_top1,
                                         config.drop_threshold)
        for name in act_layers:
            state.sens[name].record_impact(state.baseline_top1, result.top1)
        update_ranked_list(state.ranked, candidate)

        nxt, accepted, _restarted = acceptance_step(
            state.current, candidate, state.ranked, config.sa, it, state.rng
        )
        if nxt is not candidate:
            apply_sparsities(model, nxt.sparsities)
        if candidate.feasible and candidate.fitness > state.best.fitness:
            state.best = candidate
        state.current = nxt
        if action == "prune":
            state.last_pruned = list(act_layers)

        for name in act_layers:
            state.sens[name].update_step(config.drop_threshold)

        row = TraceRow(
            iteration=it + 1,
            layer="|".join(act_layers),
            action=action,
            step=float(steps_used[0]) if len(steps_used) == 1 else float(np.mean(steps_used)),
            sparsity=float(sparsities_after[0]) if len(sparsities_after) == 1
            else float(np.mean(sparsities_after)),
            top1=result.top1,
            fitness=candidate.fitness,
            accepted=accepted,
            temperature=config.sa.temperature(it) if config.sa.enabled else 0.0,
        )
        trace_rows.append(row)
        if log:
            log.write(row.values())

        state.iteration = it + 1
        due = checkpoint_path is not None and (
            state.iteration % config.checkpoint_every == 0
            or state.iteration == config.iterations
        )
        stopping = config.stop_after is not None and state.iteration >= config.stop_after
        if checkpoint_path is not None and (due or stopping):
            save_checkpoint("search", state.to_payload(), checkpoint_path)
        if stopping and state.iteration < config.iterations:
            return False
    return True
