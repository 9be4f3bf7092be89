from types import SimpleNamespace

import numpy as np
import pytest

from prunekit.engine import BuiltinTrainer
from prunekit.engine.types import EvaluationResult, TrainerCapabilities
from prunekit.errors import CapabilityError, ContractViolationError
from prunekit.model_store import PruneMask, sparsity_to_count
from prunekit.retrain import (
    BoostSchedule,
    GradientInformedConfig,
    apply_gradient_mask,
    run_boosted,
    run_gradient_informed,
    run_progressive,
    run_simple,
)


# --- gradient masking primitive ---

def test_apply_gradient_mask():
    grads = np.array([1.0, -2.0, 3.0, -4.0], dtype=np.float32)
    np.testing.assert_array_equal(apply_gradient_mask(grads, np.ones(4, bool)), grads)
    np.testing.assert_array_equal(apply_gradient_mask(grads, np.zeros(4, bool)),
                                  np.zeros(4, dtype=np.float32))
    rng = np.random.default_rng(0)
    for _ in range(20):
        kept = rng.random(4) < 0.5
        out = apply_gradient_mask(grads, kept)
        np.testing.assert_array_equal(out != 0, kept & (grads != 0))
    with pytest.raises(ContractViolationError):
        apply_gradient_mask(grads, np.ones(3, bool))


# --- mock trainer ---

class MockTrainer:
    """Scripted trainer: validation accuracies come from a fixed list."""

    def __init__(self, sizes: dict[str, int], val_script: list[float],
                 test_top1: float = 100.0):
        self.sizes = sizes
        self.masks = {n: PruneMask(n, np.ones(k, dtype=bool)) for n, k in sizes.items()}
        self._val = iter(val_script)
        self._test = test_top1
        self.capabilities = TrainerCapabilities(True, True, True)
        self.prune_events: list[tuple] = []
        self.set_events: list[tuple] = []
        self.train_calls: list[tuple] = []
        self.model = SimpleNamespace(
            layer_names=lambda: list(sizes),
            layer=lambda n: SimpleNamespace(parameter_count=sizes[n]),
            layers=[SimpleNamespace(name=n, parameter_count=k) for n, k in sizes.items()],
        )

    def validate(self):
        return EvaluationResult(next(self._val), None, 10)

    def evaluate(self, split="test"):
        return EvaluationResult(self._test, None, 10)

    def _remask(self, name, count):
        kept = np.ones(self.sizes[name], dtype=bool)
        kept[:count] = False
        self.masks[name] = PruneMask(name, kept)

    def prune_step(self, name, step, importance=None, alpha=1.0):
        n = self.sizes[name]
        count = min(n, self.masks[name].pruned_count + sparsity_to_count(min(step, 1.0), n))
        self._remask(name, count)
        self.prune_events.append((name, step, count))
        return count / n

    def reverse_step(self, name, step, importance=None, alpha=1.0):
        n = self.sizes[name]
        count = max(0, self.masks[name].pruned_count - sparsity_to_count(min(step, 1.0), n))
        self._remask(name, count)
        return count / n

    def set_sparsity(self, name, frac, importance=None, alpha=1.0):
        count = sparsity_to_count(frac, self.sizes[name])
        self._remask(name, count)
        self.set_events.append((name, frac, count))
        return count / self.sizes[name]

    def gradient_stats(self, name):
        return np.zeros(self.sizes[name])

    def train_epochs(self, epochs, masking=None, lr=None):
        self.train_calls.append((epochs, masking))
        return EvaluationResult(self._test, None, 10)

    def layer_sparsity(self, name):
        return self.masks[name].sparsity

    def weighted_sparsity(self):
        total = sum(self.sizes.values())
        return sum(m.pruned_count for m in self.masks.values()) / total

    def sparsities(self):
        return {n: self.masks[n].sparsity for n in self.sizes}


# --- boosted state machine ---

def test_boosted_state_machine_hand_transcript():
    sizes = {"A": 100, "B": 100}
    script = [
        100.0,                            # baseline validation
        99.8, 99.7, 99.6, 99.5,           # epoch 1, layer A: four clean attempts
        98.9,                             # epoch 1, layer B: fails immediately
        99.4, 99.3, 99.2, 99.1,           # epoch 2, layer A
        98.5,                             # epoch 2, layer B: second fail -> permanent
        99.0,                             # epoch 3, layer A: drop 1.0 hits threshold0
    ]
    trainer = MockTrainer(sizes, script)
    schedule = BoostSchedule(priority_list=["A", "B"], scales=2, steps=2,
                             step_value=0.2, reduction_factor=0.2,
                             threshold0=1.0, threshold1=2)
    result = run_boosted(trainer, schedule, epochs=3, masking=True)

    # geometric step reduction per scale, restarting at step_value per layer/epoch
    a_steps_epoch1 = [s for (n, s, _) in trainer.prune_events[:4]]
    assert a_steps_epoch1 == pytest.approx([0.2, 0.2, 0.2 * 0.2, 0.2 * 0.2])

    # epoch 1: A prunes 20+20+4+4; epoch 2 repeats; epoch 3 attempt reversed
    assert trainer.masks["A"].pruned_count == 96
    # B's failed attempts were reversed exactly
    assert trainer.masks["B"].pruned_count == 0
    assert trainer.masks["B"].kept.all()

    assert schedule.skip_counts == {"A": 1, "B": 2}
    assert schedule.permanently_skipped == {"B"}

    # B was attempted once in epochs 1-2, never in epoch 3
    b_attempts = [e for e in trainer.prune_events if e[0] == "B"]
    assert len(b_attempts) == 2
    # one retraining pass per epoch, masked
    assert trainer.train_calls == [(1, True)] * 3

    # log actions match the transcript
    actions = [(r.epoch, r.layer, r.action) for r in result.log]
    assert actions == [
        (1, "A", "prune"), (1, "A", "prune"), (1, "A", "prune"), (1, "A", "prune"),
        (1, "B", "reverse"),
        (2, "A", "prune"), (2, "A", "prune"), (2, "A", "prune"), (2, "A", "prune"),
        (2, "B", "reverse"),
        (3, "A", "reverse"),
    ]


def test_boosted_empty_priority_list_is_pure_retraining():
    trainer = MockTrainer({"A": 50}, [100.0])
    schedule = BoostSchedule(priority_list=[])
    run_boosted(trainer, schedule, epochs=2)
    assert trainer.prune_events == []
    assert trainer.masks["A"].pruned_count == 0
    assert len(trainer.train_calls) == 2


# --- progressive schedule ---

def test_progressive_table_arithmetic_exact():
    # 43 epochs of 0.1 + 0.01/epoch end at 0.53 for any model
    for sizes in ({"a": 400, "b": 300}, {"x": 54, "y": 5184, "z": 120}):
        trainer = MockTrainer(sizes, [])
        run_progressive(trainer, 0.1, 0.01, 43, masking=True)
        final_targets = {}
        for name, frac, count in trainer.set_events:
            final_targets[name] = (frac, count)
        for name, (frac, count) in final_targets.items():
            assert abs(frac - 0.53) < 1e-12
            assert count == sparsity_to_count(frac, sizes[name])
        if all(n % 100 == 0 for n in sizes.values()):
            assert all(trainer.masks[n].sparsity == 0.53 for n in sizes)
        assert len(trainer.train_calls) == 43


def test_progressive_zero_increment_constant():
    trainer = MockTrainer({"a": 200}, [])
    run_progressive(trainer, 0.25, 0.0, 5, masking=False)
    fracs = {frac for (_, frac, _) in trainer.set_events}
    assert fracs == {0.25}
    assert trainer.masks["a"].sparsity == 0.25


def test_progressive_target_above_one_rejected():
    trainer = MockTrainer({"a": 100}, [])
    with pytest.raises(ContractViolationError):
        run_progressive(trainer, 0.5, 0.1, 6, masking=True)


def test_progressive_real_trainer_rounding(tiny_fixture):
    model, data, _ = tiny_fixture
    trainer = BuiltinTrainer(model, data, lr=0.0, seed=0, masking=True)
    result = run_progressive(trainer, 0.1, 0.02, 5, masking=True)
    for name in model.layer_names():
        n = model.layer(name).parameter_count
        assert trainer.masks[name].pruned_count == sparsity_to_count(0.1 + 0.02 * 5, n)
    assert result.weighted_sparsity > 0.19


# --- simple modes ---

def test_simple_retraining_sets_one_shot_sparsity():
    trainer = MockTrainer({"a": 100, "b": 400}, [])
    result = run_simple(trainer, 0.3, epochs=4, masking=False)
    assert {frac for (_, frac, _) in trainer.set_events} == {0.3}
    assert len(trainer.train_calls) == 4
    assert result.weighted_sparsity == pytest.approx(0.3)


# --- gradient-informed schedule ---

def test_gradient_informed_zero_epochs(tiny_fixture):
    model, data, _ = tiny_fixture
    trainer = BuiltinTrainer(model, data, seed=0, masking=True)
    before = trainer.sparsities()
    config = GradientInformedConfig(epochs=0, init_sparsity=0.0)
    result = run_gradient_informed(trainer, config)
    assert trainer.sparsities() == before
    assert result.log == []


def test_gradient_informed_requires_gradients(tiny_fixture):
    model, data, _ = tiny_fixture
    trainer = BuiltinTrainer(model, data, seed=0)
    trainer.capabilities = TrainerCapabilities(False, True, True)
    with pytest.raises(CapabilityError):
        run_gradient_informed(trainer, GradientInformedConfig(epochs=1))


def test_gradient_informed_masked_pool_grows_between_prunes(tiny_fixture):
    # with masking, the pruned pool only grows across prune events; reverses
    # (triggered when the drop exceeds the budget) may shrink it
    model, data, _ = tiny_fixture
    trainer = BuiltinTrainer(model, data, lr=0.05, seed=5, masking=True)
    snapshots: list[dict[str, np.ndarray]] = []

    def snapshot(epoch, tr):
        snapshots.append({n: ~tr.mask_support(n) for n in tr.model.layer_names()})

    config = GradientInformedConfig(epochs=6, init_sparsity=0.2, init_step=0.05,
                                    seed=5, masking=True, step_max=0.1)
    result = run_gradient_informed(trainer, config, epoch_callback=snapshot)
    assert len(result.log) == 6
    assert result.weighted_sparsity > 0.2
    for idx in range(1, len(snapshots)):
        row = result.log[idx]  # the event between snapshot idx-1 and idx
        for name, prev in snapshots[idx - 1].items():
            if row.action == "reverse" and row.layer == name:
                continue
            assert np.all(snapshots[idx][name][prev]), (
                f"pruned pool shrank at {name} in epoch {row.epoch} without a reverse")
