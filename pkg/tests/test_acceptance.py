"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline.
"""

import itertools
import math
import time

import numpy as np
import pytest

from prunekit.engine import (
    BuiltinEvaluator,
    BuiltinTrainer,
    gradient_check,
    random_small_network,
)
from prunekit.fixtures import load_fixture
from prunekit.model_store import (
    LayerTensor,
    ModelSnapshot,
    all_ones_mask,
    magnitude_kept,
    sparsity_to_count,
    weighted_sparsity,
)
from prunekit.policy import compute_probabilities
from prunekit.pruning_ops import (
    apply_sparsities,
    gradient_informed_kept,
    prune_layer_by_step,
    reverse_prune_by_step,
    set_layer_sparsity,
)
from prunekit.retrain import GradientInformedConfig, run_gradient_informed, run_progressive
from prunekit.search import (
    AnnealingSchedule,
    RankedList,
    SearchConfig,
    SparsityGenotype,
    acceptance_step,
    run_search,
)
from prunekit.sensitivity import SensitivityState
from prunekit.structural import StructuralConfig, run_structural


def criterion(name: str, ok: bool, detail: str = "") -> None:
    print(f"\n[ACCEPTANCE] {name}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"{name} failed: {detail}"


@pytest.fixture(scope="module")
def desk(desk_fixture_dir):
    return desk_fixture_dir


@pytest.fixture(scope="module")
def desk_search_result(desk):
    """Shared 150-iteration default search on the desk fixture (criteria 6 and 11)."""
    model, data, meta = load_fixture(desk)
    evaluator = BuiltinEvaluator(model, data)
    started = time.monotonic()
    result = run_search(model, evaluator, SearchConfig(iterations=150, drop_threshold=1.0,
                                                       seed=7))
    return model, data, evaluator, result, time.monotonic() - started


def test_oracle_equivalence(tiny_fixture_dir):
    model, data, meta = load_fixture(tiny_fixture_dir)
    evaluator = BuiltinEvaluator(model, data)
    names = model.layer_names()
    assert len(names) == 3
    started = time.monotonic()

    baseline = evaluator.evaluate("test").top1
    grid = [0.0, 0.2, 0.4, 0.6, 0.8]
    oracle_best = 0.0
    for combo in itertools.product(grid, repeat=3):
        apply_sparsities(model, dict(zip(names, combo)))
        result = evaluator.evaluate("test")
        if baseline - result.top1 <= 1.0:
            oracle_best = max(oracle_best, weighted_sparsity(model))

    apply_sparsities(model, {n: 0.0 for n in names})
    search = run_search(model, evaluator,
                        SearchConfig(iterations=150, drop_threshold=1.0, seed=11,
                                     sa=AnnealingSchedule(enabled=True)))
    elapsed = time.monotonic() - started
    ok = (search.best.fitness >= oracle_best - 0.05 and search.best.feasible
          and elapsed < 60.0)
    criterion("oracle-equivalence", ok,
              f"search={search.best.fitness:.4f} oracle={oracle_best:.4f} "
              f"elapsed={elapsed:.1f}s")


def test_equation_suite():
    rng = np.random.default_rng(2)
    # selection-probability properties over 1e3 random instances
    for _ in range(1000):
        n = int(rng.integers(2, 10))
        sizes = rng.integers(1, 100_000, n).astype(float)
        sens = rng.uniform(0, 2.0, n)
        threshold = float(rng.uniform(0.5, 1.5))
        probs = compute_probabilities(sizes, sens, threshold)
        assert abs(probs.sum() - 1.0) <= 1e-9 and (probs >= 0).all()
        if (sens < threshold).any():
            assert (probs[sens >= threshold] == 0).all()
        flat = compute_probabilities(sizes, np.full(n, sens[0] % 0.4), threshold)
        order = np.argsort(sizes, kind="stable")
        assert (np.diff(flat[order]) >= -1e-15).all()

    # window means equal brute-force means for random push sequences
    for _ in range(300):
        w = int(rng.integers(1, 9))
        state = SensitivityState("l", window_size=w)
        drops = rng.uniform(-2, 3, int(rng.integers(1, 30)))
        for d in drops:
            state.record_impact(100.0, 100.0 - d)
        expected = float(np.mean(drops[-w:]))
        assert abs(state.sensitivity - expected) <= 1e-9

    # step adaptation: worked example exact to 1e-12, sign property
    state = SensitivityState("l", step=0.05, gain=1.0)
    state.record_impact(100.0, 99.5)
    exact = abs(state.update_step(1.0) - 0.075) <= 1e-12
    sign_ok = True
    for _ in range(500):
        st = SensitivityState("l", step=float(rng.uniform(0.01, 0.2)),
                              gain=float(rng.uniform(0.2, 2.0)))
        st.record_impact(100.0, 100.0 - float(rng.uniform(0, 2)))
        before = st.step
        after = st.update_step(1.0)
        if st.sensitivity < 1.0:
            sign_ok &= after >= min(before, st.step_max)
        elif st.sensitivity > 1.0:
            sign_ok &= after <= max(before, st.step_min)
    criterion("equation-suite", exact and sign_ok,
              "probabilities/window/step checks over randomized instances")


def test_mask_algebra():
    rng = np.random.default_rng(3)
    restore_ok = True
    count_ok = True
    alpha_ok = True
    for case in range(1000):
        n = int(rng.integers(4, 500))
        w = rng.normal(0, 1, (1, n)).astype(np.float32)
        layer = LayerTensor("l", "dense", (1, n), w)
        model = ModelSnapshot([layer], {"l": all_ones_mask(layer)}, [], {})
        start = float(rng.uniform(0, 0.7))
        set_layer_sparsity(model, "l", start)
        before_mask = model.masks["l"].kept.copy()
        step = float(rng.uniform(0.001, 1.0 - start))
        prune_layer_by_step(model, "l", step)
        reverse_prune_by_step(model, "l", step)
        restore_ok &= bool(np.array_equal(model.masks["l"].kept, before_mask))

        # weighted sparsity equals hand-counted zeros
        zeros = int(np.count_nonzero(~model.masks["l"].kept))
        count_ok &= weighted_sparsity(model) == zeros / n

        # gradient blend at alpha=1 equals the magnitude mask
        imp = rng.uniform(0, 3, n)
        count = int(rng.integers(0, n + 1))
        alpha_ok &= bool(np.array_equal(
            gradient_informed_kept(w.reshape(-1), imp, count, alpha=1.0),
            magnitude_kept(w.reshape(-1), count)))
    criterion("mask-algebra", restore_ok and count_ok and alpha_ok,
              "1000 randomized prune/reverse, sparsity count, alpha=1 cases")


def test_sa_acceptance_statistics():
    rng = np.random.default_rng(1234)
    sa = AnnealingSchedule(t0=0.1, decay=0.97, enabled=True, restart_prob=0.1)
    ranked = RankedList(5)
    current = SparsityGenotype({"a": 0.0}, 0.52, 99.0, True)
    candidate = SparsityGenotype({"a": 0.1}, 0.50, 99.0, True)
    trials = 100_000
    hits = sum(acceptance_step(current, candidate, ranked, sa, 0, rng)[1]
               for _ in range(trials))
    rate = hits / trials
    expected = math.exp(-0.2)
    criterion("sa-acceptance-statistics", abs(rate - expected) < 0.01,
              f"rate={rate:.4f} expected={expected:.4f}")


def test_engine_gradient_check():
    worst = 0.0
    for seed in range(10):
        net, x = random_small_network(seed)
        labels = np.arange(x.shape[0]) % 4
        worst = max(worst, gradient_check(net, x, labels))
    criterion("engine-gradient-check", worst <= 1e-3, f"max rel err {worst:.2e}")


def test_desk_scale_search(desk_search_result):
    model, data, evaluator, result, elapsed = desk_search_result
    drop = result.baseline_top1 - result.best.top1
    ok = result.best.fitness >= 0.30 and drop <= 1.0 and elapsed < 300.0
    criterion("desk-scale-search", ok,
              f"ws={result.best.fitness:.3f} drop={drop:.2f}pt elapsed={elapsed:.0f}s")


def test_desk_scale_gradient_informed_retraining(desk):
    model, data, meta = load_fixture(desk)
    trainer = BuiltinTrainer(model, data, lr=0.03, batch_size=32, seed=7, masking=True)
    snapshots: list[dict[str, np.ndarray]] = []

    def snapshot(epoch, tr):
        snapshots.append({n: ~tr.mask_support(n) for n in tr.model.layer_names()})

    config = GradientInformedConfig(epochs=15, drop_threshold=1.0, init_sparsity=0.2,
                                    init_step=0.02, alpha=0.5, seed=7, masking=True,
                                    step_max=0.05)
    result = run_gradient_informed(trainer, config, epoch_callback=snapshot)
    drop = result.baseline_top1 - result.final_top1
    monotone = all(
        np.all(snapshots[i][name][snapshots[i - 1][name]])
        for i in range(1, len(snapshots))
        for name in snapshots[i]
    )
    ok = result.weighted_sparsity >= 0.60 and drop <= 1.0 and monotone
    criterion("desk-scale-gradient-informed-retraining", ok,
              f"ws={result.weighted_sparsity:.3f} drop={drop:+.2f}pt "
              f"monotone_epoch_boundaries={monotone} epochs={config.epochs}")


def test_progressive_schedule_arithmetic():
    from test_retrain import MockTrainer

    results = []
    for sizes in ({"a": 400, "b": 1200}, {"x": 54, "y": 5184, "z": 120}):
        trainer = MockTrainer(sizes, [])
        run_progressive(trainer, 0.1, 0.01, 43, masking=True)
        finals = {}
        for name, frac, count in trainer.set_events:
            finals[name] = (frac, count)
        for name, (frac, count) in finals.items():
            results.append(abs(frac - 0.53) < 1e-12)
            results.append(count == sparsity_to_count(frac, sizes[name]))
        if all(v % 100 == 0 for v in sizes.values()):
            results.append(all(trainer.masks[n].sparsity == 0.53 for n in sizes))
    criterion("progressive-schedule", all(results),
              "0.1 + 0.01*epoch over 43 epochs ends at 0.53 on both models")


def test_boost_state_machine():
    from test_retrain import MockTrainer
    from prunekit.retrain import BoostSchedule, run_boosted

    sizes = {"A": 100, "B": 100}
    script = [100.0,
              99.8, 99.7, 99.6, 99.5, 98.9,
              99.4, 99.3, 99.2, 99.1, 98.5,
              99.0]
    trainer = MockTrainer(sizes, script)
    schedule = BoostSchedule(priority_list=["A", "B"], scales=2, steps=2,
                             step_value=0.2, reduction_factor=0.2,
                             threshold0=1.0, threshold1=2)
    result = run_boosted(trainer, schedule, epochs=3, masking=True)
    transcript = [(r.epoch, r.layer, r.action) for r in result.log]
    expected = [
        (1, "A", "prune"), (1, "A", "prune"), (1, "A", "prune"), (1, "A", "prune"),
        (1, "B", "reverse"),
        (2, "A", "prune"), (2, "A", "prune"), (2, "A", "prune"), (2, "A", "prune"),
        (2, "B", "reverse"),
        (3, "A", "reverse"),
    ]
    steps_scale = [s for (n, s, _) in trainer.prune_events[:4]]
    ok = (transcript == expected
          and schedule.skip_counts == {"A": 1, "B": 2}
          and schedule.permanently_skipped == {"B"}
          and steps_scale == pytest.approx([0.2, 0.2, 0.04, 0.04])
          and trainer.masks["A"].pruned_count == 96
          and trainer.masks["B"].pruned_count == 0)
    criterion("boosted-state-machine", ok, "hand-simulated transcript matches")


def test_structural_pipeline(desk):
    model, data, meta = load_fixture(desk)
    trainer = BuiltinTrainer(model, data, lr=0.03, batch_size=32, seed=7, masking=True)
    config = StructuralConfig(fraction_per_iter=0.1, drop_budget=1.0,
                              retrain_epochs=1, max_iterations=12)
    result = run_structural(trainer, config)
    drop = result.baseline_top1 - result.final_top1
    ok = result.channel_fraction_removed >= 0.25 and drop <= 1.0
    criterion("structural-pruning", ok,
              f"channels_removed={result.channel_fraction_removed:.1%} drop={drop:+.2f}pt")


def test_filter_refinement(desk_search_result):
    from prunekit.filter_analysis import (
        compute_class_profiles,
        compute_filter_contributions,
        refine_pruning,
    )

    model, data, evaluator, search, _ = desk_search_result
    apply_sparsities(model, search.best.sparsities)
    pre_masks = model.copy_masks()
    pre_ws = weighted_sparsity(model)
    contribs = compute_filter_contributions(model, evaluator)
    profiles = compute_class_profiles(model, evaluator)
    result = refine_pruning(model, evaluator, contribs, profiles, tau=0.05,
                            drop_budget=0.0)
    if result.reverted:
        identical = all(
            np.array_equal(model.masks[n].kept, pre_masks[n].kept)
            for n in model.layer_names()
        )
        ok = identical
        detail = "reverted with bit-identical masks"
    else:
        ok = (result.post_weighted_sparsity > pre_ws
              and result.post_top1 >= result.pre_top1)
        detail = (f"ws {pre_ws:.4f} -> {result.post_weighted_sparsity:.4f} "
                  f"top1 {result.pre_top1} -> {result.post_top1}")
    criterion("filter-analysis-refinement", ok, detail)


def test_secondary_protocol_conformance():
    """[SECONDARY] adapter conformance: recorded conversation, mask parity,
    and search-trajectory parity against the built-in engine."""
    import json
    import shutil
    from pathlib import Path

    from prunekit.engine.data import load_dataset
    from prunekit.external import external_session
    from prunekit.model_store import load_model, magnitude_kept, sparsity_to_count

    adapter = Path(__file__).resolve().parent.parent / "adapter"
    server = adapter / "dist" / "src" / "server.js"
    testdata = adapter / "testdata"
    if not server.exists() or shutil.which("node") is None:
        pytest.skip("adapter not built (cd adapter && npm install && npm run build)")

    parity = True
    for case in json.loads((testdata / "mask_parity.json").read_text())["cases"]:
        w = np.array(case["weights"], dtype=np.float32)
        kept = magnitude_kept(w, sparsity_to_count(case["sparsity"], w.size))
        parity &= [int(k) for k in kept] == case["kept"]

    conversation = json.loads((testdata / "conversation.json").read_text())
    schema_ok = all(t["response"]["id"] == t["request"]["id"]
                    for t in conversation["turns"])

    model_b = load_model(testdata / "tinymodel")
    data = load_dataset(testdata / "tinydata")
    builtin = BuiltinEvaluator(model_b, data)
    config = SearchConfig(iterations=25, drop_threshold=1.0, seed=17)
    trace_b = run_search(model_b, builtin, config).trace
    model_e = load_model(testdata / "tinymodel")
    command = ["node", str(server), "--model", str(testdata / "tinymodel"),
               "--dataset", str(testdata / "tinydata")]
    with external_session(command, model_e) as session:
        trace_e = run_search(model_e, session, config).trace
    worst = max(abs(b.top1 - e.top1) for b, e in zip(trace_b, trace_e))
    criterion("protocol-conformance(secondary)",
              parity and schema_ok and worst <= 0.5,
              f"mask_parity={parity} schema={schema_ok} max_top1_gap={worst:.3f}pt")


def test_determinism_and_resume(tiny_fixture_dir, tmp_path):
    model, data, meta = load_fixture(tiny_fixture_dir)
    evaluator = BuiltinEvaluator(model, data)

    def fresh():
        apply_sparsities(model, {n: 0.0 for n in model.layer_names()})

    # identical seed -> identical trace bytes
    paths = []
    for run in range(2):
        fresh()
        path = tmp_path / f"t{run}.csv"
        run_search(model, evaluator, SearchConfig(iterations=100, seed=21), trace_path=path)
        paths.append(path.read_bytes())
    same_seed = paths[0] == paths[1]

    # kill at iteration 50, resume, compare byte-for-byte
    fresh()
    full = tmp_path / "full.csv"
    run_search(model, evaluator, SearchConfig(iterations=100, seed=33, checkpoint_every=10),
               trace_path=full)
    fresh()
    part = tmp_path / "part.csv"
    ck = tmp_path / "ck.json"
    run_search(model, evaluator,
               SearchConfig(iterations=100, seed=33, checkpoint_every=10, stop_after=50),
               trace_path=part, checkpoint_path=ck)
    run_search(model, evaluator,
               SearchConfig(iterations=100, seed=33, checkpoint_every=10),
               trace_path=part, checkpoint_path=ck, resume_from=ck)
    resumed = part.read_bytes() == full.read_bytes()
    criterion("determinism-and-resume", same_seed and resumed,
              f"same_seed_identical={same_seed} resume_identical={resumed}")
