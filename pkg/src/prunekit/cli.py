"""Command-line entry point.

Commands: ``make-fixture``, ``eval``, ``prune-search``, ``prune-retrain``,
``prune-structural``, ``analyze-filters``. Options may come from flags or a
JSON config file (flag names with dashes as keys; flags win). Every run
writes its artifacts under ``--out``: a trace/log CSV, ``report.json``,
final ``masks.bin``, and checkpoints where the pipeline supports resuming.

Exit codes: 0 success, 2 config error, 3 model/dataset error, 4 evaluator
or trainer error, 5 fixture bounds error, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import filter_analysis, structural
from .engine.builtin import BuiltinEvaluator, BuiltinTrainer
from .engine.data import load_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    EvaluatorError,
    FixtureBoundsError,
    ModelLoadError,
    PrunekitError,
)
from .external import external_session
from .fixtures import FixtureSpec, make_fixture
from .model_store import apply_mask_file, load_model, weighted_sparsity, write_masks
from .policy import resolve_priority_list
from .retrain import (
    BoostSchedule,
    GradientInformedConfig,
    RetrainPolicy,
    run_retrain,
)
from .search import AnnealingSchedule, SearchConfig, run_search

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MODEL = 3
EXIT_EVALUATOR = 4
EXIT_BOUNDS = 5

DEFAULT_OUT = os.environ.get("PRUNEKIT_OUT", "prunekit-out")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _merge_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    """Apply config-file values for options the command line left at default."""
    file_values = _load_config_file(getattr(args, "config", None))
    if not file_values:
        return args
    known = {name for name in vars(args) if not name.startswith("_")} - {"func", "command"}
    explicit = set(getattr(args, "_explicit", set()))
    for key, value in file_values.items():
        dest = key.replace("-", "_").replace(".", "_")
        if dest not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if dest not in explicit:
            setattr(args, dest, value)
    return args


class _TrackingParser(argparse.ArgumentParser):
    """Remembers which options were given explicitly so config files can fill gaps."""

    def parse_args(self, argv=None, namespace=None):  # type: ignore[override]
        ns = super().parse_args(argv, namespace)
        explicit = set()
        for token in argv or []:
            if token.startswith("--"):
                name = token[2:].split("=", 1)[0]
                explicit.add(name.replace("-", "_"))
                if name.startswith("no-"):  # BooleanOptionalAction negative form
                    explicit.add(name[3:].replace("-", "_"))
        ns._explicit = explicit
        return ns


def _require(args, *names) -> None:
    missing = [n for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join('--' + n for n in missing)}")


def _make_evaluator(args, model):
    if args.evaluator == "builtin":
        data = load_dataset(args.dataset)
        return BuiltinEvaluator(model, data)
    if args.evaluator == "external":
        if not args.external_cmd:
            raise ConfigError("--external-cmd is required with --evaluator external")
        return external_session(args.external_cmd.split(), model)
    raise ConfigError(f"unknown evaluator {args.evaluator!r}")


def _write_report(out: Path, payload: dict) -> None:
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _result_dict(res) -> dict:
    return {"top1": res.top1, "top5": res.top5, "samples": res.samples}


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_make_fixture(args) -> int:
    spec = FixtureSpec(
        classes=args.classes, image_size=args.image_size, samples=args.samples,
        seed=args.seed, arch=args.arch, epochs=args.epochs,
        learning_rate=args.lr, batch_size=args.batch_size,
    )
    metadata = make_fixture(spec, args.out)
    print(json.dumps({"baseline_top1": metadata["baseline_top1"],
                      "parameters": metadata["parameter_count"],
                      "out": str(args.out)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "model", "dataset")
    model = load_model(args.model)
    if args.masks:
        apply_mask_file(model, args.masks)
    evaluator = _make_evaluator(args, model)
    started = time.monotonic()
    result = evaluator.evaluate(args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_report(out, {
        "command": "eval",
        "model": str(args.model),
        "weighted_sparsity": weighted_sparsity(model),
        "per_layer_sparsities": model.sparsities(),
        "final": _result_dict(result),
        "wall_time_s": time.monotonic() - started,
    })
    print(json.dumps({"top1": result.top1, "top5": result.top5}))
    return EXIT_OK


def cmd_prune_search(args) -> int:
    _require(args, "model", "dataset")
    model = load_model(args.model)
    evaluator = _make_evaluator(args, model)
    priority = []
    if args.priority:
        sizes = {lt.name: lt.parameter_count for lt in model.layers}
        spec = args.priority if "largest" in args.priority else args.priority.split(",")
        priority = resolve_priority_list(spec, sizes)
    config = SearchConfig(
        iterations=args.iterations,
        drop_threshold=args.drop_threshold,
        policy_mode=args.policy,
        priority_list=priority,
        priority_drop=args.priority_drop,
        multi_layer_count=args.multi_layer,
        sa=AnnealingSchedule(t0=args.t0, decay=args.sa_decay, enabled=args.sa,
                             restart_prob=args.restart_prob),
        ranked_capacity=args.ranked_capacity,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        stop_after=args.stop_after,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.monotonic()
    result = run_search(
        model, evaluator, config,
        trace_path=out / "trace.csv",
        checkpoint_path=out / "checkpoint.json",
        resume_from=args.resume,
    )
    from .pruning_ops import apply_sparsities

    apply_sparsities(model, result.best.sparsities)
    write_masks(model.masks, out / "masks.bin")
    final = evaluator.evaluate(args.split)
    _write_report(out, {
        "command": "prune-search",
        "seed": args.seed,
        "iterations": config.iterations,
        "completed": result.completed,
        "weighted_sparsity": result.best.fitness,
        "per_layer_sparsities": result.best.sparsities,
        "baseline": {"top1": result.baseline_top1, "top5": result.baseline_top5},
        "final": _result_dict(final),
        "ranked": [e.to_dict() for e in result.ranked.entries],
        "wall_time_s": time.monotonic() - started,
    })
    print(json.dumps({"weighted_sparsity": result.best.fitness,
                      "top1": final.top1, "completed": result.completed}))
    return EXIT_OK


def cmd_prune_retrain(args) -> int:
    _require(args, "model", "dataset")
    model = load_model(args.model)
    data = load_dataset(args.dataset)
    trainer = BuiltinTrainer(model, data, lr=args.lr, batch_size=args.batch_size,
                             seed=args.seed, masking=args.masking)
    started = time.monotonic()
    policy = RetrainPolicy(mode=args.mode, masking=args.masking, epochs=args.epochs,
                           learning_rate=args.lr, sparsity=args.sparsity,
                           progressive_start=args.start,
                           progressive_increment=args.increment)
    schedule = None
    gradient_config = None
    if args.mode == "boosted":
        sizes = {lt.name: lt.parameter_count for lt in model.layers}
        spec = args.priority if "largest" in (args.priority or "") else (
            args.priority.split(",") if args.priority else list(sizes)
        )
        schedule = BoostSchedule(
            priority_list=resolve_priority_list(spec, sizes),
            scales=args.scales, steps=args.steps, step_value=args.step_value,
            reduction_factor=args.reduction_factor,
            threshold0=args.threshold0, threshold1=args.threshold1,
        )
    elif args.mode == "gradient_informed":
        gradient_config = GradientInformedConfig(
            epochs=args.epochs, drop_threshold=args.drop_threshold,
            init_sparsity=args.init_sparsity, init_step=args.init_step,
            alpha=args.alpha, masking=args.masking, seed=args.seed,
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_retrain(trainer, policy, boost_schedule=schedule,
                         gradient_config=gradient_config,
                         log_path=out / "log.csv",
                         checkpoint_path=out / "checkpoint.json",
                         resume_from=args.resume, stop_after=args.stop_after)
    write_masks(trainer.masks, out / "masks.bin")
    _write_report(out, {
        "command": "prune-retrain",
        "mode": args.mode,
        "seed": args.seed,
        "completed": result.completed,
        "weighted_sparsity": result.weighted_sparsity,
        "per_layer_sparsities": result.sparsities,
        "baseline": {"top1": result.baseline_top1},
        "final": {"top1": result.final_top1, "top5": result.final_top5},
        "wall_time_s": time.monotonic() - started,
    })
    print(json.dumps({"weighted_sparsity": result.weighted_sparsity,
                      "top1": result.final_top1}))
    return EXIT_OK


def cmd_prune_structural(args) -> int:
    _require(args, "model", "dataset")
    model = load_model(args.model)
    data = load_dataset(args.dataset)
    trainer = BuiltinTrainer(model, data, lr=args.lr, batch_size=args.batch_size,
                             seed=args.seed, masking=True)
    config = structural.StructuralConfig(
        fraction_per_iter=args.fraction, drop_budget=args.drop_budget,
        retrain_epochs=args.retrain_epochs, max_iterations=args.max_iterations,
    )
    started = time.monotonic()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = structural.run_structural(
        trainer, config, log_path=out / "log.csv",
        checkpoint_path=out / "checkpoint.json",
        resume_from=args.resume, stop_after=args.stop_after)
    write_masks(trainer.masks, out / "masks.bin")
    summary = structural.summary_to_json(result)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_report(out, {
        "command": "prune-structural",
        "seed": args.seed,
        "weighted_sparsity": result.parameter_fraction_removed,
        "channel_fraction_removed": result.channel_fraction_removed,
        "baseline": {"top1": result.baseline_top1},
        "final": {"top1": result.final_top1},
        "wall_time_s": time.monotonic() - started,
    })
    print(json.dumps({"channels_removed": result.channel_fraction_removed,
                      "top1": result.final_top1}))
    return EXIT_OK


def cmd_analyze_filters(args) -> int:
    _require(args, "model", "dataset")
    model = load_model(args.model)
    if args.masks:
        apply_mask_file(model, args.masks)
    evaluator = _make_evaluator(args, model)
    started = time.monotonic()
    contributions = filter_analysis.compute_filter_contributions(model, evaluator)
    profiles = filter_analysis.compute_class_profiles(model, evaluator)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "contributions.json").write_text(
        json.dumps(filter_analysis.contributions_to_json(contributions),
                   indent=2, sort_keys=True) + "\n")
    (out / "profiles.json").write_text(
        json.dumps(filter_analysis.profiles_to_json(profiles), indent=2) + "\n")
    report: dict = {
        "command": "analyze-filters",
        "weighted_sparsity": weighted_sparsity(model),
        "wall_time_s": time.monotonic() - started,
    }
    if args.refine:
        refinement = filter_analysis.refine_pruning(
            model, evaluator, contributions, profiles, args.tau, args.budget)
        write_masks(model.masks, out / "masks.bin")
        report["refinement"] = {
            "additional_pruned": refinement.additional_pruned,
            "reverted": refinement.reverted,
            "pre_top1": refinement.pre_top1,
            "post_top1": refinement.post_top1,
            "weighted_sparsity": refinement.post_weighted_sparsity,
        }
        report["weighted_sparsity"] = refinement.post_weighted_sparsity
    _write_report(out, report)
    print(json.dumps({"weighted_sparsity": report["weighted_sparsity"]}))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> _TrackingParser:
    parser = _TrackingParser(prog="prunekit", description=__doc__,
                             formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--out", default=DEFAULT_OUT, help="output directory")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("make-fixture", help="generate and train a desk-scale fixture")
    common(p)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--samples", type=int, default=2400)
    p.add_argument("--arch", default="desk4")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=0.08)
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_make_fixture)

    def model_data(p, evaluator=True):
        p.add_argument("--model")
        p.add_argument("--dataset")
        if evaluator:
            p.add_argument("--evaluator", choices=("builtin", "external"), default="builtin")
            p.add_argument("--external-cmd", help="command line of the external evaluator")

    p = sub.add_parser("eval", help="evaluate a model, optionally with a mask file")
    common(p)
    model_data(p)
    p.add_argument("--masks")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prune-search", help="no-retraining sparsity search")
    common(p)
    model_data(p)
    p.add_argument("--iterations", type=int, default=150)
    p.add_argument("--drop-threshold", type=float, default=1.0)
    p.add_argument("--policy", choices=("constant", "dynamic", "prioritized"),
                   default="constant")
    p.add_argument("--priority", help="comma-separated layer names or '<N>-largest'")
    p.add_argument("--priority-drop", type=float, default=0.0)
    p.add_argument("--multi-layer", type=int, default=1)
    p.add_argument("--sa", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--t0", type=float, default=0.1)
    p.add_argument("--sa-decay", type=float, default=0.97)
    p.add_argument("--restart-prob", type=float, default=0.1)
    p.add_argument("--ranked-capacity", type=int, default=10)
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint-every", type=int, default=10)
    p.add_argument("--stop-after", type=int)
    p.add_argument("--resume", help="checkpoint file to continue from")
    p.set_defaults(func=cmd_prune_search)

    p = sub.add_parser("prune-retrain", help="pruning interleaved with retraining")
    common(p)
    model_data(p, evaluator=False)
    p.add_argument("--mode", choices=("simple", "simple_masked", "progressive",
                                      "boosted", "gradient_informed"),
                   default="gradient_informed")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--masking", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--sparsity", type=float, default=0.2, help="simple modes")
    p.add_argument("--start", type=float, default=0.1, help="progressive start")
    p.add_argument("--increment", type=float, default=0.01, help="progressive step per epoch")
    p.add_argument("--priority", help="boosted priority list or '<N>-largest'")
    p.add_argument("--scales", type=int, default=2)
    p.add_argument("--steps", type=int, default=12)
    p.add_argument("--step-value", type=float, default=0.05)
    p.add_argument("--reduction-factor", type=float, default=0.5)
    p.add_argument("--threshold0", type=float, default=1.0)
    p.add_argument("--threshold1", type=int, default=3)
    p.add_argument("--drop-threshold", type=float, default=1.0)
    p.add_argument("--init-sparsity", type=float, default=0.3)
    p.add_argument("--init-step", type=float, default=0.05)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--stop-after", type=int)
    p.add_argument("--resume", help="checkpoint file to continue from")
    p.set_defaults(func=cmd_prune_retrain)

    p = sub.add_parser("prune-structural", help="channel removal with retraining")
    common(p)
    model_data(p, evaluator=False)
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--drop-budget", type=float, default=1.0)
    p.add_argument("--retrain-epochs", type=int, default=1)
    p.add_argument("--max-iterations", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--stop-after", type=int)
    p.add_argument("--resume", help="checkpoint file to continue from")
    p.set_defaults(func=cmd_prune_structural)

    p = sub.add_parser("analyze-filters", help="filter contribution and class profiles")
    common(p)
    model_data(p)
    p.add_argument("--masks")
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--budget", type=float, default=0.0)
    p.add_argument("--refine", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_analyze_filters)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _merge_config(args, parser)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ModelLoadError, CheckpointError) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except EvaluatorError as exc:
        print(f"evaluator error: {exc}", file=sys.stderr)
        return EXIT_EVALUATOR
    except FixtureBoundsError as exc:
        print(f"bounds error: {exc}", file=sys.stderr)
        return EXIT_BOUNDS
    except PrunekitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
