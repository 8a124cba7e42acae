# src/cli.py
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Sequence

from src.api_client import connect
from src.consensus import (
    consensus_all,
    consensus_report,
    filter_workers,
    load_control_key,
    load_responses,
    validity_by_type,
    validity_rate,
    write_verdicts_csv,
)
from src.dataset_io import convert_class_tree, convert_paired_tree, load_manifest
from src.errors import ConfigError, DillemaError
from src.evaluation import (
    EffectivenessComparison,
    average_effectiveness,
    class_degradation,
    compare_effectiveness,
    failure_histogram,
    group_outcomes,
    load_report,
    render_report,
    retraining_delta,
    save_report,
    write_confusion_csv,
    write_json,
)
from src.mock_backends import MockServices
from src.pipeline import AugmentationRunner, evaluate_suite
from src.prompts import load_templates
from src.run_config import ALL_EDITS, RunConfig, load_run_config

logger = logging.getLogger(__name__)


def _pct(value: float | None) -> str:
    return "n/a" if value is None else f"{100 * value:.1f}%"


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="[%(name)s] %(message)s",
        force=True,
    )
    # urllib3/requests-cache chatter is only useful when debugging transport
    for noisy in ("urllib3", "requests_cache"):
        logging.getLogger(noisy).setLevel(logging.WARNING)


def _budget(text: str) -> int | str:
    """`--budget` takes a non-negative integer or the word "all"."""
    if text.strip().lower() == ALL_EDITS:
        return ALL_EDITS
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or '{ALL_EDITS}', got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"budget must be >= 0, got {value}")
    return value


def _run_config(args: argparse.Namespace) -> RunConfig:
    overrides: Dict[str, Any] = {
        "manifest": getattr(args, "manifest", None),
        "output_dir": getattr(args, "output_dir", None),
        "cache_dir": getattr(args, "cache_dir", None),
        "seed": getattr(args, "seed", None),
        "budget": getattr(args, "budget", None),
        "augmentations": getattr(args, "augmentations", None),
        "per_class": getattr(args, "per_class", None),
        "parallelism": getattr(args, "parallelism", None),
        "max_attempts": getattr(args, "max_attempts", None),
        "caption_mode": getattr(args, "caption_mode", None),
        "manifest_mode": getattr(args, "manifest_mode", None),
    }
    if getattr(args, "offline", False):
        overrides["offline"] = True
    return load_run_config(args.config, overrides)


def _backends(config: RunConfig, class_count: int):
    return connect(
        config.resolve_endpoints(),
        cache_dir=config.cache_dir,
        offline=config.offline,
        max_in_flight=config.max_in_flight,
        mock_services=MockServices.default(class_count),
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_augment(args: argparse.Namespace) -> int:
    config = _run_config(args)
    if not config.manifest:
        raise ConfigError("no manifest given (--manifest or \"manifest\" in the config file)")

    manifest = load_manifest(config.manifest)
    templates = load_templates(manifest.task.kind, config.template_dir)
    backends = _backends(config, manifest.class_count)

    summary = AugmentationRunner(config, manifest, backends, templates).run()

    print(f"Records:       {summary.records} ({len(summary.produced)} new, {len(summary.resumed)} resumed)")
    print(f"Augmentations: {summary.augmentations}")
    print(f"Failed:        {len(summary.failed)}")
    for failure in summary.failed:
        print(f"  {failure.record_id} at {failure.stage}: {failure.error_type}")
    print(f"Skipped:       {len(summary.skipped)}")
    print(f"\nLedger written to: {summary.ledger}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _run_config(args)
    manifest = load_manifest(args.manifest)
    backends = _backends(config, manifest.class_count)

    report = evaluate_suite(
        manifest,
        backends.model,
        suite_name=args.suite_name,
        model_name=args.model_name or "",
        parallelism=config.parallelism,
    )
    out = save_report(report, args.output)
    if report.outcomes:
        print(f"{report.metric_name}: {_pct(float(report.metric()))} over {len(report.outcomes)} case(s)")
    print(f"Not scored: {len(report.failures)}")
    print(f"\nReport written to: {out}")
    return 0


def _print_comparison(comparison: EffectivenessComparison) -> None:
    print(f"Original error:  {_pct(comparison.original_error)}")
    print(f"Augmented error: {_pct(comparison.augmented_error)}")
    ratio = "undefined (original suite has no errors)" if comparison.ratio is None else f"{comparison.ratio:.2f}x"
    print(f"Ratio:           {ratio}")
    if comparison.validity_adjusted_error is not None:
        print(
            f"Validity-adjusted error: {_pct(comparison.validity_adjusted_error)} "
            f"(validity {_pct(comparison.validity_rate)})"
        )


def _comparison_dict(comparison: EffectivenessComparison) -> Dict[str, Any]:
    return {
        "original_error": comparison.original_error,
        "augmented_error": comparison.augmented_error,
        "ratio": comparison.ratio,
        "validity_rate": comparison.validity_rate,
        "validity_adjusted_error": comparison.validity_adjusted_error,
        "models": list(comparison.models),
    }


def cmd_compare(args: argparse.Namespace) -> int:
    originals: List[str] = args.original or []
    augmented: List[str] = args.augmented or []
    if len(originals) != len(augmented):
        raise ConfigError("give one --augmented report per --original report")
    if not originals and not (args.before and args.after):
        raise ConfigError("nothing to compare: pass --original/--augmented or --before/--after")

    result: Dict[str, Any] = {}
    if originals:
        pairs = [(load_report(o), load_report(a)) for o, a in zip(originals, augmented)]
        comparisons = [compare_effectiveness(o, a, args.validity) for o, a in pairs]
        for (orig, _), comparison in zip(pairs, comparisons):
            print(f"== {orig.model or orig.suite_name} ==")
            _print_comparison(comparison)
            print()
        result["models"] = [_comparison_dict(c) for c in comparisons]

        if len(comparisons) > 1:
            average = average_effectiveness(comparisons, args.validity)
            print("== average ==")
            _print_comparison(average)
            print()
            result["average"] = _comparison_dict(average)

        orig, aug = pairs[0]
        degradation = class_degradation(orig, aug)
        if degradation:
            worst = degradation[0]
            print(
                f"Largest degradation: {worst.class_name} "
                f"{_pct(worst.before)} -> {_pct(worst.after)}"
            )
        result["class_degradation"] = [
            {"class": d.class_name, "before": d.before, "after": d.after, "drop": d.drop}
            for d in degradation
        ]

        groups = group_outcomes(aug)
        if groups:
            histogram = failure_histogram(groups)
            print(
                f"Images with every augmentation failing: {_pct(float(histogram.fraction_all_fail))}, "
                f"with none failing: {_pct(float(histogram.fraction_none_fail))}"
            )
            result["failure_histogram"] = {
                "images": histogram.images,
                "augmentations_per_image": histogram.augmentations_per_image,
                "distribution": {str(k): float(v) for k, v in histogram.distribution.items()},
            }

    if args.before and args.after:
        delta = retraining_delta(load_report(args.before), load_report(args.after))
        print(
            f"{delta.metric_name}: {_pct(delta.metric.before)} -> {_pct(delta.metric.after)} "
            f"({100 * delta.metric.absolute:+.2f} points)"
        )
        result["retraining"] = {
            "metric": delta.metric_name,
            "before": delta.metric.before,
            "after": delta.metric.after,
            "absolute": delta.metric.absolute,
            "relative": delta.metric.relative,
            "per_class_recall": {
                name: {"before": d.before, "after": d.after, "absolute": d.absolute}
                for name, d in delta.per_class_recall.items()
            },
        }

    if args.output:
        print(f"\nComparison written to: {write_json(result, args.output)}")
    return 0


def cmd_consensus(args: argparse.Namespace) -> int:
    responses = load_responses(args.responses)
    control_key = load_control_key(args.control_key) if args.control_key else {}
    filtered = filter_workers(responses, args.min_approval, args.min_tasks, control_key)
    outcomes = consensus_all(filtered.kept)

    overall = validity_rate(outcomes)
    answers = sum(1 for r in responses if not r.is_control)
    print(f"Responses kept: {len(filtered.kept_answers)} of {answers}")
    print(
        f"Questions: {overall.total} ({overall.valid} valid, {overall.invalid} invalid, "
        f"{overall.discarded} discarded)"
    )
    print(f"Validity: {_pct(float(overall.rate))}")
    for qtype, summary in validity_by_type(outcomes).items():
        if qtype:
            print(f"  {qtype}: {_pct(float(summary.rate))} of {summary.scored} scored")

    out_dir = Path(args.output_dir)
    write_json(consensus_report(outcomes, filtered), out_dir / "consensus.json")
    write_verdicts_csv(outcomes, out_dir / "verdicts.csv")
    print(f"\nConsensus report written to: {out_dir}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    for path in args.reports:
        report = load_report(path)
        print(f"== {report.suite_name} ({path}) ==")
        print(render_report(report))
        csv_path = write_confusion_csv(report, Path(path).with_suffix(".confusion.csv"))
        print(f"\nConfusion matrix CSV: {csv_path}\n")
    return 0


def cmd_convert_manifest(args: argparse.Namespace) -> int:
    if args.class_tree:
        summary = convert_class_tree(args.class_tree, args.output, args.task_text, args.name)
    elif args.images and args.masks and args.palette:
        summary = convert_paired_tree(
            args.images, args.masks, args.palette, args.output, args.task_text, args.name
        )
    else:
        raise ConfigError("pass --class-tree, or --images with --masks and --palette")
    print(f"Manifest with {summary.total} entries written to: {summary.path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cache-dir", help="record/replay cache for backend calls")
    p.add_argument("--offline", action="store_true", help="answer only from the cache")
    p.add_argument("--parallelism", type=int, help="worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dillema",
        description="Metamorphic test generation for image models, plus evaluation tooling.",
    )
    parser.add_argument("--config", help="run configuration JSON (default: config/run.json)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("augment", help="generate augmented test cases for a manifest")
    p.add_argument("--manifest")
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--budget", type=_budget, help="max keyword substitutions per caption, or 'all' (default 1)")
    p.add_argument("--augmentations", type=int, help="images generated per original")
    p.add_argument("--per-class", type=int, help="originals sampled per class")
    p.add_argument("--max-attempts", type=int, help="LLM attempts per stage")
    p.add_argument("--caption-mode", choices=["shared", "per-augmentation"])
    p.add_argument("--manifest-mode", choices=["augmented-only", "combined"])
    _add_backend_flags(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("evaluate", help="score a manifest with the model under test")
    p.add_argument("manifest")
    p.add_argument("--output", required=True, help="report JSON path")
    p.add_argument("--suite-name")
    p.add_argument("--model-name")
    _add_backend_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="compare original vs augmented, or before vs after retraining")
    p.add_argument("--original", action="append", help="original-suite report (repeatable)")
    p.add_argument("--augmented", action="append", help="augmented-suite report (repeatable)")
    p.add_argument("--validity", type=float, help="human validity rate for normalization")
    p.add_argument("--before", help="report before retraining")
    p.add_argument("--after", help="report after retraining")
    p.add_argument("--output", help="comparison JSON path")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("consensus", help="analyse human-study responses")
    p.add_argument("responses", help="responses CSV")
    p.add_argument("--control-key", help="JSON of control question id -> correct answer")
    p.add_argument("--min-approval", type=float, default=0.95)
    p.add_argument("--min-tasks", type=int, default=50)
    p.add_argument("--output-dir", default="output/consensus")
    p.set_defaults(func=cmd_consensus)

    p = sub.add_parser("report", help="render evaluation reports as tables")
    p.add_argument("reports", nargs="+")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("convert-manifest", help="build a JSONL manifest from a folder tree")
    p.add_argument("output", help="manifest path to write")
    p.add_argument("--task-text", required=True)
    p.add_argument("--name")
    p.add_argument("--class-tree", help="<root>/<class>/<image> tree")
    p.add_argument("--images", help="image folder (segmentation)")
    p.add_argument("--masks", help="mask folder, files named like the images")
    p.add_argument("--palette", help="palette JSON (id -> class name)")
    p.set_defaults(func=cmd_convert_manifest)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except DillemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
