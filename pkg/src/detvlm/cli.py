"""Command-line surface: batch indexing, querying, scoring, and the
synthetic benchmark.

Exit codes: 0 success, 1 validation/config error, 2 backend failure,
3 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

from .core import (
    BackendError,
    ComponentOntology,
    RecordsError,
    ValidationError,
    load_manifest,
    load_ontology,
)
from .detector import RemoteDetector, ScriptedDetector
from .evaluation import (
    StateTask,
    binary_metrics,
    confusion_counts,
    load_ground_truth,
    report,
    validate_ground_truth,
)
from .pipeline import Backends, PipelineConfig, RunLog, run_pipeline
from .prompts import PromptTemplates, load_templates
from .query import evaluate_query, parse_query, validate_query
from .simbench import ErrorModel, run_simulation, simulation_ontology
from .store import append_results, load_results
from .vlm import RemoteVlm, ScriptedVlm

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_BACKEND = 2
EXIT_IO = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="detvlm",
        description="Two-stage component retrieval: detector screening plus VLM verification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    index = sub.add_parser("index", help="run the pipeline over a manifest and store records")
    index.add_argument("--manifest", required=True, help="JSON Lines of {image_id, uri}")
    index.add_argument("--ontology", required=True, help="ontology JSON document")
    index.add_argument("--config", help="pipeline config JSON (defaults apply when omitted)")
    index.add_argument("--out", required=True, help="records file to append to")
    det = index.add_mutually_exclusive_group(required=True)
    det.add_argument("--detector-mock", help="scripted detector rules (JSON Lines)")
    det.add_argument("--detector-url", help="remote detector base URL")
    vlm = index.add_mutually_exclusive_group(required=True)
    vlm.add_argument("--vlm-mock", help="scripted VLM rules (JSON Lines)")
    vlm.add_argument("--vlm-url", help="remote VLM base URL")
    index.add_argument("--vlm-model", default="default", help="model name for the remote VLM")
    index.add_argument("--templates", help="prompt template override JSON")
    index.add_argument("--log", help="run log path (JSON Lines of backend calls)")

    query = sub.add_parser("query", help="search indexed records")
    query.add_argument("--records", required=True)
    query.add_argument("--ontology", required=True)
    query.add_argument("--where", required=True, help='e.g. "exists(sun_visor) && state(sun_visor)=lowered"')
    query.add_argument("--lenient", action="store_true", help="skip malformed record lines")

    evaluate = sub.add_parser("eval", help="score records against ground truth")
    evaluate.add_argument("--records", required=True)
    evaluate.add_argument("--truth", required=True, help="JSON Lines ground truth")
    evaluate.add_argument("--report", default="table", choices=("csv", "table"))
    evaluate.add_argument("--ontology", help="validate truth and fix the component order")
    evaluate.add_argument(
        "--state-task",
        action="append",
        default=[],
        metavar="COMPONENT=LABEL",
        help="also score a binary state task (repeatable)",
    )
    evaluate.add_argument("--lenient", action="store_true", help="skip unmatched or malformed lines")

    simulate = sub.add_parser("simulate", help="synthetic benchmark of the fusion architecture")
    simulate.add_argument("--det-recall", type=float, required=True)
    simulate.add_argument("--vlm-sens", type=float, required=True)
    simulate.add_argument("--vlm-spec", type=float, default=1.0)
    simulate.add_argument("--det-fp-rate", type=float, default=0.0)
    simulate.add_argument("--vlm-ambiguity", type=float, default=0.0)
    simulate.add_argument("--prevalence", type=float, default=0.5)
    simulate.add_argument("--images", type=int, default=20000)
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--components", type=int, default=5)
    simulate.add_argument("--tau-high", type=float, default=0.6)
    simulate.add_argument("--workers", type=int, default=4)
    simulate.add_argument("--report", default="table", choices=("csv", "table"))
    return parser


def _cmd_index(args: argparse.Namespace) -> int:
    ontology = load_ontology(args.ontology)
    manifest = load_manifest(args.manifest)
    config = PipelineConfig.from_path(args.config) if args.config else PipelineConfig()
    templates = load_templates(args.templates) if args.templates else PromptTemplates()
    detector = (
        ScriptedDetector.from_path(args.detector_mock)
        if args.detector_mock
        else RemoteDetector(args.detector_url)
    )
    vlm = (
        ScriptedVlm.from_path(args.vlm_mock)
        if args.vlm_mock
        else RemoteVlm(args.vlm_url, model=args.vlm_model)
    )
    backends = Backends(detector=detector, vlm=vlm)
    log_handle = open(args.log, "a", encoding="utf-8") if args.log else None
    try:
        log = RunLog(log_handle) if log_handle else None
        results = run_pipeline(manifest, ontology, backends, config, log, templates)
        written = append_results(args.out, results)
    finally:
        if log_handle:
            log_handle.close()
    print(f"indexed {written} images -> {args.out}")
    return EXIT_OK


def _cmd_query(args: argparse.Namespace) -> int:
    ontology = load_ontology(args.ontology)
    spec = parse_query(args.where)
    validate_query(spec, ontology)
    loaded = load_results(args.records, lenient=args.lenient)
    for image_id in evaluate_query(spec, loaded.results):
        print(image_id)
    if loaded.skipped:
        print(f"skipped {loaded.skipped} malformed lines", file=sys.stderr)
    return EXIT_OK


def _parse_state_tasks(raw: Sequence[str]) -> list[StateTask]:
    tasks = []
    for item in raw:
        component, sep, label = item.partition("=")
        if not sep or not component or not label:
            raise ValidationError(f"--state-task must look like COMPONENT=LABEL, got {item!r}")
        tasks.append(StateTask(component=component, positive_label=label))
    return tasks


def _cmd_eval(args: argparse.Namespace) -> int:
    loaded = load_results(args.records, lenient=args.lenient)
    truth = load_ground_truth(args.truth)
    ontology: ComponentOntology | None = None
    if args.ontology:
        ontology = load_ontology(args.ontology)
        validate_ground_truth(truth, ontology)
    if ontology is not None:
        component_order = list(ontology.ids())
    elif loaded.results:
        component_order = [record.component for record in loaded.results[0].records]
    else:
        raise ValidationError("records file is empty; nothing to score")
    targets: list[str | StateTask] = list(component_order)
    targets += _parse_state_tasks(args.state_task)
    rows = []
    for target in targets:
        matrix = confusion_counts(loaded.results, truth, target, lenient=args.lenient)
        name = target if isinstance(target, str) else target.name
        rows.append((name, binary_metrics(matrix)))
    print(report(rows, fmt=args.report), end="")
    return EXIT_OK


def _cmd_simulate(args: argparse.Namespace) -> int:
    model = ErrorModel(
        det_recall=args.det_recall,
        det_fp_rate=args.det_fp_rate,
        vlm_sensitivity=args.vlm_sens,
        vlm_specificity=args.vlm_spec,
        vlm_ambiguity=args.vlm_ambiguity,
        prevalence=args.prevalence,
        seed=args.seed,
    )
    ontology = simulation_ontology(args.components)
    config = PipelineConfig(tau_high=args.tau_high, worker_count=args.workers)
    outcome = run_simulation(model, args.images, ontology, config)
    print(report(list(outcome.per_component), fmt=args.report), end="")
    print(
        f"fused recall {outcome.fused_recall:.4f} vs closed-form "
        f"{outcome.expected_recall:.4f} (detector-only {outcome.detector_recall:.4f}, "
        f"{outcome.trials} component-trials)"
    )
    return EXIT_OK


_COMMANDS = {
    "index": _cmd_index,
    "query": _cmd_query,
    "eval": _cmd_eval,
    "simulate": _cmd_simulate,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (RecordsError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
