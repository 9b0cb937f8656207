"""Command-line entry point: ingest, validate, run/record, perturb, report.

Exit codes: 0 success, 1 fatal configuration or usage error, 2 when any
instance failed (``run``) or violations were found (``validate``).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import random
import sys
from pathlib import Path

from . import baselines, datasets, evaluation, pipeline
from .backends import GenParams, ResponseCache, build_backend, load_backend_config
from .core import load_instances, load_traces, save_traces
from .errors import ConfigError, ModalQAError
from .robustness import PerturbKind, PerturbSpec, perturb_dataset


METHODS = ("mammqa", "cot", "cot-nocontext", "capcot", "tot")
EXIT_OK, EXIT_CONFIG, EXIT_FAILED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error[E_USAGE]: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _add_run_args(p: argparse.ArgumentParser, record_required: bool = False) -> None:
    p.add_argument("--dataset", required=True, help="canonical JSONL")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--backends", required=True, help="backend config JSON")
    p.add_argument("--out", required=True, help="trace JSONL to write")
    p.add_argument("--backend", help="label serving every role (default: first in config)")
    p.add_argument("--expert-backend")
    p.add_argument("--synthesis-backend")
    p.add_argument("--aggregator-backend")
    p.add_argument("--caption-backend", help="captioner for capcot/tot")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--limit", type=int, help="evaluate at most K instances")
    p.add_argument("--seed", type=int, help="with --limit, draw a seeded sample instead of the first K")
    p.add_argument("--aggregator-sees-question", action="store_true")
    p.add_argument("--temperature", type=float, default=0.3)
    p.add_argument("--top-p", type=float, default=0.7)
    p.add_argument("--max-output-tokens", type=int, default=1024)
    p.add_argument("--tot-branching", type=int, default=3)
    p.add_argument("--tot-depth", type=int, default=3)
    p.add_argument("--tot-threshold", type=float, default=0.5)
    p.add_argument("--tot-budget", type=int, default=39)
    if record_required:
        p.add_argument("--cache", required=True, help="response cache to append to")
    else:
        g = p.add_mutually_exclusive_group()
        g.add_argument("--record", metavar="CACHE", help="record responses into CACHE")
        g.add_argument("--replay", metavar="CACHE", help="serve responses from CACHE only; no network")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="modalqa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="convert a source dataset to canonical JSONL")
    p.add_argument("--format", required=True, choices=("multimodalqa", "manymodalqa"))
    p.add_argument("source", help="source directory")
    p.add_argument("--split", default="dev")
    p.add_argument("--out", required=True)
    p.add_argument("--stats", help="write tag counts as JSON")
    p.add_argument("--overlay", help="JSONL of {id, add_aliases} gold corrections")
    p.add_argument("--strict", action="store_true", help="abort on dangling references")

    p = sub.add_parser("validate", help="check a canonical JSONL file")
    p.add_argument("dataset")

    _add_run_args(sub.add_parser("run", help="run a method over a dataset"))
    _add_run_args(sub.add_parser("record", help="run --record: run while recording responses"),
                  record_required=True)

    p = sub.add_parser("perturb", help="write a perturbed copy of a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--kind", required=True, choices=[k.value for k in PerturbKind])
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--inject-count", type=int, default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="default: <out>.manifest.json")

    p = sub.add_parser("report", help="score trace files; two or more emit a degradation table")
    p.add_argument("traces", nargs="+")
    p.add_argument("--format", default="markdown", choices=("markdown", "csv", "json"))
    p.add_argument("--label", action="append", help="row/column label per trace file")
    p.add_argument("--out", help="write instead of printing")
    return parser


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_ingest(args) -> int:
    ingest = datasets.ingest_multimodalqa if args.format == "multimodalqa" else datasets.ingest_manymodalqa
    result = ingest(args.source, split=args.split, strict=args.strict, overlay=args.overlay)
    datasets.write_canonical(args.out, result.instances)
    if args.stats:
        datasets.write_stats(args.stats, result)
    print(f"ingested {len(result.instances)} instances ({len(result.skipped)} skipped) -> {args.out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    violations = datasets.validate(args.dataset)
    for v in violations:
        print(v)
    print(f"{len(violations)} violation(s)")
    return EXIT_FAILED if violations else EXIT_OK


def _select(instances, limit, seed):
    if limit is None or limit >= len(instances):
        return instances
    if seed is None:
        return instances[:limit]
    picked = set(random.Random(seed).sample(range(len(instances)), limit))
    return [inst for i, inst in enumerate(instances) if i in picked]


def _runner(args, backends: dict, params: GenParams):
    default = args.backend or next(iter(backends))

    def pick(label):
        label = label or default
        if label not in backends:
            raise ConfigError(f"backend label {label!r} not in config")
        return backends[label]

    if args.method == "mammqa":
        cfg = pipeline.PipelineConfig(
            expert_backend=pick(args.expert_backend),
            synthesis_backend=pick(args.synthesis_backend),
            aggregator_backend=pick(args.aggregator_backend),
            aggregator_sees_question=args.aggregator_sees_question,
            params=params,
        )
        return lambda inst: pipeline.run_pipeline(inst, cfg)
    bcfg = baselines.BaselineConfig(params=params)
    reasoner = pick(None)
    if args.method in ("cot", "cot-nocontext"):
        include = args.method == "cot"
        fn = lambda inst: baselines.trace_cot(inst, reasoner, include, bcfg)  # noqa: E731
    elif args.method == "capcot":
        captioner, cache = pick(args.caption_backend), baselines.CaptionCache()
        fn = lambda inst: baselines.trace_capcot(inst, captioner, reasoner, bcfg, cache)  # noqa: E731
    else:
        tot = baselines.ToTConfig(args.tot_branching, args.tot_depth, args.tot_threshold, args.tot_budget)
        captioner, cache = pick(args.caption_backend), baselines.CaptionCache()
        fn = lambda inst: baselines.trace_tot(inst, reasoner, tot, bcfg, captioner, cache)  # noqa: E731
    fn.method = args.method
    return fn


def cmd_run(args) -> int:
    if args.parallelism < 1:
        raise ConfigError("--parallelism must be >= 1")
    try:
        params = GenParams(args.temperature, args.top_p, args.max_output_tokens)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    specs = load_backend_config(args.backends)
    cache_path = getattr(args, "cache", None) or getattr(args, "record", None) or getattr(args, "replay", None)
    mode = "record" if (getattr(args, "cache", None) or getattr(args, "record", None)) else (
        "replay" if getattr(args, "replay", None) else None)
    if mode == "replay" and not Path(cache_path).exists():
        raise ConfigError(f"replay cache {cache_path} does not exist")
    cache = ResponseCache(cache_path) if cache_path else None
    base_dir = Path(args.backends).resolve().parent
    backends = {label: build_backend(s, cache, mode, base_dir) for label, s in specs.items()}

    instances = _select(load_instances(args.dataset), args.limit, args.seed)
    runner = _runner(args, backends, params)
    traces = pipeline.run_batch(instances, parallelism=args.parallelism, runner=runner)
    save_traces(args.out, traces)

    failed = sum(t.failed for t in traces)
    summary = f"{args.method}: {len(traces)} instances, {failed} failed"
    scored = [t for t in traces if t.gold_answers]
    if scored:
        report = evaluation.score_run(scored)
        summary += (f", {report.abstention_count} abstained, {report.parse_failure_count} parse failures, "
                    f"accuracy {report.overall.accuracy:.2f}")
    print(summary)
    return EXIT_FAILED if failed else EXIT_OK


def _sha256(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_perturb(args) -> int:
    spec = PerturbSpec(PerturbKind(args.kind), seed=args.seed, inject_count=args.inject_count)
    instances = load_instances(args.dataset)
    outcome = perturb_dataset(instances, spec)
    datasets.write_canonical(args.out, outcome.instances)
    manifest = {
        "source": Path(args.dataset).name,
        "source_sha256": _sha256(args.dataset),
        "spec": spec.to_dict(),
        "count": len(outcome.instances),
        "unchanged": outcome.unchanged,
        "output_sha256": _sha256(args.out),
    }
    manifest_path = args.manifest or f"{args.out}.manifest.json"
    Path(manifest_path).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    print(f"perturbed {len(outcome.instances)} instances ({len(outcome.unchanged)} unchanged) -> {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    labels = args.label or []
    reports = []
    for i, path in enumerate(args.traces):
        label = labels[i] if i < len(labels) else Path(path).stem
        reports.append(evaluation.score_run(load_traces(path), label=label))
    if len(reports) == 1:
        text = evaluation.render_report(reports[0], args.format)
    else:
        text = evaluation.render_comparison(evaluation.Comparison(reports[0], tuple(reports[1:])), args.format)
    _emit(text, args.out)
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "validate": cmd_validate,
    "run": cmd_run,
    "record": cmd_run,
    "perturb": cmd_perturb,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ModalQAError, FileNotFoundError) as exc:
        code = getattr(exc, "code", "E_IO")
        print(f"error[{code}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
