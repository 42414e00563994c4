"""Command-line entry: python -m scripts.backend.cli <command> [options].

Exit codes: 0 on success (or an answered query), 3 when the safety cascade
blocked the query or returned a canned response, 1 on any error.
"""
import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import pandas as pd

from scripts.backend.cuem.config import load_settings
from scripts.backend.cuem.errors import CuemError, TuningAborted
from scripts.backend.cuem.evaluation import evaluate_cases, load_cases
from scripts.backend.cuem.mocks import ExampleLookupGenerator
from scripts.backend.cuem.models import Document
from scripts.backend.cuem.pipeline import Variant
from scripts.backend.cuem.prompt_tuning import PromptTemplate, load_samples, load_template, save_template, tune
from scripts.backend.cuem.relevance import build_training_set, export_training_set
from scripts.backend.cuem.runtime import build_runtime
from scripts.backend.cuem.utils import canonical_json, configure_logging, read_jsonl, to_jsonable

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_SAFETY = 3


def _write_report(path, payload):
    text = canonical_json(payload)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n", encoding="utf-8")
        logger.info("Wrote report to %s", path)
    print(text)


def _history(raw):
    if not raw:
        return ()
    turns = json.loads(raw)
    return tuple((t["role"], t["text"]) if isinstance(t, dict) else tuple(t) for t in turns)


def cmd_ask(args, settings):
    from scripts.backend.service import result_payload

    runtime = build_runtime(settings)
    _, result = runtime.ask(args.query or "", args.image, _history(args.history), args.locale, Variant(args.variant))
    print(canonical_json(result_payload(result)))
    return EXIT_OK if result.answer is not None else EXIT_SAFETY


def cmd_serve(args, settings):
    import uvicorn

    from scripts.backend.service import create_app

    uvicorn.run(create_app(settings), host=args.host or settings.host, port=args.port or settings.port,
                log_level=settings.log_level.lower())
    return EXIT_OK


def _fill_case(case, runtime, field_name, variant):
    if getattr(case, field_name) or not variant:
        return case
    _, result = runtime.ask(case.query, case.image_id, variant=Variant(variant))
    filled = {field_name: result.text or ""}
    if field_name == "candidate":
        filled["answered"] = result.answer is not None
    return replace(case, **filled)


def cmd_eval(args, settings):
    runtime = build_runtime(settings)
    cases = load_cases(args.cases)
    cases = [_fill_case(c, runtime, "candidate", args.candidate_variant) for c in cases]
    cases = [_fill_case(c, runtime, "baseline", args.baseline_variant) for c in cases]
    report = evaluate_cases(
        cases, runtime.backends.fresh(), runtime.registries.templates, strict=args.strict,
        max_workers=settings.pipeline.max_workers, n_resamples=args.resamples, seed=args.seed,
    )
    table = pd.DataFrame([to_jsonable(c) for c in report.cases])
    if not table.empty:
        logger.info("Per-case results:\n%s", table.to_string(index=False))
    _write_report(args.out, {**report.summary(), "cases": to_jsonable(report.cases)})
    return EXIT_OK


def _base_template(args):
    if args.template_dir and list(Path(args.template_dir).glob(f"{args.template_id}.v*.txt")):
        return load_template(args.template_dir, args.template_id)
    fixed = tuple(Path(p).read_text(encoding="utf-8") for p in args.fixed) if args.fixed else ()
    return PromptTemplate(args.template_id, 0, fixed, args.instruction)


def cmd_tune(args, settings):
    runtime = build_runtime(settings)
    backends = runtime.backends.fresh()
    if settings.backend_mode == "mock":
        # fixture tables carry no labels; predict from the in-context examples instead
        backends = replace(backends, generator=ExampleLookupGenerator())
    tpl0 = _base_template(args)
    warnings = []
    try:
        best, report = tune(
            tpl0, load_samples(args.train), load_samples(args.val), args.iters, backends,
            args.n_correct, args.n_incorrect, args.seed, settings.pipeline.max_workers, warnings,
        )
    except TuningAborted as e:
        _write_report(args.out, {"aborted": str(e), "report": to_jsonable(e.report)})
        return EXIT_ERROR
    saved = save_template(best, args.out_dir)
    _write_report(args.out, {
        "best_score": report.best_score,
        "best_version": report.best_version,
        "iterations": report.iterations,
        "saved": str(saved),
        "scores": list(report.scores),
        "versions": list(report.versions),
        "warnings": warnings,
    })
    return EXIT_OK


def cmd_build_relevance_set(args, settings):
    runtime = build_runtime(settings)
    candidates_path = Path(args.candidates or Path(settings.fixtures_dir) / "corpus.json")
    candidates = [Document.from_dict(d) for d in json.loads(candidates_path.read_text(encoding="utf-8"))]
    pairs = [(r["query"], r["answer"]) for r in read_jsonl(args.pairs)]
    warnings = []
    examples = build_training_set(
        pairs, candidates, runtime.backends.fresh(), args.pos_thr, args.neg_thr, args.neg_ratio, args.seed, warnings,
    )
    export_training_set(examples, args.out)
    counts = pd.Series([ex.label.value for ex in examples], dtype="object").value_counts()
    _write_report(args.report, {
        "negatives": int(counts.get("negative", 0)),
        "out": str(args.out),
        "positives": int(counts.get("positive", 0)),
        "warnings": warnings,
    })
    return EXIT_OK


def cmd_safety_db(args, settings):
    runtime = build_runtime(settings)
    store = runtime.instances
    if args.action == "import":
        store.import_file(args.path)
    elif args.action == "export":
        store.export_file(args.path)
    else:
        runtime.add_instance(args.id, args.query_text, args.canned_response)
    _write_report(None, {"action": args.action, "digest": store.digest(), "entries": len(store.snapshot())})
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="cuem", description="Multimodal retrieval-augmented answering engine")
    parser.add_argument("--config", help="TOML config file (default: $CUEM_CONFIG, else bundled fixtures)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ask", help="run one query through the pipeline")
    p.add_argument("--query", default="")
    p.add_argument("--image", help="image id from the asset store")
    p.add_argument("--history", help='JSON list of {"role", "text"} turns')
    p.add_argument("--locale", default="en")
    p.add_argument("--variant", default=Variant.full.value, choices=[v.value for v in Variant])
    p.set_defaults(func=cmd_ask)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("eval", help="pairwise judging and answer metrics over a case file")
    p.add_argument("--cases", required=True)
    p.add_argument("--out")
    p.add_argument("--strict", action="store_true", help="judge must pick A or B")
    p.add_argument("--candidate-variant", choices=[v.value for v in Variant])
    p.add_argument("--baseline-variant", choices=[v.value for v in Variant])
    p.add_argument("--resamples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tune", help="tune a classification prompt with in-context examples")
    p.add_argument("--template-id", required=True)
    p.add_argument("--template-dir", help="load the latest saved version from here")
    p.add_argument("--fixed", nargs="*", help="files holding the fixed sections")
    p.add_argument("--instruction", default="Label the input.")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--n-correct", type=int, default=2)
    p.add_argument("--n-incorrect", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("build-relevance-set", help="NLI-labelled relevance training set")
    p.add_argument("--pairs", required=True, help='JSON-lines of {"query", "answer"}')
    p.add_argument("--candidates", help="JSON list of documents (default: fixture corpus)")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--pos-thr", type=float, default=0.9)
    p.add_argument("--neg-thr", type=float, default=0.3)
    p.add_argument("--neg-ratio", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build_relevance_set)

    p = sub.add_parser("safety-db", help="manage the instance-safety database")
    actions = p.add_subparsers(dest="action", required=True)
    a = actions.add_parser("import")
    a.add_argument("path")
    a = actions.add_parser("export")
    a.add_argument("path")
    a = actions.add_parser("add")
    a.add_argument("--id", required=True)
    a.add_argument("--query-text", required=True)
    a.add_argument("--canned-response", required=True)
    p.set_defaults(func=cmd_safety_db)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings(args.config)
        configure_logging(settings.log_level)
        return args.func(args, settings)
    except (CuemError, OSError, ValueError) as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
