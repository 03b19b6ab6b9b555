"""Command-line surface.

Verbs: simulate, init, run, resume, eval, inspect-pair, export-report.
Failures exit nonzero with one machine-readable JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .errors import ConceptEvoError


def _fail(kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return 1


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override must look like key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.lstrip("-")] = value
    return out


def cmd_simulate(args) -> int:
    from .simworld import generate_world, initial_library

    world = generate_world(
        args.classes,
        args.attrs,
        args.overlap,
        args.sigma,
        args.seed,
        images_per_class=args.images_per_class,
        flip_prob=args.flip_prob,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world.save(out / "world.json")
    world.manifest().save_jsonl(out / "manifest.jsonl")
    initial_library(world, args.initial_fraction, args.initial_mode).save(
        out / "library.json"
    )
    print(
        f"world: {len(world.labels)} classes, {len(world.attribute_universe)} attributes, "
        f"{world.n_images()} images -> {out}"
    )
    return 0


def cmd_init(args) -> int:
    from .concepts import LabelSet, init_concepts
    from .llm import HttpChatBackend, ReplayChatBackend

    labels = LabelSet(tuple(json.loads(Path(args.labels).read_text(encoding="utf-8"))))
    if args.fixture:
        llm = ReplayChatBackend.load(args.fixture)
    else:
        llm = HttpChatBackend(args.endpoint, args.model)
    lib = init_concepts(
        labels,
        llm,
        args.template,
        min_initial_concepts=args.min_concepts,
        retry_budget=args.retries,
    )
    lib.save(args.out)
    print(f"initialized {lib.total_concepts()} concepts for {len(labels)} classes -> {args.out}")
    return 0


def cmd_run(args) -> int:
    import dataclasses

    from .orchestrator import run

    config = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = _parse_overrides(args.set or [])
    for field in dataclasses.fields(RunConfig):
        value = getattr(args, f"cfg_{field.name}", None)
        if value is not None:
            overrides[field.name] = value
    config = config.with_overrides(overrides)
    result = run(config, args.out, stop_after=args.until)
    last = result.records[-1]
    acc = "n/a" if last.accuracy is None else f"{last.accuracy:.4f}"
    print(f"completed {len(result.records)} iteration(s); final accuracy {acc}")
    return 0


def cmd_resume(args) -> int:
    from .orchestrator import resume

    result = resume(args.run_dir, stop_after=args.until)
    last = result.records[-1]
    acc = "n/a" if last.accuracy is None else f"{last.accuracy:.4f}"
    print(f"resumed to iteration {last.t}; final accuracy {acc}")
    return 0


def cmd_eval(args) -> int:
    from .adapter import AdapterWeights, accuracy, evaluate, zero_shot_weights
    from .concepts import ConceptLibrary, DatasetManifest
    from .orchestrator import _build_scorer
    from .scoring import ScoreCache, dataset_id, score

    config = RunConfig.load(args.config) if args.config else RunConfig()
    if args.manifest:
        config.manifest_path = args.manifest
    manifest = DatasetManifest.load_jsonl(config.manifest_path)
    lib = ConceptLibrary.load(args.library)
    scorer = _build_scorer(config)
    cache = None
    if args.cache_dir:
        cache = ScoreCache(args.cache_dir, scorer.cache_key, dataset_id(manifest), manifest.n)
    scores = score(scorer, manifest, lib, config.score_template, cache=cache)
    if args.weights:
        weights = AdapterWeights.load(args.weights, args.weights_header)
    else:
        weights = zero_shot_weights(lib)
    labels = manifest.labels_or_none()
    if labels is None:
        return _fail("NoLabels", "manifest has no labels to evaluate against")
    acc = accuracy(evaluate(weights, scores), labels)
    print(f"accuracy\t{acc:.4f}")
    return 0


def cmd_inspect_pair(args) -> int:
    from .orchestrator import inspect_pair

    print(inspect_pair(args.run_dir, args.i, args.j))
    return 0


def cmd_export_report(args) -> int:
    from .orchestrator import export_report

    path = export_report(args.run_dir, args.out)
    print(f"report -> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conceptevo",
        description="Evolve a concept library for concept-bottleneck classification.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic world fixture")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--attrs", type=int, default=6)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images-per-class", type=int, default=20)
    p.add_argument("--flip-prob", type=float, default=0.0)
    p.add_argument("--initial-fraction", type=float, default=0.5)
    p.add_argument("--initial-mode", choices=("salient", "random"), default="salient")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("init", help="build a version-0 library via chat queries")
    p.add_argument("--labels", required=True, help="JSON file with the label list")
    p.add_argument("--out", required=True)
    p.add_argument("--endpoint", default="http://127.0.0.1:8001")
    p.add_argument("--model", default="local-chat")
    p.add_argument("--fixture", default="", help="replay fixture instead of a live endpoint")
    p.add_argument("--min-concepts", type=int, default=3)
    p.add_argument("--retries", type=int, default=2)
    p.add_argument(
        "--template",
        default=RunConfig().init_template,
    )
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("run", help="run the evolution loop")
    p.add_argument("--config", default="")
    p.add_argument("--out", required=True, help="run directory for checkpoints")
    p.add_argument("--until", type=int, default=None, help="stop after this many iterations")
    p.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="override any config field; repeatable",
    )
    # Every config field is also a direct --key=value flag.
    import dataclasses

    for field in dataclasses.fields(RunConfig):
        p.add_argument(
            f"--{field.name}", dest=f"cfg_{field.name}", default=None, metavar="VALUE"
        )
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("resume", help="continue a checkpointed run")
    p.add_argument("run_dir")
    p.add_argument("--until", type=int, default=None)
    p.set_defaults(fn=cmd_resume)

    p = sub.add_parser("eval", help="one-shot accuracy for a library (+ optional weights)")
    p.add_argument("--config", default="")
    p.add_argument("--library", required=True)
    p.add_argument("--manifest", default="")
    p.add_argument("--weights", default="")
    p.add_argument("--weights-header", default="")
    p.add_argument("--cache-dir", default="")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("inspect-pair", help="print one pair's evolution history")
    p.add_argument("run_dir")
    p.add_argument("i", type=int)
    p.add_argument("j", type=int)
    p.set_defaults(fn=cmd_inspect_pair)

    p = sub.add_parser("export-report", help="per-iteration CSV plus confusion JSON")
    p.add_argument("run_dir")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except ConceptEvoError as err:
        return _fail(type(err).__name__, str(err))
    except (OSError, ValueError, json.JSONDecodeError) as err:
        return _fail(type(err).__name__, str(err))


if __name__ == "__main__":
    sys.exit(main())
