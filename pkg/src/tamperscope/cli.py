"""Command-line entry points: single-image analysis, dataset evaluation,
and rule-filter inspection.

Every command honors --stub, which swaps in the deterministic scripted
backends so runs are reproducible without any model service.  Exit codes:
0 ok, 1 too many per-sample failures, 2 config, 3 backend, 4 parse, 5 io.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

from .backends import BackendError, BackendSet, http_backend_set
from .chain import ChainError, ForensicResult, run_chain
from .config import ConfigError, PipelineConfig, load_pipeline_config
from .evaluation import (
    EvaluationError,
    Report,
    SampleRef,
    evaluate_dataset,
    index_dataset_tree,
    load_sample,
    result_to_prediction,
)
from .imagetools import (
    ImageBuffer,
    ImageToolError,
    MaskImage,
    encode_image_png,
    encode_mask_png,
    load_image,
    render_overlay,
)
from .rulebase import (
    RelevanceThreshold,
    RuleSet,
    RuleSetError,
    filter_with_scores,
    load_rule_set,
    rule_embeddings_for,
)
from .stubs import stub_backend_set
from .trace import Trace

EXIT_OK = 0
EXIT_FAILURES = 1
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_PARSE = 4
EXIT_IO = 5

FAILURE_TOLERANCE = 0.10


def _apply_overrides(config: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    chain = config.chain
    if getattr(args, "steps", None) is not None:
        chain = dataclasses.replace(chain, n=args.steps)
    if getattr(args, "threshold", None) is not None:
        chain = dataclasses.replace(
            chain, relevance_threshold=RelevanceThreshold(t=args.threshold)
        )
    config.chain = chain
    if getattr(args, "output", None) is not None:
        config.output_dir = args.output
    if getattr(args, "parallel", None) is not None:
        config.parallel = args.parallel
    if getattr(args, "stub", False):
        config.stub = True
    return config


def _build_backends(config: PipelineConfig) -> BackendSet:
    if config.stub:
        return stub_backend_set(seed=config.stub_seed)
    return http_backend_set(
        config.chat_url,
        config.embed_url,
        config.segment_url,
        timeout=config.timeout,
        retry=config.retry,
    )


def _new_trace(config: PipelineConfig) -> Trace:
    return Trace.deterministic() if config.stub else Trace.wall_clock()


def _chain_exit_code(exc: ChainError) -> int:
    return EXIT_BACKEND if isinstance(exc.cause, BackendError) else EXIT_PARSE


def _result_mask(result: ForensicResult, image: ImageBuffer) -> MaskImage:
    if result.mask is not None:
        return result.mask
    return MaskImage.zeros(image.width, image.height)


def _write_analysis_artifacts(
    out_dir: Path, stem: str, image: ImageBuffer, result: ForensicResult
) -> dict[str, str]:
    out_dir.mkdir(parents=True, exist_ok=True)
    mask = _result_mask(result, image)
    paths = {
        "result": str(out_dir / f"{stem}.result.json"),
        "mask": str(out_dir / f"{stem}.mask.png"),
        "overlay": str(out_dir / f"{stem}.overlay.png"),
        "trace": str(out_dir / f"{stem}.trace.jsonl"),
    }
    Path(paths["mask"]).write_bytes(encode_mask_png(mask))
    Path(paths["overlay"]).write_bytes(encode_image_png(render_overlay(image, mask)))
    # mask_path is stored relative to the result file so output trees are
    # relocatable and runs into different directories stay byte-identical.
    Path(paths["result"]).write_text(
        json.dumps(result.to_dict(mask_path=f"{stem}.mask.png"), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    result.trace.write_jsonl(paths["trace"])
    return paths


def _prepare_rules(
    config: PipelineConfig, backends: BackendSet, cache_path: Optional[str]
) -> tuple[RuleSet, dict]:
    rule_set = load_rule_set(config.rule_set_path)
    embeddings = rule_embeddings_for(rule_set, backends.embed, cache_path)
    return rule_set, embeddings


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def cmd_analyze(args: argparse.Namespace) -> int:
    try:
        config = _apply_overrides(load_pipeline_config(args.config), args)
        rule_set = load_rule_set(config.rule_set_path)
    except (ConfigError, RuleSetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        image = load_image(args.image)
    except ImageToolError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO

    backends = _build_backends(config)
    out_dir = Path(config.output_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        embeddings = rule_embeddings_for(rule_set, backends.embed, config.cache_path())
        result = run_chain(
            config.query,
            image,
            rule_set,
            config.chain,
            backends,
            rule_embeddings=embeddings,
            trace=_new_trace(config),
        )
    except ChainError as exc:
        print(f"chain error at {exc.stage}: {exc.detail}", file=sys.stderr)
        return _chain_exit_code(exc)
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND

    try:
        paths = _write_analysis_artifacts(out_dir, Path(args.image).stem, image, result)
    except OSError as exc:
        print(f"io error writing outputs: {exc}", file=sys.stderr)
        return EXIT_IO

    if args.json:
        print(json.dumps(result.to_dict(mask_path=paths["mask"]), sort_keys=True))
    else:
        print(f"label: {result.label}")
        if result.final_boxes:
            print(f"boxes: {[b.as_tuple() for b in result.final_boxes]}")
        summary = result.explanation.split("\n")[0] if result.explanation else ""
        print(f"explanation: {summary}")
        print(f"artifacts: {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _evaluate_one(
    ref: SampleRef,
    rule_set: RuleSet,
    embeddings: dict,
    config: PipelineConfig,
    backends: BackendSet,
    out_dir: Path,
) -> dict:
    """Run one sample end to end; returns a record for aggregation."""
    try:
        sample = load_sample(ref)
    except (ImageToolError, EvaluationError) as exc:
        return {"ref": ref, "skip": f"unreadable sample: {exc}"}
    try:
        image = load_image(sample.image_path)
        result = run_chain(
            config.query,
            image,
            rule_set,
            config.chain,
            backends,
            rule_embeddings=embeddings,
            trace=_new_trace(config),
        )
        prediction = result_to_prediction(result, image.dims)
    except (ChainError, BackendError, EvaluationError) as exc:
        return {"ref": ref, "failure": str(exc)}

    stem = Path(sample.image_path).stem
    sample_dir = out_dir / ref.dataset
    _write_analysis_artifacts(sample_dir, stem, image, result)
    return {"ref": ref, "sample": sample, "prediction": prediction}


def cmd_evaluate(args: argparse.Namespace) -> int:
    try:
        config = _apply_overrides(load_pipeline_config(args.config), args)
        rule_set = load_rule_set(config.rule_set_path)
        refs = index_dataset_tree(Path(args.dataset_root))
    except (ConfigError, RuleSetError, EvaluationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    backends = _build_backends(config)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        embeddings = rule_embeddings_for(rule_set, backends.embed, config.cache_path())
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND

    with ThreadPoolExecutor(max_workers=config.parallel) as pool:
        records = list(
            pool.map(
                lambda ref: _evaluate_one(ref, rule_set, embeddings, config, backends, out_dir),
                refs,
            )
        )

    samples, predictions, skipped = [], [], []
    failures = 0
    for record in records:
        ref = record["ref"]
        if "skip" in record:
            skipped.append(
                {"dataset": ref.dataset, "image": ref.image_path, "reason": record["skip"]}
            )
        elif "failure" in record:
            failures += 1
            skipped.append(
                {"dataset": ref.dataset, "image": ref.image_path, "reason": record["failure"]}
            )
        else:
            samples.append(record["sample"])
            predictions.append(record["prediction"])

    if not samples:
        print("no samples evaluated successfully", file=sys.stderr)
        return EXIT_FAILURES

    report = evaluate_dataset(samples, predictions, skipped, config_digest=config.digest())
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / "report.txt").write_text(report.to_table(), encoding="utf-8")
    if args.json:
        print(report.to_json())
    else:
        print(report.to_table())
        if skipped:
            print(f"skipped {len(skipped)} sample(s); see report.json")

    if failures > FAILURE_TOLERANCE * len(refs):
        print(
            f"{failures}/{len(refs)} samples failed (> {FAILURE_TOLERANCE:.0%})",
            file=sys.stderr,
        )
        return EXIT_FAILURES
    return EXIT_OK


# ---------------------------------------------------------------------------
# rules
# ---------------------------------------------------------------------------

def cmd_rules(args: argparse.Namespace) -> int:
    try:
        config = _apply_overrides(load_pipeline_config(args.config), args)
        rule_set = load_rule_set(config.rule_set_path)
    except (ConfigError, RuleSetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        image = load_image(args.image)
    except ImageToolError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO

    backends = _build_backends(config)
    try:
        embeddings = rule_embeddings_for(rule_set, backends.embed, config.embedding_cache_path)
        image_embedding = backends.embed.embed_image(encode_image_png(image))
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND

    threshold = config.chain.relevance_threshold
    outcome = filter_with_scores(
        image_embedding.array, embeddings, rule_set, threshold, config.chain.fallback_top_k
    )
    kept_ids = {rule.id for rule in outcome.rules}

    if args.json:
        doc = {
            "threshold": threshold.t,
            "fallback": outcome.fallback,
            "rules": [
                {
                    "id": rule.id,
                    "category": rule.category,
                    "similarity": outcome.scores[rule.id],
                    "kept": rule.id in kept_ids,
                }
                for rule, _ in sorted(
                    ((r, outcome.scores[r.id]) for r in rule_set.rules),
                    key=lambda item: (-item[1], item[0].id),
                )
            ],
        }
        print(json.dumps(doc, sort_keys=True))
    else:
        print(f"threshold t={threshold.t}" + ("  (fallback top-k fired)" if outcome.fallback else ""))
        ranked = sorted(rule_set.rules, key=lambda r: (-outcome.scores[r.id], r.id))
        for rule in ranked:
            mark = "kept" if rule.id in kept_ids else "drop"
            print(f"{mark}  {outcome.scores[rule.id]:+.4f}  [{rule.category}] {rule.id}: {rule.text}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argparse wiring
# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser, with_parallel: bool = False) -> None:
    parser.add_argument("--config", default=None, help="TOML config file")
    parser.add_argument("--stub", action="store_true", help="use deterministic stub backends")
    parser.add_argument("--output", default=None, help="output directory")
    parser.add_argument("--threshold", type=float, default=None, help="override relevance threshold t")
    parser.add_argument("--steps", type=int, default=None, help="override reasoning step budget n")
    parser.add_argument("--json", action="store_true", help="machine-readable stdout")
    if with_parallel:
        parser.add_argument("--parallel", type=int, default=None, help="worker pool size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tamperscope",
        description="Training-free image manipulation localization pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_analyze = sub.add_parser("analyze", help="analyze a single image")
    p_analyze.add_argument("image", help="path to the image to inspect")
    _add_common(p_analyze)
    p_analyze.set_defaults(func=cmd_analyze)

    p_eval = sub.add_parser("evaluate", help="evaluate over a dataset tree")
    p_eval.add_argument("dataset_root", help="root directory of dataset(s)")
    _add_common(p_eval, with_parallel=True)
    p_eval.set_defaults(func=cmd_evaluate)

    p_rules = sub.add_parser("rules", help="inspect rule relevance for an image")
    p_rules.add_argument("image", help="path to the image")
    _add_common(p_rules)
    p_rules.set_defaults(func=cmd_rules)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
