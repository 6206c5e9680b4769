"""
STAND Command Line
decode, tree-optimize, overlap, store, probe and serve-target subcommands

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
import argparse
import json
import logging
import sys

from joblib import Parallel, delayed
from pydantic import ValidationError

from app.core.config import settings, DRAFT_MODES, STORE_SCOPES
from app.core.exceptions import ConfigError, FormatError, InputError, StandError
from app.models.base import TargetModel
from app.schemas import RunConfig
from app.services.analysis import (
    compare_modes,
    overlap_report,
    probe_contexts,
    read_trajectories,
    write_trajectories,
)
from app.services.draft_tree import build_initial_tree, resolve_topology, save_stats, save_tree
from app.services.drafter import DraftMode
from app.services.engine import DecodeSession, StoreScope, TrajectoryResult
from app.services.ngram_store import NGramStore, export_store, import_store
from app.services.report_export_service import ReportExportService
from app.services.synthetic import task_prompts
from app.services.target_loader import load_remote_target, load_target
from app.services.tree_optimizer import compare_with_random, optimize_tree, tree_summary
from app.utils.sampling import make_rng

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

HELD_OUT_PROMPT_OFFSET = 1_000_003
PROBE_CONTEXT_STREAM = 0xC0DE
DEFAULT_TASK_MODEL = "synthetic:reasoning"


# ============================================================================
# CONFIG
# ============================================================================

def build_run_config(
    args: argparse.Namespace,
    fields: Sequence[str],
    fallback_model: Optional[str] = None,
) -> RunConfig:
    """
    settings defaults < --config JSON < explicit flags.
    Only flags the user actually passed (non-None) override the file;
    `fallback_model` applies when no model source is given anywhere.
    """
    values: Dict[str, Any] = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            values.update(json.loads(path.read_text()))
        except ValueError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    for name in ("seed", "output_dir"):
        if getattr(args, name, None) is not None:
            values[name] = getattr(args, name)
    for name in fields:
        value = getattr(args, name, None)
        if value is not None:
            values[name] = value
    if not values.get("model") and not values.get("remote"):
        if settings.has_remote_target:
            values["remote"] = settings.REMOTE_ENDPOINT
        elif fallback_model:
            values["model"] = fallback_model
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid run configuration: {e}") from e


def _load_target(config: RunConfig) -> TargetModel:
    try:
        if config.remote:
            return load_remote_target(config.remote, config.temperature)
        return load_target(config.model, config.temperature)
    except InputError as e:
        raise ConfigError(str(e)) from e


def _load_prompts(config: RunConfig, vocab_size: int, seed_offset: int = 0) -> List[List[int]]:
    if config.prompts:
        try:
            prompts = read_trajectories(config.prompts)
        except InputError as e:
            raise ConfigError(str(e)) from e
    else:
        prompts = task_prompts(vocab_size, config.problems, config.prompt_length, config.seed + seed_offset)
    if not prompts or not all(prompts):
        raise ConfigError("problem set is empty or contains an empty prompt")
    return prompts


def _output_dir(config: RunConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ============================================================================
# DECODE
# ============================================================================

def _run_problems(
    config: RunConfig,
    problems: Sequence[Tuple[int, List[int]]],
    mode: str,
    store: Optional[NGramStore] = None,
    baseline: bool = False,
) -> Tuple[List[TrajectoryResult], Optional[NGramStore]]:
    """One session over a batch of problems; runs in a joblib worker when parallel"""
    target = _load_target(config)
    session = DecodeSession(
        target,
        resolve_topology(config.topology),
        mode=DraftMode(mode),
        seed=config.seed,
        scope=StoreScope(config.scope),
        prefill_seeding=config.prefill_seeding,
        store=store,
        record_wall_time=not config.no_wall_time,
    )
    results: List[TrajectoryResult] = []
    for index, prompt in problems:
        if baseline:
            results.extend(
                session.plain_decode(prompt, config.max_tokens, config.stop_tokens, problem=index, trajectory=t)
                for t in range(config.trajectories)
            )
        else:
            results.extend(
                session.run_problem(prompt, config.trajectories, config.max_tokens, config.stop_tokens, problem=index)
            )
    return results, session.store


def run_decode(
    config: RunConfig,
    mode: Optional[str] = None,
    store: Optional[NGramStore] = None,
    baseline: bool = False,
) -> Tuple[List[TrajectoryResult], Optional[NGramStore], List[List[int]]]:
    mode = mode or config.mode
    vocab = _load_target(config).vocab_size
    prompts = _load_prompts(config, vocab)
    if store is not None and store.vocab_size != vocab:
        raise FormatError(f"store vocab_size {store.vocab_size} does not match model vocab_size {vocab}")
    indexed = list(enumerate(prompts))
    logger.info(
        f"Decoding {len(prompts)} problems x {config.trajectories} trajectories "
        f"(mode={mode}, scope={config.scope}, topology={config.topology})"
    )
    if config.parallel_problems > 1 and len(indexed) > 1:
        if config.scope == StoreScope.GLOBAL.value:
            raise ConfigError("global store scope cannot be combined with --parallel-problems")
        batches = Parallel(n_jobs=config.parallel_problems)(
            delayed(_run_problems)(config, [item], mode, store, baseline) for item in indexed
        )
        results = [r for batch, _ in batches for r in batch]
        return results, batches[-1][1], prompts
    results, final_store = _run_problems(config, indexed, mode, store, baseline)
    return results, final_store, prompts


def cmd_decode(args: argparse.Namespace) -> int:
    config = build_run_config(args, DECODE_FIELDS)
    out = _output_dir(config)
    store = import_store(args.store_in) if args.store_in else None

    results, final_store, _ = run_decode(config, store=store)
    report = ReportExportService.build_metrics_report(results, config.mode, config.topology, config.scope)
    write_trajectories([r.tokens for r in results], out / "trajectories.jsonl")
    ReportExportService.write_json(report, out / "metrics.json")
    ReportExportService.write_metrics_csv(report, out / "metrics.csv")

    baseline_report = None
    if args.baseline:
        base_results, _, _ = run_decode(config, baseline=True)
        baseline_report = ReportExportService.build_metrics_report(base_results, "plain", "none", config.scope)
        ReportExportService.write_json(baseline_report, out / "metrics-plain.json")
    for line in ReportExportService.summary_lines(report, baseline_report):
        print(line)

    for other in args.compare_mode or []:
        other_results, _, _ = run_decode(config, mode=other, store=store)
        other_report = ReportExportService.build_metrics_report(other_results, other, config.topology, config.scope)
        ReportExportService.write_json(other_report, out / f"metrics-{other}.json")
        print(f"mode={other} A={other_report.accept_len_mean:.3f} (vs {config.mode} A={report.accept_len_mean:.3f})")

    if args.store_out and final_store is not None:
        export_store(final_store, args.store_out)
    return EXIT_OK


# ============================================================================
# TREE OPTIMIZE
# ============================================================================

def cmd_tree_optimize(args: argparse.Namespace) -> int:
    config = build_run_config(args, TREE_FIELDS, fallback_model=DEFAULT_TASK_MODEL)
    if args.problems is None and "problems" not in _config_file_keys(args):
        config = config.model_copy(update={"problems": settings.TREE_MEASUREMENT_PROBLEMS})
    if config.problems < 1:
        raise ConfigError("tree optimization needs at least one measurement problem")
    out = _output_dir(config)
    target = _load_target(config)
    prompts = _load_prompts(config, target.vocab_size)
    initial = build_initial_tree()

    tree = optimize_tree(
        target, prompts,
        target_nodes=args.nodes or settings.TREE_TARGET_NODES,
        trajectories=config.trajectories,
        max_tokens=config.max_tokens,
        seed=config.seed,
        mode=DraftMode(config.mode),
        initial=initial,
    )
    save_tree(tree.topology, out / "tree.json")
    save_stats(tree.stats, out / "tree-stats.json")
    save_stats(tree.initial_stats, out / "initial-tree-stats.json")

    summary: Dict[str, Any] = {"format": "stand-tree-report", "version": 1, **tree_summary(tree)}
    if args.eval_problems:
        held_out = task_prompts(target.vocab_size, args.eval_problems, config.prompt_length, config.seed + HELD_OUT_PROMPT_OFFSET)
        summary["held_out"] = compare_with_random(
            target, tree.topology, held_out, config.seed, config.trajectories, config.max_tokens, initial
        )
        if args.eval_model:
            other = load_target(args.eval_model, config.temperature)
            ood = task_prompts(other.vocab_size, args.eval_problems, config.prompt_length, config.seed + HELD_OUT_PROMPT_OFFSET)
            summary["transfer"] = {
                "model": args.eval_model,
                **compare_with_random(other, tree.topology, ood, config.seed, config.trajectories, config.max_tokens, initial),
            }
    (out / "tree-report.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"optimized tree: {summary['nodes']} nodes, max depth {summary['max_depth']}")
    print("depth histogram: " + " ".join(f"{d}:{c}" for d, c in summary["depth_histogram"].items()))
    for key in ("held_out", "transfer"):
        if key in summary:
            s = summary[key]
            print(f"{key}: optimized A={s['optimized_accept_len']:.3f} random A={s['random_accept_len']:.3f}")
    return EXIT_OK


def _config_file_keys(args: argparse.Namespace) -> List[str]:
    if not args.config:
        return []
    return list(json.loads(Path(args.config).read_text()))


# ============================================================================
# OVERLAP
# ============================================================================

def cmd_overlap(args: argparse.Namespace) -> int:
    trajectories: List[List[int]] = []
    for path in args.inputs:
        try:
            trajectories.extend(read_trajectories(path))
        except InputError as e:
            raise ConfigError(str(e)) from e
    report = overlap_report(trajectories, tuple(args.gram) if args.gram else (2, 3, 4, 5))
    out = Path(args.output_dir or "outputs")
    out.mkdir(parents=True, exist_ok=True)
    ReportExportService.write_json(report, out / "overlap.json")
    ReportExportService.write_overlap_csv(report, out / "overlap.csv")
    last_k = report.rows[-1].k
    for row in report.rows:
        if row.k == last_k:
            print(f"k={row.k} n={row.n} overlap={row.overlap_pct:.1f}% distinct={row.distinct_overlap_pct:.1f}%")
    return EXIT_OK


# ============================================================================
# STORE
# ============================================================================

def cmd_store_inspect(args: argparse.Namespace) -> int:
    store = import_store(args.path)
    print(json.dumps({"vocab_size": store.vocab_size, **store.snapshot_stats().to_dict()}, indent=2))
    return EXIT_OK


def cmd_store_export(args: argparse.Namespace) -> int:
    """Rewrite a store file in canonical form"""
    count = export_store(import_store(args.source), args.dest)
    print(f"exported {count} entries to {args.dest}")
    return EXIT_OK


def cmd_store_import(args: argparse.Namespace) -> int:
    """Validate a store against a target model's vocabulary, optionally copying it"""
    if args.model:
        vocab = load_target(args.model).vocab_size
    elif args.remote:
        vocab = load_remote_target(args.remote).vocab_size
    else:
        vocab = args.vocab_size
    store = import_store(args.path, vocab_size=vocab)
    if args.dest:
        export_store(store, args.dest)
    stats = store.snapshot_stats()
    print(f"imported {stats.total_entries} entries (vocab {store.vocab_size})")
    return EXIT_OK


# ============================================================================
# PROBE
# ============================================================================

def cmd_probe(args: argparse.Namespace) -> int:
    """Populate a store by decoding, then probe every draft mode on the same contexts"""
    config = build_run_config(args, PROBE_FIELDS, fallback_model=DEFAULT_TASK_MODEL)
    config = config.model_copy(update={"scope": StoreScope.GLOBAL.value, "parallel_problems": 1})
    out = _output_dir(config)
    target = _load_target(config)
    results, store, prompts = run_decode(config, mode=DraftMode.STOCHASTIC.value)
    contexts = probe_contexts(
        [prompts[r.problem] for r in results],
        [r.tokens for r in results],
        args.contexts,
        make_rng(config.seed, PROBE_CONTEXT_STREAM),
    )
    if not contexts:
        raise InputError("decoding produced no contexts to probe")
    report = compare_modes(target, store, contexts)
    ReportExportService.write_json(report, out / "probe.json")
    for r in report.results:
        print(f"{r.mode}: mean acceptance {r.mean_acceptance:.4f} ({r.contexts} contexts)")
    print(f"stochastic - deterministic: {report.gap_mean:+.4f} [{report.gap_ci_low:+.4f}, {report.gap_ci_high:+.4f}]")
    return EXIT_OK


# ============================================================================
# SERVE TARGET
# ============================================================================

def cmd_serve_target(args: argparse.Namespace) -> int:
    import uvicorn
    from app.main import create_app

    target = load_target(args.model or settings.MODEL_SPEC_PATH or DEFAULT_TASK_MODEL, args.temperature)
    uvicorn.run(
        create_app(target),
        host=args.host or settings.SERVER_HOST,
        port=args.port or settings.SERVER_PORT,
        log_level=settings.LOG_LEVEL.lower(),
    )
    return EXIT_OK


# ============================================================================
# PARSER
# ============================================================================

DECODE_FIELDS = (
    "model", "remote", "topology", "mode", "trajectories", "problems", "prompt_length", "prompts",
    "max_tokens", "stop_tokens", "temperature", "scope", "prefill_seeding", "parallel_problems", "no_wall_time",
)
TREE_FIELDS = ("model", "remote", "mode", "trajectories", "problems", "prompt_length", "prompts", "max_tokens", "temperature")
PROBE_FIELDS = ("model", "remote", "topology", "trajectories", "problems", "prompt_length", "prompts", "max_tokens", "temperature")


def _add_model_args(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--model", help="model spec JSON, corpus:<trajectory file> or synthetic:<family>[:seed]")
    source.add_argument("--remote", help="logit server base URL")
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--trajectories", type=int)
    parser.add_argument("--problems", type=int)
    parser.add_argument("--prompt-length", dest="prompt_length", type=int)
    parser.add_argument("--prompts", help="trajectory-format file with one prompt per line")
    parser.add_argument("--max-tokens", dest="max_tokens", type=int)


def _add_global_args(parser: argparse.ArgumentParser, nested: bool = False) -> None:
    # repeated on subcommands; SUPPRESS keeps their unset defaults from masking the top-level value
    default = argparse.SUPPRESS if nested else None
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--config", default=default, help="JSON file mirroring the flags; flags win")
    parser.add_argument("--output-dir", dest="output_dir", default=default)
    parser.add_argument("--log-level", dest="log_level", default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stand", description="Model-free speculative decoding harness")
    _add_global_args(parser)
    subparsers = parser.add_subparsers(dest="command", required=True)

    decode = subparsers.add_parser("decode", help="run speculative decoding and write trajectories + metrics")
    _add_global_args(decode, nested=True)
    _add_model_args(decode)
    decode.add_argument("--topology", help="tree file or builtin:initial-625 | builtin:optimized-80 | builtin:chain-N")
    decode.add_argument("--mode", choices=DRAFT_MODES)
    decode.add_argument("--scope", choices=STORE_SCOPES)
    decode.add_argument("--stop-token", dest="stop_tokens", type=int, action="append")
    decode.add_argument("--prefill-seeding", dest="prefill_seeding", action="store_true", default=None)
    decode.add_argument("--no-prefill-seeding", dest="prefill_seeding", action="store_false")
    decode.add_argument("--parallel-problems", dest="parallel_problems", type=int)
    decode.add_argument("--no-wall-time", dest="no_wall_time", action="store_true", default=None)
    decode.add_argument("--compare-mode", dest="compare_mode", choices=DRAFT_MODES, action="append")
    decode.add_argument("--baseline", action="store_true", help="also run plain autoregressive decoding")
    decode.add_argument("--store-in", dest="store_in", help="start every store from this export")
    decode.add_argument("--store-out", dest="store_out", help="export the final store")
    decode.set_defaults(func=cmd_decode)

    tree = subparsers.add_parser("tree-optimize", help="measure the 625-node tree and prune it")
    _add_global_args(tree, nested=True)
    _add_model_args(tree)
    tree.add_argument("--mode", choices=DRAFT_MODES)
    tree.add_argument("--nodes", type=int, help="pruned tree size")
    tree.add_argument("--eval-problems", dest="eval_problems", type=int, default=0,
                      help="held-out problems for the optimized vs random comparison")
    tree.add_argument("--eval-model", dest="eval_model", help="second task for the transfer comparison")
    tree.set_defaults(func=cmd_tree_optimize)

    overlap = subparsers.add_parser("overlap", help="n-gram overlap across trajectories")
    _add_global_args(overlap, nested=True)
    overlap.add_argument("inputs", nargs="+")
    overlap.add_argument("--gram", type=int, action="append", help="gram length (repeatable; default 2-5)")
    overlap.set_defaults(func=cmd_overlap)

    store = subparsers.add_parser("store", help="inspect, export or import n-gram stores")
    store_sub = store.add_subparsers(dest="store_command", required=True)
    inspect = store_sub.add_parser("inspect")
    inspect.add_argument("path")
    inspect.set_defaults(func=cmd_store_inspect)
    export = store_sub.add_parser("export")
    export.add_argument("source")
    export.add_argument("dest")
    export.set_defaults(func=cmd_store_export)
    imp = store_sub.add_parser("import")
    imp.add_argument("path")
    target = imp.add_mutually_exclusive_group(required=True)
    target.add_argument("--model")
    target.add_argument("--remote")
    target.add_argument("--vocab-size", dest="vocab_size", type=int)
    imp.add_argument("--dest")
    imp.set_defaults(func=cmd_store_import)

    probe = subparsers.add_parser("probe", help="depth-1 width-3 acceptance probe across draft modes")
    _add_global_args(probe, nested=True)
    _add_model_args(probe)
    probe.add_argument("--topology")
    probe.add_argument("--contexts", type=int, default=200)
    probe.set_defaults(func=cmd_probe)

    serve = subparsers.add_parser("serve-target", help="serve a local target model over HTTP")
    serve.add_argument("--model")
    serve.add_argument("--temperature", type=float)
    serve.add_argument("--host")
    serve.add_argument("--port", type=int)
    serve.set_defaults(func=cmd_serve_target)
    return parser


def _exit_code(error: StandError) -> int:
    return EXIT_CONFIG if isinstance(error, (ConfigError, FormatError)) else EXIT_RUNTIME


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(args, "log_level", None) or settings.LOG_LEVEL,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    handler: Callable[[argparse.Namespace], int] = args.func
    try:
        return handler(args)
    except StandError as e:
        print(f"error: {e}", file=sys.stderr)
        return _exit_code(e)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
