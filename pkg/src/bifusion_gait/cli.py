"""Command-line entry point: dataset generation, training, evaluation, verification and inspection."""

from __future__ import annotations

import argparse
import csv
import logging
from pathlib import Path
import sys
from typing import Callable, Sequence, TextIO

import numpy as np

from bifusion_gait.config import ConfigError, RunConfig, describe_keys, load_config, parse_overrides
from bifusion_gait.dataset import DatasetIndex
from bifusion_gait.errors import ConfigurationError, GaitError
from bifusion_gait.evaluation import EMBEDDING_MODES, evaluate_source, extract_embeddings, format_report, write_report
from bifusion_gait.gradcheck import run_gradient_suite
from bifusion_gait.models import CONDITIONS
from bifusion_gait.pipeline import load_model, save_model
from bifusion_gait.skeleton_graph import STRATEGIES, adjacency_for, build_pyramid_graph
from bifusion_gait.synthetic import GenerationPlan, generate_dataset
from bifusion_gait.training import RunOptions, TrainingResult, train_global, train_msgg_pretrain, train_silhouette_pretrain

LOGGER = logging.getLogger("bifusion_gait.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

_MODEL_KEYS = (
    "preset",
    "seed",
    "channels",
    "temporal_kernel",
    "strategy",
    "pyramid",
    "semp",
    "self_loops_all_subsets",
    "num_parts",
    "silhouette_channels",
    "micro_motion_window",
    "frame_size",
    "compact_dim",
    "compact_dropout",
    "compact_source",
    "fused_dim",
)
_TRAIN_KEYS = (
    "batch_p",
    "batch_k",
    "batch_t",
    "margin",
    "momentum",
    "weight_decay",
    "normalize",
    "train_ids",
)
_EVAL_KEYS = ("normalize", "train_ids", "gallery_sequences", "rank_k", "exclude_identical_view", "threads")
SUBCOMMAND_KEYS: dict[str, tuple[str, ...]] = {
    "gen": ("seed", "gen_frames", "gen_noise", "threads"),
    "pretrain-msgg": _MODEL_KEYS + _TRAIN_KEYS + ("loss_weights", "pretrain_lr", "pretrain_iterations", "pretrain_milestones"),
    "pretrain-sil": _MODEL_KEYS + _TRAIN_KEYS + ("pretrain_lr", "pretrain_iterations", "pretrain_milestones"),
    "train": _MODEL_KEYS
    + _TRAIN_KEYS
    + ("global_lr", "global_pretrained_lr", "global_iterations", "global_milestones", "sil_tp_target"),
    "eval": _MODEL_KEYS + _EVAL_KEYS,
    "gradcheck": ("seed",),
    "inspect-graph": ("strategy", "self_loops_all_subsets"),
    "export-embeddings": _MODEL_KEYS + ("normalize", "train_ids", "threads"),
}

_OWN_HANDLER = "_bifusion_cli_handler"


def configure_logging(log_file: str | Path | None = None, deterministic: bool = False, verbose: bool = False) -> None:
    """Install a stderr handler and an optional file handler on the package logger.

    Deterministic mode drops timestamps so reruns produce identical logs.
    """
    logger = logging.getLogger("bifusion_gait")
    for handler in list(logger.handlers):
        if getattr(handler, _OWN_HANDLER, False):
            logger.removeHandler(handler)
            handler.close()
    pattern = "%(levelname)s %(name)s %(message)s" if deterministic else "%(asctime)s %(levelname)s %(name)s %(message)s"
    formatter = logging.Formatter(pattern)
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file is not None:
        target = Path(log_file).expanduser()
        target.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(target, encoding="utf-8"))
    for handler in handlers:
        handler.setFormatter(formatter)
        setattr(handler, _OWN_HANDLER, True)
        logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False


def _epilog(command: str) -> str:
    return "config keys read by this command:\n" + describe_keys(SUBCOMMAND_KEYS[command])


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="flat key = value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--threads", type=int, default=None, help="worker threads (results do not depend on it)")
    common.add_argument("--deterministic", action="store_true", help="omit timestamps from logs")
    common.add_argument("--log-file", type=Path, default=None, help="also write logs to this file")
    common.add_argument("--verbose", action="store_true", help="debug-level logging")
    return common


def _training_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", type=Path, required=True, help="dataset directory with manifest.csv")
    parser.add_argument("--out", type=Path, required=True, help="checkpoint path to write")
    parser.add_argument("--telemetry", type=Path, default=None, help="per-iteration loss CSV")
    parser.add_argument("--iterations", type=int, default=None, help="override the configured iteration count")


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(prog="bifusion-gait", description="Desk-scale BiFusion gait recognition.")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return commands.add_parser(
            name,
            parents=[common],
            help=help_text,
            epilog=_epilog(name),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )

    gen = add("gen", "synthesize a CASIA-B-like dataset")
    gen.add_argument("--ids", type=int, required=True, help="number of identities")
    gen.add_argument("--seed", type=int, default=None, help="generation seed (defaults to config seed)")
    gen.add_argument("--out", type=Path, required=True, help="output directory")

    _training_options(add("pretrain-msgg", "pretrain the multi-scale skeleton network"))
    _training_options(add("pretrain-sil", "pretrain the silhouette part encoder"))
    train = add("train", "global BiFusion training")
    _training_options(train)
    train.add_argument("--msgg", type=Path, default=None, help="pretrained skeleton checkpoint")
    train.add_argument("--sil", type=Path, default=None, help="pretrained silhouette checkpoint")

    evaluate = add("eval", "rank-k gallery/probe evaluation")
    evaluate.add_argument("--data", type=Path, required=True)
    evaluate.add_argument("--model", type=Path, required=True, help="checkpoint to evaluate")
    evaluate.add_argument("--mode", choices=EMBEDDING_MODES, default="bifusion")
    evaluate.add_argument("--probe", default=",".join(CONDITIONS), help="comma-separated probe conditions")
    evaluate.add_argument("--rank", type=int, default=None, help="rank cut-off (defaults to rank_k)")
    evaluate.add_argument("--out", type=Path, default=None, help="report CSV path (stdout when omitted)")

    gradcheck = add("gradcheck", "finite-difference check of every kernel and miniature blocks")
    gradcheck.add_argument("--seed", type=int, default=None)
    gradcheck.add_argument("--kernels-only", action="store_true", help="skip the miniature network blocks")

    inspect = add("inspect-graph", "dump normalized adjacency subsets as CSV")
    inspect.add_argument("--scale", choices=("joints", "limbs", "bodyparts"), default="joints")
    inspect.add_argument("--strategy", choices=STRATEGIES, default=None, help="defaults to the config strategy")
    inspect.add_argument("--out", type=Path, default=None, help="CSV path (stdout when omitted)")

    export = add("export-embeddings", "write embeddings of every evaluation sequence to .npz")
    export.add_argument("--data", type=Path, required=True)
    export.add_argument("--model", type=Path, required=True)
    export.add_argument("--mode", choices=EMBEDDING_MODES, default="bifusion")
    export.add_argument("--out", type=Path, required=True)
    export.add_argument("--all", action="store_true", help="include training identities")
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = parse_overrides(args.overrides)
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    config = load_config(args.config, overrides)
    LOGGER.info("run_config command=%s %s", args.command, " ".join(config.describe().splitlines()))
    return config


def _finish_training(result: TrainingResult, args: argparse.Namespace, config: RunConfig, out: TextIO) -> int:
    extra = {"iterations_completed": result.iterations_completed, "cancelled": result.cancelled}
    path = save_model(args.out, result.bundle, config, extra)
    last = result.history[-1].loss_total if result.history else float("nan")
    print(f"checkpoint={path} iterations={result.iterations_completed} final_loss={last:.6f}", file=out)
    return EXIT_OK


def _cmd_gen(args: argparse.Namespace, config: RunConfig, out: TextIO) -> int:
    seed = config.seed if args.seed is None else args.seed
    plan = GenerationPlan(identities=args.ids, seed=seed, frames=config.gen_frames, noise=config.gen_noise)
    entries = generate_dataset(args.out, plan, threads=config.threads)
    print(f"sequences={len(entries)} root={args.out}", file=out)
    return EXIT_OK


def _cmd_pretrain_msgg(args: argparse.Namespace, config: RunConfig, out: TextIO) -> int:
    options = RunOptions(iterations_override=args.iterations, telemetry_path=args.telemetry)
    result = train_msgg_pretrain(DatasetIndex.open(args.data), config, options=options)
    return _finish_training(result, args, config, out)


def _cmd_pretrain_sil(args: argparse.Namespace, config: RunConfig, out: TextIO) -> int:
    options = RunOptions(iterations_override=args.iterations, telemetry_path=args.telemetry)
    result = train_silhouette_pretrain(DatasetIndex.open(args.data), config, options=options)
    return _finish_training(result, args, config, out)


def _cmd_train(args: argparse.Namespace, config: RunConfig, out: TextIO) -> int:
    options = RunOptions(iterations_override=args.iterations, telemetry_path=args.telemetry)
    result = train_global(
        DatasetIndex.open(args.data),
        config,
        msgg_checkpoint=args.msgg,
        silhouette_checkpoint=args.sil,
        options=options,
    )
    return _finish_training(result, args, config, out)


def _probe_conditions(raw: str) -> tuple[str, ...]:
    conditions = tuple(part.strip() for part in raw.split(",") if part.strip())
    unknown = [condition for condition in conditions if condition not in CONDITIONS]
    if unknown or not conditions:
        raise ConfigError(f"Configuration error: probe must list conditions from {', '.join(CONDITIONS)}, got {raw!r}.")
    return conditions


def _test_identities(index: DatasetIndex, config: RunConfig, include_all: bool = False) -> list[int]:
    return [identity for identity in index.identities() if include_all or identity >= config.train_ids]


def _cmd_eval(args: argparse.Namespace, config: RunConfig, out: TextIO) -> int:
    probe_conditions = _probe_conditions(args.probe)
    index = DatasetIndex.open(args.data)
    bundle = load_model(args.model, config)
    table = evaluate_source(
        bundle,
        index,
        _test_identities(index, config),
        mode=args.mode,
        gallery_sequences=config.gallery_sequences,
        probe_conditions=probe_conditions,  # type: ignore[arg-type]
        k=config.rank_k if args.rank is None else args.rank,
        normalize=config.normalize,
        exclude_identical_view=config.exclude_identical_view,
        threads=config.threads,
    )
    if args.out is None:
        out.write(format_report(table))
    else:
        write_report(args.out, table)
        print(f"report={args.out}", file=out)
    return EXIT_OK


def _cmd_gradcheck(args: argparse.Namespace, config: RunConfig, out: TextIO) -> int:
    seed = config.seed if args.seed is None else args.seed
    report = run_gradient_suite(seed, include_blocks=not args.kernels_only)
    for line in report.lines():
        print(line, file=out)
    return EXIT_OK if report.passed else EXIT_FAILURE


def _cmd_inspect_graph(args: argparse.Namespace, config: RunConfig, out: TextIO) -> int:
    strategy = args.strategy or config.strategy
    adjacency = adjacency_for(
        build_pyramid_graph(), args.scale, strategy, self_loops_all_subsets=config.self_loops_all_subsets
    )
    handle = args.out.open("w", newline="", encoding="utf-8") if args.out is not None else out
    try:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(("scale", "strategy", "k"))
        for k, matrix in enumerate(adjacency.matrices):
            writer.writerow((args.scale, strategy, k))
            writer.writerows([[repr(float(value)) for value in row] for row in matrix])
    finally:
        if args.out is not None:
            handle.close()
    return EXIT_OK


def _cmd_export(args: argparse.Namespace, config: RunConfig, out: TextIO) -> int:
    index = DatasetIndex.open(args.data)
    bundle = load_model(args.model, config)
    entries = [entry for identity in _test_identities(index, config, args.all) for entry in index.entries_for(identity)]
    embeddings = extract_embeddings(bundle, index, entries, args.mode, normalize=config.normalize, threads=config.threads)
    target = args.out.expanduser()
    target.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        target,
        features=embeddings.features,
        identities=embeddings.identities(),
        conditions=embeddings.conditions(),
        sequences=np.asarray([key.sequence for key in embeddings.keys]),
        views=embeddings.views(),
    )
    print(f"embeddings={target} sequences={len(embeddings)} shape={embeddings.features.shape}", file=out)
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace, RunConfig, TextIO], int]] = {
    "gen": _cmd_gen,
    "pretrain-msgg": _cmd_pretrain_msgg,
    "pretrain-sil": _cmd_pretrain_sil,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "inspect-graph": _cmd_inspect_graph,
    "export-embeddings": _cmd_export,
}


def run(argv: Sequence[str] | None = None, *, stdout: TextIO | None = None, stderr: TextIO | None = None) -> int:
    """Parse ``argv``, dispatch, and map failures to exit codes with one error line on stderr."""
    out = stdout or sys.stdout
    err = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as exc:
        return int(exc.code or 0)

    configure_logging(args.log_file, args.deterministic, args.verbose)
    try:
        config = _resolve_config(args)
        return COMMANDS[args.command](args, config, out)
    except ConfigurationError as exc:
        print(exc.one_line(), file=err)
        return EXIT_USAGE
    except GaitError as exc:
        LOGGER.error("command_failed command=%s category=%s", args.command, exc.category)
        print(exc.one_line(), file=err)
        return EXIT_FAILURE
    except OSError as exc:
        print(GaitError(str(exc), "io").one_line(), file=err)
        return EXIT_FAILURE
