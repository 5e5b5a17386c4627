"""
edrs - Evolutionary Deep Radiomic Sequencer discovery
Command-line entry point
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd
import structlog
from dotenv import load_dotenv
from pydantic import ValidationError

from .checkpoint import load_checkpoint
from .config import RunSettings, read_config_file, resolve_settings, settings_from_manifest
from .dataset import (
    PatchDataset,
    augment,
    generate_synthetic,
    load_patches,
    read_pgm,
    split_folds,
    write_manifest,
    write_patches,
)
from .errors import ConfigError, EDRSError
from .harness import (
    CrossValidationData,
    benchmark_generations,
    fold_checkpoints,
    run_evolution,
    run_last_generation_baseline,
)
from .report import emit_report, load_report, write_run_manifest
from .sequencer import extract_sequences, write_sequences_csv

logger = structlog.get_logger(__name__)

LOG_LEVEL_ENV = "EDRS_LOG_LEVEL"
CHECKPOINT_DIR = "checkpoints"
PATCH_DIR = "patches"
DATASET_MANIFEST = "dataset_manifest.csv"
BENCH_FILE = "bench.csv"


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(level=level.upper(), format="%(message)s", stream=sys.stderr, force=True)
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=False,
    )


# Flag dest -> config key
OVERRIDES = {
    "generations": "generations",
    "retain": "retain",
    "folds": "folds",
    "seed": "seed",
    "jobs": "jobs",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "learning_rate": "learning_rate",
    "finetune_learning_rate": "finetune_learning_rate",
    "law": "probability_law",
    "target_active_fraction": "target_active_fraction",
    "conv_filters": "conv_filters",
    "patients": "n_patients",
    "lesions": "lesions_per_patient",
    "data_seed": "data_seed",
    "data": "data_dir",
    "out": "out_dir",
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="KEY=value configuration file")
    parser.add_argument("--out", type=Path, help="output directory (default: $EDRS_OUT or ./runs)")


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", type=Path, help="reuse the configuration of a previous run")
    parser.add_argument("--generations", type=int)
    parser.add_argument("--retain", type=float, help="fraction of active synapses each offspring keeps")
    parser.add_argument("--folds", type=int)
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--jobs", type=int, help="folds evolved concurrently")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float)
    parser.add_argument("--finetune-learning-rate", dest="finetune_learning_rate", type=float, help="learning rate for generations 2 and later")
    parser.add_argument("--law", choices=["exponential", "linear"], help="synapse probability law")
    parser.add_argument("--target-active-fraction", dest="target_active_fraction", type=float)
    parser.add_argument("--conv-filters", dest="conv_filters", help="three comma-separated widths, e.g. 32,32,64")
    parser.add_argument("--data", type=Path, help="directory with index.csv and PGM patches")
    parser.add_argument("--no-bench", dest="benchmark", action="store_false", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edrs", description="Evolutionary discovery of compact radiomic sequencers")
    parser.add_argument("--log-level", default=None, help=f"logging level (default: ${LOG_LEVEL_ENV} or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic lesion dataset and its fold manifest")
    _add_common(gen)
    gen.add_argument("--patients", type=int)
    gen.add_argument("--lesions", type=int, help="lesions per patient")
    gen.add_argument("--data-seed", dest="data_seed", type=int)
    gen.add_argument("--folds", type=int)
    gen.add_argument("--seed", type=int, help="master seed (fold assignment)")

    evolve = sub.add_parser("evolve", help="full cross-validated evolution run")
    _add_common(evolve)
    _add_run_options(evolve)
    evolve.add_argument("--patients", type=int)
    evolve.add_argument("--data-seed", dest="data_seed", type=int)
    evolve.add_argument("--with-baseline", dest="with_baseline", action="store_true")

    baseline = sub.add_parser("baseline", help="Last-Generation baseline for an existing run")
    baseline.add_argument("run_dir", type=Path)

    bench = sub.add_parser("bench", help="re-time the checkpoints of an existing run")
    bench.add_argument("run_dir", type=Path)
    bench.add_argument("--fold", type=int, default=0)
    bench.add_argument("--repeats", type=int)
    bench.add_argument("--samples", type=int)

    report = sub.add_parser("report", help="re-emit summary tables from per-fold CSV")
    report.add_argument("run_dir", type=Path)

    extract = sub.add_parser("extract", help="radiomic sequences of PGM patches")
    extract.add_argument("checkpoint", type=Path)
    extract.add_argument("patches", type=Path, nargs="+", help="PGM files")
    extract.add_argument("--out", type=Path, required=True, help="CSV to write")
    return parser


def _one_line(error: ValidationError, prefix: str = "invalid configuration") -> str:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first["loc"]) or error.title
    return f"{prefix}: {location}: {first['msg']}"


def _settings(args: argparse.Namespace) -> RunSettings:
    """Merged settings; out-of-range values surface as ConfigError"""
    try:
        base = settings_from_manifest(args.manifest) if getattr(args, "manifest", None) else None
        file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
        overrides = {key: getattr(args, dest) for dest, key in OVERRIDES.items() if hasattr(args, dest)}
        if getattr(args, "benchmark", None) is not None:
            overrides["benchmark"] = args.benchmark
        return resolve_settings(file_values, overrides, base=base)
    except ValidationError as e:
        raise ConfigError(_one_line(e)) from e


def _run_settings(run_dir: Path) -> RunSettings:
    try:
        return settings_from_manifest(run_dir)
    except ValidationError as e:
        raise ConfigError(_one_line(e)) from e


def _base_records(settings: RunSettings):
    if settings.data_dir is not None:
        return load_patches(settings.data_dir)
    s = settings.synthetic
    return generate_synthetic(s.n_patients, s.lesions_per_patient, s.seed, s.malignant_fraction)


def _cross_validation(settings: RunSettings) -> CrossValidationData:
    records = augment(_base_records(settings), settings.augment)
    split = split_folds(records, settings.run.n_folds, settings.run.master_seed)
    return CrossValidationData(PatchDataset.from_records(records), split)


def cmd_gen_data(args: argparse.Namespace) -> int:
    settings = _settings(args)
    s = settings.synthetic
    base = generate_synthetic(s.n_patients, s.lesions_per_patient, s.seed, s.malignant_fraction)
    records = augment(base, settings.augment)
    split = split_folds(records, settings.run.n_folds, settings.run.master_seed)
    write_patches(base, settings.out_dir / PATCH_DIR)
    write_manifest(records, split, settings.out_dir / DATASET_MANIFEST)
    write_run_manifest(
        settings.out_dir,
        {"command": "gen-data", "config": settings.run.model_dump(mode="json"), "dataset": settings.dataset_info()},
    )
    print(settings.out_dir / PATCH_DIR)
    return 0


def cmd_evolve(args: argparse.Namespace) -> int:
    settings = _settings(args)
    out_dir = settings.out_dir
    logger.info("evolution run starting", out_dir=str(out_dir), **settings.run.model_dump(exclude={"train_cfg", "architecture"}))
    data = _cross_validation(settings)
    checkpoint_dir = out_dir / CHECKPOINT_DIR
    report = run_evolution(data, settings.run, checkpoint_dir, settings.dataset_info())
    if args.with_baseline:
        baseline = run_last_generation_baseline(data, settings.run, report, checkpoint_dir)
        report = report.model_copy(update={"baseline": baseline})
    paths = emit_report(report, out_dir)
    print(paths["summary"])
    return 0


def cmd_baseline(args: argparse.Namespace) -> int:
    settings = _run_settings(args.run_dir)
    report = load_report(args.run_dir)
    data = _cross_validation(settings)
    baseline = run_last_generation_baseline(data, settings.run, report, Path(args.run_dir) / CHECKPOINT_DIR)
    paths = emit_report(report.model_copy(update={"baseline": baseline}), args.run_dir)
    print(paths["baseline_summary"])
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    settings = _run_settings(args.run_dir)
    update: Dict[str, int] = {}
    if args.repeats is not None:
        update["benchmark_repeats"] = args.repeats
    if args.samples is not None:
        update["benchmark_samples"] = args.samples
    try:
        cfg = settings.run.model_validate({**settings.run.model_dump(), **update})
    except ValidationError as e:
        raise ConfigError(_one_line(e)) from e
    checkpoints = fold_checkpoints(Path(args.run_dir) / CHECKPOINT_DIR, args.fold)
    if not checkpoints:
        raise EDRSError(f"no checkpoints for fold {args.fold} in {args.run_dir}")
    times = benchmark_generations(checkpoints, cfg)
    path = Path(args.run_dir) / BENCH_FILE
    frame = pd.DataFrame({"generation": list(times), "fold": args.fold, "time_s": list(times.values())})
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    print(path)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    paths = emit_report(load_report(args.run_dir), args.run_dir)
    print(paths["summary"])
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    net = load_checkpoint(args.checkpoint)
    patches = np.stack([read_pgm(path) for path in args.patches])
    sequences = extract_sequences(net, patches)
    write_sequences_csv(args.out, [path.stem for path in args.patches], sequences, net.generation)
    print(args.out)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "evolve": cmd_evolve,
    "baseline": cmd_baseline,
    "bench": cmd_bench,
    "report": cmd_report,
    "extract": cmd_extract,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as e:
        return int(e.code or 0)

    level = (args.log_level or os.environ.get(LOG_LEVEL_ENV, "INFO")).upper()
    if not isinstance(logging.getLevelName(level), int):
        print(f"edrs: unknown log level {level!r}", file=sys.stderr)
        return 2
    configure_logging(level)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"edrs: {e}", file=sys.stderr)
        return 2
    except EDRSError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"edrs: {str(e).splitlines()[0]}", file=sys.stderr)
        return 1
    except ValidationError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"edrs: {_one_line(e, prefix=e.title)}", file=sys.stderr)
        return 1
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"edrs: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
