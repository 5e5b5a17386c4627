"""
Report tables: per-fold rows, per-generation summary and the run manifest
"""

import json
import math
import os
import platform
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
import pandas as pd
import structlog

from . import __version__
from .errors import ReportError
from .models import ConfusionCounts, EvolutionReport, EvolutionRunConfig, GenerationRecord, GenerationSummary

logger = structlog.get_logger(__name__)

FOLDS_FILE = "folds.csv"
SUMMARY_FILE = "summary.csv"
TRAJECTORY_FILE = "trajectory.csv"
BASELINE_FILE = "baseline.csv"
BASELINE_SUMMARY_FILE = "baseline_summary.csv"
MANIFEST_FILE = "manifest.json"

RECORD_COLUMNS = [
    "generation",
    "fold",
    "variant",
    "alive_filters_total",
    "rsl_table",
    "rsl_last_layer",
    "active_synapses",
    "active_parameters",
    "step_ratio",
    "cumulative_ratio",
    "tp",
    "fp",
    "tn",
    "fn",
    "sensitivity",
    "specificity",
    "accuracy",
    "forward_time_s",
]

SUMMARY_COLUMNS = [
    "generation",
    "anf",
    "rsl_table",
    "rsl_last_layer",
    "sensitivity_mean",
    "sensitivity_std",
    "specificity_mean",
    "specificity_std",
    "accuracy_mean",
    "accuracy_std",
    "time_s",
]

ONE_DECIMAL = {"anf", "rsl_table", "rsl_last_layer"}


def environment_info() -> Dict[str, str]:
    from importlib.metadata import PackageNotFoundError, version

    info = {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "cpu_count": str(os.cpu_count()),
    }
    for package in ("edrs", "numpy", "scipy", "pandas", "scikit-learn", "pydantic"):
        try:
            info[package] = version(package)
        except PackageNotFoundError:
            info[package] = "unknown"
    return info


def _mean_std(values: pd.Series) -> tuple:
    defined = values.dropna()
    if defined.empty:
        return math.nan, math.nan
    std = float(defined.std(ddof=1)) if len(defined) > 1 else math.nan
    return float(defined.mean()), std


def summarize(records: Sequence[GenerationRecord]) -> List[GenerationSummary]:
    """
    Cross-fold mean and sample standard deviation per generation. Undefined
    sensitivity/specificity (empty class in a fold) are left out of the mean
    and counted.
    """
    if not records:
        return []
    frame = records_frame(records)
    summaries = []
    for generation, group in frame.groupby("generation", sort=True):
        positions = int(group["rsl_table"].iloc[0] // max(int(group["alive_filters_total"].iloc[0]), 1))
        anf = round(float(group["alive_filters_total"].mean()), 1)
        sensitivity = _mean_std(group["sensitivity"])
        specificity = _mean_std(group["specificity"])
        accuracy = _mean_std(group["accuracy"])
        synapses = _mean_std(group["active_synapses"].astype(float))
        times = _mean_std(group["forward_time_s"])
        summaries.append(
            GenerationSummary(
                generation=int(generation),
                n_folds=len(group),
                anf=anf,
                rsl_table=round(positions * anf, 1),
                rsl_last_layer=round(float(group["rsl_last_layer"].mean()), 1),
                active_synapses_mean=synapses[0],
                active_synapses_std=synapses[1],
                active_parameters_mean=float(group["active_parameters"].mean()),
                sensitivity_mean=sensitivity[0],
                sensitivity_std=sensitivity[1],
                sensitivity_undefined=int(group["sensitivity"].isna().sum()),
                specificity_mean=specificity[0],
                specificity_std=specificity[1],
                specificity_undefined=int(group["specificity"].isna().sum()),
                accuracy_mean=accuracy[0],
                accuracy_std=accuracy[1],
                time_s=times[0],
                time_s_std=times[1],
            )
        )
    return summaries


def records_frame(records: Sequence[GenerationRecord]) -> pd.DataFrame:
    rows = []
    for record in records:
        row = record.model_dump(exclude={"confusion"})
        row.update(record.confusion.model_dump())
        rows.append(row)
    frame = pd.DataFrame(rows, columns=RECORD_COLUMNS)
    return frame.sort_values(["variant", "fold", "generation"], kind="stable").reset_index(drop=True)


def records_from_frame(frame: pd.DataFrame) -> List[GenerationRecord]:
    records = []
    for row in frame.to_dict(orient="records"):
        confusion = ConfusionCounts(**{k: int(row.pop(k)) for k in ("tp", "fp", "tn", "fn")})
        records.append(GenerationRecord(confusion=confusion, **row))
    return records


def _format_summary(summaries: Sequence[GenerationSummary], columns: Sequence[str]) -> pd.DataFrame:
    table = pd.DataFrame([s.model_dump() for s in summaries])
    out = pd.DataFrame({"generation": table["generation"].astype(int)}) if len(table) else pd.DataFrame(columns=columns)
    for column in columns:
        if column == "generation" or not len(table):
            continue
        fmt = "{:.1f}" if column in ONE_DECIMAL else ("{:.0f}" if column.endswith("_undefined") or column == "n_folds" else "{:.6f}")
        out[column] = [("" if isinstance(v, float) and math.isnan(v) else fmt.format(v)) for v in table[column]]
    return out[list(columns)]


TRAJECTORY_COLUMNS = SUMMARY_COLUMNS + [
    "time_s_std",
    "active_synapses_mean",
    "active_synapses_std",
    "active_parameters_mean",
    "sensitivity_undefined",
    "specificity_undefined",
    "n_folds",
]


def _write_csv(frame: pd.DataFrame, path: Path, **kwargs) -> Path:
    frame.to_csv(path, index=False, lineterminator="\n", **kwargs)
    return path


def write_records_csv(records: Sequence[GenerationRecord], path: Union[str, Path]) -> Path:
    return _write_csv(records_frame(records), Path(path), float_format="%.17g", na_rep="")


def read_records_csv(path: Union[str, Path]) -> List[GenerationRecord]:
    frame = pd.read_csv(path, dtype={"variant": str})
    return records_from_frame(frame)


def emit_report(report: EvolutionReport, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """
    Write folds.csv, summary.csv (one row per generation), trajectory.csv (every
    aggregate, plot-ready), the baseline tables when present and manifest.json.
    Output depends only on the report, so re-emitting is byte-identical.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "folds": write_records_csv(report.records, out_dir / FOLDS_FILE),
            "summary": _write_csv(_format_summary(report.summary, SUMMARY_COLUMNS), out_dir / SUMMARY_FILE),
            "trajectory": _write_csv(_format_summary(report.summary, TRAJECTORY_COLUMNS), out_dir / TRAJECTORY_FILE),
        }
        if report.baseline:
            paths["baseline"] = write_records_csv(report.baseline, out_dir / BASELINE_FILE)
            paths["baseline_summary"] = _write_csv(
                _format_summary(summarize(report.baseline), SUMMARY_COLUMNS),
                out_dir / BASELINE_SUMMARY_FILE,
            )
        manifest = {
            "config": report.config.model_dump(mode="json"),
            "dataset": report.dataset,
            "environment": report.environment,
            "created_at": report.created_at,
            "version": __version__,
            "files": sorted(p.name for p in paths.values()) + [MANIFEST_FILE],
        }
        paths["manifest"] = write_run_manifest(out_dir, manifest)
    except OSError as e:
        logger.error(f"Failed to write report to {out_dir}: {e}")
        raise ReportError(f"cannot write report to {out_dir}: {e}") from e
    logger.info("report written", out_dir=str(out_dir), files=sorted(p.name for p in paths.values()))
    return paths


def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def write_run_manifest(out_dir: Union[str, Path], payload: Dict[str, object]) -> Path:
    """manifest.json with sorted keys; `version` is filled in when absent"""
    path = Path(out_dir) / MANIFEST_FILE
    payload = {"version": __version__, **payload}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def read_manifest(out_dir: Union[str, Path]) -> dict:
    path = Path(out_dir) / MANIFEST_FILE
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ReportError(f"cannot read run manifest {path}: {e}") from e


def load_report(out_dir: Union[str, Path]) -> EvolutionReport:
    """Rebuild a report (summary recomputed) from a run directory"""
    out_dir = Path(out_dir)
    manifest = read_manifest(out_dir)
    folds_path = out_dir / FOLDS_FILE
    if not folds_path.is_file():
        raise ReportError(f"no {FOLDS_FILE} in {out_dir}")
    records = read_records_csv(folds_path)
    baseline_path = out_dir / BASELINE_FILE
    baseline = read_records_csv(baseline_path) if baseline_path.is_file() else []
    return EvolutionReport(
        config=EvolutionRunConfig.model_validate(manifest["config"]),
        dataset=manifest.get("dataset", {}),
        environment=manifest.get("environment", {}),
        records=records,
        summary=summarize(records),
        baseline=baseline,
        created_at=manifest.get("created_at", ""),
    )
