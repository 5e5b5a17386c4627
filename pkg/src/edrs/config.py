"""
Run configuration: KEY=value config files, environment and CLI overrides

Precedence is CLI flag > config file > defaults, except for the output
directory: --out > EDRS_OUT > out_dir in the file > ./runs
"""

import json
import os
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import structlog
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field

from .errors import ConfigError
from .models import AugmentConfig, EvolutionRunConfig, SequencerArchitecture, SyntheticConfig, TrainConfig

logger = structlog.get_logger(__name__)

OUT_ENV = "EDRS_OUT"
DEFAULT_OUT = Path("runs")

# config key -> (section, field)
KEYS: Dict[str, Tuple[str, str]] = {
    "generations": ("run", "n_generations"),
    "retain": ("run", "retain_fraction"),
    "folds": ("run", "n_folds"),
    "seed": ("run", "master_seed"),
    "jobs": ("run", "jobs"),
    "benchmark": ("run", "benchmark"),
    "benchmark_samples": ("run", "benchmark_samples"),
    "benchmark_batch_size": ("run", "benchmark_batch_size"),
    "benchmark_repeats": ("run", "benchmark_repeats"),
    "probability_law": ("run", "probability_law"),
    "target_active_fraction": ("run", "target_active_fraction"),
    "finetune_learning_rate": ("run", "finetune_learning_rate"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "learning_rate": ("train", "learning_rate"),
    "momentum": ("train", "momentum"),
    "max_grad_norm": ("train", "max_grad_norm"),
    "conv_filters": ("architecture", "conv_filters"),
    "fc_hidden": ("architecture", "fc_hidden"),
    "malignant_step_deg": ("augment", "malignant_step_deg"),
    "benign_step_deg": ("augment", "benign_step_deg"),
    "n_patients": ("synthetic", "n_patients"),
    "lesions_per_patient": ("synthetic", "lesions_per_patient"),
    "malignant_fraction": ("synthetic", "malignant_fraction"),
    "data_seed": ("synthetic", "seed"),
    "data_dir": ("paths", "data_dir"),
    "out_dir": ("paths", "out_dir"),
}


class RunSettings(BaseModel):
    """Everything a CLI invocation needs, after merging all sources"""

    model_config = ConfigDict(frozen=True)

    run: EvolutionRunConfig = Field(default_factory=EvolutionRunConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)
    data_dir: Optional[Path] = None
    out_dir: Path = DEFAULT_OUT

    def dataset_info(self) -> Dict[str, object]:
        """Dataset provenance echoed into the run manifest"""
        info: Dict[str, object] = {"augment": self.augment.model_dump(mode="json")}
        if self.data_dir is None:
            info["source"] = "synthetic"
            info["synthetic"] = self.synthetic.model_dump(mode="json")
        else:
            info["source"] = "directory"
            info["data_dir"] = str(self.data_dir)
        return info


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    values = dotenv_values(path)
    unknown = sorted(k for k in values if k.lower() not in KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys in {path}: {', '.join(unknown)}")
    empty = sorted(k for k, v in values.items() if v is None or v.strip() == "")
    if empty:
        raise ConfigError(f"config keys without a value in {path}: {', '.join(empty)}")
    logger.debug("read config file", path=str(path), keys=sorted(values))
    return {k.lower(): v.strip() for k, v in values.items()}


def _conv_filters(value: object) -> object:
    if isinstance(value, str):
        try:
            return tuple(int(part) for part in value.replace(" ", "").split(","))
        except ValueError as e:
            raise ConfigError(f"conv_filters must be three comma-separated integers, got {value!r}") from e
    return value


def _base_sections(base: Optional["RunSettings"]) -> Dict[str, Dict[str, object]]:
    base = base or RunSettings()
    run = base.run.model_dump(exclude={"train_cfg", "architecture"})
    return {
        "run": run,
        "train": base.run.train_cfg.model_dump(),
        "architecture": base.run.architecture.model_dump(),
        "augment": base.augment.model_dump(),
        "synthetic": base.synthetic.model_dump(),
        "paths": {"data_dir": base.data_dir},
    }


def resolve_settings(
    file_values: Optional[Mapping[str, object]] = None,
    overrides: Optional[Mapping[str, object]] = None,
    environ: Optional[Mapping[str, str]] = None,
    base: Optional[RunSettings] = None,
) -> RunSettings:
    """
    Merge defaults (or `base`), config file values and CLI overrides, all
    keyed by config key. None overrides are ignored. Raises ConfigError for
    unknown keys; pydantic.ValidationError for out-of-range values.
    """
    environ = os.environ if environ is None else environ
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    file_values = dict(file_values or {})
    unknown = sorted(set(overrides) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown settings: {', '.join(unknown)}")

    sections = _base_sections(base)
    for source in (file_values, overrides):
        for key, value in source.items():
            if key == "out_dir":
                continue
            section, name = KEYS[key]
            sections[section][name] = _conv_filters(value) if key == "conv_filters" else value

    train_cfg = TrainConfig(**sections["train"])
    architecture = SequencerArchitecture(**sections["architecture"])
    run = EvolutionRunConfig(**sections["run"], train_cfg=train_cfg, architecture=architecture)

    if overrides.get("out_dir") is not None:
        out_dir = Path(str(overrides["out_dir"]))
    elif environ.get(OUT_ENV):
        out_dir = Path(environ[OUT_ENV])
    elif file_values.get("out_dir"):
        out_dir = Path(str(file_values["out_dir"]))
    else:
        out_dir = DEFAULT_OUT

    data_dir = sections["paths"]["data_dir"]
    return RunSettings(
        run=run,
        augment=AugmentConfig(**sections["augment"]),
        synthetic=SyntheticConfig(**sections["synthetic"]),
        data_dir=Path(str(data_dir)) if data_dir else None,
        out_dir=out_dir,
    )


def settings_from_manifest(path: Union[str, Path]) -> RunSettings:
    """Settings echoed into a previous run's manifest.json"""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read manifest {path}: {e}") from e
    if "config" not in manifest:
        raise ConfigError(f"{path} has no config section")
    dataset = manifest.get("dataset", {})
    data_dir = dataset.get("data_dir") if dataset.get("source") == "directory" else None
    return RunSettings(
        run=EvolutionRunConfig.model_validate(manifest["config"]),
        augment=AugmentConfig.model_validate(dataset.get("augment", {})),
        synthetic=SyntheticConfig.model_validate(dataset.get("synthetic", {})),
        data_dir=Path(data_dir) if data_dir else None,
        out_dir=path.parent,
    )
