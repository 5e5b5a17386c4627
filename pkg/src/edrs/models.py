"""
Data models for configuration, datasets and evolution reports
"""

import math
from typing import Dict, List, Literal, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Precision = Literal["float64", "float32"]
ProbabilityLaw = Literal["exponential", "linear"]

BENIGN = 0
MALIGNANT = 1


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(30, ge=1)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    # global L2 norm of each minibatch gradient is clipped to this; None disables
    max_grad_norm: Optional[float] = Field(5.0, gt=0)
    seed: int = 0


class AugmentConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    malignant_step_deg: float = Field(45.0, gt=0, le=360)
    benign_step_deg: float = Field(10.0, gt=0, le=360)

    @field_validator("malignant_step_deg", "benign_step_deg")
    @classmethod
    def divides_full_turn(cls, step: float) -> float:
        if not divides_360(step):
            raise ValueError(f"rotation step {step} does not divide 360")
        return step


def divides_360(step: float) -> bool:
    if step <= 0:
        return False
    turns = 360.0 / step
    return abs(turns - round(turns)) < 1e-9


class SyntheticConfig(BaseModel):
    """Parameters of the synthetic nodule generator"""

    model_config = ConfigDict(frozen=True)

    n_patients: int = Field(93, ge=1)
    lesions_per_patient: int = Field(1, ge=1)
    malignant_fraction: float = Field(0.5, ge=0, le=1)
    seed: int = 0


class SequencerArchitecture(BaseModel):
    """
    Generation-1 sequencer layout: three "same"-padded convolutions, each
    followed by ReLU and a 2x2 max-pool, then two fully-connected layers.
    Only the widths are tunable; kernels, pooling and input size are fixed.
    """

    model_config = ConfigDict(frozen=True)

    input_size: Literal[32] = 32
    in_channels: Literal[1] = 1
    conv_filters: Tuple[int, int, int] = (32, 32, 64)
    conv_kernels: Tuple[int, int, int] = (3, 5, 3)
    fc_hidden: int = Field(64, ge=1)
    n_classes: Literal[2] = 2

    @field_validator("conv_filters")
    @classmethod
    def positive_widths(cls, filters: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if any(f < 1 for f in filters):
            raise ValueError("every conv layer needs at least one filter")
        return filters

    @field_validator("conv_kernels")
    @classmethod
    def fixed_kernels(cls, kernels: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if tuple(kernels) != (3, 5, 3):
            raise ValueError("conv kernels are fixed at 3x3, 5x5, 3x3")
        return kernels

    @property
    def sequence_positions(self) -> int:
        side = self.input_size // 2 ** len(self.conv_filters)
        return side * side

    @property
    def dense_conv_synapses(self) -> int:
        total = 0
        channels = self.in_channels
        for filters, kernel in zip(self.conv_filters, self.conv_kernels):
            total += filters * channels * kernel * kernel
            channels = filters
        return total


class EvolutionRunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_generations: int = Field(11, ge=1)
    retain_fraction: float = Field(0.8, gt=0, le=1)
    n_folds: int = Field(10, ge=2)
    train_cfg: TrainConfig = Field(default_factory=TrainConfig)
    # learning rate for offspring (generation 2 onwards); generation 1 uses train_cfg.learning_rate
    finetune_learning_rate: float = Field(0.002, gt=0)
    master_seed: int = 0
    benchmark: bool = True
    benchmark_samples: int = Field(1500, ge=1)
    benchmark_batch_size: int = Field(250, ge=1)
    benchmark_repeats: int = Field(5, ge=1)
    jobs: int = Field(1, ge=1)
    probability_law: ProbabilityLaw = "exponential"
    target_active_fraction: Optional[float] = Field(None, gt=0, le=1)
    architecture: SequencerArchitecture = Field(default_factory=SequencerArchitecture)


class EnvironmentalFactor(BaseModel):
    model_config = ConfigDict(frozen=True)

    retain_fraction: float = Field(gt=0, le=1)
    alpha: float = Field(ge=0)
    target_count: int = Field(ge=0)
    expected_count: float = Field(ge=0)


class ConfusionCounts(BaseModel):
    """Malignant is the positive class"""

    model_config = ConfigDict(frozen=True)

    tp: int = Field(0, ge=0)
    fp: int = Field(0, ge=0)
    tn: int = Field(0, ge=0)
    fn: int = Field(0, ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


class DiagnosticMetrics(NamedTuple):
    sensitivity: float
    specificity: float
    accuracy: float


class CompactnessMetrics(NamedTuple):
    total_alive_filters: int
    rsl_table: int
    rsl_last_layer: int


class GenerationRecord(BaseModel):
    """One (generation, fold) evaluation of a sequencer"""

    model_config = ConfigDict(frozen=True)

    generation: int = Field(ge=1)
    fold: int = Field(ge=0)
    variant: Literal["edrs", "baseline"] = "edrs"
    alive_filters_total: int = Field(ge=0)
    rsl_table: int = Field(ge=0)
    rsl_last_layer: int = Field(ge=0)
    active_synapses: int = Field(ge=0)
    active_parameters: int = Field(ge=0)
    step_ratio: float = 1.0
    cumulative_ratio: float = 1.0
    confusion: ConfusionCounts
    sensitivity: float
    specificity: float
    accuracy: float
    forward_time_s: float = math.nan

    @model_validator(mode="after")
    def metrics_match_confusion(self) -> "GenerationRecord":
        c = self.confusion
        expected = (
            c.tp / (c.tp + c.fn) if c.tp + c.fn else math.nan,
            c.tn / (c.tn + c.fp) if c.tn + c.fp else math.nan,
            (c.tp + c.tn) / c.total if c.total else math.nan,
        )
        for name, want, got in zip(("sensitivity", "specificity", "accuracy"), expected, (self.sensitivity, self.specificity, self.accuracy)):
            if math.isnan(want) != math.isnan(got) or (not math.isnan(want) and abs(want - got) > 1e-12):
                raise ValueError(f"{name}={got} disagrees with confusion counts")
        return self


class GenerationSummary(BaseModel):
    """Cross-fold aggregate of one generation (one row of the summary table)"""

    model_config = ConfigDict(frozen=True)

    generation: int
    n_folds: int
    anf: float
    rsl_table: float
    rsl_last_layer: float
    active_synapses_mean: float
    active_synapses_std: float
    active_parameters_mean: float
    sensitivity_mean: float
    sensitivity_std: float
    sensitivity_undefined: int = 0
    specificity_mean: float
    specificity_std: float
    specificity_undefined: int = 0
    accuracy_mean: float
    accuracy_std: float
    time_s: float
    time_s_std: float


class EvolutionReport(BaseModel):
    config: EvolutionRunConfig
    dataset: Dict[str, object] = Field(default_factory=dict)
    environment: Dict[str, str] = Field(default_factory=dict)
    records: List[GenerationRecord] = Field(default_factory=list)
    summary: List[GenerationSummary] = Field(default_factory=list)
    baseline: List[GenerationRecord] = Field(default_factory=list)
    created_at: str = ""

    def fold_records(self, fold: int) -> List[GenerationRecord]:
        return sorted((r for r in self.records if r.fold == fold), key=lambda r: r.generation)

    def final_generation(self, fold: int) -> int:
        records = self.fold_records(fold)
        if not records:
            raise ValueError(f"no records for fold {fold}")
        return records[-1].generation


class PatchRecord(BaseModel):
    """One labeled 2-D lesion patch with its augmentation provenance"""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    image: np.ndarray
    label: Literal[0, 1]
    patient_id: str
    lesion_id: str
    rotation_deg: float = Field(0.0, ge=0, lt=360)
    is_augmented: bool = False

    @field_validator("image")
    @classmethod
    def valid_intensities(cls, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 2:
            raise ValueError(f"patch must be 2-D, got shape {image.shape}")
        if not np.all(np.isfinite(image)):
            raise ValueError("patch contains non-finite values")
        if image.min(initial=0.0) < 0.0 or image.max(initial=0.0) > 1.0:
            raise ValueError("patch intensities must lie in [0, 1]")
        image.setflags(write=False)
        return image


class FoldSplit(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_folds: int = Field(ge=2)
    assignment: Dict[str, int]

    @model_validator(mode="after")
    def folds_in_range(self) -> "FoldSplit":
        bad = {p: f for p, f in self.assignment.items() if not 0 <= f < self.n_folds}
        if bad:
            raise ValueError(f"fold index out of range for patients {sorted(bad)}")
        return self

    def test_patients(self, fold: int) -> List[str]:
        return sorted(p for p, f in self.assignment.items() if f == fold)

    def train_patients(self, fold: int) -> List[str]:
        return sorted(p for p, f in self.assignment.items() if f != fold)

    def fold_sizes(self) -> List[int]:
        sizes = [0] * self.n_folds
        for fold in self.assignment.values():
            sizes[fold] += 1
        return sizes
