"""
Cross-validated evolution experiment: per-fold generation loop, evaluation,
runtime benchmark and the Last-Generation (trained from scratch) baseline
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import structlog
from sklearn.metrics import confusion_matrix

from .checkpoint import checkpoint_name, load_checkpoint, save_checkpoint
from .dataset import PatchDataset
from .engine import (
    SequencerNet,
    count_active_parameters,
    count_active_synapses,
    predict,
    reinitialize,
    shrink_network,
    time_forward,
    train,
)
from .errors import EDRSError, MetricsError, MissingCheckpointError
from .evolution import evolve_generation
from .models import (
    ConfusionCounts,
    DiagnosticMetrics,
    EvolutionReport,
    EvolutionRunConfig,
    FoldSplit,
    GenerationRecord,
    TrainConfig,
)
from .report import environment_info, summarize
from .seeding import derive_rng, derive_seed
from .sequencer import build_initial, compactness_metrics

logger = structlog.get_logger(__name__)

CheckpointSource = Union[SequencerNet, str, Path]


@dataclass(frozen=True)
class CrossValidationData:
    patches: PatchDataset
    split: FoldSplit

    def fold_views(self, fold: int) -> Tuple[PatchDataset, PatchDataset]:
        """(train, test) views; raises if any patient lands on both sides"""
        unassigned = set(self.patches.patient_ids) - set(self.split.assignment)
        if unassigned:
            raise EDRSError(f"patients without a fold: {sorted(unassigned)}")
        train_view = self.patches.for_patients(self.split.train_patients(fold))
        test_view = self.patches.for_patients(self.split.test_patients(fold))
        leaked = set(train_view.patient_ids) & set(test_view.patient_ids)
        if leaked:
            raise EDRSError(f"fold {fold} leaks patients {sorted(leaked)}")
        return train_view, test_view


def compute_metrics(c: ConfusionCounts) -> DiagnosticMetrics:
    """Sensitivity and specificity are NaN when their class is absent"""
    if c.total == 0:
        raise MetricsError("confusion counts are all zero")
    sensitivity = c.tp / (c.tp + c.fn) if c.tp + c.fn else math.nan
    specificity = c.tn / (c.tn + c.fp) if c.tn + c.fp else math.nan
    return DiagnosticMetrics(sensitivity, specificity, (c.tp + c.tn) / c.total)


def confusion_from_predictions(labels: np.ndarray, predictions: np.ndarray) -> ConfusionCounts:
    tn, fp, fn, tp = confusion_matrix(labels, predictions, labels=[0, 1]).ravel()
    return ConfusionCounts(tp=int(tp), fp=int(fp), tn=int(tn), fn=int(fn))


def evaluate(net: SequencerNet, data: PatchDataset) -> ConfusionCounts:
    return confusion_from_predictions(data.labels, predict(net, data.images))


def make_record(
    net: SequencerNet,
    fold: int,
    confusion: ConfusionCounts,
    previous_active: Optional[int] = None,
    initial_active: Optional[int] = None,
    variant: str = "edrs",
    forward_time_s: float = math.nan,
) -> GenerationRecord:
    compact = compactness_metrics(net)
    active = count_active_synapses(net)
    sensitivity, specificity, accuracy = compute_metrics(confusion)
    return GenerationRecord(
        generation=net.generation,
        fold=fold,
        variant=variant,
        alive_filters_total=compact.total_alive_filters,
        rsl_table=compact.rsl_table,
        rsl_last_layer=compact.rsl_last_layer,
        active_synapses=active,
        active_parameters=count_active_parameters(net),
        step_ratio=active / previous_active if previous_active else 1.0,
        cumulative_ratio=active / initial_active if initial_active else 1.0,
        confusion=confusion,
        sensitivity=sensitivity,
        specificity=specificity,
        accuracy=accuracy,
        forward_time_s=forward_time_s,
    )


def _train_cfg(cfg: EvolutionRunConfig, fold: int, generation: int, purpose: str = "train") -> TrainConfig:
    """Offspring are fine-tuned at finetune_learning_rate; from-scratch runs use the base rate"""
    update: Dict[str, object] = {"seed": derive_seed(cfg.master_seed, fold, generation, purpose)}
    if purpose == "train" and generation > 1:
        update["learning_rate"] = cfg.finetune_learning_rate
    return cfg.train_cfg.model_copy(update=update)


def _evolve_fold(
    fold: int,
    data: CrossValidationData,
    cfg: EvolutionRunConfig,
    checkpoint_dir: Optional[Path] = None,
) -> Tuple[List[GenerationRecord], List[SequencerNet]]:
    train_view, test_view = data.fold_views(fold)
    log = logger.bind(fold=fold)
    log.info("fold started", train_records=len(train_view), test_records=len(test_view))

    net = build_initial(derive_seed(cfg.master_seed, fold, 1, "init"), cfg.architecture)
    records: List[GenerationRecord] = []
    nets: List[SequencerNet] = []
    initial_active = count_active_synapses(net)
    for generation in range(1, cfg.n_generations + 1):
        if generation > 1:
            if cfg.target_active_fraction is not None and records[-1].cumulative_ratio <= cfg.target_active_fraction:
                log.info("compactness target reached, stopping early", generation=generation - 1)
                break
            net, env, outcome = evolve_generation(
                nets[-1],
                cfg.retain_fraction,
                seed=derive_seed(cfg.master_seed, fold, generation, "synthesis"),
                law=cfg.probability_law,
            )
        trained, losses = train(net, train_view, _train_cfg(cfg, fold, generation))
        record = make_record(
            trained,
            fold,
            evaluate(trained, test_view),
            previous_active=records[-1].active_synapses if records else None,
            initial_active=initial_active,
        )
        log.info(
            "generation evaluated",
            generation=generation,
            active_synapses=record.active_synapses,
            alive_filters=record.alive_filters_total,
            final_loss=round(losses[-1], 6),
            accuracy=round(record.accuracy, 4),
        )
        if checkpoint_dir is not None:
            save_checkpoint(trained, Path(checkpoint_dir) / checkpoint_name(generation, fold))
        records.append(record)
        nets.append(trained)
    return records, nets


def _with_times(records: List[GenerationRecord], nets: List[SequencerNet], cfg: EvolutionRunConfig) -> List[GenerationRecord]:
    timed = []
    for record, net in zip(records, nets):
        seconds = time_forward(
            shrink_network(net),
            n_samples=cfg.benchmark_samples,
            batch_size=cfg.benchmark_batch_size,
            repeats=cfg.benchmark_repeats,
            seed=derive_seed(cfg.master_seed, record.fold, record.generation, "bench"),
        )
        timed.append(record.model_copy(update={"forward_time_s": seconds}))
    return timed


def run_fold(
    fold: int,
    data: CrossValidationData,
    cfg: EvolutionRunConfig,
    checkpoint_dir: Optional[Path] = None,
) -> List[GenerationRecord]:
    """Evolve, evaluate and (when enabled) benchmark one fold, in generation order"""
    records, nets = _evolve_fold(fold, data, cfg, checkpoint_dir)
    if cfg.benchmark:
        records = _with_times(records, nets, cfg)
    return records


def run_evolution(
    data: CrossValidationData,
    cfg: EvolutionRunConfig,
    checkpoint_dir: Optional[Path] = None,
    dataset_info: Optional[Dict[str, object]] = None,
) -> EvolutionReport:
    """
    All folds, optionally in parallel worker processes. Benchmarks run
    afterwards, one at a time, so timings never compete for the CPU.
    """
    if data.split.n_folds != cfg.n_folds:
        raise EDRSError(f"split has {data.split.n_folds} folds, config asks for {cfg.n_folds}")
    folds = list(range(cfg.n_folds))
    try:
        if cfg.jobs > 1:
            with ProcessPoolExecutor(max_workers=min(cfg.jobs, cfg.n_folds)) as pool:
                results = list(pool.map(_evolve_fold, folds, [data] * len(folds), [cfg] * len(folds), [checkpoint_dir] * len(folds)))
        else:
            results = [_evolve_fold(fold, data, cfg, checkpoint_dir) for fold in folds]
    except Exception as e:
        logger.error(f"Evolution run failed: {e}")
        raise

    records: List[GenerationRecord] = []
    for fold_records, nets in results:
        if cfg.benchmark:
            fold_records = _with_times(fold_records, nets, cfg)
        records.extend(fold_records)

    return EvolutionReport(
        config=cfg,
        dataset=dict(dataset_info or {}),
        environment=environment_info(),
        records=records,
        summary=summarize(records),
        created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )


def run_last_generation_baseline(
    data: CrossValidationData,
    cfg: EvolutionRunConfig,
    final_arch_from: EvolutionReport,
    checkpoint_dir: Path,
) -> List[GenerationRecord]:
    """
    Per fold: the final evolved architecture (its masks), re-initialized and
    trained from scratch with the same budget as every generation.
    """
    baseline = []
    for fold in range(cfg.n_folds):
        generation = final_arch_from.final_generation(fold)
        path = Path(checkpoint_dir) / checkpoint_name(generation, fold)
        if not path.is_file():
            raise MissingCheckpointError(f"no generation-{generation} checkpoint for fold {fold} at {path}")
        evolved = load_checkpoint(path)
        fresh = reinitialize(evolved, derive_rng(cfg.master_seed, fold, generation, "baseline"))
        train_view, test_view = data.fold_views(fold)
        trained, _ = train(fresh, train_view, _train_cfg(cfg, fold, generation, "baseline"))
        initial = final_arch_from.fold_records(fold)[0].active_synapses
        record = make_record(trained, fold, evaluate(trained, test_view), initial_active=initial, variant="baseline")
        if cfg.benchmark:
            record = _with_times([record], [trained], cfg)[0]
        logger.info("baseline evaluated", fold=fold, generation=generation, accuracy=round(record.accuracy, 4))
        baseline.append(record)
    return baseline


def benchmark_generations(checkpoints: Mapping[int, CheckpointSource], cfg: EvolutionRunConfig) -> Dict[int, float]:
    """Median forward seconds per generation, measured on physically shrunk nets"""
    times = {}
    for generation in sorted(checkpoints):
        source = checkpoints[generation]
        net = source if isinstance(source, SequencerNet) else load_checkpoint(source)
        times[generation] = time_forward(
            shrink_network(net),
            n_samples=cfg.benchmark_samples,
            batch_size=cfg.benchmark_batch_size,
            repeats=cfg.benchmark_repeats,
            seed=derive_seed(cfg.master_seed, 0, generation, "bench"),
        )
    return times


def fold_checkpoints(checkpoint_dir: Path, fold: int) -> Dict[int, Path]:
    """gen{g}_fold{fold}.edrs files of one fold, keyed by generation"""
    found = {}
    for path in Path(checkpoint_dir).glob(f"gen*_fold{fold}.edrs"):
        stem = path.name[len("gen"):-len(f"_fold{fold}.edrs")]
        if stem.isdigit():
            found[int(stem)] = path
    return dict(sorted(found.items()))
