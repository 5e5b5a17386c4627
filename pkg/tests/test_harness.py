import math
import os

import numpy as np
import pytest

from edrs import harness
from edrs.checkpoint import checkpoint_name, save_checkpoint
from edrs.dataset import PatchDataset, augment, generate_synthetic, split_folds
from edrs.engine import train
from edrs.errors import EDRSError, MetricsError, MissingCheckpointError
from edrs.harness import (
    CrossValidationData,
    benchmark_generations,
    compute_metrics,
    confusion_from_predictions,
    fold_checkpoints,
    run_evolution,
    run_fold,
    run_last_generation_baseline,
)
from edrs.models import AugmentConfig, ConfusionCounts, EvolutionRunConfig, FoldSplit, SequencerArchitecture, TrainConfig
from edrs.sequencer import build_initial

from conftest import COARSE_AUGMENT, TINY_ARCH


def _comparable(records):
    return [r.model_dump(exclude={"forward_time_s"}) for r in records]


class _OverlappingSplit(FoldSplit):
    """Puts every patient on the training side, test patients included"""

    def train_patients(self, fold):
        return sorted(self.assignment)


class TestMetrics:
    def test_reference_counts(self):
        metrics = compute_metrics(ConfusionCounts(tp=9342, fn=658, tn=8239, fp=1761))
        assert metrics.sensitivity == pytest.approx(0.9342, abs=1e-12)
        assert metrics.specificity == pytest.approx(0.8239, abs=1e-12)
        assert metrics.accuracy == pytest.approx(0.87905, abs=1e-12)

    def test_no_positives_leaves_sensitivity_undefined(self):
        metrics = compute_metrics(ConfusionCounts(tp=0, fn=0, tn=5, fp=1))
        assert math.isnan(metrics.sensitivity)
        assert metrics.specificity == pytest.approx(5 / 6)

    def test_balanced_single_counts(self):
        assert compute_metrics(ConfusionCounts(tp=1, fp=1, tn=1, fn=1)) == (0.5, 0.5, 0.5)

    def test_all_zero_counts(self):
        with pytest.raises(MetricsError):
            compute_metrics(ConfusionCounts())

    def test_confusion_matches_brute_force(self, rng):
        labels = rng.integers(0, 2, size=1000)
        predictions = rng.integers(0, 2, size=1000)
        counts = confusion_from_predictions(labels, predictions)
        assert counts.tp == sum(1 for y, p in zip(labels, predictions) if y == 1 and p == 1)
        assert counts.fp == sum(1 for y, p in zip(labels, predictions) if y == 0 and p == 1)
        assert counts.tn == sum(1 for y, p in zip(labels, predictions) if y == 0 and p == 0)
        assert counts.fn == sum(1 for y, p in zip(labels, predictions) if y == 1 and p == 0)


class TestCrossValidationData:
    def test_folds_never_share_patients(self, tiny_cv):
        for fold in range(3):
            train_view, test_view = tiny_cv.fold_views(fold)
            assert not set(train_view.patient_ids) & set(test_view.patient_ids)
            assert len(train_view) + len(test_view) == len(tiny_cv.patches)

    def test_unassigned_patient(self, tiny_cv):
        assignment = dict(tiny_cv.split.assignment)
        assignment.pop(sorted(assignment)[0])
        broken = CrossValidationData(tiny_cv.patches, FoldSplit(n_folds=3, assignment=assignment))
        with pytest.raises(EDRSError, match="without a fold"):
            broken.fold_views(0)

    def test_overlapping_train_side_is_a_leak(self, tiny_cv):
        split = _OverlappingSplit(n_folds=3, assignment=tiny_cv.split.assignment)
        with pytest.raises(EDRSError, match="leaks patients"):
            CrossValidationData(tiny_cv.patches, split).fold_views(0)



class TestRunFold:
    def test_single_generation(self, tiny_cv, fast_run_cfg):
        cfg = fast_run_cfg.model_copy(update={"n_generations": 1})
        (record,) = run_fold(0, tiny_cv, cfg)
        assert record.generation == 1
        assert record.step_ratio == 1.0 and record.cumulative_ratio == 1.0
        assert record.active_synapses == TINY_ARCH.dense_conv_synapses
        assert record.confusion.total == len(tiny_cv.fold_views(0)[1])

    def test_generations_shrink(self, tiny_cv, fast_run_cfg, tmp_path):
        records = run_fold(1, tiny_cv, fast_run_cfg, checkpoint_dir=tmp_path)
        assert [r.generation for r in records] == [1, 2, 3]
        counts = [r.active_synapses for r in records]
        assert counts[0] > counts[1] > counts[2]
        assert records[2].cumulative_ratio == pytest.approx(counts[2] / counts[0])
        assert records[2].step_ratio == pytest.approx(counts[2] / counts[1])
        for record in records:
            assert record.rsl_table == 16 * record.alive_filters_total
            assert math.isnan(record.forward_time_s)
        assert sorted(fold_checkpoints(tmp_path, 1)) == [1, 2, 3]

    def test_same_seed_same_records(self, tiny_cv, fast_run_cfg):
        assert _comparable(run_fold(2, tiny_cv, fast_run_cfg)) == _comparable(run_fold(2, tiny_cv, fast_run_cfg))

    def test_offspring_are_fine_tuned_at_their_own_rate(self, tiny_cv, fast_run_cfg, monkeypatch):
        seen = []

        def recording_train(net, data, cfg):
            seen.append((net.generation, cfg.learning_rate))
            return train(net, data, cfg)

        monkeypatch.setattr(harness, "train", recording_train)
        run_fold(0, tiny_cv, fast_run_cfg.model_copy(update={"finetune_learning_rate": 0.003}))
        assert seen == [(1, 0.01), (2, 0.003), (3, 0.003)]


    def test_stops_at_the_compactness_target(self, tiny_cv, fast_run_cfg):
        cfg = fast_run_cfg.model_copy(update={"n_generations": 6, "target_active_fraction": 0.95})
        records = run_fold(0, tiny_cv, cfg)
        assert len(records) < 6
        assert records[-1].cumulative_ratio <= 0.95
        assert all(r.cumulative_ratio > 0.95 for r in records[:-1])

    def test_benchmark_fills_timings(self, tiny_cv, fast_run_cfg):
        cfg = fast_run_cfg.model_copy(
            update={"n_generations": 2, "benchmark": True, "benchmark_samples": 8, "benchmark_batch_size": 4, "benchmark_repeats": 1}
        )
        for record in run_fold(0, tiny_cv, cfg):
            assert record.forward_time_s > 0


class TestRunEvolution:
    @pytest.fixture(scope="class")
    def evolved(self, tiny_cv, tmp_path_factory):
        cfg = EvolutionRunConfig(
            n_generations=3,
            n_folds=3,
            train_cfg=TrainConfig(epochs=1, batch_size=16),
            master_seed=11,
            benchmark=False,
            architecture=TINY_ARCH,
        )
        checkpoints = tmp_path_factory.mktemp("checkpoints")
        return cfg, checkpoints, run_evolution(tiny_cv, cfg, checkpoint_dir=checkpoints, dataset_info={"source": "synthetic"})

    def test_one_record_per_fold_and_generation(self, evolved):
        _, _, report = evolved
        assert len(report.records) == 3 * 3
        assert {(r.fold, r.generation) for r in report.records} == {(f, g) for f in range(3) for g in (1, 2, 3)}
        assert report.dataset == {"source": "synthetic"}
        assert "python" in report.environment

    def test_summary_means(self, evolved):
        _, _, report = evolved
        assert [s.generation for s in report.summary] == [1, 2, 3]
        for summary in report.summary:
            rows = [r for r in report.records if r.generation == summary.generation]
            assert summary.n_folds == 3
            assert summary.accuracy_mean == pytest.approx(np.mean([r.accuracy for r in rows]))
            assert summary.accuracy_std == pytest.approx(np.std([r.accuracy for r in rows], ddof=1))
            assert summary.rsl_table == pytest.approx(16 * summary.anf)

    def test_worker_processes_match_serial_run(self, evolved, tiny_cv):
        cfg, _, report = evolved
        parallel = run_evolution(tiny_cv, cfg.model_copy(update={"jobs": 2}))
        assert _comparable(parallel.records) == _comparable(report.records)

    def test_fold_count_must_match_split(self, evolved, tiny_cv):
        cfg, _, _ = evolved
        with pytest.raises(EDRSError):
            run_evolution(tiny_cv, cfg.model_copy(update={"n_folds": 4}))

    def test_baseline_keeps_the_final_architecture(self, evolved, tiny_cv):
        cfg, checkpoints, report = evolved
        baseline = run_last_generation_baseline(tiny_cv, cfg, report, checkpoints)
        assert [r.fold for r in baseline] == [0, 1, 2]
        for record in baseline:
            final = report.fold_records(record.fold)[-1]
            assert record.variant == "baseline"
            assert record.generation == final.generation
            assert record.active_synapses == final.active_synapses
            assert record.alive_filters_total == final.alive_filters_total

    def test_baseline_needs_checkpoints(self, evolved, tiny_cv, tmp_path):
        cfg, _, report = evolved
        with pytest.raises(MissingCheckpointError):
            run_last_generation_baseline(tiny_cv, cfg, report, tmp_path)


class TestBenchmark:
    def test_nets_and_paths(self, tmp_path):
        arch = SequencerArchitecture(conv_filters=(4, 4, 8), fc_hidden=8)
        first = build_initial(seed=0, architecture=arch)
        path = save_checkpoint(build_initial(seed=1, architecture=arch), tmp_path / checkpoint_name(2, 0))
        cfg = EvolutionRunConfig(benchmark_samples=8, benchmark_batch_size=4, benchmark_repeats=1, architecture=arch)
        times = benchmark_generations({2: path, 1: first}, cfg)
        assert list(times) == [1, 2]
        assert all(t > 0 for t in times.values())

    def test_checkpoints_are_found_by_generation(self, tmp_path):
        for name in ("gen1_fold0.edrs", "gen10_fold0.edrs", "gen2_fold1.edrs", "genX_fold0.edrs"):
            (tmp_path / name).write_bytes(b"")
        found = fold_checkpoints(tmp_path, 0)
        assert list(found) == [1, 10]
        assert found[10].name == "gen10_fold0.edrs"


@pytest.mark.slow
def test_eleven_generation_chain():
    records = augment(generate_synthetic(n_patients=40, lesions_per_patient=1, seed=8), COARSE_AUGMENT)
    data = CrossValidationData(PatchDataset.from_records(records), split_folds(records, n_folds=4, seed=0))
    cfg = EvolutionRunConfig(
        n_generations=11,
        retain_fraction=0.8,
        n_folds=4,
        train_cfg=TrainConfig(epochs=3, batch_size=16),
        benchmark=True,
    )
    chain = run_fold(0, data, cfg)
    assert [r.generation for r in chain] == list(range(1, 12))
    assert chain[0].active_synapses == 44320
    for previous, record in zip(chain, chain[1:]):
        assert record.active_synapses < previous.active_synapses
    assert 0.75**10 <= chain[-1].cumulative_ratio <= 0.15
    assert chain[-1].forward_time_s <= 0.8 * chain[0].forward_time_s


@pytest.mark.slow
def test_accuracy_is_retained_over_eleven_generations():
    records = augment(generate_synthetic(n_patients=93, lesions_per_patient=1, seed=0), AugmentConfig())
    data = CrossValidationData(PatchDataset.from_records(records), split_folds(records, n_folds=10, seed=0))
    cfg = EvolutionRunConfig(
        n_generations=11,
        n_folds=10,
        train_cfg=TrainConfig(epochs=10),
        benchmark=False,
        jobs=min(10, os.cpu_count() or 1),
    )
    report = run_evolution(data, cfg)
    accuracy = {s.generation: s.accuracy_mean for s in report.summary}
    assert sorted(accuracy) == list(range(1, 12))
    assert accuracy[11] >= accuracy[1] - 0.05
