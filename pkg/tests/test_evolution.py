import math

import numpy as np
import pytest

from edrs.engine import ConvLayer, FCLayer, SequencerNet, count_active_synapses, forward
from edrs.errors import CalibrationError, ShapeError
from edrs.evolution import (
    ProbabilisticDNA,
    SynthesisOutcome,
    build_offspring_net,
    calibrate_alpha,
    compute_cluster_probs,
    compute_dna,
    compute_synapse_probs,
    evolve_generation,
    expected_active,
    synthesize_offspring,
)
from edrs.models import EnvironmentalFactor, SequencerArchitecture
from edrs.sequencer import build_initial


def _single_layer(weights, mask=None):
    weights = np.asarray(weights, dtype=np.float64)
    mask = np.ones(weights.shape, dtype=bool) if mask is None else mask
    filters = weights.shape[0]
    alive = mask.reshape(filters, -1).any(axis=1)
    conv = ConvLayer(weights, np.zeros(filters), mask, alive, pool=False)
    in_dim = filters * 9
    return SequencerNet((weights.shape[1], 3, 3), [conv], [FCLayer(np.zeros((2, in_dim)), np.zeros(2), np.ones(in_dim, dtype=bool))])


@pytest.fixture(scope="module")
def generation_one():
    return build_initial(seed=0)


@pytest.fixture(scope="module")
def generation_one_calibrated(generation_one):
    dna = compute_dna(generation_one)
    return dna, calibrate_alpha(dna, 0.8, count_active_synapses(generation_one))


class TestSynapseProbs:
    def test_layer_maximum_and_zero(self):
        weights = np.zeros((1, 1, 1, 3))
        weights[0, 0, 0] = [1.0, -0.5, 0.0]
        probs = compute_synapse_probs(_single_layer(weights))[0]
        np.testing.assert_allclose(probs[0, 0, 0], [1.0, math.exp(-0.5), math.exp(-1.0)], rtol=1e-15)

    def test_inactive_synapses_have_zero_probability(self):
        weights = np.array([[[[3.0, 2.0, 1.0]]]])
        mask = np.array([[[[True, False, True]]]])
        probs = compute_synapse_probs(_single_layer(weights, mask))[0]
        assert probs[0, 0, 0, 1] == 0.0
        np.testing.assert_allclose(probs[0, 0, 0, [0, 2]], [1.0, math.exp(1 / 3 - 1)])

    def test_all_zero_layer(self):
        probs = compute_synapse_probs(_single_layer(np.zeros((2, 1, 1, 3))))[0]
        assert not probs.any()

    def test_linear_law(self):
        weights = np.array([[[[2.0, 1.0, 0.5]]]])
        probs = compute_synapse_probs(_single_layer(weights), law="linear")[0]
        np.testing.assert_allclose(probs[0, 0, 0], [1.0, 0.5, 0.25])

    @pytest.mark.parametrize("law", ["exponential", "linear"])
    def test_same_order_as_weight_magnitude(self, law):
        net = build_initial(seed=4, architecture=SequencerArchitecture(conv_filters=(4, 4, 8), fc_hidden=8))
        rng = np.random.default_rng(4)
        for layer in net.conv_layers:
            layer.mask &= rng.random(layer.weights.shape) < 0.6
            layer.weights *= layer.mask
        for layer, probs in zip(net.conv_layers, compute_synapse_probs(net, law=law)):
            magnitude = np.abs(layer.weights[layer.mask])
            ranked = probs[layer.mask][np.argsort(magnitude, kind="stable")]
            assert np.all(np.diff(ranked) >= 0)
            assert np.all((probs >= 0) & (probs <= 1))


class TestClusterProbs:
    def test_uniform_magnitudes(self):
        probs = compute_cluster_probs(_single_layer(np.full((3, 1, 1, 3), -0.7)))[0]
        np.testing.assert_allclose(probs, 1.0)

    def test_ordered_by_mean_magnitude(self):
        weights = np.array([[[[1.0, 0.6, 0.8]]], [[[0.2, 0.2, 0.2]]]])
        probs = compute_cluster_probs(_single_layer(weights))[0]
        np.testing.assert_allclose(probs, [math.exp(-0.2), math.exp(-0.8)])
        assert probs[0] > probs[1]

    def test_dead_filter(self):
        weights = np.ones((2, 1, 1, 3))
        mask = np.ones_like(weights, dtype=bool)
        mask[1] = False
        assert compute_cluster_probs(_single_layer(weights, mask))[0][1] == 0.0


class TestCalibration:
    def test_closed_form_micro_case(self):
        dna = ProbabilisticDNA([np.array([1.0])], [np.ones((1, 1, 1, 2))])
        env = calibrate_alpha(dna, 0.5, 2)
        assert env.target_count == 1
        assert abs(env.alpha - 1 / math.sqrt(2)) < 1e-6

    def test_saturated_probabilities_keep_everything(self):
        dna = ProbabilisticDNA([np.ones(2)], [np.ones((2, 1, 1, 3))])
        env = calibrate_alpha(dna, 1.0, 6)
        assert env.alpha == pytest.approx(1.0, abs=1e-9)
        assert env.expected_count == pytest.approx(6.0)

    def test_zero_target(self):
        dna = ProbabilisticDNA([np.ones(1)], [np.ones((1, 1, 1, 3))])
        assert calibrate_alpha(dna, 0.1, 3).alpha == 0.0

    @pytest.mark.parametrize("fraction, active", [(1.5, 2), (0.0, 2), (1.0, 5)])
    def test_impossible_budgets(self, fraction, active):
        dna = ProbabilisticDNA([np.array([1.0])], [np.ones((1, 1, 1, 2))])
        with pytest.raises(CalibrationError):
            calibrate_alpha(dna, fraction, active)

    def test_generation_one_budget(self, generation_one, generation_one_calibrated):
        dna, env = generation_one_calibrated
        assert count_active_synapses(generation_one) == 44320
        assert env.target_count == 35456
        assert abs(expected_active(dna, env.alpha) - 35456) <= 0.001 * 35456

    def test_expectation_is_monotone(self, generation_one_calibrated):
        dna, _ = generation_one_calibrated
        values = [expected_active(dna, a) for a in np.linspace(0.0, 4.0, 41)]
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert values[0] == 0.0

    def test_single_layer_expectation_is_cluster_weighted_sum(self):
        rng = np.random.default_rng(0)
        cluster = rng.uniform(0.4, 1.0, size=3)
        synapse = rng.uniform(0.4, 1.0, size=(3, 1, 3, 3))
        alpha = 1.3
        direct = sum(min(1, alpha * cluster[c]) * np.minimum(1, alpha * synapse[c]).sum() for c in range(3))
        assert expected_active(ProbabilisticDNA([cluster], [synapse]), alpha) == pytest.approx(direct, rel=1e-12)


class TestSynthesis:
    def test_certain_probabilities_copy_the_ancestor(self, generation_one):
        dna = ProbabilisticDNA(
            [np.ones(layer.filters) for layer in generation_one.conv_layers],
            [np.ones(layer.weights.shape) for layer in generation_one.conv_layers],
        )
        env = EnvironmentalFactor(retain_fraction=1.0, alpha=1.0, target_count=44320, expected_count=44320.0)
        outcome = synthesize_offspring(generation_one, env, dna, seed=3)
        for layer, mask in zip(generation_one.conv_layers, outcome.offspring_mask):
            np.testing.assert_array_equal(mask, layer.mask)
        assert outcome.realized_active_count == 44320

    def test_one_forced_filter_per_layer(self, generation_one):
        clusters = []
        for layer in generation_one.conv_layers:
            p = np.zeros(layer.filters)
            p[layer.filters // 2] = 1.0
            clusters.append(p)
        dna = ProbabilisticDNA(clusters, [np.ones(layer.weights.shape) for layer in generation_one.conv_layers])
        env = EnvironmentalFactor(retain_fraction=0.5, alpha=1.0, target_count=1, expected_count=1.0)
        outcome = synthesize_offspring(generation_one, env, dna, seed=0)
        assert [int(a.sum()) for a in outcome.offspring_filter_alive] == [1, 1, 1]

    def test_guard_keeps_the_strongest_filter(self, generation_one):
        clusters = [np.linspace(0.0, 0.01, layer.filters) for layer in generation_one.conv_layers]
        dna = ProbabilisticDNA(clusters, [np.ones(layer.weights.shape) for layer in generation_one.conv_layers])
        env = EnvironmentalFactor(retain_fraction=0.5, alpha=0.0, target_count=1, expected_count=0.0)
        outcome = synthesize_offspring(generation_one, env, dna, seed=0)
        for layer, alive in zip(generation_one.conv_layers, outcome.offspring_filter_alive):
            assert alive.sum() == 1
            assert alive[layer.filters - 1]

    def test_realized_budget_over_many_seeds(self, generation_one, generation_one_calibrated):
        dna, env = generation_one_calibrated
        realized = []
        for seed in range(100):
            outcome = synthesize_offspring(generation_one, env, dna, seed=seed)
            for layer, mask, alive in zip(generation_one.conv_layers, outcome.offspring_mask, outcome.offspring_filter_alive):
                assert not np.any(mask & ~layer.mask)
                assert alive.any()
            realized.append(outcome.realized_active_count)
        assert abs(np.mean(realized) - env.expected_count) <= 0.01 * env.expected_count

    def test_same_seed_same_offspring(self, generation_one, generation_one_calibrated):
        dna, env = generation_one_calibrated
        a = synthesize_offspring(generation_one, env, dna, seed=17)
        b = synthesize_offspring(generation_one, env, dna, seed=17)
        for x, y in zip(a.offspring_mask, b.offspring_mask):
            np.testing.assert_array_equal(x, y)


class TestOffspring:
    @pytest.fixture
    def ancestor(self, net_factory):
        return net_factory(seed=21, filters=(3, 4))

    def _outcome(self, net, masks=None, alive=None):
        masks = masks or [layer.mask.copy() for layer in net.conv_layers]
        alive = alive or [layer.filter_alive.copy() for layer in net.conv_layers]
        return SynthesisOutcome(masks, alive, int(sum(m.sum() for m in masks)), 0)

    def test_full_outcome_is_the_identity(self, ancestor):
        offspring = build_offspring_net(ancestor, self._outcome(ancestor))
        x = np.random.default_rng(0).random((5, 1, 8, 8))
        np.testing.assert_allclose(forward(offspring, x)[0], forward(ancestor, x)[0], rtol=0, atol=1e-10)
        assert offspring.generation == ancestor.generation + 1

    def test_killed_last_layer_filter(self, ancestor):
        alive = [layer.filter_alive.copy() for layer in ancestor.conv_layers]
        alive[-1][2] = False
        offspring = build_offspring_net(ancestor, self._outcome(ancestor, alive=alive))
        positions = 4
        frozen = slice(2 * positions, 3 * positions)
        assert not offspring.fc_layers[0].input_mask[frozen].any()
        assert not offspring.fc_layers[0].weights[:, frozen].any()
        assert offspring.conv_layers[-1].biases[2] == 0.0

        x = np.random.default_rng(1).random((4, 1, 8, 8))
        logits, cache = forward(offspring, x)
        assert not cache.sequence_features[:, 2].any()
        offspring.fc_layers[0].weights[:, frozen] = 5.0
        np.testing.assert_array_equal(forward(offspring, x)[0], logits)

    def test_dead_input_channel_propagates(self, ancestor):
        alive = [layer.filter_alive.copy() for layer in ancestor.conv_layers]
        alive[0][1] = False
        offspring = build_offspring_net(ancestor, self._outcome(ancestor, alive=alive))
        assert not offspring.conv_layers[1].mask[:, 1].any()
        assert not offspring.conv_layers[0].mask[1].any()

    def test_layer_count_mismatch(self, ancestor):
        outcome = self._outcome(ancestor)
        broken = SynthesisOutcome(outcome.offspring_mask[:1], outcome.offspring_filter_alive[:1], 0, 0)
        with pytest.raises(ShapeError):
            build_offspring_net(ancestor, broken)

    def test_mask_shape_mismatch(self, ancestor):
        masks = [layer.mask.copy() for layer in ancestor.conv_layers]
        masks[1] = masks[1][:, :1]
        with pytest.raises(ShapeError):
            build_offspring_net(ancestor, self._outcome(ancestor, masks=masks))

    def test_evolved_generation_is_a_subset(self, generation_one):
        offspring, env, outcome = evolve_generation(generation_one, 0.8, seed=5)
        assert offspring.generation == 2
        assert count_active_synapses(offspring) == outcome.realized_active_count
        for old, new in zip(generation_one.conv_layers, offspring.conv_layers):
            assert not np.any(new.mask & ~old.mask)
            np.testing.assert_array_equal(new.weights[new.mask], old.weights[new.mask])
        grandchild, _, _ = evolve_generation(offspring, 0.8, seed=6)
        for old, new in zip(offspring.conv_layers, grandchild.conv_layers):
            assert not np.any(new.mask & ~old.mask)
        assert count_active_synapses(grandchild) < count_active_synapses(offspring)
