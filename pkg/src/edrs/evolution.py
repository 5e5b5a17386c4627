"""
Probabilistic DNA and offspring synthesis.

An ancestor's trained conv weights become synthesis probabilities for every
filter (cluster) and every synapse. A single scale alpha, calibrated so the
expected offspring size meets the environmental budget, turns them into
Bernoulli survival rates q = min(1, alpha * p). A synapse survives when its
filter, the synapse itself and the filter feeding its input channel all
survive.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import structlog

from .engine import ConvLayer, FCLayer, SequencerNet, count_active_synapses
from .errors import CalibrationError, ShapeError
from .models import EnvironmentalFactor, ProbabilityLaw
from .seeding import make_rng

logger = structlog.get_logger(__name__)

MAX_DOUBLINGS = 200
MAX_BISECTIONS = 200


@dataclass(frozen=True)
class ProbabilisticDNA:
    cluster_probs: List[np.ndarray]  # per conv layer, (filters,)
    synapse_probs: List[np.ndarray]  # per conv layer, shaped like the weights
    law: ProbabilityLaw = "exponential"


@dataclass(frozen=True)
class SynthesisOutcome:
    offspring_mask: List[np.ndarray]
    offspring_filter_alive: List[np.ndarray]
    realized_active_count: int
    rng_seed: int


def _strength(ratio: np.ndarray, law: ProbabilityLaw) -> np.ndarray:
    if law == "linear":
        return ratio
    return np.exp(ratio - 1.0)


def _layer_scale(layer: ConvLayer) -> float:
    if not layer.mask.any():
        return 0.0
    return float(np.abs(layer.weights[layer.mask]).max())


def compute_synapse_probs(ancestor: SequencerNet, law: ProbabilityLaw = "exponential") -> List[np.ndarray]:
    probs = []
    for layer in ancestor.conv_layers:
        scale = _layer_scale(layer)
        p = np.zeros(layer.weights.shape, dtype=np.float64)
        if scale > 0:
            magnitude = np.abs(layer.weights.astype(np.float64))
            p[layer.mask] = _strength(magnitude[layer.mask] / scale, law)
        probs.append(p)
    return probs


def compute_cluster_probs(ancestor: SequencerNet, law: ProbabilityLaw = "exponential") -> List[np.ndarray]:
    probs = []
    for layer in ancestor.conv_layers:
        scale = _layer_scale(layer)
        p = np.zeros(layer.filters, dtype=np.float64)
        active = layer.mask.reshape(layer.filters, -1)
        counts = active.sum(axis=1)
        if scale > 0:
            magnitude = np.abs(layer.weights.astype(np.float64)).reshape(layer.filters, -1) * active
            has_synapses = counts > 0
            mean = magnitude[has_synapses].sum(axis=1) / counts[has_synapses]
            p[has_synapses] = _strength(mean / scale, law)
        probs.append(p)
    return probs


def compute_dna(ancestor: SequencerNet, law: ProbabilityLaw = "exponential") -> ProbabilisticDNA:
    return ProbabilisticDNA(compute_cluster_probs(ancestor, law), compute_synapse_probs(ancestor, law), law)


def _survival(probs: np.ndarray, alpha: float) -> np.ndarray:
    return np.minimum(1.0, alpha * probs)


def expected_active(dna: ProbabilisticDNA, alpha: float) -> float:
    """
    Expected number of offspring conv synapses at scale `alpha`:
    sum over layers and filters c of q_c * sum_i q_i * q_in(i), where q_in(i)
    is the survival rate of the filter feeding synapse i (1 for image input).
    """
    total = 0.0
    feeding = None
    for cluster, synapse in zip(dna.cluster_probs, dna.synapse_probs):
        q_cluster = _survival(cluster, alpha)
        per_channel = _survival(synapse, alpha).sum(axis=(2, 3))
        if feeding is not None:
            per_channel = per_channel * feeding[None, :]
        total += float(q_cluster @ per_channel.sum(axis=1))
        feeding = q_cluster
    return total


def _saturated_expectation(dna: ProbabilisticDNA) -> float:
    saturated = ProbabilisticDNA(
        [(p > 0).astype(np.float64) for p in dna.cluster_probs],
        [(p > 0).astype(np.float64) for p in dna.synapse_probs],
        dna.law,
    )
    return expected_active(saturated, 1.0)


def calibrate_alpha(dna: ProbabilisticDNA, retain_fraction: float, ancestor_active: int) -> EnvironmentalFactor:
    """
    Solve E(alpha) = round(retain_fraction * ancestor_active) by bisection.
    E is continuous and non-decreasing in alpha, so doubling an upper bound
    until it overshoots brackets the root.
    """
    if not 0 < retain_fraction <= 1:
        raise CalibrationError(f"retain fraction must lie in (0, 1], got {retain_fraction}")
    target = int(round(retain_fraction * ancestor_active))
    ceiling = _saturated_expectation(dna)
    if target > ancestor_active or target > ceiling * (1 + 1e-3):
        raise CalibrationError(f"target of {target} synapses exceeds the {min(ancestor_active, int(round(ceiling)))} the ancestor can pass on")
    if target == 0:
        return EnvironmentalFactor(retain_fraction=retain_fraction, alpha=0.0, target_count=0, expected_count=0.0)

    if ceiling < target:
        positive = np.concatenate([p[p > 0].ravel() for p in dna.cluster_probs + dna.synapse_probs])
        alpha = float(1.0 / positive.min())
    else:
        low, high = 0.0, 1.0
        doublings = 0
        while expected_active(dna, high) < target:
            low, high = high, high * 2.0
            doublings += 1
            if doublings > MAX_DOUBLINGS:
                raise CalibrationError("could not bracket the environmental factor")
        for _ in range(MAX_BISECTIONS):
            mid = 0.5 * (low + high)
            if expected_active(dna, mid) < target:
                low = mid
            else:
                high = mid
            if high - low <= 1e-13 * high:
                break
        alpha = high

    expected = expected_active(dna, alpha)
    if abs(expected - target) > 1e-3 * target:
        raise CalibrationError(f"calibration missed the budget: expected {expected:.1f}, target {target}")
    logger.info("calibrated environmental factor", retain_fraction=retain_fraction, alpha=round(alpha, 8), target=target, expected=round(expected, 3))
    return EnvironmentalFactor(retain_fraction=retain_fraction, alpha=alpha, target_count=target, expected_count=expected)


def _keep_strongest(
    layer: ConvLayer,
    cluster: np.ndarray,
    synapse: np.ndarray,
    drawn: np.ndarray,
    reachable: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Highest-probability filter that can still read an input, with its drawn synapses or its strongest one"""
    candidates = reachable.reshape(layer.filters, -1).any(axis=1)
    if not candidates.any():
        candidates = layer.filter_alive
    strongest = int(np.argmax(np.where(candidates, cluster, -1.0)))
    alive = np.zeros(layer.filters, dtype=bool)
    alive[strongest] = True
    mask = np.zeros_like(reachable)
    mask[strongest] = drawn[strongest] & reachable[strongest]
    if not mask[strongest].any() and reachable[strongest].any():
        best = np.argmax(np.where(reachable[strongest], synapse[strongest], -1.0))
        mask[strongest].flat[best] = True
    return mask, alive


def synthesize_offspring(ancestor: SequencerNet, env: EnvironmentalFactor, dna: ProbabilisticDNA, seed: int) -> SynthesisOutcome:
    """
    Draw the offspring architecture: every filter survives with q_c, every
    synapse of a surviving filter with q_i. Synapses reading a dead input
    channel die with it. A layer left without filters keeps its strongest one.
    """
    rng = make_rng(seed)
    masks, alive_flags = [], []
    feeding = np.ones(ancestor.input_shape[0], dtype=bool)
    for index, (layer, cluster, synapse) in enumerate(zip(ancestor.conv_layers, dna.cluster_probs, dna.synapse_probs)):
        alive = rng.random(layer.filters) < _survival(cluster, env.alpha)
        drawn = rng.random(layer.weights.shape) < _survival(synapse, env.alpha)
        reachable = layer.mask & feeding[None, :, None, None]
        mask = drawn & reachable & alive[:, None, None, None]
        # a surviving filter keeps at least one synapse
        alive &= mask.reshape(layer.filters, -1).any(axis=1)
        if not alive.any():
            mask, alive = _keep_strongest(layer, cluster, synapse, drawn, reachable)
            logger.warning("layer lost every filter, keeping the strongest", layer=index, filter=int(np.argmax(alive)))
        masks.append(mask)
        alive_flags.append(alive)
        feeding = alive
    realized = int(sum(int(np.count_nonzero(m)) for m in masks))
    logger.debug(
        "synthesized offspring",
        seed=seed,
        realized=realized,
        alive_filters=[int(a.sum()) for a in alive_flags],
    )
    return SynthesisOutcome(masks, alive_flags, realized, int(seed))


def build_offspring_net(ancestor: SequencerNet, outcome: SynthesisOutcome) -> SequencerNet:
    """
    Offspring that inherits the ancestor's weights at surviving synapses.
    Dead filters lose their bias, synapses reading their channel and the
    FC1 columns of their sequence positions.
    """
    if len(outcome.offspring_mask) != len(ancestor.conv_layers) or len(outcome.offspring_filter_alive) != len(ancestor.conv_layers):
        raise ShapeError("synthesis outcome and ancestor disagree on the number of conv layers")
    conv_layers = []
    feeding = np.ones(ancestor.input_shape[0], dtype=bool)
    for index, (layer, mask, alive) in enumerate(zip(ancestor.conv_layers, outcome.offspring_mask, outcome.offspring_filter_alive)):
        if mask.shape != layer.mask.shape or alive.shape != layer.filter_alive.shape:
            raise ShapeError(f"conv layer {index}: outcome shapes {mask.shape}/{alive.shape} do not match {layer.mask.shape}/{layer.filter_alive.shape}")
        alive = alive & layer.filter_alive
        mask = mask & layer.mask & alive[:, None, None, None] & feeding[None, :, None, None]
        conv_layers.append(
            ConvLayer(
                weights=layer.weights * mask,
                biases=layer.biases * alive,
                mask=mask,
                filter_alive=alive,
                pool=layer.pool,
            )
        )
        feeding = alive

    positions = int(np.prod(ancestor.conv_output_shapes()[-1][1:]))
    first = ancestor.fc_layers[0]
    if first.in_dim != len(feeding) * positions:
        raise ShapeError(f"fc layer 0 reads {first.in_dim} features, conv stage emits {len(feeding) * positions}")
    input_mask = first.input_mask & np.repeat(feeding, positions)
    fc_layers = [FCLayer(first.weights * input_mask[None, :], first.biases.copy(), input_mask)]
    fc_layers += [FCLayer(layer.weights.copy(), layer.biases.copy(), layer.input_mask.copy()) for layer in ancestor.fc_layers[1:]]

    offspring = SequencerNet(ancestor.input_shape, conv_layers, fc_layers, ancestor.generation + 1)
    offspring.validate()
    return offspring


def evolve_generation(
    ancestor: SequencerNet,
    retain_fraction: float,
    seed: int,
    law: ProbabilityLaw = "exponential",
) -> Tuple[SequencerNet, EnvironmentalFactor, SynthesisOutcome]:
    """DNA -> calibration -> synthesis -> offspring, in one step"""
    dna = compute_dna(ancestor, law)
    env = calibrate_alpha(dna, retain_fraction, count_active_synapses(ancestor))
    outcome = synthesize_offspring(ancestor, env, dna, seed)
    offspring = build_offspring_net(ancestor, outcome)
    return offspring, env, outcome
