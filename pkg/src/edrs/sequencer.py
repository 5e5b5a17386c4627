"""
Radiomic sequencer: the generation-1 architecture, sequence extraction and
compactness metrics
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import structlog

from .engine import SequencerNet, build_dense_net, forward
from .errors import ShapeError
from .models import CompactnessMetrics, Precision, SequencerArchitecture
from .seeding import make_rng

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class RadiomicSequence:
    values: np.ndarray
    generation: int

    def __len__(self) -> int:
        return len(self.values)


def build_initial(seed: int, architecture: Optional[SequencerArchitecture] = None, precision: Precision = "float32") -> SequencerNet:
    """Dense generation-1 sequencer with Glorot-uniform weights and zero biases"""
    architecture = architecture or SequencerArchitecture()
    conv_specs = [(filters, (kernel, kernel), True) for filters, kernel in zip(architecture.conv_filters, architecture.conv_kernels)]
    net = build_dense_net(
        input_shape=(architecture.in_channels, architecture.input_size, architecture.input_size),
        conv_specs=conv_specs,
        fc_dims=[architecture.fc_hidden, architecture.n_classes],
        rng=make_rng(seed),
        precision=precision,
        generation=1,
    )
    logger.debug("built initial sequencer", seed=seed, filters=architecture.conv_filters, precision=precision)
    return net


def _patch_batch(net: SequencerNet, patches: np.ndarray) -> np.ndarray:
    patches = np.asarray(patches)
    channels, h, w = net.input_shape
    if patches.ndim == 3 and channels == 1 and patches.shape[1:] == (h, w):
        return patches[:, None]
    if patches.ndim == 4 and patches.shape[1:] == (channels, h, w):
        return patches
    raise ShapeError(f"patches of shape {patches.shape[1:]} do not match the sequencer input {net.input_shape}")


def extract_sequences(net: SequencerNet, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """
    Radiomic sequences of a stack of patches, shape (N, 16 * alive last-layer filters).
    Values of a filter are contiguous, filters ordered by index.
    """
    batch = _patch_batch(net, patches)
    alive = net.conv_layers[-1].filter_alive
    rows = []
    for start in range(0, batch.shape[0], batch_size):
        _, cache = forward(net, batch[start:start + batch_size])
        features = cache.sequence_features[:, alive]
        rows.append(features.reshape(features.shape[0], -1))
    return np.concatenate(rows) if rows else np.zeros((0, rsl_last_layer(net)), dtype=net.dtype)


def extract_sequence(net: SequencerNet, patch: np.ndarray) -> RadiomicSequence:
    patch = np.asarray(patch)
    channels, h, w = net.input_shape
    if patch.shape not in ((h, w), (channels, h, w)):
        raise ShapeError(f"patch shape {patch.shape} does not match the sequencer input {net.input_shape}")
    values = extract_sequences(net, patch.reshape(1, channels, h, w))[0]
    return RadiomicSequence(values=values, generation=net.generation)


def sequence_positions(net: SequencerNet) -> int:
    _, h, w = net.conv_output_shapes()[-1]
    return h * w


def rsl_last_layer(net: SequencerNet) -> int:
    return sequence_positions(net) * net.conv_layers[-1].alive_filters()


def compactness_metrics(net: SequencerNet) -> CompactnessMetrics:
    total = sum(layer.alive_filters() for layer in net.conv_layers)
    positions = sequence_positions(net)
    return CompactnessMetrics(
        total_alive_filters=total,
        rsl_table=positions * total,
        rsl_last_layer=positions * net.conv_layers[-1].alive_filters(),
    )


def write_sequences_csv(path: Union[str, Path], patch_ids: Sequence[str], sequences: np.ndarray, generation: int) -> Path:
    """One row per patch: patch_id, generation, v0 .. vN"""
    path = Path(path)
    sequences = np.asarray(sequences)
    frame = pd.DataFrame(sequences, columns=[f"v{i}" for i in range(sequences.shape[1])])
    frame.insert(0, "generation", generation)
    frame.insert(0, "patch_id", list(patch_ids))
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.9g")
    logger.info("wrote radiomic sequences", path=str(path), patches=len(frame), length=sequences.shape[1])
    return path


def read_sequences_csv(path: Union[str, Path]) -> List[RadiomicSequence]:
    frame = pd.read_csv(path)
    values = frame.filter(regex=r"^v\d+$").to_numpy(dtype=np.float64)
    return [RadiomicSequence(values=row, generation=int(g)) for row, g in zip(values, frame["generation"])]
