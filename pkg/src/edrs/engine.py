"""
Masked convolutional network core.

A SequencerNet is a chain of "same"-padded convolutions (each followed by
ReLU and an optional 2x2 max-pool) and fully-connected layers. Every conv
synapse carries a binary mask bit and every filter an alive bit; the forward
pass only ever sees weights * mask, and gradients of masked entries are zero,
so training cannot resurrect or kill a synapse.
"""

import copy
import statistics
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import structlog
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyDatasetError, LabelError, ShapeError
from .models import Precision, TrainConfig
from .seeding import make_rng

if TYPE_CHECKING:
    from .dataset import PatchDataset

logger = structlog.get_logger(__name__)

DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass
class ConvLayer:
    weights: np.ndarray  # (filters, in_channels, kh, kw)
    biases: np.ndarray  # (filters,)
    mask: np.ndarray  # bool, same shape as weights
    filter_alive: np.ndarray  # bool, (filters,)
    pool: bool = True

    @property
    def filters(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> Tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    @property
    def padding(self) -> Tuple[int, int]:
        kh, kw = self.kernel
        return kh // 2, kw // 2

    def effective_weights(self) -> np.ndarray:
        return self.weights * self.mask

    def effective_biases(self) -> np.ndarray:
        return self.biases * self.filter_alive

    def active_synapses(self) -> int:
        return int(np.count_nonzero(self.mask))

    def alive_filters(self) -> int:
        return int(np.count_nonzero(self.filter_alive))


@dataclass
class FCLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    biases: np.ndarray  # (out_dim,)
    input_mask: np.ndarray  # bool, (in_dim,); zero columns are frozen at 0

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def effective_weights(self) -> np.ndarray:
        return self.weights * self.input_mask[None, :]


@dataclass
class SequencerNet:
    input_shape: Tuple[int, int, int]  # (channels, height, width)
    conv_layers: List[ConvLayer]
    fc_layers: List[FCLayer]
    generation: int = 1

    @property
    def dtype(self) -> np.dtype:
        return self.conv_layers[0].weights.dtype

    @property
    def n_classes(self) -> int:
        return self.fc_layers[-1].out_dim

    def copy(self) -> "SequencerNet":
        return copy.deepcopy(self)

    def conv_output_shapes(self) -> List[Tuple[int, int, int]]:
        """(channels, height, width) emitted by every conv stage"""
        _, h, w = self.input_shape
        shapes = []
        for layer in self.conv_layers:
            if layer.pool:
                h, w = h // 2, w // 2
            shapes.append((layer.filters, h, w))
        return shapes

    def validate(self) -> None:
        channels, h, w = self.input_shape
        for index, layer in enumerate(self.conv_layers):
            if layer.in_channels != channels:
                raise ShapeError(f"conv layer {index} expects {layer.in_channels} channels, receives {channels}")
            if layer.mask.shape != layer.weights.shape or layer.biases.shape != (layer.filters,):
                raise ShapeError(f"conv layer {index} has inconsistent mask or bias shape")
            if layer.filter_alive.shape != (layer.filters,):
                raise ShapeError(f"conv layer {index} filter_alive has shape {layer.filter_alive.shape}")
            kh, kw = layer.kernel
            if kh % 2 == 0 or kw % 2 == 0:
                raise ShapeError(f"conv layer {index} kernel {layer.kernel} cannot be 'same'-padded")
            if layer.pool and (h % 2 or w % 2):
                raise ShapeError(f"conv layer {index} cannot 2x2-pool a {h}x{w} map")
            if np.any(layer.mask[~layer.filter_alive]):
                raise ShapeError(f"conv layer {index} has active synapses in dead filters")
            if not layer.filter_alive.any():
                raise ShapeError(f"conv layer {index} has no alive filter")
            if layer.pool:
                h, w = h // 2, w // 2
            channels = layer.filters
        features = channels * h * w
        for index, layer in enumerate(self.fc_layers):
            if layer.in_dim != features:
                raise ShapeError(f"fc layer {index} expects {layer.in_dim} inputs, receives {features}")
            if layer.input_mask.shape != (layer.in_dim,) or layer.biases.shape != (layer.out_dim,):
                raise ShapeError(f"fc layer {index} has inconsistent mask or bias shape")
            features = layer.out_dim


@dataclass
class ConvActivation:
    windows: np.ndarray  # sliding view over the padded input, (N, C, H, W, kh, kw)
    pre_activation: np.ndarray
    output: np.ndarray  # after ReLU and pooling
    pool_index: Optional[np.ndarray] = None


@dataclass
class FCActivation:
    inputs: np.ndarray
    pre_activation: np.ndarray


@dataclass
class ForwardCache:
    conv: List[ConvActivation] = field(default_factory=list)
    fc: List[FCActivation] = field(default_factory=list)

    @property
    def sequence_features(self) -> np.ndarray:
        """Post-pool activation of the last conv stage, (N, C, H, W)"""
        return self.conv[-1].output


@dataclass
class Gradients:
    loss: float
    conv_weights: List[np.ndarray]
    conv_biases: List[np.ndarray]
    fc_weights: List[np.ndarray]
    fc_biases: List[np.ndarray]

    def flat(self) -> np.ndarray:
        parts = self.conv_weights + self.conv_biases + self.fc_weights + self.fc_biases
        return np.concatenate([p.ravel() for p in parts])


class TrainResult(NamedTuple):
    net: SequencerNet
    loss_trace: List[float]


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / float(fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape)).astype(dtype)


def build_dense_net(
    input_shape: Tuple[int, int, int],
    conv_specs: Sequence[Tuple[int, Tuple[int, int], bool]],
    fc_dims: Sequence[int],
    rng: np.random.Generator,
    precision: Precision = "float32",
    generation: int = 1,
) -> SequencerNet:
    """
    Build a fully connected (all masks one) network.
    conv_specs holds (filters, (kh, kw), pool) per conv layer, fc_dims the
    output width of every fully-connected layer.
    """
    dtype = DTYPES[precision]
    channels, h, w = input_shape
    conv_layers = []
    for filters, (kh, kw), pool in conv_specs:
        shape = (filters, channels, kh, kw)
        conv_layers.append(
            ConvLayer(
                weights=glorot_uniform(rng, shape, channels * kh * kw, filters * kh * kw, dtype),
                biases=np.zeros(filters, dtype=dtype),
                mask=np.ones(shape, dtype=bool),
                filter_alive=np.ones(filters, dtype=bool),
                pool=pool,
            )
        )
        if pool:
            h, w = h // 2, w // 2
        channels = filters
    fc_layers = []
    in_dim = channels * h * w
    for out_dim in fc_dims:
        fc_layers.append(
            FCLayer(
                weights=glorot_uniform(rng, (out_dim, in_dim), in_dim, out_dim, dtype),
                biases=np.zeros(out_dim, dtype=dtype),
                input_mask=np.ones(in_dim, dtype=bool),
            )
        )
        in_dim = out_dim
    net = SequencerNet(tuple(input_shape), conv_layers, fc_layers, generation)
    net.validate()
    return net


def reinitialize(net: SequencerNet, rng: np.random.Generator) -> SequencerNet:
    """Same masks and alive filters, fresh Glorot weights, zero biases"""
    fresh = net.copy()
    dtype = net.dtype
    for layer in fresh.conv_layers:
        filters, channels, kh, kw = layer.weights.shape
        layer.weights = glorot_uniform(rng, layer.weights.shape, channels * kh * kw, filters * kh * kw, dtype) * layer.mask
        layer.biases = np.zeros_like(layer.biases)
    for layer in fresh.fc_layers:
        layer.weights = glorot_uniform(rng, layer.weights.shape, layer.in_dim, layer.out_dim, dtype) * layer.input_mask[None, :]
        layer.biases = np.zeros_like(layer.biases)
    return fresh


def as_batch(images: np.ndarray, net: SequencerNet) -> np.ndarray:
    """Accept (N, H, W) single-channel stacks as well as (N, C, H, W)"""
    images = np.asarray(images)
    if images.ndim == 3 and net.input_shape[0] == 1:
        images = images[:, None, :, :]
    if images.ndim != 4 or tuple(images.shape[1:]) != tuple(net.input_shape):
        raise ShapeError(f"batch shape {images.shape} does not match network input (N, {', '.join(map(str, net.input_shape))})")
    return images.astype(net.dtype, copy=False)


def _pool_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    index = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, index[..., None], axis=-1)[..., 0], index


def _pool_backward(grad: np.ndarray, index: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = grad.shape
    blocks = np.zeros((n, c, h2, w2, 4), dtype=grad.dtype)
    np.put_along_axis(blocks, index[..., None], grad[..., None], axis=-1)
    return blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)


def _conv_forward(x: np.ndarray, layer: ConvLayer) -> Tuple[np.ndarray, np.ndarray]:
    ph, pw = layer.padding
    padded = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(padded, layer.kernel, axis=(2, 3))
    out = np.tensordot(windows, layer.effective_weights(), axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + layer.effective_biases()[None, :, None, None]
    return out, windows


def _conv_backward(grad: np.ndarray, windows: np.ndarray, layer: ConvLayer, need_input: bool):
    d_weights = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3])) * layer.mask
    d_biases = grad.sum(axis=(0, 2, 3)) * layer.filter_alive
    if not need_input:
        return d_weights, d_biases, None
    n, _, h, w = grad.shape
    kh, kw = layer.kernel
    ph, pw = layer.padding
    weights = layer.effective_weights()
    d_padded = np.zeros((n, layer.in_channels, h + 2 * ph, w + 2 * pw), dtype=grad.dtype)
    for i in range(kh):
        for j in range(kw):
            d_padded[:, :, i:i + h, j:j + w] += np.einsum("nfhw,fc->nchw", grad, weights[:, :, i, j], optimize=True)
    return d_weights, d_biases, d_padded[:, :, ph:ph + h, pw:pw + w]


def forward(net: SequencerNet, batch: np.ndarray, retain: bool = True) -> Tuple[np.ndarray, ForwardCache]:
    """
    Run the masked network on a (N, C, H, W) batch.
    Returns the (N, n_classes) logits and, when `retain` is set, the per-layer
    activations needed by backward() and by sequence extraction.
    """
    x = as_batch(batch, net)
    cache = ForwardCache()
    for layer in net.conv_layers:
        pre, windows = _conv_forward(x, layer)
        x = np.maximum(pre, 0)
        index = None
        if layer.pool:
            x, index = _pool_forward(x)
        if retain:
            cache.conv.append(ConvActivation(windows, pre, x, index))
    x = x.reshape(x.shape[0], -1)
    last = len(net.fc_layers) - 1
    for position, layer in enumerate(net.fc_layers):
        pre = x @ layer.effective_weights().T + layer.biases
        if retain:
            cache.fc.append(FCActivation(x, pre))
        x = pre if position == last else np.maximum(pre, 0)
    return x, cache


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def check_labels(labels: np.ndarray, n_classes: int, n_samples: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_samples,):
        raise ShapeError(f"expected {n_samples} labels, got shape {labels.shape}")
    if labels.size and (not np.all(np.equal(np.mod(labels, 1), 0)) or labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels must lie in {{0..{n_classes - 1}}}, got {sorted(set(labels.tolist()))}")
    return labels.astype(np.int64)


def backward(net: SequencerNet, batch: np.ndarray, labels: np.ndarray, cache: Optional[ForwardCache] = None) -> Gradients:
    """
    Exact gradients of the mean softmax cross-entropy.
    Entries belonging to masked synapses, dead filters and frozen FC columns
    are exactly zero.
    """
    x = as_batch(batch, net)
    labels = check_labels(labels, net.n_classes, x.shape[0])
    if cache is None or len(cache.conv) != len(net.conv_layers):
        logits, cache = forward(net, x)
    else:
        last = cache.fc[-1]
        logits = last.pre_activation
    n = x.shape[0]

    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    grad /= n

    fc_w: List[np.ndarray] = [None] * len(net.fc_layers)
    fc_b: List[np.ndarray] = [None] * len(net.fc_layers)
    for position in reversed(range(len(net.fc_layers))):
        layer, act = net.fc_layers[position], cache.fc[position]
        if position != len(net.fc_layers) - 1:
            grad = grad * (act.pre_activation > 0)
        fc_w[position] = (grad.T @ act.inputs) * layer.input_mask[None, :]
        fc_b[position] = grad.sum(axis=0)
        grad = grad @ layer.effective_weights()

    conv_w: List[np.ndarray] = [None] * len(net.conv_layers)
    conv_b: List[np.ndarray] = [None] * len(net.conv_layers)
    grad = grad.reshape(cache.sequence_features.shape)
    for position in reversed(range(len(net.conv_layers))):
        layer, act = net.conv_layers[position], cache.conv[position]
        if layer.pool:
            grad = _pool_backward(grad, act.pool_index)
        grad = grad * (act.pre_activation > 0)
        conv_w[position], conv_b[position], grad = _conv_backward(grad, act.windows, layer, need_input=position > 0)

    return Gradients(cross_entropy(logits, labels), conv_w, conv_b, fc_w, fc_b)


def _parameters(net: SequencerNet) -> List[np.ndarray]:
    return (
        [layer.weights for layer in net.conv_layers]
        + [layer.biases for layer in net.conv_layers]
        + [layer.weights for layer in net.fc_layers]
        + [layer.biases for layer in net.fc_layers]
    )


def _gradient_list(grads: Gradients) -> List[np.ndarray]:
    return grads.conv_weights + grads.conv_biases + grads.fc_weights + grads.fc_biases


def train(net: SequencerNet, data: "PatchDataset", cfg: TrainConfig) -> TrainResult:
    """
    Minibatch SGD with momentum on the surviving synapses. A minibatch
    gradient whose global norm exceeds max_grad_norm is scaled down to it.
    The input net is left untouched; masks of the returned net are identical
    to the input's bit-for-bit.
    """
    if len(data) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    trained = net.copy()
    images = as_batch(data.images, trained)
    labels = check_labels(data.labels, trained.n_classes, images.shape[0])
    rng = make_rng(cfg.seed)
    params = _parameters(trained)
    velocity = [np.zeros_like(p) for p in params]
    lr = trained.dtype.type(cfg.learning_rate)
    momentum = trained.dtype.type(cfg.momentum)
    max_norm = cfg.max_grad_norm
    loss_trace = []
    n = images.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            index = order[start:start + cfg.batch_size]
            grads = backward(trained, images[index], labels[index])
            step = lr
            if max_norm is not None:
                norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in _gradient_list(grads))))
                if norm > max_norm:
                    step = trained.dtype.type(cfg.learning_rate * max_norm / norm)
            for param, vel, grad in zip(params, velocity, _gradient_list(grads)):
                vel *= momentum
                vel -= step * grad.astype(param.dtype, copy=False)
                param += vel
            epoch_loss += grads.loss * len(index)
        loss_trace.append(epoch_loss / n)
        logger.debug("epoch finished", epoch=epoch + 1, loss=loss_trace[-1], generation=trained.generation)
    return TrainResult(trained, loss_trace)


def predict(net: SequencerNet, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class per sample"""
    batch = as_batch(images, net)
    out = [forward(net, batch[s:s + batch_size], retain=False)[0].argmax(axis=1) for s in range(0, batch.shape[0], batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def count_active_synapses(net: SequencerNet) -> int:
    """Active conv synapses; FC weights sit outside the evolutionary budget"""
    return sum(layer.active_synapses() for layer in net.conv_layers)


def count_active_parameters(net: SequencerNet) -> int:
    total = 0
    for layer in net.conv_layers:
        total += layer.active_synapses() + layer.alive_filters()
    for layer in net.fc_layers:
        total += layer.out_dim * int(np.count_nonzero(layer.input_mask)) + layer.out_dim
    return total


def shrink_network(net: SequencerNet) -> SequencerNet:
    """
    Physically remove dead filters, the input channels they fed and the FC
    columns of dead last-layer filters. The result computes the same function
    as the masked network with fewer arithmetic operations.
    """
    conv_layers = []
    keep_in = np.arange(net.input_shape[0])
    for layer in net.conv_layers:
        keep = np.flatnonzero(layer.filter_alive)
        conv_layers.append(
            ConvLayer(
                weights=layer.weights[keep][:, keep_in].copy(),
                biases=layer.biases[keep].copy(),
                mask=layer.mask[keep][:, keep_in].copy(),
                filter_alive=np.ones(len(keep), dtype=bool),
                pool=layer.pool,
            )
        )
        keep_in = keep
    _, h, w = net.conv_output_shapes()[-1]
    positions = h * w
    columns = (keep_in[:, None] * positions + np.arange(positions)[None, :]).ravel()
    fc_layers = []
    for index, layer in enumerate(net.fc_layers):
        if index == 0:
            fc_layers.append(FCLayer(layer.weights[:, columns].copy(), layer.biases.copy(), layer.input_mask[columns].copy()))
        else:
            fc_layers.append(copy.deepcopy(layer))
    shrunk = SequencerNet(net.input_shape, conv_layers, fc_layers, net.generation)
    shrunk.validate()
    return shrunk


def time_forward(
    net: SequencerNet,
    n_samples: int = 1500,
    batch_size: int = 250,
    repeats: int = 5,
    seed: int = 0,
) -> float:
    """
    Median wall-clock seconds of one full forward pass over `n_samples`
    random inputs. Input generation and one warm-up pass are not timed.
    """
    if n_samples < 1 or batch_size < 1 or repeats < 1:
        raise ValueError("n_samples, batch_size and repeats must be positive")
    inputs = make_rng(seed).uniform(0.0, 1.0, size=(n_samples,) + tuple(net.input_shape)).astype(net.dtype)
    batches = [inputs[s:s + batch_size] for s in range(0, n_samples, batch_size)]

    def one_pass() -> float:
        start = time.perf_counter()
        for batch in batches:
            forward(net, batch, retain=False)
        return time.perf_counter() - start

    one_pass()
    timings = [one_pass() for _ in range(repeats)]
    median = statistics.median(timings)
    logger.info(
        "forward pass timed",
        generation=net.generation,
        samples=n_samples,
        repeats=repeats,
        median_s=round(median, 6),
        min_s=round(min(timings), 6),
        max_s=round(max(timings), 6),
    )
    return median
