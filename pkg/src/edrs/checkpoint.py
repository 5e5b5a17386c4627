"""
Binary sequencer checkpoints.

Layout (all integers little-endian):

    header   b"EDRS" | u16 version | u32 generation
             | u16 x3 input (channels, height, width) | u16 conv layers | u16 fc layers
    conv     u32 filters | u32 in_channels | u16 kh | u16 kw | u8 pool
             | mask bits (packed, LSB first) | filter_alive bits
             | f32 weights (filters*in_channels*kh*kw) | f32 biases (filters)
    fc       u32 out_dim | u32 in_dim | input_mask bits
             | f32 weights (out_dim*in_dim) | f32 biases (out_dim)
    footer   SHA-256 of every preceding byte
"""

import hashlib
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import structlog

from .engine import ConvLayer, FCLayer, SequencerNet
from .errors import BadMagicError, ChecksumError, CheckpointError, VersionMismatchError
from .models import Precision

logger = structlog.get_logger(__name__)

MAGIC = b"EDRS"
FORMAT_VERSION = 1
DIGEST_SIZE = 32

_HEADER = struct.Struct("<4sHIHHHHH")
_CONV = struct.Struct("<IIHHB")
_FC = struct.Struct("<II")


def checkpoint_name(generation: int, fold: int) -> str:
    return f"gen{generation}_fold{fold}.edrs"


def _bits(values: np.ndarray) -> bytes:
    return np.packbits(values.astype(bool).ravel(), bitorder="little").tobytes()


def _floats(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def encode(net: SequencerNet) -> bytes:
    net.validate()
    parts = [
        _HEADER.pack(
            MAGIC,
            FORMAT_VERSION,
            net.generation,
            *net.input_shape,
            len(net.conv_layers),
            len(net.fc_layers),
        )
    ]
    for layer in net.conv_layers:
        kh, kw = layer.kernel
        parts.append(_CONV.pack(layer.filters, layer.in_channels, kh, kw, int(layer.pool)))
        parts += [_bits(layer.mask), _bits(layer.filter_alive), _floats(layer.weights), _floats(layer.biases)]
    for layer in net.fc_layers:
        parts.append(_FC.pack(layer.out_dim, layer.in_dim))
        parts += [_bits(layer.input_mask), _floats(layer.weights), _floats(layer.biases)]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, body: bytes):
        self.body = body
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.body):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.body[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, layout: struct.Struct) -> Tuple:
        return layout.unpack(self.take(layout.size))

    def bits(self, shape: Tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        packed = np.frombuffer(self.take((count + 7) // 8), dtype=np.uint8)
        return np.unpackbits(packed, count=count, bitorder="little").astype(bool).reshape(shape)

    def floats(self, shape: Tuple[int, ...], dtype) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(dtype).reshape(shape)


def decode(blob: bytes, precision: Precision = "float32") -> SequencerNet:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"not a sequencer checkpoint (magic {blob[:4]!r}, expected {MAGIC!r})")
    if len(blob) < _HEADER.size + DIGEST_SIZE:
        raise CheckpointError("checkpoint is truncated")
    version = struct.unpack_from("<H", blob, 4)[0]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
    body, digest = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch, file is corrupted")

    dtype = np.float64 if precision == "float64" else np.float32
    reader = _Reader(body)
    _, _, generation, channels, height, width, n_conv, n_fc = reader.unpack(_HEADER)
    conv_layers = []
    for _ in range(n_conv):
        filters, in_channels, kh, kw, pool = reader.unpack(_CONV)
        shape = (filters, in_channels, kh, kw)
        mask = reader.bits(shape)
        alive = reader.bits((filters,))
        weights = reader.floats(shape, dtype)
        biases = reader.floats((filters,), dtype)
        conv_layers.append(ConvLayer(weights, biases, mask, alive, bool(pool)))
    fc_layers = []
    for _ in range(n_fc):
        out_dim, in_dim = reader.unpack(_FC)
        input_mask = reader.bits((in_dim,))
        weights = reader.floats((out_dim, in_dim), dtype)
        biases = reader.floats((out_dim,), dtype)
        fc_layers.append(FCLayer(weights, biases, input_mask))
    if reader.offset != len(body):
        raise CheckpointError(f"{len(body) - reader.offset} trailing bytes after the last layer")
    net = SequencerNet((channels, height, width), conv_layers, fc_layers, generation)
    net.validate()
    return net


def save_checkpoint(net: SequencerNet, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode(net))
    except OSError as e:
        logger.error(f"Failed to write checkpoint {path}: {e}")
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.debug("saved checkpoint", path=str(path), generation=net.generation)
    return path


def load_checkpoint(path: Union[str, Path], precision: Precision = "float32") -> SequencerNet:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        logger.error(f"Failed to read checkpoint {path}: {e}")
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    try:
        return decode(blob, precision)
    except CheckpointError as e:
        logger.error(f"Rejected checkpoint {path}: {e}")
        raise
