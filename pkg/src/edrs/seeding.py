"""
Derived random streams.

Every stochastic step (weight init, minibatch order, offspring synthesis,
synthetic lesions, fold shuffling) draws from its own Philox stream keyed by
(master_seed, fold, generation, purpose), so folds can run in any order or in
parallel and still reproduce bit-for-bit.
"""

import zlib

import numpy as np

PURPOSES = ("init", "train", "synthesis", "baseline", "folds", "data", "bench")


def purpose_code(purpose: str) -> int:
    if purpose not in PURPOSES:
        # stable across interpreter runs, unlike hash()
        return zlib.crc32(purpose.encode("utf-8"))
    return PURPOSES.index(purpose)


def derive_seed(master_seed: int, fold: int = 0, generation: int = 0, purpose: str = "init") -> int:
    """Collapse a stream key into one 64-bit integer seed"""
    seq = np.random.SeedSequence(
        int(master_seed) & 0xFFFFFFFFFFFFFFFF,
        spawn_key=(int(fold), int(generation), purpose_code(purpose)),
    )
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_rng(master_seed: int, fold: int = 0, generation: int = 0, purpose: str = "init") -> np.random.Generator:
    return make_rng(derive_seed(master_seed, fold, generation, purpose))
