"""Deterministic seed derivation.

One master seed drives every random decision in the pipeline. Sub-seeds are
derived by hashing the master seed together with a path of string/int tags,
so adding a new consumer never shifts the streams of existing ones.
"""

import hashlib

import numpy as np
import torch

_U64 = (1 << 64) - 1


def derive_seed(master: int, *path) -> int:
    """Derive a 64-bit seed from a master seed and a tag path."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master) & _U64).encode())
    for tag in path:
        h.update(b"/")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest(), "little")


def np_rng(seed: int, *path) -> np.random.Generator:
    if path:
        seed = derive_seed(seed, *path)
    return np.random.default_rng(seed & _U64)


def torch_gen(seed: int, *path) -> torch.Generator:
    if path:
        seed = derive_seed(seed, *path)
    g = torch.Generator()
    # torch.Generator.manual_seed takes a signed 64-bit value
    g.manual_seed(seed & (_U64 >> 1))
    return g
