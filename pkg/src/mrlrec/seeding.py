"""Seed derivation and FNV-1a hashing.

Every random stream in a run is derived from one master seed by XOR with
the FNV-1a hash of a fixed label, so subsystems never share a stream.
"""

from __future__ import annotations

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes | str) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK
    return h


def fnv1a64_file(path, chunk_size: int = 1 << 20) -> int:
    h = FNV_OFFSET
    with open(path, "rb") as fh:
        while chunk := fh.read(chunk_size):
            # bytes-at-a-time keeps the digest identical to fnv1a64()
            for byte in chunk:
                h ^= byte
                h = (h * FNV_PRIME) & _MASK
    return h


def derive_seed(seed: int, label: str) -> int:
    return (int(seed) & _MASK) ^ fnv1a64(label)


def make_rng(seed: int, label: str | None = None) -> np.random.Generator:
    if label is not None:
        seed = derive_seed(seed, label)
    return np.random.default_rng(int(seed) & _MASK)
