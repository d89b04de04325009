"""Named, splittable random streams derived from one 64-bit seed.

A stream is identified by ``(seed, name, *indices)``; the same key always
yields the same generator regardless of call order, which is what makes
resumed runs and index-ordered data synthesis reproducible.
"""
import zlib

import numpy as np

STREAMS = ("data", "noise", "init", "order", "eval")


def stream_id(name: str) -> int:
    return zlib.crc32(name.encode("ascii"))


def _words(value: int):
    value = int(value) & 0xFFFFFFFFFFFFFFFF
    return [value & 0xFFFFFFFF, value >> 32]


def stream_key(seed: int, name: str, *indices: int) -> list:
    """Fixed-width uint32 entropy words for a stream.

    Every field is two words and the index count is included, so keys of
    different lengths never alias (``SeedSequence`` ignores trailing zeros).
    """
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}; expected one of {STREAMS}")
    if any(int(i) < 0 for i in indices):
        raise ValueError(f"stream indices must be non-negative, got {indices}")
    key = _words(seed) + [stream_id(name), len(indices)]
    for i in indices:
        key += _words(i)
    return key


def generator(seed: int, name: str, *indices: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(stream_key(seed, name, *indices))))


def describe() -> dict:
    """Manifest entry documenting how streams are derived."""
    return {
        "bit_generator": "PCG64",
        "key": "SeedSequence([seed_lo, seed_hi, crc32(stream_name), n_indices, idx_lo, idx_hi, ...])",
        "streams": {name: stream_id(name) for name in STREAMS},
    }
