"""
Seed Derivation

All randomness flows from one master seed. Each consumer asks for a child
seed by (purpose tag, index); the derivation goes through numpy's
SeedSequence, so children are statistically independent and the mapping
is stable across platforms and runs.
"""

import zlib

import numpy as np


def tag_code(tag: str) -> int:
    """Stable 32-bit code of a purpose tag (crc32, not Python's salted hash)."""
    return zlib.crc32(tag.encode("utf-8"))


def derive_seed(master: int, tag: str, index: int = 0) -> int:
    """
    Derive a 64-bit child seed from (master, tag, index).

    Example:
        derive_seed(42, "tau", 7) always returns the same integer; changing
        any argument gives an unrelated one.
    """
    # Tag and index go into the spawn key
    seq = np.random.SeedSequence(entropy=int(master), spawn_key=(tag_code(tag), int(index)))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def derive_rng(master: int, tag: str, index: int = 0) -> np.random.Generator:
    """numpy Generator seeded from derive_seed(master, tag, index)."""
    return np.random.default_rng(derive_seed(master, tag, index))


def value_index(value: float) -> int:
    """Index for seeds keyed by a grid value rather than its position."""
    # repr keeps 1.1 and 1.1000000000000001 apart; round grids before calling
    return zlib.crc32(repr(float(value)).encode("utf-8"))
