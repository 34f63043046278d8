"""Independent random streams derived from one top-level seed.

Stream ``(seed, purpose, index)`` is a Philox generator keyed by
``SeedSequence(seed, spawn_key=(PURPOSES[purpose], index))``. Philox is
counter-based, so streams never overlap and the derivation is stable across
platforms for a given numpy build.
"""
import numpy as np

PURPOSES = {
    "data": 1,
    "noise": 2,
    "init": 3,
    "validation": 4,
    "eval": 5,
    "power": 6,
    "check": 7,
}


def derive_rng(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    if purpose not in PURPOSES:
        raise ValueError(f"unknown random stream purpose: {purpose!r}")
    if int(seed) < 0 or int(index) < 0:
        raise ValueError("seed and stream index must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=(PURPOSES[purpose], int(index)))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, purpose: str, index: int = 0) -> int:
    """Integer seed for APIs that want a plain int (e.g. per-cell ablation seeds)."""
    return int(derive_rng(seed, purpose, index).integers(0, 2**31 - 1))
