"""Stable seed derivation: every random stream descends from one integer seed."""

import hashlib

import numpy as np


def derive_seed(seed: int, *purpose) -> int:
    """Hash ``(seed, *purpose)`` to an unsigned 64-bit integer.

    Uses blake2b so the value does not depend on Python's per-process hash salt.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed).to_bytes(16, "little", signed=True))
    for p in purpose:
        h.update(b"\x1f")
        h.update(str(p).encode())
    return int.from_bytes(h.digest(), "little")


def rng_for(seed: int, *purpose) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *purpose))
