"""Named seed derivation.

Every random stream is derived from a root seed plus a path of names, so
adding a new consumer never shifts the numbers an existing one sees.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *names) -> int:
    """Stable 63-bit seed for ``(root, *names)``."""
    key = repr((int(root),) + tuple(str(n) for n in names)).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def rng_for(root: int, *names) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(root, *names)))
