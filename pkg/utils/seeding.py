"""
Named sub-seeds.

All randomness in a run flows from one integer seed. Each consumer asks for a
generator under its own name ("synth.scenes", "contrast.triplets", ...), so
adding a new consumer never shifts the random stream of an existing one.
"""

import hashlib
from typing import Union

import numpy as np


def derive_seed(seed: int, *names: Union[str, int]) -> int:
    """Stable 63-bit seed derived from a base seed and a name path."""
    key = ":".join([str(int(seed)), *[str(n) for n in names]]).encode("utf-8")
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "big") & ((1 << 63) - 1)


def make_rng(seed: int, *names: Union[str, int]) -> np.random.Generator:
    """numpy Generator seeded from `derive_seed(seed, *names)`."""
    return np.random.default_rng(derive_seed(seed, *names))


def as_rng(seed_or_rng: Union[int, np.random.Generator], *names: Union[str, int]) -> np.random.Generator:
    """Accept either an existing Generator or an integer seed."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return make_rng(int(seed_or_rng), *names)
