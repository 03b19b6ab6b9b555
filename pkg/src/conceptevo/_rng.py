"""Deterministic seed derivation.

Every random draw in the engine comes from a generator seeded by
(root seed, purpose salt, context ints/strings). Strings are folded in
through blake2b so the derivation is stable across processes and platforms,
which is what makes kill-and-resume bit-identical.
"""

from __future__ import annotations

import hashlib

import numpy as np

# Purpose salts. Never reuse a value.
SALT_WORLD = 101
SALT_NOISE = 102
SALT_FLIPS = 103
SALT_INIT_LIBRARY = 104
SALT_SAMPLER = 105
SALT_RANDOM_REPORT = 106
SALT_FIT = 107
SALT_FEWSHOT = 108
SALT_SIM_LLM = 109


def stable_hash(*parts: str | int) -> int:
    """64-bit hash of the parts, independent of PYTHONHASHSEED."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        if isinstance(p, int):
            h.update(p.to_bytes(16, "little", signed=True))
        else:
            h.update(p.encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def derive_seed(*parts: str | int) -> int:
    return stable_hash(*parts)


def rng_for(*parts: str | int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
