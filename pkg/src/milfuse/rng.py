"""Seeded random number generation.

Every stochastic step in the pipeline (synthetic extractor projections,
parameter initialization, fold shuffling, patch subsampling, dataset
generation) draws from a numpy Philox generator, a 64-bit counter-based
scheme with a portable, platform-independent stream. Subsystem seeds are
derived from a base seed plus string tokens via SHA-256, so adding or
reordering pipeline stages never shifts another stage's stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

MAX_SEED = 2**64 - 1


def derive_seed(base_seed: int, *tokens: object) -> int:
    """Derive a 64-bit child seed from a base seed and a token path.

    Tokens are typically short strings naming a pipeline stage plus
    identifiers (slide id, fold index). The same (base_seed, tokens)
    always yields the same child seed.
    """
    digest = hashlib.sha256()
    digest.update(str(int(base_seed)).encode())
    for token in tokens:
        digest.update(b"\x1f")
        digest.update(str(token).encode())
    return int.from_bytes(digest.digest()[:8], "little")


def make_rng(seed: int, *tokens: object) -> np.random.Generator:
    """Philox generator for ``derive_seed(seed, *tokens)``."""
    if tokens:
        seed = derive_seed(seed, *tokens)
    return np.random.Generator(np.random.Philox(key=int(seed) & MAX_SEED))
