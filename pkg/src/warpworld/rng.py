"""Deterministic random-stream derivation.

Every stochastic component (scene generation, curation offsets, weight init,
training batches, sampling noise, retrieval Monte-Carlo) pulls from its own
named stream derived from one root seed, so runs reproduce bit-for-bit and
changing how often one component draws cannot shift any other component.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def stream(root_seed: int, name: str) -> np.random.Generator:
    """Return the Generator for sub-stream `name` under `root_seed`.

    The name is hashed (sha256, first 8 bytes) so stream identity depends on
    the full string, not on declaration order.
    """
    if not name:
        raise ValueError("stream name must be non-empty")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(root_seed), _tag(name)))))


def substream(root_seed: int, name: str, index: int) -> np.random.Generator:
    """Indexed child of a named stream (e.g. one stream per scene)."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence((int(root_seed), _tag(name), int(index))))
    )
