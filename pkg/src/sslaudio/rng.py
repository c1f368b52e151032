"""Deterministic random-stream derivation.

Every random decision in the package is drawn from a generator derived
statelessly from (base seed, purpose label, integer indices).  Because no
generator state survives between steps, a resumed run re-derives exactly
the streams an uninterrupted run would have used, and independent purposes
(batch order, augmentation, mixup, noise) can never steal draws from each
other.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_key(label: str) -> int:
    # crc32 is stable across platforms and Python versions, unlike hash().
    return zlib.crc32(label.encode("utf-8"))


def derive_rng(seed: int, label: str, *indices: int) -> np.random.Generator:
    """Return a fresh Generator for (seed, label, indices).

    Same arguments always give a bit-identical stream.
    """
    entropy = [int(seed) & 0xFFFFFFFF, _label_key(label)]
    entropy.extend(int(i) & 0xFFFFFFFF for i in indices)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
