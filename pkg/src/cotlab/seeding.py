"""Labeled seed derivation: every randomness consumer gets its own stream.

All randomness in a run flows from one integer seed. Subcomponents derive
child seeds by hashing (seed, label, ...) so that adding or removing one
consumer (say, the probe-batch sampler) never shifts the stream of another
(the batch sampler), which is what makes strategy trajectories comparable
and resumed runs bit-identical.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *labels: object) -> int:
    """Hash (seed, *labels) into a stable 63-bit child seed."""
    material = ":".join([str(int(seed))] + [str(lab) for lab in labels])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def rng_for(seed: int, *labels: object) -> np.random.Generator:
    """A fresh generator on the stream named by `labels`."""
    return np.random.default_rng(derive_seed(seed, *labels))
