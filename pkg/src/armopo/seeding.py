"""Deterministic seed derivation.

Every random stream is derived from a single root seed and a path of string
labels, e.g. ``derive_seed(root, "model", "dmdn", "member", "2")``. Labels are
hashed with CRC32 into a :class:`numpy.random.SeedSequence` spawn key, so the
derived streams are independent of call order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(labels) -> tuple[int, ...]:
    return tuple(zlib.crc32(str(label).encode("utf-8")) for label in labels)


def seed_sequence(root: int, *labels) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(root), spawn_key=_key(labels))


def derive_seed(root: int, *labels) -> int:
    return int(seed_sequence(root, *labels).generate_state(1, dtype=np.uint32)[0])


def make_rng(root: int, *labels) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(root, *labels))
