"""Per-component random streams derived from one root seed.

Every stream is a Philox counter-based generator keyed by
``SeedSequence(root, spawn_key=path)``, where string path components are
hashed with CRC-32.  Streams therefore depend only on (root, path), never on
the order in which they are requested.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    k = int(part)
    if k < 0:
        raise ValueError("stream path indices must be non-negative")
    return k


def stream(root: int, *path) -> np.random.Generator:
    ss = np.random.SeedSequence(int(root), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def streams(root: int, *path, indices) -> list[np.random.Generator]:
    """One generator per index, e.g. one per example of a batch."""
    return [stream(root, *path, int(i)) for i in indices]
