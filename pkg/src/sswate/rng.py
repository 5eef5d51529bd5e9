"""Reproducible substreams for simulation and bootstrap draws.

Every random draw in the package comes from a Philox counter-based generator
keyed by a (seed, *path) tuple, e.g. (seed, replicate index, stream role).
Streams are therefore independent of execution order: any schedule of
replicates, and any subset of them, reproduces the same draws.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["substream"]


def _key_words(seed: int, path: tuple) -> np.ndarray:
    # Stable 128-bit Philox key from the textual path; avoids collisions
    # between e.g. (1, 23) and (12, 3) by keeping tuple structure in the
    # digest.
    label = repr((int(seed),) + tuple(path)).encode()
    digest = hashlib.sha256(label).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64)


def substream(seed: int, *path) -> np.random.Generator:
    """Return the generator for one (seed, *path) stream.

    Parameters
    ----------
    seed : int
        Study-level seed.
    *path :
        Hashable labels identifying the stream, typically a replicate index
        followed by a role such as ``"covariates"`` or ``"assign"``.
    """
    return np.random.Generator(np.random.Philox(key=_key_words(seed, path)))
