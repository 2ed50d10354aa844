"""Named, splittable seed derivation.

One global seed fans out to independent sub-streams keyed by names and
counters, so any single component can be re-run in isolation with the exact
stream it saw inside the full pipeline.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key_words(names):
    words = []
    for name in names:
        if isinstance(name, (int, np.integer)):
            words.append(int(name) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(name).encode("utf-8")))
    return tuple(words)


def child_seed(root, *names):
    """Deterministic 63-bit integer seed for the (root, *names) stream."""
    seq = np.random.SeedSequence(entropy=int(root), spawn_key=_key_words(names))
    return int(seq.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> 1)


def rng_for(root, *names):
    seq = np.random.SeedSequence(entropy=int(root), spawn_key=_key_words(names))
    return np.random.default_rng(seq)
