"""Deterministic random streams.

All randomness goes through :func:`make_rng`, which keys numpy's Philox4x64-10
counter-based bit generator with ``SeedSequence([seed, *stream])``. String
stream labels are mapped to integers with CRC-32, so a stream is fully
determined by ``(seed, labels)`` and can be reproduced in any language that
implements Philox and numpy's SeedSequence mixing.
"""
from __future__ import annotations

import zlib

import numpy as np


def _stream_word(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"stream ids must be non-negative, got {label}")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def make_rng(seed: int, *stream) -> np.random.Generator:
    words = [int(seed)] + [_stream_word(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
