"""Named random substreams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def _word(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def substream(root: int, *names) -> np.random.SeedSequence:
    """Seed sequence for the stream addressed by ``names`` under ``root``.

    Names may be strings or nonnegative integers; equal paths give equal
    streams regardless of what else has been drawn.
    """
    return np.random.SeedSequence([int(root), *(_word(n) for n in names)])


def rng(root: int, *names) -> np.random.Generator:
    return np.random.default_rng(substream(root, *names))


def seed64(root: int, *names) -> int:
    """A 64-bit integer seed for APIs that take plain integers."""
    return int(substream(root, *names).generate_state(1, dtype=np.uint64)[0])
