"""Read auditing for clean frames.

:class:`AuditedFrame` wraps an array and records the module of every caller
that materialises its pixels (through ``np.asarray`` or any numpy function).
Slicing and shape queries are free, so data plumbing can crop and route
frames without counting as a read. Wrap clean data in it, run a pipeline,
and inspect :attr:`ReadLog.readers` to see who looked at the pixels.
"""

from __future__ import annotations

import collections
import sys

import numpy as np

from .dataset import FrameSequence


class ReadLog:
    def __init__(self):
        self.counts: collections.Counter[str] = collections.Counter()

    @property
    def readers(self) -> set[str]:
        return set(self.counts)

    def record(self) -> None:
        frame = sys._getframe(1)
        while frame is not None:
            name = frame.f_globals.get("__name__", "")
            if name != __name__ and not name.startswith("numpy"):
                self.counts[name] += 1
                return
            frame = frame.f_back
        self.counts["<unknown>"] += 1


class AuditedFrame:
    __slots__ = ("_array", "_log")

    def __init__(self, array, log: ReadLog):
        self._array = np.asarray(array)
        self._log = log

    @property
    def shape(self):
        return self._array.shape

    @property
    def ndim(self):
        return self._array.ndim

    @property
    def dtype(self):
        return self._array.dtype

    def __len__(self):
        return len(self._array)

    def __getitem__(self, index):
        return AuditedFrame(self._array[index], self._log)

    def __array__(self, dtype=None, copy=None):
        self._log.record()
        a = self._array if dtype is None else self._array.astype(dtype, copy=False)
        return a.copy() if copy else a

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        self._log.record()
        plain = [np.asarray(i._array) if isinstance(i, AuditedFrame) else i for i in inputs]
        return getattr(ufunc, method)(*plain, **kwargs)

    def __repr__(self):
        return f"AuditedFrame(shape={self.shape})"


def audit_sequences(data, log: ReadLog | None = None) -> tuple[list[FrameSequence], ReadLog]:
    """Copies of ``data`` whose frames report every pixel read to ``log``."""
    log = log or ReadLog()
    wrapped = [
        FrameSequence([AuditedFrame(f, log) for f in seq.frames], source=seq.source, fps=seq.fps) for seq in data
    ]
    return wrapped, log
