"""Frame sequences on disk and in memory.

A frame is an ``(H, W, C)`` float32 array in [0, 1] with C in {1, 3}.
Sequences are stored as directories of binary PPM/PGM files named
``frame_%06d.ppm`` (or ``.pgm`` for single-channel data).
"""

from __future__ import annotations

import dataclasses
import os
import re
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FRAME_TEMPLATE = "frame_{:06d}.{ext}"
DEFAULT_PATTERN = r"^(?:.*?)(\d+)\.(ppm|pgm|png)$"


class SequenceError(ValueError):
    pass


@dataclasses.dataclass
class FrameSequence:
    frames: list
    source: str = ""
    fps: float | None = None

    def __post_init__(self):
        self.frames = list(self.frames)
        if not self.frames:
            raise SequenceError(f"sequence {self.source!r} is empty")
        shape = tuple(self.frames[0].shape)
        for i, f in enumerate(self.frames):
            if tuple(f.shape) != shape:
                raise SequenceError(f"sequence {self.source!r}: frame {i} has shape {tuple(f.shape)}, expected {shape}")

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def __iter__(self):
        return iter(self.frames)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.frames[0].shape)


def as_frame(arr) -> np.ndarray:
    """Validate and convert to a float32 (H, W, C) frame."""
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3) or min(a.shape) < 1:
        raise SequenceError(f"frames must be HxWx1 or HxWx3, got {a.shape}")
    return a


def quantize(frame) -> np.ndarray:
    """Map [0, 1] floats to uint8, rounding half away from zero."""
    x = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(x + 0.5).astype(np.uint8)


# pixmap codec ----------------------------------------------------------------


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise SequenceError("truncated pixmap header")
    return data[start:pos], pos


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P5/P6 file into a float32 frame in [0, 1]."""
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise SequenceError(f"{path}: unsupported pixmap type {magic!r}")
    width, pos = _read_token(data, pos)
    height, pos = _read_token(data, pos)
    maxval, pos = _read_token(data, pos)
    width, height, maxval = int(width), int(height), int(maxval)
    if not 0 < maxval < 65536:
        raise SequenceError(f"{path}: invalid maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    count = width * height * channels
    if len(data) - pos < count * dtype.itemsize:
        raise SequenceError(f"{path}: truncated raster")
    raster = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    img = raster.reshape(height, width, channels).astype(np.float32)
    return img / np.float32(maxval)


def write_pnm(path: str | os.PathLike, frame) -> None:
    q = quantize(as_frame(frame))
    h, w, c = q.shape
    magic = b"P6" if c == 3 else b"P5"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(q.tobytes())


def _read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    scale = 65535.0 if arr.dtype == np.uint16 or arr.max(initial=0) > 255 else 255.0
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return as_frame(arr.astype(np.float32) / np.float32(scale))


def read_frame(path: str | os.PathLike) -> np.ndarray:
    if str(path).lower().endswith(".png"):
        return _read_png(path)
    return read_pnm(path)


# sequences -------------------------------------------------------------------


def load_sequence(directory: str | os.PathLike, pattern: str = DEFAULT_PATTERN, fps: float | None = None) -> FrameSequence:
    """Load every file in ``directory`` whose name matches ``pattern``.

    The first capture group of ``pattern`` is the frame index. Indices must be
    contiguous; all frames must share one shape.
    """
    directory = Path(directory)
    rx = re.compile(pattern)
    indexed = []
    for entry in sorted(directory.iterdir()):
        m = rx.match(entry.name)
        if m and entry.is_file():
            indexed.append((int(m.group(1)), entry))
    if not indexed:
        raise SequenceError(f"{directory}: no frame files match {pattern!r}")
    indexed.sort(key=lambda t: t[0])
    indices = [i for i, _ in indexed]
    if len(set(indices)) != len(indices):
        raise SequenceError(f"{directory}: duplicate frame indices")
    expected = list(range(indices[0], indices[0] + len(indices)))
    if indices != expected:
        missing = sorted(set(expected) - set(indices))
        raise SequenceError(f"{directory}: gap in frame numbering, missing index {missing[0]}")

    frames = []
    shape = None
    for _, path in indexed:
        f = read_frame(path)
        if shape is None:
            shape = f.shape
        elif f.shape != shape:
            raise SequenceError(f"{path}: shape {f.shape} does not match {shape} of the first frame")
        frames.append(f)
    return FrameSequence(frames, source=str(directory), fps=fps)


def save_sequence(seq: FrameSequence, directory: str | os.PathLike) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(seq.frames):
        ext = "ppm" if frame.shape[2] == 3 else "pgm"
        path = directory / FRAME_TEMPLATE.format(i, ext=ext)
        write_pnm(path, frame)
        paths.append(path)
    return paths


# training plumbing -----------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class PatchWindow:
    """A temporal window of spatially aligned crops from one sequence."""

    sequence: int
    start: int
    top: int
    left: int
    size: int
    length: int = 5

    @property
    def frame_indices(self) -> range:
        return range(self.start, self.start + self.length)

    def crops(self, seq: FrameSequence) -> list:
        sl = (slice(self.top, self.top + self.size), slice(self.left, self.left + self.size))
        return [seq.frames[i][sl] for i in self.frame_indices]


def extract_patches(
    seq: FrameSequence,
    patch_size: int,
    stride: int = 1,
    seed: int | np.random.Generator = 0,
    length: int = 5,
    sequence_index: int = 0,
) -> list[PatchWindow]:
    """Windows of ``length`` frames starting every ``stride`` frames, each at a
    random spatial offset shared by all frames of the window."""
    h, w, _ = seq.shape
    if patch_size % 4:
        raise SequenceError(f"patch size {patch_size} is not divisible by 4")
    if patch_size > h or patch_size > w:
        raise SequenceError(f"patch size {patch_size} exceeds frame extents {h}x{w}")
    if len(seq) < length:
        raise SequenceError(f"sequence of {len(seq)} frames is shorter than window length {length}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    windows = []
    for start in range(0, len(seq) - length + 1, stride):
        top = int(rng.integers(0, h - patch_size + 1))
        left = int(rng.integers(0, w - patch_size + 1))
        windows.append(PatchWindow(sequence_index, start, top, left, patch_size, length))
    return windows


def split(data: Sequence, val_fraction: float, seed: int = 0) -> tuple[list, list]:
    """Shuffle whole sequences into disjoint train and validation lists."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    n = len(data)
    if n < 2:
        raise ValueError("need at least two sequences to split")
    order = np.random.default_rng(seed).permutation(n)
    n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    val_idx = sorted(order[:n_val].tolist())
    train_idx = sorted(order[n_val:].tolist())
    return [data[i] for i in train_idx], [data[i] for i in val_idx]


# synthetic content -----------------------------------------------------------


def synthetic_sequence(
    num_frames: int = 20,
    height: int = 64,
    width: int = 64,
    channels: int = 3,
    seed: int = 0,
    num_shapes: int = 6,
) -> FrameSequence:
    """Clean test footage: a smooth colour background with drifting blobs and
    boxes, moving at most a couple of pixels per frame."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = rng.uniform(0.15, 0.45, size=channels)
    grad = rng.uniform(-0.25, 0.25, size=(2, channels))
    background = base + grad[0] * (yy / height)[..., None] + grad[1] * (xx / width)[..., None]
    texture_f = rng.uniform(0.15, 0.4, size=2)
    texture = 0.04 * np.sin(texture_f[0] * yy + texture_f[1] * xx)[..., None]

    shapes = []
    for _ in range(num_shapes):
        shapes.append(
            dict(
                kind=rng.choice(["disk", "box"]),
                cy=rng.uniform(0, height),
                cx=rng.uniform(0, width),
                r=rng.uniform(0.08, 0.22) * min(height, width),
                vy=rng.uniform(-1.5, 1.5),
                vx=rng.uniform(-1.5, 1.5),
                color=rng.uniform(0.05, 0.9, size=channels),
            )
        )

    frames = []
    for t in range(num_frames):
        img = background + texture
        for s in shapes:
            cy = s["cy"] + s["vy"] * t
            cx = s["cx"] + s["vx"] * t
            if s["kind"] == "disk":
                d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
                alpha = np.clip(s["r"] - d + 0.5, 0.0, 1.0)
            else:
                dy = np.clip(s["r"] - np.abs(yy - cy) + 0.5, 0.0, 1.0)
                dx = np.clip(s["r"] - np.abs(xx - cx) + 0.5, 0.0, 1.0)
                alpha = dy * dx
            img = img * (1 - alpha[..., None]) + s["color"] * alpha[..., None]
        frames.append(np.clip(img, 0.0, 1.0).astype(np.float32))
    return FrameSequence(frames, source=f"synthetic:{seed}", fps=25.0)


def synthetic_dataset(count: int, seed: int = 0, **kwargs) -> list[FrameSequence]:
    ss = np.random.SeedSequence(seed)
    return [
        synthetic_sequence(seed=int(child.generate_state(1)[0]), **kwargs) for child in ss.spawn(count)
    ]


def iter_frames(data: Iterable[FrameSequence]):
    for si, seq in enumerate(data):
        for fi, frame in enumerate(seq.frames):
            yield si, fi, frame
