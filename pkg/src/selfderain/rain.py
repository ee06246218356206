"""Parametric rain: sparse streak impulses stretched by an oriented line
kernel, composited additively onto the clean frame, then a light blur blend
for the mist that heavy rain leaves in the air."""

from __future__ import annotations

import dataclasses
import math
from typing import Any, Mapping

import numpy as np

from .dataset import FrameSequence, as_frame


class RainParamsError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class RainParams:
    density_mean: float = 300.0
    density_std: float = 10.0
    streak_length_px: int = 3
    streak_width_px: int = 1
    angle_deg: float = 0.0
    streak_intensity: float = 0.5
    mist_sigma_px: float = 1.5
    mist_alpha: float = 0.2
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.density_mean >= 0, "density_mean must be >= 0"),
            (self.density_std >= 0, "density_std must be >= 0"),
            (int(self.streak_length_px) == self.streak_length_px and self.streak_length_px >= 1,
             "streak_length_px must be an integer >= 1"),
            (int(self.streak_width_px) == self.streak_width_px and self.streak_width_px >= 1,
             "streak_width_px must be an integer >= 1"),
            (-45.0 <= self.angle_deg <= 45.0, "angle_deg must lie in [-45, 45]"),
            (0.0 < self.streak_intensity <= 1.0, "streak_intensity must lie in (0, 1]"),
            (self.mist_sigma_px >= 0, "mist_sigma_px must be >= 0"),
            (0.0 <= self.mist_alpha <= 1.0, "mist_alpha must lie in [0, 1]"),
            (int(self.seed) == self.seed and 0 <= self.seed < 2**64, "seed must be an unsigned 64-bit integer"),
        ]
        for ok, message in checks:
            if not ok:
                raise RainParamsError(message)
        object.__setattr__(self, "streak_length_px", int(self.streak_length_px))
        object.__setattr__(self, "streak_width_px", int(self.streak_width_px))
        object.__setattr__(self, "seed", int(self.seed))

    def with_seed(self, seed: int) -> "RainParams":
        return dataclasses.replace(self, seed=int(seed))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RainParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise RainParamsError(f"unknown rain parameter(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def _rng(params: RainParams, frame_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([params.seed, int(frame_index)]))


def streak_kernel(length: int, width: int, angle_deg: float, supersample: int = 8) -> np.ndarray:
    """Anti-aliased footprint of one streak: area coverage of a ``length`` x
    ``width`` rectangle centred on the middle pixel, tilted ``angle_deg`` from
    vertical."""
    radius = int(math.ceil(math.hypot(length, width) / 2)) + 1
    size = 2 * radius + 1
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    grid = np.arange(size) - radius
    py = (grid[:, None] + offsets[None, :]).reshape(-1)
    px = py.copy()
    yy, xx = np.meshgrid(py, px, indexing="ij")
    a = math.radians(angle_deg)
    along = yy * math.cos(a) + xx * math.sin(a)
    across = -yy * math.sin(a) + xx * math.cos(a)
    eps = 1e-9
    inside = (np.abs(along) <= length / 2 + eps) & (np.abs(across) <= width / 2 + eps)
    cover = inside.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    rows = np.flatnonzero(cover.any(axis=1))
    cols = np.flatnonzero(cover.any(axis=0))
    # keep the kernel centred while trimming empty borders
    r = max(radius - rows[0], rows[-1] - radius, radius - cols[0], cols[-1] - radius)
    return cover[radius - r : radius + r + 1, radius - r : radius + r + 1]


def draw_streaks(shape, params: RainParams, frame_index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample streak centres (rows, cols) and amplitudes for one frame."""
    h, w = int(shape[0]), int(shape[1])
    if h < params.streak_length_px or w < params.streak_length_px:
        raise RainParamsError(
            f"frame {h}x{w} is smaller than the streak length {params.streak_length_px}"
        )
    rng = _rng(params, frame_index)
    n = int(max(0, round(rng.normal(params.density_mean, params.density_std))))
    rows = rng.integers(0, h, size=n)
    cols = rng.integers(0, w, size=n)
    gain = np.clip(rng.normal(1.0, 0.2, size=n), 0.2, 1.8)
    return rows, cols, params.streak_intensity * gain


def stamp_streaks(shape, rows, cols, amplitudes, params: RainParams) -> np.ndarray:
    """Render streaks with the given centres and amplitudes into a layer."""
    h, w = int(shape[0]), int(shape[1])
    channels = int(shape[2]) if len(shape) > 2 else 1
    impulses = np.zeros((h, w), dtype=np.float64)
    np.add.at(impulses, (np.asarray(rows), np.asarray(cols)), np.asarray(amplitudes, dtype=np.float64))
    kernel = streak_kernel(params.streak_length_px, params.streak_width_px, params.angle_deg)
    r = kernel.shape[0] // 2
    layer = np.zeros((h, w), dtype=np.float64)
    for ky, kx in zip(*np.nonzero(kernel)):
        dy, dx = ky - r, kx - r
        # layer[y, x] += k * impulses[y - dy, x - dx], zero outside the frame
        ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
        xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
        layer[yd, xd] += kernel[ky, kx] * impulses[ys, xs]
    return np.repeat(layer.astype(np.float32)[:, :, None], channels, axis=2)


def synthesize_rain_layer(shape, params: RainParams, frame_index: int = 0) -> np.ndarray:
    """Nonnegative additive rain layer for one frame.

    The draw depends only on ``(params.seed, frame_index)``, so adjacent
    frames get independent rain from the same distribution.
    """
    rows, cols, amps = draw_streaks(shape, params, frame_index)
    return stamp_streaks(shape, rows, cols, amps, params)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge replication. ``sigma == 0`` copies."""
    a = np.asarray(img, dtype=np.float32)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return a.copy()
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2
    out = a.astype(np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="edge")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, kv in enumerate(k):
            acc += kv * np.take(padded, np.arange(i, i + n), axis=axis)
        out = acc
    return out.astype(np.float32)


def apply_rain(clean, layer, params: RainParams) -> np.ndarray:
    """Composite a rain layer over a clean frame and blend in the mist blur."""
    c = np.asarray(clean, dtype=np.float32)
    b = np.asarray(layer, dtype=np.float32)
    if c.shape != b.shape:
        raise ValueError(f"apply_rain: frame shape {c.shape} does not match layer shape {b.shape}")
    composite = np.clip(c + b, 0.0, 1.0)
    if params.mist_alpha == 0 or params.mist_sigma_px == 0:
        return composite
    a = np.float32(params.mist_alpha)
    out = (1 - a) * composite + a * gaussian_blur(composite, params.mist_sigma_px)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def rain_frame(clean, params: RainParams, frame_index: int = 0) -> np.ndarray:
    layer = synthesize_rain_layer(clean.shape, params, frame_index)
    return apply_rain(clean, layer, params)


def corrupt_sequence(seq: FrameSequence, params: RainParams, first_index: int = 0) -> FrameSequence:
    """Rain every frame; frame ``i`` draws from stream ``first_index + i``."""
    frames = [as_frame(rain_frame(f, params, first_index + i)) for i, f in enumerate(seq.frames)]
    return FrameSequence(frames, source=f"{seq.source}+rain", fps=seq.fps)
