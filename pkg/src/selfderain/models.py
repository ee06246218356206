"""Spatial (single-frame) and spatio-temporal (5-frame) denoisers.

Both are small UNets built on :mod:`selfderain.autograd`. Each network
predicts the clean frame directly: the last convolution produces a
correction in logit space that is added to the logit of the reference input
frame and squashed with a sigmoid, so outputs always lie in (0, 1) and the
freshly initialised network is close to the identity.

Frames enter and leave as ``(H, W, C)`` arrays; tensors are NCHW.
"""

from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from . import weights as wio
from .autograd import Tensor
from .dataset import FrameSequence

LEAK = 0.1
LOGIT_EPS = 1e-3
WINDOW = 5  # 2K + 1 frames with K = 2

SPATIAL_KIND = 1.0
TEMPORAL_KIND = 2.0


class ModelError(ValueError):
    pass


def logit(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, LOGIT_EPS, 1.0 - LOGIT_EPS)
    return np.log(x) - np.log1p(-x)


def to_nchw(frames) -> np.ndarray:
    a = np.asarray(frames, dtype=np.float32)
    if a.ndim == 3:
        a = a[None]
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2))


def to_nhwc(t: Tensor | np.ndarray) -> np.ndarray:
    a = t.data if isinstance(t, Tensor) else t
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1)).astype(np.float32)


def _check_extents(h: int, w: int, multiple: int = 4) -> None:
    if h % multiple or w % multiple:
        raise ModelError(f"frame extents {h}x{w} must both be divisible by {multiple}")


class UNet:
    """Conv-LeakyReLU UNet with max-pool down, nearest upsampling and skips."""

    def __init__(self, in_ch: int, out_ch: int, base: int, depth: int, rng: np.random.Generator, prefix: str = ""):
        self.in_ch, self.out_ch, self.base, self.depth = in_ch, out_ch, base, depth
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}
        ch = in_ch
        widths = [base * 2**level for level in range(depth)]
        for level, width in enumerate(widths):
            self._conv(f"down{level}.0", ch, width, rng)
            self._conv(f"down{level}.1", width, width, rng)
            ch = width
        for level in reversed(range(depth - 1)):
            self._conv(f"up{level}.0", ch + widths[level], widths[level], rng)
            self._conv(f"up{level}.1", widths[level], widths[level], rng)
            ch = widths[level]
        self._conv("out", ch, out_ch, rng, gain=0.01)

    def _conv(self, name: str, cin: int, cout: int, rng: np.random.Generator, gain: float = 1.0) -> None:
        fan_in = cin * 9
        std = gain * np.sqrt(2.0 / ((1 + LEAK**2) * fan_in))
        self.params[f"{self.prefix}{name}.w"] = Tensor(rng.normal(0.0, std, size=(cout, cin, 3, 3)), requires_grad=True)
        self.params[f"{self.prefix}{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)

    def conv(self, name: str, x: Tensor) -> Tensor:
        p = self.prefix
        return ag.conv2d(x, self.params[f"{p}{name}.w"], self.params[f"{p}{name}.b"], stride=1, padding=1)

    def block(self, name: str, x: Tensor) -> Tensor:
        x = ag.leaky_relu(self.conv(f"{name}.0", x), LEAK)
        return ag.leaky_relu(self.conv(f"{name}.1", x), LEAK)

    def __call__(self, x: Tensor) -> Tensor:
        skips = []
        h = x
        for level in range(self.depth):
            if level:
                h = ag.max_pool2d(h)
            h = self.block(f"down{level}", h)
            skips.append(h)
        for level in reversed(range(self.depth - 1)):
            h = ag.concat([ag.upsample_nearest(h), skips[level]], axis=1)
            h = self.block(f"up{level}", h)
        return self.conv("out", h)


class _Network:
    kind: float
    weights: dict[str, Tensor]

    def meta(self) -> dict[str, float]:
        raise NotImplementedError

    def parameters(self) -> dict[str, Tensor]:
        return self.weights

    def freeze(self) -> None:
        for t in self.weights.values():
            t.requires_grad = False
            t.grad = None

    def state_dict(self, **extra: float) -> dict[str, np.ndarray]:
        state: dict[str, np.ndarray] = {f"meta.{k}": np.float32(v) for k, v in self.meta().items()}
        state.update({f"meta.{k}": np.float32(v) for k, v in extra.items()})
        state.update({k: t.data.copy() for k, t in self.weights.items()})
        return state

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.weights) - set(arrays)
        if missing:
            raise ModelError(f"weights file lacks {len(missing)} tensor(s), e.g. {sorted(missing)[0]}")
        for k, t in self.weights.items():
            if arrays[k].shape != t.shape:
                raise ModelError(f"tensor {k} has shape {arrays[k].shape}, expected {t.shape}")
            t.data = np.ascontiguousarray(arrays[k], dtype=ag.default_dtype())

    def save(self, path: str | os.PathLike, **extra: float) -> None:
        wio.save(path, self.state_dict(**extra))


class SpatialDenoiser(_Network):
    """Per-frame UNet (three scales by default)."""

    kind = SPATIAL_KIND

    def __init__(self, channels: int = 3, base_channels: int = 16, depth: int = 3, seed: int = 0):
        self.channels, self.base_channels, self.depth = channels, base_channels, depth
        self.net = UNet(channels, channels, base_channels, depth, np.random.default_rng(seed))
        self.weights = self.net.params
        self.frames_processed = 0

    def meta(self) -> dict[str, float]:
        return {"kind": self.kind, "channels": self.channels, "base_channels": self.base_channels, "depth": self.depth}

    def forward(self, x: Tensor) -> Tensor:
        """NCHW tensor in [0, 1] -> NCHW tensor in (0, 1)."""
        _check_extents(x.shape[2], x.shape[3], 2 ** (self.depth - 1))
        base = Tensor(logit(x.data))
        return ag.sigmoid(ag.add(base, self.net(x)))

    def __call__(self, frames, batch_size: int = 16) -> np.ndarray:
        """Denoise one ``(H, W, C)`` frame or a stack ``(N, H, W, C)``."""
        a = np.asarray(frames, dtype=np.float32)
        single = a.ndim == 3
        x = to_nchw(a)
        outs = []
        for i in range(0, len(x), batch_size):
            outs.append(to_nhwc(self.forward(Tensor(x[i : i + batch_size]))))
        self.frames_processed += len(x)
        out = np.concatenate(outs)
        return out[0] if single else out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "SpatialDenoiser":
        if float(arrays.get("meta.kind", SPATIAL_KIND)) != SPATIAL_KIND:
            raise ModelError("weights do not describe a spatial denoiser")
        model = cls(
            channels=int(arrays["meta.channels"]),
            base_channels=int(arrays["meta.base_channels"]),
            depth=int(arrays["meta.depth"]),
        )
        model.load_arrays(arrays)
        return model

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SpatialDenoiser":
        return cls.from_arrays(wio.load(path))


class TemporalDenoiser(_Network):
    """Two-stage cascade over five frames.

    The first block runs with shared weights on the overlapping triplets
    (f1 f2 f3), (f2 f3 f4), (f3 f4 f5); the second block fuses its three
    outputs into the estimate of the central frame. No motion is estimated.
    """

    kind = TEMPORAL_KIND

    def __init__(self, channels: int = 3, base_channels: int = 16, depth: int = 2, seed: int = 0):
        self.channels, self.base_channels, self.depth = channels, base_channels, depth
        rng = np.random.default_rng(seed)
        self.block1 = UNet(3 * channels, channels, base_channels, depth, rng, prefix="block1.")
        self.block2 = UNet(3 * channels, channels, base_channels, depth, rng, prefix="block2.")
        self.weights = {**self.block1.params, **self.block2.params}

    def meta(self) -> dict[str, float]:
        return {"kind": self.kind, "channels": self.channels, "base_channels": self.base_channels, "depth": self.depth}

    def forward(self, window: Sequence[Tensor]) -> Tensor:
        """Five NCHW tensors -> NCHW estimate of the middle one."""
        if len(window) != WINDOW:
            raise ModelError(f"temporal denoiser takes exactly {WINDOW} frames, got {len(window)}")
        shape = window[0].shape
        for t in window:
            if t.shape != shape:
                raise ModelError(f"window frames differ in shape: {shape} vs {t.shape}")
        _check_extents(shape[2], shape[3], 4)

        # residuals are added in pixel space: the training inputs carry
        # Poisson noise with exact zeros, which a logit-space residual would
        # map to extreme values it never sees at inference. The estimate is
        # left unclamped so overshoot is still penalised; __call__ clips it.
        mids = []
        for i in range(3):
            triplet = window[i : i + 3]
            mids.append(ag.add(triplet[1], self.block1(ag.concat(list(triplet), axis=1))))
        return ag.add(mids[1], self.block2(ag.concat(mids, axis=1)))

    def __call__(self, windows, batch_size: int = 16) -> np.ndarray:
        """Denoise one window ``(5, H, W, C)`` or a batch ``(N, 5, H, W, C)``."""
        a = np.asarray(windows, dtype=np.float32)
        single = a.ndim == 4
        if single:
            a = a[None]
        if a.shape[1] != WINDOW:
            raise ModelError(f"temporal denoiser takes exactly {WINDOW} frames, got {a.shape[1]}")
        outs = []
        for i in range(0, len(a), batch_size):
            chunk = a[i : i + batch_size]
            window = [Tensor(to_nchw(chunk[:, k])) for k in range(WINDOW)]
            outs.append(np.clip(to_nhwc(self.forward(window)), 0.0, 1.0))
        out = np.concatenate(outs)
        return out[0] if single else out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "TemporalDenoiser":
        if float(arrays.get("meta.kind", TEMPORAL_KIND)) != TEMPORAL_KIND:
            raise ModelError("weights do not describe a temporal denoiser")
        model = cls(
            channels=int(arrays["meta.channels"]),
            base_channels=int(arrays["meta.base_channels"]),
            depth=int(arrays["meta.depth"]),
        )
        model.load_arrays(arrays)
        return model

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TemporalDenoiser":
        return cls.from_arrays(wio.load(path))


def edge_windows(n: int, radius: int = WINDOW // 2) -> list[list[int]]:
    """Frame indices of the window centred on each position, replicating the
    first and last frame past the ends."""
    return [[min(max(c + k, 0), n - 1) for k in range(-radius, radius + 1)] for c in range(n)]


def derain_sequence(
    spatial: Callable, temporal: Callable | None, seq: FrameSequence, batch_size: int = 16
) -> FrameSequence:
    """Spatial stage on every frame once, then the temporal stage on the
    five-frame window around each position. ``temporal=None`` stops after the
    spatial stage."""
    frames = np.stack([np.asarray(f, dtype=np.float32) for f in seq.frames])
    stage1 = spatial(frames)
    if temporal is None:
        out = list(stage1)
    else:
        idx = np.array(edge_windows(len(seq)))
        out = list(temporal(stage1[idx], batch_size=batch_size))
    return FrameSequence(out, source=f"{seq.source}+derained", fps=seq.fps)
