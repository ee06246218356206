"""Full-reference quality metrics: PSNR and SSIM, per frame and per sequence.

Frames are unit-interval arrays by default and are scaled by ``input_scale``
(255) before any statistic is taken, so results are in 8-bit terms. Colour
frames are handled by averaging over channels.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from typing import Sequence

import numpy as np

CHANNEL_NOTE = "MSE and SSIM are averaged over colour channels"


def _pair(f, g, input_scale: float) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(f, dtype=np.float64)
    b = np.asarray(g, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    return a * input_scale, b * input_scale


def mse(f, g, input_scale: float = 255.0) -> float:
    a, b = _pair(f, g, input_scale)
    return float(np.mean((a - b) ** 2))


def psnr(f, g, dynamic_range: float = 255.0, input_scale: float = 255.0) -> float:
    """PSNR in dB; identical inputs give ``math.inf``.

    Pass ``input_scale=1`` for frames already expressed in 0..255.
    """
    err = mse(f, g, input_scale)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(dynamic_range**2 / err)


def _ssim_map(mu_x, mu_y, var_x, var_y, cov, c1, c2, literal):
    cross = 2.0 * np.sqrt(np.maximum(var_x, 0) * np.maximum(var_y, 0)) if literal else 2.0 * cov
    num = (2.0 * mu_x * mu_y + c1) * (cross + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return num / den


def ssim_global(
    x, y, dynamic_range: float = 255.0, k1: float = 0.01, k2: float = 0.03,
    input_scale: float = 255.0, literal: bool = False,
) -> float:
    """SSIM from whole-frame statistics, averaged over channels."""
    a, b = _pair(x, y, input_scale)
    c1, c2 = (k1 * dynamic_range) ** 2, (k2 * dynamic_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        u, v = a[:, :, ch], b[:, :, ch]
        mu_x, mu_y = u.mean(), v.mean()
        var_x, var_y = u.var(), v.var()
        cov = np.mean((u - mu_x) * (v - mu_y))
        vals.append(_ssim_map(mu_x, mu_y, var_x, var_y, cov, c1, c2, literal))
    return float(np.mean(vals))


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = size // 2
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes."""
    win = np.lib.stride_tricks.sliding_window_view(img, len(k), axis=0)
    out = win @ k
    win = np.lib.stride_tricks.sliding_window_view(out, len(k), axis=1)
    return win @ k


def ssim(
    x, y, dynamic_range: float = 255.0, k1: float = 0.01, k2: float = 0.03,
    window: int = 11, sigma: float = 1.5, input_scale: float = 255.0, literal: bool = False,
) -> float:
    """Mean SSIM over all fully-contained Gaussian windows and channels.

    ``literal=True`` uses the product of standard deviations in the
    contrast-structure term instead of the covariance.
    """
    a, b = _pair(x, y, input_scale)
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"frame {a.shape[:2]} is smaller than the {window}x{window} SSIM window")
    k = gaussian_window(window, sigma)
    c1, c2 = (k1 * dynamic_range) ** 2, (k2 * dynamic_range) ** 2
    mu_x = _filter_valid(a, k)
    mu_y = _filter_valid(b, k)
    var_x = _filter_valid(a * a, k) - mu_x**2
    var_y = _filter_valid(b * b, k) - mu_y**2
    cov = _filter_valid(a * b, k) - mu_x * mu_y
    return float(np.mean(_ssim_map(mu_x, mu_y, var_x, var_y, cov, c1, c2, literal)))


@dataclasses.dataclass
class MetricReport:
    psnr_db: list[float]
    ssim: list[float]

    @property
    def frames(self) -> int:
        return len(self.psnr_db)

    @property
    def infinite_psnr_count(self) -> int:
        return sum(1 for p in self.psnr_db if math.isinf(p))

    @property
    def mean_psnr_db(self) -> float | None:
        finite = [p for p in self.psnr_db if not math.isinf(p)]
        return float(np.mean(finite)) if finite else None

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def summary(self) -> dict:
        return {
            "frames": self.frames,
            "mean_psnr_db": self.mean_psnr_db,
            "infinite_psnr_count": self.infinite_psnr_count,
            "mean_ssim": self.mean_ssim,
            "note": CHANNEL_NOTE + "; infinite PSNR frames are excluded from mean_psnr_db",
        }

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame_idx", "psnr_db", "ssim"])
            for i, (p, s) in enumerate(zip(self.psnr_db, self.ssim)):
                w.writerow([i, "inf" if math.isinf(p) else f"{p:.6f}", f"{s:.6f}"])

    def write_json(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate_frames(pred: Sequence, ref: Sequence, **ssim_kwargs) -> MetricReport:
    if len(pred) != len(ref):
        raise ValueError(f"sequence length mismatch: {len(pred)} predicted vs {len(ref)} reference frames")
    psnrs, ssims = [], []
    for p, r in zip(pred, ref):
        psnrs.append(psnr(r, p))
        ssims.append(ssim(r, p, **ssim_kwargs))
    return MetricReport(psnrs, ssims)


def evaluate_sequences(pred, ref, **ssim_kwargs) -> MetricReport:
    """Per-frame PSNR/SSIM of ``pred`` against ``ref``.

    Accepts two sequences, or two equal-length lists of sequences whose
    frames are pooled in order.
    """
    pred_frames = _flatten(pred)
    ref_frames = _flatten(ref)
    return evaluate_frames(pred_frames, ref_frames, **ssim_kwargs)


def _flatten(data) -> list:
    if hasattr(data, "frames"):
        return list(data.frames)
    out = []
    for item in data:
        out.extend(item.frames if hasattr(item, "frames") else [item])
    return out
