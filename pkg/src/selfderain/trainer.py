"""Two-stage self-supervised training.

Stage 1 fits the spatial denoiser on pairs of independently rained copies of
the same clean crop: one rained with the source parameters is the input, one
rained with the target parameters is the regression target.

Stage 2 freezes the spatial denoiser, uses its outputs on rained frames as
targets, and trains the temporal denoiser to recover the central target from
a Poisson-corrupted copy of the five-frame window.

Clean frames are only ever handed to the rain synthesizer (to make training
data) and to the metrics (for validation).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import autograd as ag
from . import seeding
from .autograd import Tensor
from .dataset import FrameSequence, PatchWindow, extract_patches, split
from .metrics import evaluate_sequences
from .models import WINDOW, SpatialDenoiser, TemporalDenoiser, derain_sequence, to_nchw
from .optim import Adam
from .rain import RainParams, corrupt_sequence, rain_frame

log = logging.getLogger(__name__)

MAX_POISSON_PEAK = 1e6
LR_SCHEDULES = ("constant", "cosine")
SPATIAL_STAGE = 1
TEMPORAL_STAGE = 2
STAGE_NAMES = {SPATIAL_STAGE: "spatial", TEMPORAL_STAGE: "temporal"}


class TrainingError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    patch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    source_rain: RainParams = RainParams(density_mean=300.0, density_std=10.0)
    target_rain: RainParams = RainParams(density_mean=500.0, density_std=20.0)
    poisson_peak: float = 30.0
    val_fraction: float = 0.25
    base_channels: int = 16
    lr_schedule: str = "cosine"
    lr_final_factor: float = 0.01

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patch_size < 4 or self.patch_size % 4:
            raise ValueError(f"patch_size must be a positive multiple of 4, got {self.patch_size}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if not self.lr > 0 or not self.eps > 0:
            raise ValueError("lr and eps must be > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if not 0.0 < self.lr_final_factor <= 1.0:
            raise ValueError("lr_final_factor must lie in (0, 1]")
        check_poisson_peak(self.poisson_peak)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["source_rain"] = self.source_rain.to_dict()
        d["target_rain"] = self.target_rain.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        for key in ("source_rain", "target_rain"):
            if key in d and not isinstance(d[key], RainParams):
                d[key] = RainParams.from_dict(d[key])
        return cls(**d)


@dataclasses.dataclass
class EpochRecord:
    stage: str
    epoch: int
    train_loss: float
    val_psnr: float | None
    val_ssim: float | None
    wall_time: float


@dataclasses.dataclass
class TrainReport:
    records: list[EpochRecord] = dataclasses.field(default_factory=list)
    losses: list[float] = dataclasses.field(default_factory=list)

    FIELDS = ("stage", "epoch", "train_loss", "val_psnr", "val_ssim", "wall_time")

    def add(self, record: EpochRecord) -> None:
        same = [r for r in self.records if r.stage == record.stage]
        if same and record.epoch <= same[-1].epoch:
            raise ValueError("epochs must be strictly increasing within a stage")
        self.records.append(record)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.FIELDS)
            for r in self.records:
                w.writerow([getattr(r, f) for f in self.FIELDS])

    def summary(self) -> dict[str, Any]:
        out: dict[str, Any] = {"epochs": [dataclasses.asdict(r) for r in self.records]}
        if self.records:
            last = self.records[-1]
            out["final"] = {"stage": last.stage, "val_psnr": last.val_psnr, "val_ssim": last.val_ssim}
        return out

    def write_json(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)
            fh.write("\n")


def check_poisson_peak(peak: float) -> None:
    if not peak > 0:
        raise ValueError(f"poisson peak must be > 0, got {peak}")
    if peak > MAX_POISSON_PEAK:
        raise ValueError(
            f"poisson peak {peak:g} exceeds {MAX_POISSON_PEAK:g}; the corruption would vanish and "
            "the temporal stage would learn the identity"
        )


def poisson_corrupt(frame, peak: float, seed) -> np.ndarray:
    """Replace each intensity x by Poisson(x * peak) / peak, clipped to [0, 1]."""
    if not peak > 0:
        raise ValueError(f"poisson peak must be > 0, got {peak}")
    x = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    rng = np.random.default_rng(seed)
    return np.clip(rng.poisson(x * peak) / peak, 0.0, 1.0).astype(np.float32)


def learning_rate(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Step size for 0-based ``step``. The cosine schedule anneals from
    ``lr`` to ``lr * lr_final_factor`` at the last step; a constant step
    size leaves Adam's parameter jitter (about ``lr`` per step) in the
    final weights."""
    if cfg.lr_schedule == "constant" or total_steps <= 1:
        return cfg.lr
    frac = min(step, total_steps - 1) / (total_steps - 1)
    low = cfg.lr * cfg.lr_final_factor
    return low + 0.5 * (cfg.lr - low) * (1.0 + math.cos(math.pi * frac))


def split_data(data: Sequence[FrameSequence], cfg: TrainConfig) -> tuple[list, list]:
    if not data:
        raise TrainingError("empty dataset")
    return split(data, cfg.val_fraction, seed=seeding.seed64(cfg.seed, "split"))


def _check_finite(loss: float, stage: str, epoch: int, batch: int) -> None:
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} in {stage} stage, epoch {epoch}, batch {batch}")


def _validate(outputs: list[FrameSequence], clean: list[FrameSequence], stage: str, epoch: int):
    for seq in outputs:
        for f in seq.frames:
            if not np.all(np.isfinite(f)):
                raise TrainingError(f"non-finite {stage} output after epoch {epoch}")
    report = evaluate_sequences(outputs, clean)
    return report.mean_psnr_db, report.mean_ssim


def validation_rain(cfg: TrainConfig, params: RainParams | None = None) -> RainParams:
    return (params or cfg.source_rain).with_seed(seeding.seed64(cfg.seed, "val-rain"))


def _windows(data, cfg: TrainConfig, stride: int, rng: np.random.Generator) -> list[PatchWindow]:
    windows = []
    for si, seq in enumerate(data):
        windows.extend(extract_patches(seq, cfg.patch_size, stride=stride, seed=rng, sequence_index=si))
    if not windows:
        raise TrainingError("no training windows; sequences must hold at least five frames")
    return windows


def _checkpoint(model, directory, stage: int, epoch: int) -> None:
    if directory is None:
        return
    path = Path(directory) / f"{STAGE_NAMES[stage]}_epoch{epoch:03d}.drlw"
    model.save(path, stage=stage, epoch=epoch)


def train_spatial(
    data: Sequence[FrameSequence],
    cfg: TrainConfig,
    checkpoint_dir: str | os.PathLike | None = None,
) -> tuple[SpatialDenoiser, TrainReport]:
    """Fit the per-frame denoiser on source-rain / target-rain pairs."""
    train, val = split_data(data, cfg)
    channels = train[0].shape[2]
    model = SpatialDenoiser(channels=channels, base_channels=cfg.base_channels, seed=seeding.seed64(cfg.seed, "init-spatial"))
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    report = TrainReport()
    val_rain = validation_rain(cfg)
    val_rainy = [corrupt_sequence(seq, val_rain) for seq in val]

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = seeding.rng(cfg.seed, "spatial", epoch, "patches")
        # every frame of every stride-1 window, each window with its own rain
        windows = _windows(train, cfg, 1, rng)
        samples = [(wi, k) for wi in range(len(windows)) for k in range(WINDOW)]
        order = rng.permutation(len(samples))
        src_seed = seeding.seed64(cfg.seed, "spatial", epoch, "source")
        tgt_seed = seeding.seed64(cfg.seed, "spatial", epoch, "target")
        if src_seed == tgt_seed:
            raise TrainingError("source and target rain seeds collide")
        losses = []
        per_epoch = math.ceil(len(order) / cfg.batch_size)
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            opt.lr = learning_rate(cfg, (epoch - 1) * per_epoch + b, cfg.epochs * per_epoch)
            src, tgt = [], []
            for j in order[start : start + cfg.batch_size]:
                wi, k = samples[j]
                w = windows[wi]
                crop = w.crops(train[w.sequence])[k]
                frame_index = w.start + k
                src.append(rain_frame(crop, cfg.source_rain.with_seed(seeding.seed64(src_seed, wi)), frame_index))
                tgt.append(rain_frame(crop, cfg.target_rain.with_seed(seeding.seed64(tgt_seed, wi)), frame_index))
            opt.zero_grad()
            loss = ag.mse(model.forward(Tensor(to_nchw(np.stack(src)))), Tensor(to_nchw(np.stack(tgt))))
            value = loss.item()
            _check_finite(value, "spatial", epoch, b)
            ag.backward(loss)
            opt.step()
            losses.append(value)
            report.losses.append(value)

        outputs = [derain_sequence(model, None, seq) for seq in val_rainy]
        val_psnr, val_ssim = _validate(outputs, val, "spatial", epoch)
        record = EpochRecord("spatial", epoch, float(np.mean(losses)), val_psnr, val_ssim, time.perf_counter() - t0)
        report.add(record)
        log.info("spatial epoch %d loss %.6f val psnr %s ssim %.4f", epoch, record.train_loss, val_psnr, val_ssim)
        _checkpoint(model, checkpoint_dir, SPATIAL_STAGE, epoch)
    return model, report


def train_temporal(
    data: Sequence[FrameSequence],
    spatial: SpatialDenoiser,
    cfg: TrainConfig,
    checkpoint_dir: str | os.PathLike | None = None,
) -> tuple[TemporalDenoiser, TrainReport]:
    """Fit the five-frame denoiser with the frozen spatial stage as teacher."""
    check_poisson_peak(cfg.poisson_peak)
    spatial.freeze()
    train, val = split_data(data, cfg)
    channels = train[0].shape[2]
    model = TemporalDenoiser(channels=channels, base_channels=cfg.base_channels, seed=seeding.seed64(cfg.seed, "init-temporal"))
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    report = TrainReport()
    val_rain = validation_rain(cfg)
    val_rainy = [corrupt_sequence(seq, val_rain) for seq in val]

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = seeding.rng(cfg.seed, "temporal", epoch, "patches")
        # stride-1 windows lying fully inside each sequence; edge-padded
        # windows are only used at inference
        windows = _windows(train, cfg, 1, rng)
        order = rng.permutation(len(windows))
        rain_seed = seeding.seed64(cfg.seed, "temporal", epoch, "source")
        losses = []
        per_epoch = math.ceil(len(order) / cfg.batch_size)
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            opt.lr = learning_rate(cfg, (epoch - 1) * per_epoch + b, cfg.epochs * per_epoch)
            noisy, targets = [], []
            for j in order[start : start + cfg.batch_size]:
                w = windows[j]
                params = cfg.source_rain.with_seed(seeding.seed64(rain_seed, w.sequence, int(j)))
                rainy = np.stack([rain_frame(c, params, w.start + k) for k, c in enumerate(w.crops(train[w.sequence]))])
                teacher = spatial(rainy)
                noisy.append(
                    np.stack([
                        poisson_corrupt(teacher[k], cfg.poisson_peak, seeding.substream(cfg.seed, "poisson", epoch, int(j), k))
                        for k in range(WINDOW)
                    ])
                )
                targets.append(teacher[WINDOW // 2])
            noisy_arr = np.stack(noisy)
            window = [Tensor(to_nchw(noisy_arr[:, k])) for k in range(WINDOW)]
            opt.zero_grad()
            loss = ag.mse(model.forward(window), Tensor(to_nchw(np.stack(targets))))
            value = loss.item()
            _check_finite(value, "temporal", epoch, b)
            ag.backward(loss)
            opt.step()
            losses.append(value)
            report.losses.append(value)

        outputs = [derain_sequence(spatial, model, seq) for seq in val_rainy]
        val_psnr, val_ssim = _validate(outputs, val, "temporal", epoch)
        record = EpochRecord("temporal", epoch, float(np.mean(losses)), val_psnr, val_ssim, time.perf_counter() - t0)
        report.add(record)
        log.info("temporal epoch %d loss %.6f val psnr %s ssim %.4f", epoch, record.train_loss, val_psnr, val_ssim)
        _checkpoint(model, checkpoint_dir, TEMPORAL_STAGE, epoch)
    return model, report
