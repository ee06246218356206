"""Command-line experiment driver.

Every command reads one JSON experiment config (``--config``), applies the
``--seed`` / ``--out`` overrides, writes the resolved config next to its
outputs and exits 0 only when everything was written and is finite. On
failure it writes ``error.json`` into the output directory and prints the
same record on stderr.

Example config::

    {
      "seed": 0,
      "out": "runs/demo",
      "data": {"synthetic": {"count": 4, "num_frames": 20, "height": 64, "width": 64}},
      "source_rain": {"density_mean": 300, "density_std": 10},
      "target_rain": {"density_mean": 500, "density_std": 20},
      "eval_rain": [{"density_mean": 300, "density_std": 10},
                    {"density_mean": 500, "density_std": 20},
                    {"density_mean": 800, "density_std": 30}],
      "train": {"epochs": 10, "batch_size": 8, "patch_size": 64}
    }

``data`` may instead list directories of clean frames as ``{"clean_dirs": [...]}``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import seeding
from .dataset import FrameSequence, load_sequence, save_sequence, synthetic_dataset
from .metrics import evaluate_sequences
from .models import SpatialDenoiser, TemporalDenoiser, derain_sequence
from .rain import RainParams, corrupt_sequence
from .trainer import TrainConfig, split_data, train_spatial, train_temporal, validation_rain

log = logging.getLogger("selfderain")

SPATIAL_WEIGHTS = "spatial.drlw"
TEMPORAL_WEIGHTS = "temporal.drlw"
TABLE_COLUMNS = ["rain_density", "spatial_only_psnr", "spatial_only_ssim", "full_psnr", "full_ssim"]
DEFAULT_EVAL_RAIN = [(300.0, 10.0), (500.0, 20.0), (800.0, 30.0)]


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    data: dict = dataclasses.field(default_factory=lambda: {"synthetic": {"count": 4}})
    source_rain: RainParams = RainParams(density_mean=300.0, density_std=10.0)
    target_rain: RainParams = RainParams(density_mean=500.0, density_std=20.0)
    eval_rain: list = dataclasses.field(
        default_factory=lambda: [RainParams(density_mean=m, density_std=s) for m, s in DEFAULT_EVAL_RAIN]
    )
    train: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        kw = dict(d)
        for key in ("source_rain", "target_rain"):
            if key in kw:
                kw[key] = RainParams.from_dict(kw[key])
        if "eval_rain" in kw:
            kw["eval_rain"] = [RainParams.from_dict(r) for r in kw["eval_rain"]]
        return cls(**kw)

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "out": self.out,
            "data": self.data,
            "source_rain": self.source_rain.to_dict(),
            "target_rain": self.target_rain.to_dict(),
            "eval_rain": [r.to_dict() for r in self.eval_rain],
            "train": self.train,
        }

    def train_config(self) -> TrainConfig:
        opts = {k: v for k, v in self.train.items() if k not in ("seed", "source_rain", "target_rain")}
        return TrainConfig.from_dict(
            {**opts, "seed": self.seed, "source_rain": self.source_rain, "target_rain": self.target_rain}
        )

    def validate(self) -> None:
        if not isinstance(self.data, dict) or len(self.data) != 1 or next(iter(self.data)) not in ("synthetic", "clean_dirs"):
            raise ConfigError('"data" must hold exactly one of "synthetic" or "clean_dirs"')
        for p in self.data.get("clean_dirs", []):
            if not Path(p).is_dir():
                raise ConfigError(f"clean data directory does not exist: {p}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.train_config()


def load_config(path: str | None, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    raw: dict[str, Any] = {}
    if path:
        with open(path) as fh:
            raw = json.load(fh)
    cfg = ExperimentConfig.from_dict(raw)
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = out
    cfg.validate()
    return cfg


def load_clean_data(cfg: ExperimentConfig) -> list[FrameSequence]:
    if "clean_dirs" in cfg.data:
        return [load_sequence(p) for p in cfg.data["clean_dirs"]]
    opts = dict(cfg.data["synthetic"])
    count = int(opts.pop("count", 4))
    return synthetic_dataset(count, seed=seeding.seed64(cfg.seed, "data"), **opts)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare_out(out: str | Path, resolved: Mapping[str, Any]) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", resolved)
    return out


def _check_frames_finite(seqs: Sequence[FrameSequence]) -> None:
    for seq in seqs:
        for f in seq.frames:
            if not np.all(np.isfinite(f)):
                raise FloatingPointError(f"non-finite pixels in {seq.source}")


# commands --------------------------------------------------------------------


def cmd_synth(cfg: ExperimentConfig) -> int:
    out = _prepare_out(cfg.out, cfg.to_dict())
    data = load_clean_data(cfg)
    manifest = []
    for si, seq in enumerate(data):
        clean_dir = Path(seq.source) if "clean_dirs" in cfg.data else out / "clean" / f"seq_{si:03d}"
        if "clean_dirs" not in cfg.data:
            save_sequence(seq, clean_dir)
        params = cfg.source_rain.with_seed(seeding.seed64(cfg.seed, "synth", si))
        rainy = corrupt_sequence(seq, params)
        _check_frames_finite([rainy])
        rainy_dir = out / "rainy" / f"seq_{si:03d}"
        paths = save_sequence(rainy, rainy_dir)
        for fi, path in enumerate(paths):
            manifest.append(
                {
                    "sequence": si,
                    "frame_index": fi,
                    "clean_path": str(clean_dir),
                    "rainy_path": str(path),
                    "seed": params.seed,
                    "params": params.to_dict(),
                }
            )
    _write_json(out / "manifest.json", manifest)
    return 0


def cmd_train(cfg: ExperimentConfig, stage: str = "both") -> int:
    out = _prepare_out(cfg.out, {**cfg.to_dict(), "stage": stage})
    tcfg = cfg.train_config()
    data = load_clean_data(cfg)
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    if stage in ("spatial", "both"):
        spatial, report = train_spatial(data, tcfg, checkpoint_dir=ckpt)
        spatial.save(out / SPATIAL_WEIGHTS, stage=1, epoch=tcfg.epochs)
        report.write_csv(out / "train_spatial.csv")
        report.write_json(out / "train_spatial.json")
    else:
        spatial_path = out / SPATIAL_WEIGHTS
        if not spatial_path.exists():
            raise FileNotFoundError(f"temporal stage needs trained spatial weights at {spatial_path}")
        spatial = SpatialDenoiser.load(spatial_path)
    if stage in ("temporal", "both"):
        temporal, report = train_temporal(data, spatial, tcfg, checkpoint_dir=ckpt)
        temporal.save(out / TEMPORAL_WEIGHTS, stage=2, epoch=tcfg.epochs)
        report.write_csv(out / "train_temporal.csv")
        report.write_json(out / "train_temporal.json")
    return 0


def _load_models(weights: str | Path, mode: str):
    weights = Path(weights)
    spatial_path = weights / SPATIAL_WEIGHTS if weights.is_dir() else weights
    spatial = SpatialDenoiser.load(spatial_path)
    temporal = None
    if mode == "full":
        temporal_path = spatial_path.parent / TEMPORAL_WEIGHTS
        if not temporal_path.exists():
            raise FileNotFoundError(f"full mode needs temporal weights at {temporal_path}")
        temporal = TemporalDenoiser.load(temporal_path)
    return spatial, temporal


def cmd_derain(weights: str, input_dir: str, out_dir: str, mode: str = "full") -> int:
    if mode not in ("spatial-only", "full"):
        raise ConfigError(f"unknown mode {mode!r}")
    out = _prepare_out(out_dir, {"weights": str(weights), "input": str(input_dir), "mode": mode})
    spatial, temporal = _load_models(weights, mode)
    seq = load_sequence(input_dir)
    result = derain_sequence(spatial, temporal, seq)
    _check_frames_finite([result])
    save_sequence(result, out)
    return 0


def cmd_eval(pred_dir: str, ref_dir: str, out_dir: str) -> int:
    out = _prepare_out(out_dir, {"pred": str(pred_dir), "ref": str(ref_dir)})
    report = evaluate_sequences(load_sequence(pred_dir), load_sequence(ref_dir))
    if any(math.isnan(v) for v in report.psnr_db + report.ssim):
        raise FloatingPointError("metric evaluation produced NaN")
    report.write_csv(out / "eval.csv")
    report.write_json(out / "eval.json")
    return 0


def run_table(cfg: ExperimentConfig) -> list[dict[str, float]]:
    """Train both stages once, then score the held-out sequences at every
    evaluation rain density with and without the temporal stage."""
    tcfg = cfg.train_config()
    data = load_clean_data(cfg)
    spatial, _ = train_spatial(data, tcfg)
    temporal, _ = train_temporal(data, spatial, tcfg)
    _, val = split_data(data, tcfg)
    rows = []
    for params in cfg.eval_rain:
        rain = validation_rain(tcfg, params)
        rainy = [corrupt_sequence(seq, rain) for seq in val]
        spatial_only = evaluate_sequences([derain_sequence(spatial, None, s) for s in rainy], val)
        full = evaluate_sequences([derain_sequence(spatial, temporal, s) for s in rainy], val)
        rows.append(
            {
                "rain_density": params.density_mean,
                "spatial_only_psnr": spatial_only.mean_psnr_db,
                "spatial_only_ssim": spatial_only.mean_ssim,
                "full_psnr": full.mean_psnr_db,
                "full_ssim": full.mean_ssim,
            }
        )
    return rows


def cmd_table(cfg: ExperimentConfig) -> int:
    out = _prepare_out(cfg.out, cfg.to_dict())
    rows = run_table(cfg)
    for row in rows:
        if not all(v is not None and math.isfinite(v) for v in row.values()):
            raise FloatingPointError(f"non-finite metric in table row {row}")
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for row in rows:
            w.writerow([f"{row['rain_density']:g}"] + [f"{row[c]:.4f}" for c in TABLE_COLUMNS[1:]])
    return 0


# entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfderain", description="Self-supervised video deraining experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="root seed, overrides the config")
        p.add_argument("--out", help="output directory, overrides the config")

    common(sub.add_parser("synth", help="write rain-corrupted copies of the clean sequences"))
    p = sub.add_parser("train", help="train the spatial and/or temporal stage")
    common(p)
    p.add_argument("--stage", choices=["spatial", "temporal", "both"], default="both")
    p = sub.add_parser("derain", help="derain one directory of frames")
    p.add_argument("--weights", required=True, help="training output directory or spatial weights file")
    p.add_argument("--input", required=True, help="directory of rainy frames")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["spatial-only", "full"], default="full")
    p = sub.add_parser("eval", help="PSNR/SSIM of predicted frames against reference frames")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    common(sub.add_parser("table", help="density x stage grid of PSNR/SSIM"))
    return parser


def _error_record(exc: BaseException, out: str | None) -> None:
    record = {"status": "error", "error": type(exc).__name__, "message": str(exc)}
    if out:
        try:
            Path(out).mkdir(parents=True, exist_ok=True)
            _write_json(Path(out) / "error.json", record)
        except OSError:
            pass
    print(json.dumps(record), file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = getattr(args, "out", None)
    try:
        if args.command == "derain":
            return cmd_derain(args.weights, args.input, args.out, args.mode)
        if args.command == "eval":
            return cmd_eval(args.pred, args.ref, args.out)
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        out = cfg.out
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.stage)
        return cmd_table(cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        _error_record(exc, out)
        return 1


if __name__ == "__main__":
    sys.exit(main())
