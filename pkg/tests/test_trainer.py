import dataclasses
import json

import numpy as np
import pytest

from selfderain.dataset import synthetic_dataset
from selfderain.rain import RainParams
from selfderain.trainer import (
    MAX_POISSON_PEAK,
    EpochRecord,
    TrainConfig,
    TrainingError,
    TrainReport,
    learning_rate,
    poisson_corrupt,
    split_data,
    train_spatial,
    train_temporal,
)

from oracles import poisson_moments

TINY = dict(epochs=2, batch_size=8, patch_size=16, base_channels=4)


@pytest.fixture(scope="module")
def tiny_data():
    return synthetic_dataset(3, seed=11, num_frames=7, height=16, width=16)


@pytest.fixture(scope="module")
def tiny_spatial(tiny_data):
    return train_spatial(tiny_data, TrainConfig(**TINY))


def weights_bytes(model):
    return {k: t.data.tobytes() for k, t in model.parameters().items()}


class TestPoisson:
    def test_zero_frame_stays_zero(self):
        assert not poisson_corrupt(np.zeros((8, 8, 3)), 30, 0).any()

    def test_moments_at_peak_30(self):
        out = poisson_corrupt(np.full((100, 100), 0.5), 30, 1)
        mean, var = poisson_moments(30, 0.5)
        assert abs(out.mean() - mean) <= 0.01
        assert abs(out.var() - var) <= 0.2 * var

    def test_deterministic(self):
        x = np.random.default_rng(0).uniform(size=(8, 8, 3))
        assert poisson_corrupt(x, 30, 5).tobytes() == poisson_corrupt(x, 30, 5).tobytes()

    def test_output_clamped(self):
        out = poisson_corrupt(np.full((50, 50), 0.99), 5, 2)
        assert out.max() <= 1 and out.min() >= 0

    @pytest.mark.parametrize("peak", [0, -1, MAX_POISSON_PEAK * 10])
    def test_peak_guard(self, peak):
        with pytest.raises(ValueError):
            TrainConfig(poisson_peak=peak)

    def test_high_peak_guard_in_stage_two(self, tiny_data, tiny_spatial):
        cfg = TrainConfig(**TINY)
        object.__setattr__(cfg, "poisson_peak", 1e9)
        with pytest.raises(ValueError, match="identity"):
            train_temporal(tiny_data, tiny_spatial[0], cfg)


class TestConfig:
    def test_defaults_follow_protocol(self):
        cfg = TrainConfig()
        assert (cfg.source_rain.density_mean, cfg.source_rain.density_std) == (300, 10)
        assert (cfg.target_rain.density_mean, cfg.target_rain.density_std) == (500, 20)
        assert cfg.patch_size == 64 and cfg.batch_size == 8 and cfg.lr == 1e-3

    def test_round_trip(self):
        cfg = TrainConfig(epochs=3, source_rain=RainParams(density_mean=100))
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(patch_size=30), dict(val_fraction=1.0), dict(lr=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_report_rejects_repeated_epoch(self):
        rep = TrainReport()
        rep.add(EpochRecord("spatial", 1, 0.1, 20.0, 0.5, 1.0))
        with pytest.raises(ValueError):
            rep.add(EpochRecord("spatial", 1, 0.1, 20.0, 0.5, 1.0))
        rep.add(EpochRecord("temporal", 1, 0.1, 20.0, 0.5, 1.0))


class TestSpatialStage:
    def test_report_and_finite_losses(self, tiny_spatial):
        _, report = tiny_spatial
        assert [r.epoch for r in report.records] == [1, 2]
        assert all(np.isfinite(report.losses))
        assert all(r.val_psnr is not None and np.isfinite(r.val_psnr) for r in report.records)

    def test_reproducible(self, tiny_data, tiny_spatial):
        again, _ = train_spatial(tiny_data, TrainConfig(**TINY))
        assert weights_bytes(again) == weights_bytes(tiny_spatial[0])

    def test_seed_changes_result(self, tiny_data, tiny_spatial):
        other, _ = train_spatial(tiny_data, TrainConfig(**{**TINY, "seed": 1}))
        assert weights_bytes(other) != weights_bytes(tiny_spatial[0])

    def test_independent_of_stage_two_settings(self, tiny_data, tiny_spatial):
        other, _ = train_spatial(tiny_data, TrainConfig(**{**TINY, "poisson_peak": 7.0}))
        assert weights_bytes(other) == weights_bytes(tiny_spatial[0])

    def test_loss_decreases(self):
        data = synthetic_dataset(4, seed=2, num_frames=8, height=32, width=32)
        _, report = train_spatial(data, TrainConfig(epochs=4, patch_size=32, base_channels=8))
        assert all(np.isfinite(report.losses))
        assert report.records[-1].train_loss < report.records[0].train_loss

    def test_rain_free_training_learns_identity(self, tiny_data):
        dry = RainParams(density_mean=0, density_std=0, mist_alpha=0)
        cfg = TrainConfig(**{**TINY, "source_rain": dry, "target_rain": dry})
        model, _ = train_spatial(tiny_data, cfg)
        _, val = split_data(tiny_data, cfg)
        frames = np.stack([f for seq in val for f in seq])
        assert np.abs(model(frames) - frames).mean() < 0.02

    def test_empty_dataset(self):
        with pytest.raises(TrainingError, match="empty"):
            train_spatial([], TrainConfig(**TINY))

    def test_checkpoints(self, tiny_data, tmp_path):
        train_spatial(tiny_data, TrainConfig(**{**TINY, "epochs": 1}), checkpoint_dir=tmp_path)
        assert (tmp_path / "spatial_epoch001.drlw").exists()


class TestTemporalStage:
    def test_spatial_stays_frozen(self, tiny_data):
        spatial, _ = train_spatial(tiny_data, TrainConfig(**{**TINY, "epochs": 1}))
        before = weights_bytes(spatial)
        temporal, report = train_temporal(tiny_data, spatial, TrainConfig(**{**TINY, "epochs": 1}))
        assert weights_bytes(spatial) == before
        assert all(t.grad is None and not t.requires_grad for t in spatial.parameters().values())
        assert all(t.grad is not None for t in temporal.parameters().values())
        assert all(np.isfinite(report.losses))

    def test_reproducible(self, tiny_data, tiny_spatial):
        cfg = TrainConfig(**{**TINY, "epochs": 1})
        a, _ = train_temporal(tiny_data, tiny_spatial[0], cfg)
        b, _ = train_temporal(tiny_data, tiny_spatial[0], cfg)
        assert weights_bytes(a) == weights_bytes(b)

    def test_short_sequences_rejected(self, tiny_spatial):
        data = synthetic_dataset(3, seed=1, num_frames=4, height=16, width=16)
        with pytest.raises(Exception):
            train_temporal(data, tiny_spatial[0], TrainConfig(**TINY))


class TestSchedule:
    def test_cosine_endpoints_and_monotone(self):
        cfg = TrainConfig(lr=1e-3, lr_final_factor=0.01)
        rates = [learning_rate(cfg, s, 50) for s in range(50)]
        assert rates[0] == pytest.approx(1e-3)
        assert rates[-1] == pytest.approx(1e-5)
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        assert rates[24] == pytest.approx(0.5 * (1e-3 + 1e-5), rel=0.05)

    def test_constant(self):
        cfg = TrainConfig(lr=2e-3, lr_schedule="constant")
        assert {learning_rate(cfg, s, 10) for s in range(10)} == {2e-3}

    @pytest.mark.parametrize("kw", [dict(lr_schedule="step"), dict(lr_final_factor=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_config_is_frozen():
    with pytest.raises(dataclasses.FrozenInstanceError):
        TrainConfig().epochs = 3
