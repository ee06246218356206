import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from selfderain.dataset import FrameSequence, synthetic_sequence
from selfderain.metrics import psnr
from selfderain.rain import (
    RainParams,
    RainParamsError,
    apply_rain,
    corrupt_sequence,
    draw_streaks,
    gaussian_blur,
    gaussian_kernel1d,
    stamp_streaks,
    streak_kernel,
    synthesize_rain_layer,
)

from oracles import discrete_gaussian_peak_2d

NO_MIST = dict(mist_alpha=0.0)


def streak_counts(n_frames, shape=(256, 256), **kw):
    p = RainParams(**kw)
    return np.array([len(draw_streaks(shape, p, i)[0]) for i in range(n_frames)])


class TestLayer:
    def test_zero_density_gives_zero_layer(self):
        layer = synthesize_rain_layer((32, 32, 3), RainParams(density_mean=0, density_std=0))
        assert not layer.any()

    def test_same_seed_and_index_is_bit_identical(self):
        p = RainParams(seed=7)
        a = synthesize_rain_layer((48, 40, 3), p, 3)
        b = synthesize_rain_layer((48, 40, 3), p, 3)
        assert a.tobytes() == b.tobytes()

    def test_different_frame_indices_differ(self):
        p = RainParams(seed=7)
        assert not np.array_equal(synthesize_rain_layer((32, 32, 1), p, 0), synthesize_rain_layer((32, 32, 1), p, 1))

    def test_different_seeds_differ(self):
        a = synthesize_rain_layer((32, 32, 1), RainParams(seed=1))
        b = synthesize_rain_layer((32, 32, 1), RainParams(seed=2))
        assert not np.array_equal(a, b)

    def test_count_moments_at_default_density(self):
        counts = streak_counts(100, density_mean=300, density_std=10)
        assert abs(counts.mean() - 300) <= 5
        assert abs(counts.std(ddof=1) - 10) <= 3

    def test_counts_are_consistent_with_normal(self):
        counts = streak_counts(2000, shape=(64, 64), density_mean=300, density_std=10)
        # jitter the integer counts so the continuous KS test applies
        jitter = np.random.default_rng(0).uniform(-0.5, 0.5, size=counts.size)
        assert stats.kstest(counts + jitter, stats.norm(300, 10).cdf).pvalue > 0.01

    def test_layer_is_nonnegative_and_sparse(self):
        layer = synthesize_rain_layer((64, 64, 3), RainParams(density_mean=300, density_std=10))
        assert layer.min() >= 0
        assert (layer > 0).mean() < 0.5

    def test_layer_channels_are_achromatic(self):
        layer = synthesize_rain_layer((16, 16, 3), RainParams(density_mean=20, density_std=0))
        np.testing.assert_array_equal(layer[..., 0], layer[..., 2])

    def test_frame_smaller_than_streak_rejected(self):
        with pytest.raises(RainParamsError):
            synthesize_rain_layer((2, 8, 1), RainParams(streak_length_px=5))

    @pytest.mark.parametrize(
        "kw",
        [
            dict(density_mean=-1),
            dict(density_std=-1),
            dict(streak_length_px=0),
            dict(streak_width_px=1.5),
            dict(angle_deg=60),
            dict(streak_intensity=0),
            dict(mist_alpha=1.5),
            dict(seed=-1),
        ],
    )
    def test_invalid_params_rejected(self, kw):
        with pytest.raises(RainParamsError):
            RainParams(**kw)

    def test_dict_round_trip_and_unknown_keys(self):
        p = RainParams(density_mean=500, density_std=20, seed=3)
        assert RainParams.from_dict(p.to_dict()) == p
        with pytest.raises(RainParamsError, match="colour"):
            RainParams.from_dict({"colour": 1})


class TestKernel:
    def test_vertical_odd_streak_is_a_column_of_ones(self):
        k = streak_kernel(3, 1, 0)
        assert k.shape == (3, 3)
        np.testing.assert_array_equal(k, [[0, 1, 0], [0, 1, 0], [0, 1, 0]])

    @given(length=st.integers(1, 9), width=st.integers(1, 3), angle=st.floats(-45, 45))
    def test_kernel_area_matches_rectangle(self, length, width, angle):
        k = streak_kernel(length, width, angle, supersample=16)
        assert k.shape[0] == k.shape[1] and k.shape[0] % 2 == 1
        assert k.sum() == pytest.approx(length * width, rel=0.05)
        assert k.max() <= 1.0


class TestComposite:
    def test_zero_layer_no_mist_is_identity(self, rng):
        clean = rng.uniform(size=(8, 8, 3)).astype(np.float32)
        out = apply_rain(clean, np.zeros_like(clean), RainParams(**NO_MIST))
        np.testing.assert_array_equal(out, clean)

    def test_white_frame_saturates(self):
        clean = np.ones((16, 16, 3), np.float32)
        layer = synthesize_rain_layer(clean.shape, RainParams(seed=4))
        np.testing.assert_array_equal(apply_rain(clean, layer, RainParams(**NO_MIST)), clean)

    def test_single_streak_reads_base_plus_intensity(self):
        p = RainParams(streak_length_px=3, streak_width_px=1, angle_deg=0, **NO_MIST)
        clean = np.full((9, 9, 1), 0.5, np.float32)
        layer = stamp_streaks(clean.shape, [4], [4], [0.3], p)
        out = apply_rain(clean, layer, p)[..., 0]
        expected = np.full((9, 9), 0.5, np.float32)
        expected[3:6, 4] = 0.8
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_constant_sequence_without_rain_is_unchanged(self):
        seq = FrameSequence([np.full((8, 8, 3), 0.3, np.float32)] * 5)
        out = corrupt_sequence(seq, RainParams(density_mean=0, density_std=0, **NO_MIST))
        for a, b in zip(out, seq):
            np.testing.assert_array_equal(a, b)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            apply_rain(np.zeros((4, 4, 3)), np.zeros((4, 4, 1)), RainParams())

    def test_output_in_unit_range(self, rng):
        clean = rng.uniform(size=(32, 32, 3)).astype(np.float32)
        layer = synthesize_rain_layer(clean.shape, RainParams(density_mean=800, density_std=30))
        out = apply_rain(clean, layer, RainParams())
        assert out.min() >= 0 and out.max() <= 1

    def test_denser_rain_is_worse(self):
        seq = synthetic_sequence(num_frames=10, seed=5)

        def mean_psnr(params):
            rainy = corrupt_sequence(seq, params)
            return np.mean([psnr(c, r) for c, r in zip(seq, rainy)])

        light = mean_psnr(RainParams(density_mean=300, density_std=10, seed=1))
        heavy = mean_psnr(RainParams(density_mean=500, density_std=20, seed=1))
        assert heavy < light


class TestBlur:
    def test_zero_sigma_is_identity(self, rng):
        img = rng.uniform(size=(7, 9, 2)).astype(np.float32)
        np.testing.assert_array_equal(gaussian_blur(img, 0), img)

    @given(sigma=st.floats(0.3, 4.0), value=st.floats(0, 1))
    def test_constant_image_unchanged(self, sigma, value):
        img = np.full((12, 10, 1), value, np.float32)
        np.testing.assert_allclose(gaussian_blur(img, sigma), img, atol=1e-6)

    def test_impulse_centre_is_discrete_peak(self):
        img = np.zeros((33, 33), np.float32)
        img[16, 16] = 1
        assert gaussian_blur(img, 2.0)[16, 16] == pytest.approx(discrete_gaussian_peak_2d(2.0), rel=1e-6)

    def test_kernel_normalised(self):
        assert gaussian_kernel1d(1.5).sum() == pytest.approx(1.0)
        assert len(gaussian_kernel1d(1.5)) == 2 * 5 + 1
