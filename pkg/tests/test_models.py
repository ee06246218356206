import numpy as np
import pytest

from selfderain import autograd as ag
from selfderain.autograd import Tensor
from selfderain.dataset import FrameSequence
from selfderain.models import (
    ModelError,
    SpatialDenoiser,
    TemporalDenoiser,
    derain_sequence,
    edge_windows,
    to_nchw,
)

from oracles import finite_difference_grad, max_relative_error


def frames(rng, n, h=8, w=8, c=3):
    return rng.uniform(0.05, 0.95, size=(n, h, w, c)).astype(np.float32)


def randomize(model, seed, scale=0.3):
    """Give every weight a nonzero value so all paths carry signal."""
    r = np.random.default_rng(seed)
    for t in model.parameters().values():
        t.data = (r.normal(size=t.shape) * scale).astype(t.data.dtype)


def model_gradcheck(model, loss_fn, names, seed=0, h=1e-5):
    """Finite-difference check of ``loss_fn()`` w.r.t. a few named weights.

    A first-layer weight touches every pixel, so a 1e-3 step routinely pushes
    some activation across a leaky-ReLU or max-pool kink; whole networks are
    therefore probed with a smaller step than the single-op checks.
    """
    params = model.parameters()
    for t in params.values():
        t.grad = None
    ag.backward(loss_fn())
    worst = 0.0
    for name in names:
        t = params[name]
        flat = t.data.reshape(-1)
        pick = np.random.default_rng(seed).choice(flat.size, size=min(6, flat.size), replace=False)
        analytic = t.grad.reshape(-1)[pick]
        original = t.data.copy()

        def f(sub):
            data = original.copy().reshape(-1)
            data[pick] = sub
            t.data = data.reshape(original.shape)
            return loss_fn().item()

        numeric = finite_difference_grad(f, [original.reshape(-1)[pick].copy()], 0, h=h)
        t.data = original
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst


class TestSpatial:
    def test_fresh_output_in_range(self, rng):
        out = SpatialDenoiser(seed=1)(frames(rng, 3, 16, 16))
        assert out.shape == (3, 16, 16, 3)
        assert np.isfinite(out).all() and out.min() >= 0 and out.max() <= 1

    def test_single_frame_and_counter(self, rng):
        m = SpatialDenoiser(base_channels=4)
        assert m(frames(rng, 1)[0]).shape == (8, 8, 3)
        m(frames(rng, 5))
        assert m.frames_processed == 6

    def test_indivisible_extents_rejected(self, rng):
        with pytest.raises(ModelError, match="divisible"):
            SpatialDenoiser(base_channels=4)(frames(rng, 1, 10, 8))

    @pytest.mark.parametrize("seed", range(5))
    def test_weight_gradients(self, seed):
        with ag.precision(np.float64):
            m = SpatialDenoiser(base_channels=2, seed=seed)
            randomize(m, seed)
            r = np.random.default_rng(seed)
            x = Tensor(to_nchw(r.uniform(0.1, 0.9, size=(1, 8, 8, 3))))
            y = Tensor(to_nchw(r.uniform(0.1, 0.9, size=(1, 8, 8, 3))))
            names = ["down0.0.w", "down2.1.w", "up0.1.b", "out.w"]
            assert model_gradcheck(m, lambda: ag.mse(m.forward(x), y), names, seed) < 1e-4

    def test_weights_round_trip(self, tmp_path, rng):
        m = SpatialDenoiser(base_channels=4, seed=3)
        randomize(m, 3, 0.05)
        m.save(tmp_path / "s.drlw")
        back = SpatialDenoiser.load(tmp_path / "s.drlw")
        x = frames(rng, 2)
        assert m(x).tobytes() == back(x).tobytes()
        assert back.base_channels == 4

    def test_wrong_kind_rejected(self, tmp_path):
        TemporalDenoiser(base_channels=2).save(tmp_path / "t.drlw")
        with pytest.raises(ModelError):
            SpatialDenoiser.load(tmp_path / "t.drlw")


class TestTemporal:
    def test_identical_frames_in_range(self, rng):
        m = TemporalDenoiser(base_channels=4, seed=2)
        randomize(m, 2, 1.0)
        f = frames(rng, 1, 16, 16)[0]
        out = m(np.stack([f] * 5))
        assert out.shape == (16, 16, 3)
        assert np.isfinite(out).all() and out.min() >= 0 and out.max() <= 1

    def test_batch_of_windows(self, rng):
        out = TemporalDenoiser(base_channels=4)(frames(rng, 10).reshape(2, 5, 8, 8, 3))
        assert out.shape == (2, 8, 8, 3)

    @pytest.mark.parametrize("n", [3, 4, 6])
    def test_window_size_enforced(self, rng, n):
        with pytest.raises(ModelError, match="5"):
            TemporalDenoiser(base_channels=2)(frames(rng, n))

    def test_indivisible_extents_rejected(self, rng):
        with pytest.raises(ModelError, match="divisible"):
            TemporalDenoiser(base_channels=2)(frames(rng, 5, 6, 8))

    @pytest.mark.parametrize("seed", range(5))
    def test_full_pipeline_gradients(self, seed):
        with ag.precision(np.float64):
            m = TemporalDenoiser(base_channels=2, seed=seed)
            randomize(m, seed)
            r = np.random.default_rng(seed)
            window = [Tensor(to_nchw(r.uniform(0.1, 0.9, size=(1, 8, 8, 3)))) for _ in range(5)]
            y = Tensor(to_nchw(r.uniform(0.1, 0.9, size=(1, 8, 8, 3))))
            names = ["block1.down0.0.w", "block1.out.w", "block2.down1.1.w", "block2.out.b"]
            assert model_gradcheck(m, lambda: ag.mse(m.forward(window), y), names, seed) < 1e-4

    def test_time_reversal_changes_output(self, rng):
        m = TemporalDenoiser(base_channels=4, seed=5)
        randomize(m, 5)
        w = frames(rng, 5)
        assert not np.allclose(m(w), m(w[::-1]), atol=1e-6)

    def test_weights_round_trip(self, tmp_path, rng):
        m = TemporalDenoiser(base_channels=4, seed=1)
        randomize(m, 1, 0.05)
        m.save(tmp_path / "t.drlw", stage=2, epoch=3)
        back = TemporalDenoiser.load(tmp_path / "t.drlw")
        w = frames(rng, 5)
        assert m(w).tobytes() == back(w).tobytes()


class TestDerainSequence:
    def test_edge_windows(self):
        assert edge_windows(1) == [[0] * 5]
        assert edge_windows(7)[0] == [0, 0, 0, 1, 2]
        assert edge_windows(7)[3] == [1, 2, 3, 4, 5]
        assert edge_windows(7)[6] == [4, 5, 6, 6, 6]

    def test_single_frame_sequence(self, rng):
        seq = FrameSequence(list(frames(rng, 1)))
        sp, tm = SpatialDenoiser(base_channels=2), TemporalDenoiser(base_channels=2)
        out = derain_sequence(sp, tm, seq)
        assert len(out) == 1
        expected = tm(np.stack([sp(seq[0])] * 5))
        np.testing.assert_array_equal(out[0], expected)

    def test_output_depends_only_on_window(self, rng):
        seq = list(frames(rng, 7))
        sp, tm = SpatialDenoiser(base_channels=2, seed=1), TemporalDenoiser(base_channels=2, seed=1)
        randomize(tm, 1)
        base = derain_sequence(sp, tm, FrameSequence(seq))
        seq[6] = 1 - seq[6]
        moved = derain_sequence(sp, tm, FrameSequence(seq))
        assert base[3].tobytes() == moved[3].tobytes()
        assert not np.array_equal(base[5], moved[5])

    def test_spatial_runs_once_per_frame(self, rng):
        sp = SpatialDenoiser(base_channels=2)
        derain_sequence(sp, TemporalDenoiser(base_channels=2), FrameSequence(list(frames(rng, 9))), batch_size=4)
        assert sp.frames_processed == 9

    def test_spatial_only(self, rng):
        seq = FrameSequence(list(frames(rng, 3)))
        sp = SpatialDenoiser(base_channels=2)
        out = derain_sequence(sp, None, seq)
        np.testing.assert_array_equal(np.stack(out.frames), sp(np.stack(seq.frames)))
