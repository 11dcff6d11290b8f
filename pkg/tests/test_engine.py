import numpy as np
import pytest

from svfreg.engine import (AdaptConfig, NumericalFailure, adam_step, adapt,
                           init_opt_state, pretrain, register)
from svfreg.grid import ScalarVolume
from svfreg.objective import mse_loss, total_loss
from svfreg.predictor import Architecture, PredictorParams, init_params
from svfreg.phantom import make_phantom_pair
from tests.conftest import smooth_volume

SMALL = dict(squaring_steps=6, mc_samples=3, learning_rate=1e-3)


@pytest.fixture
def pair():
    return (smooth_volume((12, 12, 12), sigma=2.0, seed=3, scale=0.8),
            smooth_volume((12, 12, 12), sigma=2.0, seed=4, scale=0.8))


@pytest.fixture
def small_params():
    arch = Architecture(hidden_channels=6, pool_factor=2)
    params = init_params(arch, 1)
    gen = np.random.default_rng(2)
    for k in params.blocks:
        params.blocks[k] = params.blocks[k] + gen.normal(
            scale=0.03, size=params.blocks[k].shape)
    return params


class TestAdaptConfig:
    def test_defaults_match_pipeline(self):
        cfg = AdaptConfig()
        assert cfg.learning_rate == 0.0002
        assert cfg.reg_weight == 0.2
        assert cfg.squaring_steps == 10
        assert cfg.mc_samples == 20
        assert cfg.adapt_steps == 30
        assert cfg.dropout_rate == 0.2
        assert cfg.variance_floor == 1e-6

    def test_validation(self):
        with pytest.raises(ValueError):
            AdaptConfig(mc_samples=1)
        with pytest.raises(ValueError):
            AdaptConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            AdaptConfig(dropout_rate=1.0)
        with pytest.raises(ValueError):
            AdaptConfig(direction="up")


class TestAdam:
    def test_zero_gradient_leaves_params(self, small_params):
        state = init_opt_state(small_params)
        grads = {k: np.zeros_like(v) for k, v in small_params.blocks.items()}
        new, state2 = adam_step(small_params, grads, state, 0.01)
        assert state2.step == 1
        for k in small_params.blocks:
            assert np.array_equal(new.blocks[k], small_params.blocks[k])

    def test_first_step_magnitude_is_lr(self, small_params):
        # bias-corrected moments cancel on the first step, so every
        # parameter with nonzero gradient moves by exactly ~lr
        state = init_opt_state(small_params)
        gen = np.random.default_rng(0)
        grads = {k: gen.normal(size=v.shape) + 0.5
                 for k, v in small_params.blocks.items()}
        lr = 0.01
        new, _ = adam_step(small_params, grads, state, lr)
        for k in small_params.blocks:
            delta = np.abs(new.blocks[k] - small_params.blocks[k])
            nz = np.abs(grads[k]) > 1e-3
            assert np.allclose(delta[nz], lr, rtol=1e-4)

    def test_scalar_quadratic_convergence(self):
        # minimize theta^2 from theta=1 with lr 0.1: |theta| < 0.05 after
        # 100 steps (uses a single-parameter block)
        arch = Architecture(in_channels=1, hidden_channels=1, out_channels=1,
                            pool_factor=1, dropout_rate=0.0)
        shapes = arch.block_shapes()
        blocks = {k: np.zeros(s) for k, s in shapes.items()}
        blocks["head.bias"][:] = 1.0
        params = PredictorParams(arch, blocks)
        state = init_opt_state(params)
        for _ in range(100):
            grads = {k: np.zeros_like(v) for k, v in params.blocks.items()}
            grads["head.bias"] = 2.0 * params.blocks["head.bias"]
            params, state = adam_step(params, grads, state, 0.1)
        assert abs(params.blocks["head.bias"][0]) < 0.05

    def test_shape_mismatch_rejected(self, small_params):
        state = init_opt_state(small_params)
        grads = {k: np.zeros_like(v) for k, v in small_params.blocks.items()}
        grads["head.bias"] = np.zeros(7)
        with pytest.raises(ValueError, match="shape"):
            adam_step(small_params, grads, state, 0.01)


class TestPretrain:
    def test_initial_loss_is_mean_mse(self, pair):
        # zero-init head makes the initial registration the identity map
        cfg = AdaptConfig(**SMALL)
        _, curve = pretrain([pair], cfg, epochs=0, seed=0)
        want, _ = mse_loss(pair[0], pair[1])
        assert curve[0] == pytest.approx(want, rel=1e-12)

    def test_identical_pair_stays_near_zero(self):
        img = smooth_volume((12, 12, 12), sigma=2.0, seed=7, scale=0.8)
        cfg = AdaptConfig(**SMALL)
        _, curve = pretrain([(img, ScalarVolume(img.data.copy()))], cfg,
                            epochs=3, seed=0)
        assert curve[0] == 0.0
        assert all(c < 1e-6 for c in curve)

    def test_training_halves_loss(self):
        cases = [make_phantom_pair((24,) * 3, radial_scale=0.85,
                                   random_amplitude=1.0, smoothness=4.0,
                                   seed=40 + i) for i in range(3)]
        dataset = [(c.fixed, c.moving) for c in cases]
        cfg = AdaptConfig(squaring_steps=8)
        _, curve = pretrain(dataset, cfg, epochs=40, seed=3)
        assert curve[-1] < 0.5 * curve[0]

    def test_deterministic(self, pair):
        cfg = AdaptConfig(**SMALL)
        p1, c1 = pretrain([pair], cfg, epochs=2, seed=5)
        p2, c2 = pretrain([pair], cfg, epochs=2, seed=5)
        assert c1 == c2
        for k in p1.blocks:
            assert np.array_equal(p1.blocks[k], p2.blocks[k])

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            pretrain([], AdaptConfig(), 1, 0)


class TestAdapt:
    def test_zero_steps_returns_unchanged(self, pair, small_params):
        cfg = AdaptConfig(adapt_steps=0, **SMALL)
        out, report = adapt(small_params, *pair, cfg)
        assert report.steps == []
        for k in small_params.blocks:
            assert np.array_equal(out.blocks[k], small_params.blocks[k])

    def test_zero_dropout_first_step_equals_unweighted(self, pair):
        arch = Architecture(hidden_channels=6, pool_factor=2, dropout_rate=0.0)
        params = init_params(arch, 1)
        gen = np.random.default_rng(2)
        for k in params.blocks:
            params.blocks[k] = params.blocks[k] + gen.normal(
                scale=0.03, size=params.blocks[k].shape)
        cfg = AdaptConfig(adapt_steps=1, **SMALL)
        _, report = adapt(params, *pair, cfg)
        unweighted, _ = total_loss(*pair, params, reg_weight=cfg.reg_weight,
                                   squaring_steps=cfg.squaring_steps)
        assert report.steps[0].total == pytest.approx(unweighted.total, abs=1e-10)

    def test_input_params_not_mutated(self, pair, small_params):
        before = {k: v.copy() for k, v in small_params.blocks.items()}
        cfg = AdaptConfig(adapt_steps=2, **SMALL)
        adapt(small_params, *pair, cfg)
        for k in before:
            assert np.array_equal(small_params.blocks[k], before[k])

    def test_snapshot_equals_shorter_run(self, pair, small_params):
        cfg3 = AdaptConfig(adapt_steps=3, seed=4, **SMALL)
        cfg7 = AdaptConfig(adapt_steps=7, seed=4, **SMALL)
        out3, _ = adapt(small_params, *pair, cfg3)
        _, rep7 = adapt(small_params, *pair, cfg7, snapshot_steps=(3,))
        for k in out3.blocks:
            assert np.array_equal(out3.blocks[k], rep7.snapshots[3].blocks[k])

    def test_deterministic_trajectories(self, pair, small_params):
        cfg = AdaptConfig(adapt_steps=4, seed=11, **SMALL)
        _, r1 = adapt(small_params, *pair, cfg)
        _, r2 = adapt(small_params, *pair, cfg)
        t1 = [(bd.mse, bd.bending, bd.total) for bd in r1.steps]
        t2 = [(bd.mse, bd.bending, bd.total) for bd in r2.steps]
        assert t1 == t2

    def test_trajectory_length_matches_steps(self, pair, small_params):
        cfg = AdaptConfig(adapt_steps=5, **SMALL)
        _, report = adapt(small_params, *pair, cfg)
        assert len(report.steps) == 5
        assert len(report.step_seconds) == 5

    def test_refresh_extension_runs(self, pair, small_params):
        cfg = AdaptConfig(adapt_steps=4, refresh_every=2, **SMALL)
        _, report = adapt(small_params, *pair, cfg)
        assert len(report.steps) == 4

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_raises(self, pair, small_params):
        # huge head weights give a wildly varying field whose bending
        # energy overflows to inf
        bad = small_params.copy()
        bad.blocks["head.weight"] = np.full_like(bad.blocks["head.weight"], 1e160)
        cfg = AdaptConfig(adapt_steps=1, **SMALL)
        with pytest.raises(NumericalFailure):
            adapt(bad, *pair, cfg)


class TestRegister:
    def test_zero_init_forward_returns_moving(self, pair):
        params = init_params(Architecture(hidden_channels=6, pool_factor=2), 0)
        disp, deformed = register(params, *pair, "forward", 6)
        assert np.all(disp.data == 0)
        assert np.array_equal(deformed.data, pair[1].data)

    def test_zero_init_inverse_returns_fixed(self, pair):
        params = init_params(Architecture(hidden_channels=6, pool_factor=2), 0)
        disp, deformed = register(params, *pair, "inverse", 6)
        assert disp.provenance == "inverse"
        assert np.all(disp.data == 0)
        assert np.array_equal(deformed.data, pair[0].data)

    def test_forward_inverse_round_trip_small(self, pair, small_params):
        from svfreg.diffeo import compose
        u_fwd, _ = register(small_params, *pair, "forward", 10)
        u_inv, _ = register(small_params, *pair, "inverse", 10)
        res = compose(u_fwd, u_inv).data
        mag = np.linalg.norm(res, axis=0)[2:-2, 2:-2, 2:-2]
        assert mag.mean() <= 0.1

    def test_bad_direction_rejected(self, pair, small_params):
        with pytest.raises(ValueError):
            register(small_params, *pair, "backward", 5)
