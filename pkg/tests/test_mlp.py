"""MLP denoiser: forward/backward correctness, losses, training, checkpoints."""
import numpy as np
import pytest

from jointdiff.datasets import make_gaussian_mixture
from jointdiff.mlp import (AdamW, CheckpointError, HybridLossConfig, MlpDenoiser,
                           TrainConfig, TrainingDiverged, cross_entropy_grad,
                           hybrid_loss, hybrid_loss_grad, load_checkpoint,
                           save_checkpoint, time_features, train_denoiser)
from jointdiff.schedules import Schedule


def loss_of_params(model, loss_cfg, schedule, x, y, xt, t):
    xh, yh = model.forward(xt, t)
    return hybrid_loss(loss_cfg, schedule, x, y, xh, yh, t)


class TestForward:
    def test_zero_params_give_zero_output(self):
        model = MlpDenoiser(3, 4, hidden=(8, 8))
        x0, y0 = model.forward(np.ones((5, 3)), 0.5)
        np.testing.assert_array_equal(x0, np.zeros((5, 3)))
        np.testing.assert_array_equal(y0, np.zeros((5, 4)))

    def test_deterministic(self):
        a = MlpDenoiser.create(2, 2, seed=0, hidden=(16,))
        b = MlpDenoiser.create(2, 2, seed=0, hidden=(16,))
        x = np.random.default_rng(0).standard_normal((7, 2))
        np.testing.assert_array_equal(a.forward(x, 0.3)[0], b.forward(x, 0.3)[0])

    def test_shared_streams_across_head_widths(self):
        # same seed, different mask width: every non-mask parameter matches
        a = MlpDenoiser.create(2, 4, seed=3, hidden=(8, 8))
        b = MlpDenoiser.create(2, 6, seed=3, hidden=(8, 8))
        for pa, pb, name in zip(a.params()[:-2], b.params()[:-2],
                                a.param_names()[:-2]):
            np.testing.assert_array_equal(pa, pb, err_msg=name)

    def test_time_features_shape_and_range(self):
        f = time_features(np.array([0.0, 0.5, 1.0]), n_freqs=6)
        assert f.shape == (3, 12)
        assert np.abs(f).max() <= 1.0

    def test_input_width_checked(self):
        model = MlpDenoiser(3, 2, hidden=(4,))
        with pytest.raises(ValueError):
            model.forward(np.ones((2, 5)), 0.5)

    def test_param_shape_validation(self):
        with pytest.raises(ValueError):
            MlpDenoiser(2, 2, hidden=(4,), params=[np.zeros((3, 3))])


class TestBackward:
    def gradcheck(self, model, loss_cfg, seed, rel_tol=1e-4):
        schedule = Schedule()
        rng = np.random.default_rng(seed)
        n = 6
        x = rng.standard_normal((n, model.d_x))
        y = rng.standard_normal((n, model.d_y))
        t = rng.uniform(0.05, 0.95, size=n)
        a, s = schedule.alpha_sigma(t)
        xt = a[:, None] * x + s[:, None] * rng.standard_normal(x.shape)

        xh, yh, cache = model.forward(xt, t, keep=True)
        _, gx, gy = hybrid_loss_grad(loss_cfg, schedule, x, y, xh, yh, t)
        grads = model.backward(cache, gx, gy)

        # h balances truncation against cancellation; the loss is O(10-100)
        # because of the snr weight, so smaller steps drown in rounding
        h = 1e-5
        for p, g, name in zip(model.params(), grads, model.param_names()):
            flat_p = p.ravel()
            flat_g = g.ravel()
            idx = rng.choice(flat_p.size, size=min(10, flat_p.size), replace=False)
            for j in idx:
                keep = flat_p[j]
                flat_p[j] = keep + h
                up = loss_of_params(model, loss_cfg, schedule, x, y, xt, t)
                flat_p[j] = keep - h
                dn = loss_of_params(model, loss_cfg, schedule, x, y, xt, t)
                flat_p[j] = keep
                fd = (up - dn) / (2 * h)
                scale = max(abs(fd), abs(flat_g[j]))
                assert abs(flat_g[j] - fd) <= rel_tol * scale + 1e-7, \
                    f"{name}[{j}]: analytic {flat_g[j]} vs fd {fd}"

    def test_gradcheck_width8_depth2(self):
        model = MlpDenoiser.create(2, 4, seed=0, hidden=(8, 8), n_freqs=4)
        self.gradcheck(model, HybridLossConfig(lam=0.5), seed=0)

    def test_gradcheck_single_hidden_layer(self):
        model = MlpDenoiser.create(3, 2, seed=1, hidden=(8,), n_freqs=4)
        self.gradcheck(model, HybridLossConfig(lam=1.0), seed=1)

    def test_mask_head_gradient_exactly_zero_when_gy_zero(self):
        model = MlpDenoiser.create(2, 3, seed=0, hidden=(8,), n_freqs=4)
        x = np.random.default_rng(0).standard_normal((5, 2))
        xh, yh, cache = model.forward(x, 0.5, keep=True)
        grads = model.backward(cache, np.ones_like(xh), np.zeros_like(yh))
        np.testing.assert_array_equal(grads[-2], 0.0)
        np.testing.assert_array_equal(grads[-1], 0.0)

    def test_lam_zero_matches_image_only_model(self):
        # with the mask loss off, every shared gradient equals the gradient
        # of a network that has no mask head at all
        schedule = Schedule()
        joint = MlpDenoiser.create(2, 4, seed=5, hidden=(8, 8), n_freqs=4)
        image = MlpDenoiser.create(2, 0, seed=5, hidden=(8, 8), n_freqs=4)
        rng = np.random.default_rng(7)
        x = rng.standard_normal((6, 2))
        y = rng.standard_normal((6, 4))
        t = rng.uniform(0.1, 0.9, size=6)

        cfg0 = HybridLossConfig(lam=0.0)
        xh, yh, cache = joint.forward(x, t, keep=True)
        _, gx, gy = hybrid_loss_grad(cfg0, schedule, x, y, xh, yh, t)
        gj = joint.backward(cache, gx, gy)

        xh2, yh2, cache2 = image.forward(x, t, keep=True)
        _, gx2, gy2 = hybrid_loss_grad(cfg0, schedule, x, np.zeros((6, 0)), xh2,
                                       yh2, t)
        gi = image.backward(cache2, gx2, gy2)

        names = joint.param_names()
        for a, b, name in zip(gj[:-2], gi[:-2], names[:-2]):
            np.testing.assert_array_equal(a, b, err_msg=name)


class TestHybridLoss:
    def test_unit_error_at_equal_coefficients(self):
        # snr = 1 when alpha = sigma; a unit per-coordinate error on both
        # heads costs image_weight + lam
        schedule = Schedule()
        ts = np.linspace(schedule.t_min, 1.0, 10000)
        a, s = schedule.alpha_sigma(ts)
        t_eq = ts[np.argmin(np.abs(a - s))]
        cfg = HybridLossConfig(lam=1e-4)
        x = np.zeros((3, 2))
        y = np.zeros((3, 4))
        loss = hybrid_loss(cfg, schedule, x, y, x + 1.0, y + 1.0, t_eq)
        assert loss == pytest.approx(1.0 + 1e-4, rel=1e-3)

    def test_lam_zero_is_exact_reduction(self):
        schedule = Schedule()
        rng = np.random.default_rng(0)
        x, y = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
        xh, yh = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
        t = rng.uniform(0.2, 0.8, size=4)
        full = hybrid_loss(HybridLossConfig(lam=0.0), schedule, x, y, xh, yh, t)
        image_only = hybrid_loss(HybridLossConfig(lam=0.0), schedule, x,
                                 np.zeros((4, 0)), xh, np.zeros((4, 0)), t)
        assert full == image_only

    def test_loss_grad_matches_fd(self):
        schedule = Schedule()
        cfg = HybridLossConfig(lam=0.3, image_weight=0.7)
        rng = np.random.default_rng(1)
        x, y = rng.standard_normal((5, 2)), rng.standard_normal((5, 3))
        xh, yh = rng.standard_normal((5, 2)), rng.standard_normal((5, 3))
        t = rng.uniform(0.1, 0.9, size=5)
        _, gx, gy = hybrid_loss_grad(cfg, schedule, x, y, xh, yh, t)
        # the loss is quadratic in the predictions, so central differences
        # are truncation-free and a wide step kills cancellation noise
        h = 1e-4
        for arr, g in ((xh, gx), (yh, gy)):
            flat, gflat = arr.ravel(), g.ravel()
            for j in rng.choice(flat.size, 5, replace=False):
                keep = flat[j]
                flat[j] = keep + h
                up = hybrid_loss(cfg, schedule, x, y, xh, yh, t)
                flat[j] = keep - h
                dn = hybrid_loss(cfg, schedule, x, y, xh, yh, t)
                flat[j] = keep
                assert gflat[j] == pytest.approx((up - dn) / (2 * h),
                                                 rel=1e-6, abs=1e-9)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            HybridLossConfig(lam=-1.0)


class TestCrossEntropy:
    def test_uniform_logits_loss(self):
        loss, _ = cross_entropy_grad(np.zeros((4, 6)), np.zeros((4, 2), dtype=int), 3)
        assert loss == pytest.approx(np.log(3.0), rel=1e-12)

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((3, 8))
        classes = rng.integers(0, 4, size=(3, 2))
        _, g = cross_entropy_grad(logits, classes, 4)
        h = 1e-6
        flat, gflat = logits.ravel(), g.ravel()
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + h
            up, _ = cross_entropy_grad(logits, classes, 4)
            flat[j] = keep - h
            dn, _ = cross_entropy_grad(logits, classes, 4)
            flat[j] = keep
            assert gflat[j] == pytest.approx((up - dn) / (2 * h), abs=1e-8)


class TestTraining:
    def small_dataset(self, seed=0):
        return make_gaussian_mixture(2, 80, d_x=1, K=2, seed=seed, scale=0.1)

    def test_two_point_training_fits(self):
        # val loss must land far below init and within 2x of the posterior
        # mean's loss on the identical replayed validation draw
        from jointdiff.mlp import _KEY_SPLIT, _KEY_VAL, _stream
        from jointdiff.oracle import OracleDenoiser

        ds = make_gaussian_mixture(2, 200, d_x=1, K=2, seed=0, scale=0.1)
        schedule = Schedule()
        loss_cfg = HybridLossConfig(lam=0.5)
        model = MlpDenoiser.create(1, 2, seed=0, hidden=(64, 64), n_freqs=8)
        res = train_denoiser(model, ds, schedule, loss_cfg,
                             TrainConfig(epochs=300, batch_size=32, lr=3e-3,
                                         warmup=50, patience=40, seed=0))

        perm = _stream(0, _KEY_SPLIT).permutation(ds.n)
        val_idx = perm[:int(round(0.2 * ds.n))]
        x_va, y_va = ds.x[val_idx], ds.y[val_idx]
        val_rng = _stream(0, _KEY_VAL)
        t_va = val_rng.uniform(schedule.t_min, 1.0, size=len(val_idx))
        a, s = schedule.alpha_sigma(t_va)
        xt_va = a[:, None] * x_va + s[:, None] * val_rng.standard_normal(x_va.shape)
        oracle = OracleDenoiser(ds, schedule)
        xh = np.empty_like(x_va)
        yh = np.empty_like(y_va)
        for i in range(len(val_idx)):
            xh[i], yh[i] = oracle.denoise(xt_va[i], t_va[i])
        floor = hybrid_loss(loss_cfg, schedule, x_va, y_va, xh, yh, t_va)

        best = res.history["best_val_loss"]
        assert best < 0.1 * res.history["val_loss"][0]
        assert best < 2.0 * floor

    def test_diffusion_training_classifies_at_t_min(self):
        ds = make_gaussian_mixture(2, 200, d_x=1, K=2, seed=0, scale=0.1)
        schedule = Schedule()
        model = MlpDenoiser.create(1, 2, seed=0, hidden=(64, 64), n_freqs=8)
        res = train_denoiser(model, ds, schedule, HybridLossConfig(lam=0.5),
                             TrainConfig(epochs=300, batch_size=32, lr=3e-3,
                                         warmup=50, patience=40, seed=0))
        _, yh = res.model.forward(ds.x, schedule.t_min)
        assert (yh.argmax(axis=1) == ds.y.argmax(axis=1)).mean() == 1.0

    def test_supervised_regime_regresses_one_hot(self):
        # clean inputs pinned at t_min: the mask head should sit on the
        # one-hot targets to better than 0.05 everywhere
        ds = make_gaussian_mixture(2, 200, d_x=1, K=2, seed=0, scale=0.1)
        schedule = Schedule()
        model = MlpDenoiser.create(1, 2, seed=0, hidden=(64, 64), n_freqs=8)
        res = train_denoiser(model, ds, schedule,
                             HybridLossConfig(lam=1.0, image_weight=0.0),
                             TrainConfig(epochs=600, batch_size=32, lr=3e-3,
                                         warmup=50, patience=150, seed=0,
                                         fixed_t=schedule.t_min, noisy=False))
        _, yh = res.model.forward(ds.x, schedule.t_min)
        assert np.abs(yh - ds.y).max() < 0.05

    def test_training_reproducible(self):
        ds = self.small_dataset()
        schedule = Schedule()
        cfg = TrainConfig(epochs=5, batch_size=16, seed=3)
        model = MlpDenoiser.create(1, 2, seed=1, hidden=(8,), n_freqs=4)
        r1 = train_denoiser(model, ds, schedule, HybridLossConfig(), cfg)
        r2 = train_denoiser(model, ds, schedule, HybridLossConfig(), cfg)
        for a, b in zip(r1.model.params(), r2.model.params()):
            np.testing.assert_array_equal(a, b)
        assert r1.history["val_loss"] == r2.history["val_loss"]

    def test_caller_model_untouched(self):
        ds = self.small_dataset()
        model = MlpDenoiser.create(1, 2, seed=1, hidden=(8,), n_freqs=4)
        before = model.checksum()
        train_denoiser(model, ds, Schedule(), HybridLossConfig(),
                       TrainConfig(epochs=2, batch_size=16))
        assert model.checksum() == before

    def test_first_batch_loss_recorded(self):
        ds = self.small_dataset()
        res = train_denoiser(MlpDenoiser.create(1, 2, seed=0, hidden=(8,),
                                                n_freqs=4),
                             ds, Schedule(), HybridLossConfig(),
                             TrainConfig(epochs=1, batch_size=16, seed=0))
        assert np.isfinite(res.history["first_batch_loss"])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self):
        ds = self.small_dataset()
        model = MlpDenoiser.create(1, 2, seed=0, hidden=(8,), n_freqs=4)
        with pytest.raises(TrainingDiverged):
            train_denoiser(model, ds, Schedule(), HybridLossConfig(),
                           TrainConfig(epochs=3, batch_size=16, lr=1e154,
                                       warmup=0))

    def test_zero_epochs_returns_init(self):
        ds = self.small_dataset()
        model = MlpDenoiser.create(1, 2, seed=0, hidden=(8,), n_freqs=4)
        res = train_denoiser(model, ds, Schedule(), HybridLossConfig(),
                             TrainConfig(epochs=0, batch_size=16))
        assert res.model.checksum() == model.checksum()
        assert res.history["epoch"] == []

    def test_label_permutation_symmetry(self):
        # flipping the class convention in data and targets gives the same
        # loss trajectory when the mask head init is symmetric (zeros)
        ds = self.small_dataset()
        flipped = ds.subset(np.arange(ds.n))
        flipped.y[:] = ds.y[:, [1, 0]]
        schedule = Schedule()
        model = MlpDenoiser.create(1, 2, seed=0, hidden=(8, 8), n_freqs=4)
        ph = model.params()
        ph[-2][:] = 0.0  # zero the mask head so class order carries no bias
        cfg = TrainConfig(epochs=4, batch_size=16, seed=5)
        r1 = train_denoiser(model, ds, schedule, HybridLossConfig(lam=0.5), cfg)
        r2 = train_denoiser(model, flipped, schedule, HybridLossConfig(lam=0.5),
                            cfg)
        np.testing.assert_allclose(r1.history["val_loss"],
                                   r2.history["val_loss"], rtol=1e-12)


class TestAdam:
    def test_warmup_scales_lr(self):
        p = [np.ones((2, 2))]
        opt = AdamW(p, lr=1.0, warmup=10, weight_decay=0.0)
        lr1 = opt.step(p, [np.ones((2, 2))])
        assert lr1 == pytest.approx(0.1)

    def test_step_moves_against_gradient(self):
        p = [np.zeros(3)]
        opt = AdamW(p, lr=0.1, warmup=0, weight_decay=0.0)
        opt.step(p, [np.ones(3)])
        assert (p[0] < 0).all()


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = MlpDenoiser.create(2, 4, seed=0, hidden=(8, 8), n_freqs=4)
        schedule = Schedule()
        save_checkpoint(tmp_path, "ck", model, schedule,
                        loss_cfg=HybridLossConfig(), seed=0, regime="hybrid",
                        labels={"K": 2, "P": 2})
        loaded, manifest = load_checkpoint(tmp_path / "ck.json")
        assert loaded.checksum() == model.checksum()
        assert manifest["regime"] == "hybrid"
        assert manifest["labels"] == {"K": 2, "P": 2}

    def test_truncated_blob_detected(self, tmp_path):
        model = MlpDenoiser.create(2, 2, seed=0, hidden=(8,), n_freqs=4)
        save_checkpoint(tmp_path, "ck", model, Schedule())
        blob = tmp_path / "ck.bin"
        blob.write_bytes(blob.read_bytes()[:-16])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck.json")

    def test_bad_manifest_detected(self, tmp_path):
        (tmp_path / "ck.json").write_text("{not json")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck.json")

    def test_reinit_mask_head_shares_backbone(self):
        model = MlpDenoiser.create(2, 4, seed=0, hidden=(8, 8), n_freqs=4)
        wider = model.reinit_mask_head(6, seed=1)
        assert wider.d_y == 6
        for a, b in zip(model.params()[:-2], wider.params()[:-2]):
            np.testing.assert_array_equal(a, b)
        assert not np.array_equal(model.params()[-2][:, :4],
                                  wider.params()[-2][:, :4])

    def test_copy_is_deep(self):
        model = MlpDenoiser.create(2, 2, seed=0, hidden=(8,), n_freqs=4)
        dup = model.copy()
        dup.params()[0][0, 0] += 1.0
        assert model.params()[0][0, 0] != dup.params()[0][0, 0]
