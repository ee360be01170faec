import dataclasses

import numpy as np
import pytest

from deeppam.deepnet import (Adam, DeepPamModel, EncoderSpec, PointEncoder, TrainConfig, encode,
                             fit_deeppam, forward_batch, init_params, loss_and_grads, make_batch,
                             zero_params)
from deeppam.deepnet.model import DeepPamError
from deeppam.deepnet.train import init_model, validation_nll
from deeppam.pam import StructuredSpec, fit_pam, penalized_nll, penalized_nll_grad, poisson_nll
from deeppam.ped import make_cut_points, transform_to_ped
from deeppam.synth import FEATURE_NAMES, SimConfig, generate_dataset

SMALL = EncoderSpec((3, 6, 5), (5, 4, 3), l2=1e-3)


def small_data(seed=0, n_train=60, n_val=20, n_points=16):
    cfg = SimConfig(n_train=n_train, n_val=n_val, n_test=20, n_points=n_points, seed=seed)
    return generate_dataset(cfg)


def warm_fit(train, val, psi=None):
    cuts = make_cut_points(train)
    ped = transform_to_ped(train, cuts, FEATURE_NAMES)
    vped = transform_to_ped(val, cuts, FEATURE_NAMES)
    spec = StructuredSpec.standard(linear=FEATURE_NAMES, baseline_basis=6)
    return fit_pam(ped, spec, "select" if psi is None else psi, val=vped)


@pytest.fixture(scope="module")
def data():
    return small_data()


@pytest.fixture(scope="module")
def warm(data):
    train, val, _ = data
    return warm_fit(train, val, psi=[1.0])


def random_model(warm, spec=SMALL, seed=1):
    rng = np.random.default_rng(seed)
    model = init_model(warm, TrainConfig(encoder=spec), rng)
    model.gamma = rng.normal(size=spec.latent_dim)
    model.structured_w = warm.w + 0.1 * rng.normal(size=warm.w.size)
    return model


class TestEncoder:
    def setup_method(self):
        self.spec = EncoderSpec()
        self.params = init_params(self.spec, np.random.default_rng(0))
        self.cloud = np.random.default_rng(1).normal(size=(200, 3))

    def test_shapes(self):
        z = encode(self.cloud, self.params)
        assert z.shape == (8,)
        assert self.params["point0.W"].shape == (3, 32)
        assert self.params["global1.W"].shape == (32, 8)

    def test_permutation_invariance(self):
        perm = np.random.default_rng(2).permutation(200)
        np.testing.assert_array_equal(encode(self.cloud[perm], self.params), encode(self.cloud, self.params))

    def test_duplication_invariance(self):
        doubled = np.concatenate([self.cloud, self.cloud])
        np.testing.assert_array_equal(encode(doubled, self.params), encode(self.cloud, self.params))

    def test_zero_weights(self):
        assert np.all(encode(self.cloud, zero_params(self.spec)) == 0)

    def test_latent_can_be_negative(self):
        clouds = np.random.default_rng(3).normal(size=(50, 64, 3))
        z = PointEncoder(self.spec).forward(clouds, self.params)
        assert (z < 0).any() and (z > 0).any()

    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            PointEncoder(self.spec).forward(np.zeros((2, 5, 2)), self.params)

    def test_backward_matches_dense(self):
        """Sparse argmax backward against finite differences of the full forward."""
        spec = SMALL
        enc = PointEncoder(spec)
        rng = np.random.default_rng(4)
        params = init_params(spec, rng)
        clouds = rng.normal(size=(3, 10, 3))
        upstream = rng.normal(size=(3, spec.latent_dim))
        _, cache = enc.forward(clouds, params, cache=True)
        grads = enc.backward(upstream, cache, params)
        h = 1e-6
        for key, value in params.items():
            fd = np.zeros_like(value)
            for idx in np.ndindex(value.shape):
                old = value[idx]
                value[idx] = old + h
                up = np.sum(upstream * enc.forward(clouds, params))
                value[idx] = old - h
                down = np.sum(upstream * enc.forward(clouds, params))
                value[idx] = old
                fd[idx] = (up - down) / (2 * h)
            np.testing.assert_allclose(grads[key], fd, atol=1e-6, err_msg=key)


class TestModel:
    def test_zero_gamma_equals_pam(self, data, warm):
        train, val, test = data
        model = init_model(warm, TrainConfig(encoder=SMALL), np.random.default_rng(0))
        times = np.linspace(0, 12, 37)
        features = np.stack([r.features for r in test])
        np.testing.assert_allclose(model.survival(test, times), warm.survival(features, times),
                                   rtol=1e-12)
        np.testing.assert_allclose(model.log_hazard(test, times), warm.log_hazard(features, times),
                                   rtol=1e-12)

    def test_broadcast_and_single_encode(self, data, warm):
        train, _, _ = data
        model = random_model(warm)
        ped = transform_to_ped(train, warm.cuts, FEATURE_NAMES)
        design = warm.design_map.matrix(ped.t_j, ped.features)
        subjects = np.arange(7)
        batch = make_batch(design, ped, [r.cloud for r in train], subjects)
        before = model.encoder.n_encoded
        _, cache = forward_batch(batch, model, cache=True)
        assert model.encoder.n_encoded - before == 7
        head = cache["eta"] - batch.design @ model.structured_w
        for s in range(7):
            rows = head[batch.row_subject == s]
            assert np.ptp(rows) == 0
            assert rows[0] == pytest.approx(cache["zeta"][s] @ model.gamma, rel=1e-12)

    def test_additive_decomposition(self, data, warm):
        _, _, test = data
        model = random_model(warm)
        times = np.array([0.5, 2.0, 5.0, 9.0])
        lh = model.log_hazard(test, times)
        features = np.stack([r.features for r in test])
        expected = (model.design_map.feature_matrix(features) @ model.structured_w[model.design_map.time_cols.stop:]
                    + model.latent([r.cloud for r in test]) @ model.gamma)[:, None] \
            + model.time_effect()[warm.cuts.interval_index(times)][None, :]
        np.testing.assert_allclose(lh, expected, rtol=1e-12)
        # differences between subjects do not depend on time
        np.testing.assert_allclose(np.ptp(lh - lh[:1], axis=1), 0, atol=1e-12)

    def test_gradients_finite_differences(self, data, warm):
        train, _, _ = data
        model = random_model(warm)
        ped = transform_to_ped(train, warm.cuts, FEATURE_NAMES)
        design = warm.design_map.matrix(ped.t_j, ped.features)
        clouds = [r.cloud[:8] for r in train]
        batch = make_batch(design, ped, clouds, [3, 11])
        psi, scale = np.array([2.0]), 0.3
        _, grads, _ = loss_and_grads(batch, model, psi, scale)
        params = model.params()
        h = 1e-6
        for key, value in params.items():
            fd = np.zeros_like(value)
            for idx in np.ndindex(value.shape):
                old = value[idx]
                value[idx] = old + h
                up = loss_and_grads(batch, model, psi, scale)[0]
                value[idx] = old - h
                down = loss_and_grads(batch, model, psi, scale)[0]
                value[idx] = old
                fd[idx] = (up - down) / (2 * h)
            err = np.linalg.norm(grads[key] - fd) / max(np.linalg.norm(fd), 1e-8)
            assert err < 1e-4, key

    def test_zero_gamma_gradient_is_pam_gradient(self, data, warm):
        train, _, _ = data
        model = init_model(warm, TrainConfig(encoder=dataclasses.replace(SMALL, l2=0.0)),
                           np.random.default_rng(0))
        ped = transform_to_ped(train, warm.cuts, FEATURE_NAMES)
        design = warm.design_map.matrix(ped.t_j, ped.features)
        batch = make_batch(design, ped, [r.cloud for r in train], np.arange(len(train)))
        loss, grads, nll = loss_and_grads(batch, model, warm.psi, 1.0)
        args = (design, ped.t_risk.astype(float), ped.status.astype(float), warm.psi, warm.design_map)
        np.testing.assert_allclose(grads["w"], penalized_nll_grad(warm.w, *args), atol=1e-9)
        assert loss == pytest.approx(penalized_nll(warm.w, *args), rel=1e-12)
        assert nll == pytest.approx(poisson_nll(design @ warm.w, ped.t_risk, ped.status), rel=1e-12)
        for key, g in grads.items():
            if key.startswith("enc."):
                assert not np.any(g)

    def test_l2_gradient(self):
        enc = PointEncoder(SMALL)
        params = init_params(SMALL, np.random.default_rng(5))
        grads = enc.l2_grads(params)
        assert set(grads) == {k for k in params if k.endswith(".W")}
        for k, g in grads.items():
            np.testing.assert_allclose(g, 2 * SMALL.l2 * params[k])
        total = sum(np.sum(params[k] ** 2) for k in grads)
        assert enc.l2_penalty(params) == pytest.approx(SMALL.l2 * total)

    def test_json_round_trip(self, data, warm):
        _, _, test = data
        model = random_model(warm)
        back = DeepPamModel.from_dict(model.to_dict())
        np.testing.assert_array_equal(back.survival(test, [1.0, 4.0]), model.survival(test, [1.0, 4.0]))

    def test_missing_cloud(self, data, warm):
        _, _, test = data
        model = random_model(warm)
        stripped = [dataclasses.replace(test[0], cloud=None)]
        with pytest.raises(DeepPamError):
            model.survival(stripped, [1.0])


class TestAdam:
    def test_first_step_size(self):
        params = {"a": np.array([1.0, -2.0])}
        Adam(lr=0.1).step(params, {"a": np.array([3.0, -0.5])})
        np.testing.assert_allclose(params["a"], [0.9, -1.9], atol=1e-7)

    def test_minimizes_quadratic(self):
        params = {"x": np.array([5.0, -3.0])}
        opt = Adam(lr=0.05)
        for _ in range(2000):
            opt.step(params, {"x": 2 * params["x"]})
        np.testing.assert_allclose(params["x"], 0, atol=1e-3)


FAST = TrainConfig(max_epochs=6, batch_size=16, patience=3, encoder=SMALL)


@pytest.fixture(scope="module")
def trained(data, warm):
    train, val, _ = data
    return fit_deeppam(train, val, FAST, warm)


class TestTraining:
    def test_epoch_zero_is_warm_start(self, data, warm, trained):
        _, val, _ = data
        vped = transform_to_ped(val, warm.cuts, FEATURE_NAMES)
        vdesign = warm.design_map.matrix(vped.t_j, vped.features)
        assert trained.train_log[0]["epoch"] == 0
        assert trained.train_log[0]["val_nll"] == pytest.approx(
            poisson_nll(vdesign @ warm.w, vped.t_risk, vped.status), rel=1e-12)

    def test_best_checkpoint(self, data, warm, trained):
        _, val, _ = data
        vals = [e["val_nll"] for e in trained.train_log]
        assert trained.best_epoch == int(np.argmin(vals))
        vped = transform_to_ped(val, warm.cuts, FEATURE_NAMES)
        vdesign = warm.design_map.matrix(vped.t_j, vped.features)
        got = validation_nll(trained, vdesign, vped, trained.latent([r.cloud for r in val]))
        assert got == pytest.approx(min(vals), rel=1e-10)

    def test_early_stopping(self, trained):
        log = trained.train_log
        last = log[-1]["epoch"]
        assert last == FAST.max_epochs or last - trained.best_epoch == FAST.patience

    def test_warm_hash_recorded(self, warm, trained):
        from deeppam.deepnet.model import params_hash
        assert trained.warm_start_hash == params_hash(warm.to_json())

    def test_deterministic(self, data, warm, trained):
        train, val, _ = data
        again = fit_deeppam(train, val, FAST, warm)
        for k, v in trained.params().items():
            np.testing.assert_array_equal(again.params()[k], v)

    def test_missing_cloud_rejected(self, data, warm):
        train, val, _ = data
        broken = [dataclasses.replace(train[0], cloud=None)] + train[1:]
        with pytest.raises(DeepPamError):
            fit_deeppam(broken, val, FAST, warm)

    @pytest.mark.slow
    def test_training_loss_decreases(self):
        cfg = TrainConfig(max_epochs=5, batch_size=32, patience=10)
        wins = 0
        for seed in range(10):
            train, val, _ = small_data(seed, n_train=200, n_val=50, n_points=128)
            w = warm_fit(train, val)
            model = fit_deeppam(train, val, dataclasses.replace(cfg, seed=seed), w)
            losses = [e["train_loss"] for e in model.train_log[1:]]
            wins += len(losses) == 5 and losses[-1] < losses[0]
        assert wins >= 9
