import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from avucal import diffcore as dc
from avucal.bayeslayers import (BnnModel, VariationalLinear, empirical_bayes_init, inverse_softplus, kl_to_prior,
                                load_checkpoint, model_from_dict, model_to_dict, sample_forward, save_checkpoint)
from gradcheck import numeric_grad, rel_error


def small_model(seed=0, rho=-3.0):
    return BnnModel.create([3, 6, 4], seed=seed, rho_init=rho)


def single_weight_layer(mu, sigma, prior_mean=0.0, prior_std=1.0):
    layer = VariationalLinear(1, 1)
    layer.mu_w.value = np.array([[mu]])
    layer.rho_w.value = inverse_softplus(np.array([[sigma]]))
    layer.prior_mean_w = np.array([[prior_mean]])
    layer.prior_std = prior_std
    layer.mu_b.value = np.array([prior_mean])
    layer.rho_b.value = inverse_softplus(np.array([prior_std]))
    layer.prior_mean_b = np.array([prior_mean])
    return layer


class TestSampling:
    def test_zero_variance_limit_equals_mean_forward(self):
        m = small_model(rho=-40.0)
        x = np.random.default_rng(1).normal(size=(5, 3))
        np.testing.assert_allclose(sample_forward(m, x, 123).value, sample_forward(m, x, None).value, atol=1e-12)

    def test_fixed_seed_is_deterministic(self):
        m = small_model()
        x = np.random.default_rng(1).normal(size=(5, 3))
        np.testing.assert_array_equal(sample_forward(m, x, 9).value, sample_forward(m, x, 9).value)
        assert not np.array_equal(sample_forward(m, x, 9).value, sample_forward(m, x, 10).value)

    def test_weight_std_matches_softplus_rho(self):
        layer = single_weight_layer(0.3, 0.25)
        layer.rho_b.value = np.array([-40.0])
        rng = np.random.default_rng(2024)
        x = dc.constant([[1.0]])
        draws = np.array([layer.forward(x, rng).item() for _ in range(10000)])
        assert abs(draws.std() / 0.25 - 1.0) < 0.03

    def test_deterministic_model_ignores_seed(self):
        m = small_model()
        m.deterministic = True
        x = np.ones((2, 3))
        np.testing.assert_array_equal(sample_forward(m, x, 1).value, sample_forward(m, x, None).value)

    def test_shape_mismatch(self):
        with pytest.raises(dc.ShapeError):
            sample_forward(small_model(), np.ones((2, 5)), 0)

    def test_layers_must_chain(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            BnnModel([VariationalLinear(2, 3, rng), VariationalLinear(4, 2, rng)], class_count=2)

    def test_gradients_reach_mu_and_rho(self):
        m = small_model()
        out = dc.sum(sample_forward(m, np.ones((2, 3)), 5))
        dc.backward(out)
        assert all(p.grad is not None and np.any(p.grad != 0) for p in m.layers[-1].parameters())


class TestKL:
    def test_identical_distributions(self):
        assert single_weight_layer(0.0, 1.0).kl().item() == pytest.approx(0.0, abs=1e-15)

    def test_unit_mean_offset(self):
        assert single_weight_layer(1.0, 1.0).kl().item() == pytest.approx(0.5, abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_quadrature(self, seed):
        rng = np.random.default_rng(seed)
        mu, sigma = rng.normal(0, 1.5), rng.uniform(0.05, 2.0)
        m, s = rng.normal(0, 1), rng.uniform(0.3, 2.0)
        q, p = stats.norm(mu, sigma), stats.norm(m, s)
        val, _ = integrate.quad(lambda w: q.pdf(w) * (q.logpdf(w) - p.logpdf(w)),
                                mu - 15 * sigma, mu + 15 * sigma, epsabs=1e-12, epsrel=1e-12, limit=200)
        assert single_weight_layer(mu, sigma, m, s).kl().item() == pytest.approx(val, abs=1e-6)

    def test_sums_over_all_weights_including_bias(self):
        m = small_model()
        expected = 0.0
        for layer in m.layers:
            for mu, rho in ((layer.mu_w, layer.rho_w), (layer.mu_b, layer.rho_b)):
                sig = np.log1p(np.exp(rho.value))
                expected += np.sum(-np.log(sig) + (sig ** 2 + mu.value ** 2) / 2 - 0.5)
        assert kl_to_prior(m).item() == pytest.approx(expected, rel=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-5, 5), st.floats(-8, 3), st.floats(-3, 3), st.floats(0.05, 5))
    def test_non_negative(self, mu, rho, m, s):
        layer = single_weight_layer(mu, float(np.log1p(np.exp(rho))), m, s)
        layer.mu_b.value = np.array([mu])
        layer.rho_b.value = np.array([rho])
        assert layer.kl().item() >= -1e-12

    def test_gradient_matches_finite_differences(self):
        m = small_model(rho=-1.0)
        for p in m.parameters():
            p.grad = None
        dc.backward(kl_to_prior(m))
        for p in m.parameters():
            assert rel_error(p.grad, numeric_grad(lambda: kl_to_prior(m).item(), p)) < 1e-6


class TestEmpiricalBayes:
    def test_sigma_is_delta_times_abs_weight(self):
        m = BnnModel.create([1, 1], seed=0)
        empirical_bayes_init(m, [(np.array([[2.0]]), np.array([-0.4]))], delta=0.5)
        layer = m.layers[0]
        sw, sb = layer.sigma()
        assert sw[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert sb[0] == pytest.approx(0.2, abs=1e-12)
        assert layer.prior_mean_w[0, 0] == 2.0 and layer.prior_std == 1.0
        assert layer.mu_w.value[0, 0] == 2.0

    def test_zero_weight_is_floored(self):
        m = BnnModel.create([1, 1], seed=0)
        empirical_bayes_init(m, [(np.array([[0.0]]), np.array([0.0]))], delta=0.5)
        assert m.layers[0].sigma()[0][0, 0] == pytest.approx(5e-7, rel=1e-9)

    def test_inverse_softplus_round_trip(self):
        assert dc._softplus(inverse_softplus(0.37)) == pytest.approx(0.37, abs=1e-12)
        xs = np.array([1e-7, 1e-3, 1.0, 25.0, 300.0])
        np.testing.assert_allclose(dc._softplus(inverse_softplus(xs)), xs, rtol=1e-12)

    def test_shape_mismatch(self):
        m = small_model()
        with pytest.raises(dc.ShapeError):
            empirical_bayes_init(m, [(np.ones((2, 2)), np.ones(2))] * 2)

    def test_delta_must_be_positive(self):
        m = small_model()
        with pytest.raises(ValueError):
            empirical_bayes_init(m, m.mean_weights(), delta=0.0)

    def test_small_variance_keeps_mle_predictions(self):
        rng = np.random.default_rng(5)
        mle = small_model(seed=3)
        mle.deterministic = True
        x = rng.normal(size=(400, 3))
        ref = sample_forward(mle, x, None).value.argmax(axis=1)
        m = small_model(seed=4)
        empirical_bayes_init(m, mle.mean_weights(), delta=0.05)
        for s in range(5):
            agree = np.mean(sample_forward(m, x, s).value.argmax(axis=1) == ref)
            assert agree >= 0.95


class TestCheckpoint:
    def test_round_trip_is_value_exact(self, tmp_path):
        m = small_model(seed=11)
        empirical_bayes_init(m, small_model(seed=12).mean_weights())
        m.u_th, m.temperature = 0.123456789012345, 1.7
        path = tmp_path / "ckpt.json"
        save_checkpoint(m, path)
        back = load_checkpoint(path)
        for a, b in zip(m.parameters(), back.parameters()):
            np.testing.assert_array_equal(a.value, b.value)
        for la, lb in zip(m.layers, back.layers):
            np.testing.assert_array_equal(la.prior_mean_w, lb.prior_mean_w)
            np.testing.assert_array_equal(la.prior_mean_b, lb.prior_mean_b)
        assert (back.u_th, back.temperature, back.class_count) == (m.u_th, 1.7, 4)
        x = np.ones((3, 3))
        np.testing.assert_array_equal(sample_forward(m, x, 1).value, sample_forward(back, x, 1).value)

    def test_document_layout(self):
        d = model_to_dict(small_model())
        assert d["format_version"] == 1
        layer = d["layers"][0]
        assert set(layer) == {"mu", "rho", "prior_mean", "prior_std", "in", "out"}
        assert len(layer["mu"]) == 3 * 6 + 6
        assert d["u_th"] is None and d["temperature"] == 1.0
        json.dumps(d)

    def test_rejects_unknown_version(self):
        d = model_to_dict(small_model())
        d["format_version"] = 2
        with pytest.raises(ValueError):
            model_from_dict(d)

    def test_rejects_wrong_length(self):
        d = model_to_dict(small_model())
        d["layers"][0]["mu"] = d["layers"][0]["mu"][:-1]
        with pytest.raises(ValueError):
            model_from_dict(d)

    def test_base_format_without_optional_keys(self):
        d = model_to_dict(small_model())
        m = model_from_dict(d)
        assert m.deterministic is False and m.method is None
