import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avucal import avuc as av
from avucal import diffcore as dc
from avucal import metrics
from avucal.bayeslayers import BnnModel
from gradcheck import mlp_losses


def batch_from(correct, uncertainty, confidence=None):
    correct = np.asarray(correct, bool)
    n = correct.size
    labels = np.zeros(n, dtype=np.int64)
    pred = np.where(correct, 0, 1)
    conf = np.full(n, 0.9) if confidence is None else np.asarray(confidence, float)
    probs = np.zeros((n, 2))
    probs[np.arange(n), pred] = conf
    probs[np.arange(n), 1 - pred] = 1 - conf
    return av.PredictiveBatch(probs, labels, pred, conf, np.asarray(uncertainty, float))


def counts_of(ac, au, ic, iu):
    return av.AvuCounts(dc.constant(ac), dc.constant(au), dc.constant(ic), dc.constant(iu), 0.5)


class TestHardCounts:
    def test_all_correct_certain(self):
        c = av.hard_counts(batch_from([1] * 5, [0.1] * 5), 0.5)
        assert (c.n_ac, c.n_au, c.n_ic, c.n_iu) == (5, 0, 0, 0)
        assert av.avu(c) == 1.0

    def test_all_wrong_uncertain(self):
        c = av.hard_counts(batch_from([0] * 4, [0.9] * 4), 0.5)
        assert (c.n_ac, c.n_au, c.n_ic, c.n_iu) == (0, 0, 0, 4)

    def test_mixed_hand_batch(self):
        c = av.hard_counts(batch_from([1, 1, 1, 1, 0, 0], [0.1, 0.2, 0.5, 0.8, 0.3, 0.9]), 0.5)
        assert (c.n_ac, c.n_au, c.n_ic, c.n_iu) == (3, 1, 1, 1)
        assert av.avu(c) == pytest.approx(4 / 6, abs=1e-15)

    def test_all_accurate_uncertain_gives_zero(self):
        assert av.avu(av.AvuCounts(0, 7, 0, 0, 0.1)) == 0.0

    def test_counts_sum_to_batch(self):
        rng = np.random.default_rng(0)
        b = batch_from(rng.random(50) < 0.6, rng.random(50))
        assert av.hard_counts(b, 0.4).total == 50

    def test_errors(self):
        with pytest.raises(ValueError):
            av.hard_counts(batch_from([1], [0.1]), -0.1)
        with pytest.raises(ValueError):
            av.avu(av.AvuCounts(0, 0, 0, 0, 0.1))

    def test_entropy_is_computed_from_probs(self):
        b = av.PredictiveBatch.from_probs([[0.7, 0.2, 0.1], [1.0, 0.0, 0.0]], [0, 2])
        np.testing.assert_allclose(b.uncertainty, [0.8018185525433372, 0.0], atol=1e-12)
        np.testing.assert_array_equal(b.correct, [True, False])


class TestSoftCounts:
    def test_single_accurate_certain_contribution(self):
        p, u = dc.constant([0.9]), dc.constant([np.arctanh(0.2)])
        c = av.soft_counts_from(p, u, [True], u_th=1.0)
        assert c.n_ac.item() == pytest.approx(0.72, abs=1e-12)
        assert c.n_au.item() == c.n_ic.item() == c.n_iu.item() == 0.0

    def test_saturated_accurate(self):
        c = av.soft_counts(dc.constant([[1.0, 0.0]]), [0], u_th=0.3)
        np.testing.assert_allclose(c.values(), [1.0, 0.0, 0.0, 0.0], atol=1e-10)

    @pytest.mark.parametrize("K", [4, 10])
    @pytest.mark.parametrize("seed", range(20))
    def test_near_saturated_batch_matches_hard_avu(self, K, seed):
        rng = np.random.default_rng(seed)
        n = 40
        correct = rng.random(n) < rng.uniform(0.2, 0.9)
        certain = rng.random(n) < rng.uniform(0.2, 0.9)
        conf = np.where(correct, 0.999, 0.001)
        u = np.where(certain, 0.001, np.log(K))
        soft = av.soft_counts_from(dc.constant(conf), dc.constant(u), correct, u_th=0.5)
        hard = av.hard_counts(batch_from(correct, u), 0.5)
        assert abs(av.avu(av.AvuCounts(*soft.values(), 0.5)) - av.avu(hard)) < 0.05

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=30))
    def test_hard_inputs_reproduce_hard_counts(self, rows):
        correct = np.array([r[0] for r in rows])
        uncertain = np.array([r[1] for r in rows])
        # p in {0,1} and tanh(u) in {0,1}: the accurate rows carry p=1, the inaccurate ones p=0
        p = correct.astype(float)
        t = uncertain.astype(float)
        vec = av._soft_count_vector(dc.constant(p), dc.constant(t), correct, uncertain).value
        hard = np.array([np.sum(correct & ~uncertain), np.sum(correct & uncertain),
                         np.sum(~correct & ~uncertain), np.sum(~correct & uncertain)], float)
        np.testing.assert_array_equal(vec, hard)

    def test_gradients_flow_through_confidence_and_uncertainty(self):
        z = dc.parameter(np.random.default_rng(2).normal(size=(6, 3)))
        c = av.soft_counts(dc.softmax(z), [0, 1, 2, 0, 1, 2], u_th=0.8)
        dc.backward(av.avuc_loss(c))
        assert np.all(np.isfinite(z.grad)) and np.any(z.grad != 0)


class TestAvucLoss:
    def test_perfect(self):
        assert av.avuc_loss(counts_of(3.0, 0.0, 0.0, 1.0)).item() == pytest.approx(0.0, abs=1e-12)

    def test_ratio_one(self):
        assert av.avuc_loss(counts_of(1.0, 0.5, 0.5, 0.0)).item() == pytest.approx(np.log(2), abs=1e-9)

    def test_hand_value(self):
        val = av.avuc_loss(counts_of(0.72, 0.1, 0.05, 0.2)).item()
        assert val == pytest.approx(np.log(1 + 0.15 / 0.92), abs=1e-9)
        assert val == pytest.approx(0.15104, abs=5e-6)

    def test_empty_denominator_is_guarded(self):
        assert np.isfinite(av.avuc_loss(counts_of(0.0, 1.0, 0.0, 0.0)).item())

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(1e-3, 10), min_size=4, max_size=4))
    def test_equals_minus_log_avu(self, v):
        c = counts_of(*v)
        tol = 2e-10 / (v[0] + v[3]) + 1e-12
        assert av.avuc_loss(c).item() == pytest.approx(-np.log(av.avu(av.AvuCounts(*v, 0.5))), abs=tol)

    def test_monotonicity_in_uncertainty(self):
        p = dc.constant([0.9, 0.8, 0.4, 0.3])
        u = dc.parameter([0.1, 0.2, 0.9, 0.3])
        correct = [True, True, False, False]
        dc.backward(av.avuc_loss(av.soft_counts_from(p, u, correct, u_th=0.5)))
        assert u.grad[0] > 0 and u.grad[1] > 0   # accurate-certain: more uncertainty hurts
        assert u.grad[2] < 0                     # inaccurate-uncertain: more uncertainty helps


class TestAuAvuc:
    def make(self, seed, n=60, K=3):
        rng = np.random.default_rng(seed)
        z = dc.parameter(rng.normal(0, 2, (n, K)))
        return z, rng.integers(0, K, n)

    def test_two_point_grid_is_endpoint_average(self):
        z, y = self.make(0)
        probs = dc.softmax(z)
        u = av.predictive_entropy_node(probs).value
        ends = []
        for th in (u.min(), u.max()):
            c = av.soft_counts(probs, y, th)
            ends.append(av._soft_avu(c).item())
        loss = av.au_avuc_loss(probs, y, t_grid=[0.0, 1.0]).item()
        assert loss == pytest.approx(-np.log(np.mean(ends) + 1e-10), abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_grid_refinement(self, seed):
        z, y = self.make(seed, n=200)
        probs = dc.softmax(z)
        coarse = np.exp(-av.au_avuc_loss(probs, y).item())
        fine = np.exp(-av.au_avuc_loss(probs, y, np.linspace(0, 1, 2001)).item())
        assert abs(coarse - fine) < 1e-3

    def test_saturated_calibrated_batch(self):
        probs = dc.constant(np.array([[1.0, 0.0], [0.0, 1.0], [1.0 - 1e-9, 1e-9]]))
        assert av.au_avuc_loss(probs, [0, 1, 0]).item() == pytest.approx(0.0, abs=1e-6)

    def test_degenerate_falls_back(self):
        probs = dc.constant(np.full((3, 2), 0.5))
        expected = av.avuc_loss(av.soft_counts(probs, [0, 1, 0], np.log(2))).item()
        assert av.au_avuc_loss(probs, [0, 1, 0]).item() == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_non_negative(self, seed):
        z, y = self.make(seed, n=20)
        assert av.au_avuc_loss(dc.softmax(z), y).item() >= 0

    def test_bad_grid(self):
        z, y = self.make(0)
        with pytest.raises(ValueError):
            av.au_avuc_loss(dc.softmax(z), y, [0.5])
        with pytest.raises(ValueError):
            av.au_avuc_loss(dc.softmax(z), y, [0.0, 0.6, 0.4])

    def test_area_in_unit_interval(self):
        z, y = self.make(4, n=100)
        probs = dc.softmax(z)
        assert 0.0 <= np.exp(-av.au_avuc_loss(probs, y).item()) <= 1.0


class TestLikelihood:
    def test_uniform_logits(self):
        assert av.cross_entropy_loss(dc.constant(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(np.log(4))
        assert av.cross_entropy_loss(dc.constant(np.zeros((2, 10))), [9, 0]).item() == pytest.approx(np.log(10))

    def test_large_margin(self):
        assert av.cross_entropy_loss(dc.constant([[50.0, 0.0]]), [0]).item() < 1e-20

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            av.cross_entropy_loss(dc.constant(np.zeros((2, 3))), [0, 3])
        with pytest.raises(ValueError):
            av.elbo_loss([dc.constant(np.zeros((2, 3)))], [-1, 0], None, 0.0)

    def test_elbo_without_kl_is_cross_entropy(self):
        logits = dc.constant(np.random.default_rng(0).normal(size=(7, 3)))
        y = [0, 1, 2, 0, 1, 2, 0]
        a = av.elbo_loss([logits], y, dc.constant(5.0), 0.0).item()
        assert a == pytest.approx(av.cross_entropy_loss(logits, y).item(), abs=1e-12)

    def test_elbo_nll_term_matches_metrics(self):
        logits = np.random.default_rng(1).normal(size=(9, 4))
        y = np.arange(9) % 4
        from avucal.uncertainty import softmax_np
        a = av.elbo_loss([dc.constant(logits)], y, None, 0.0).item()
        assert a == pytest.approx(metrics.nll(softmax_np(logits), y), abs=1e-9)

    def test_elbo_adds_scaled_kl(self):
        logits = [dc.constant(np.zeros((2, 2))), dc.constant(np.ones((2, 2)))]
        a = av.elbo_loss(logits, [0, 1], dc.constant(4.0), 0.25).item()
        assert a == pytest.approx(np.log(2) + 1.0, abs=1e-12)


class TestTotalLoss:
    def test_beta_zero_identity(self):
        e = dc.constant(1.3)
        assert av.total_loss(e, dc.constant(9.0), 0.0).item() == 1.3

    def test_hand_value(self):
        assert av.total_loss(dc.constant(1.0), dc.constant(0.5), 3.0).item() == 2.5

    def test_negative_beta(self):
        with pytest.raises(ValueError):
            av.total_loss(dc.constant(1.0), dc.constant(0.5), -1.0)

    def test_gradient_linearity(self):
        rng = np.random.default_rng(3)
        model = BnnModel.create([3, 5, 3], seed=1, rho_init=-2.0)
        x, y = rng.normal(size=(12, 3)), rng.integers(0, 3, 12)
        seeds = [11, 12]
        params = model.parameters()
        grads = []
        for j in range(3):
            dc.zero_grad(params)
            dc.backward(mlp_losses(model, x, y, seeds, 0.6, 0.01, beta=3.0)[j])
            grads.append([p.grad.copy() for p in params])
        for ge, ga, gt in zip(*grads):
            np.testing.assert_allclose(gt, ge + 3.0 * ga, rtol=0, atol=1e-10)
