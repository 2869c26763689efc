"""Family log-densities, samplers, closed-form moments and the auxiliary Gibbs samplers."""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import special, stats

from tools import ndcore as nd
from tools.distributions import (
    DistSpec, Family, RngStream, beta_expected_logs, crt_sample, entropy, gamma_expected_log,
    gamma_mean, logpdf, pg_moments, polya_gamma_sample, rsample, sample,
)
from tools.errors import NotReparameterizableError


class TestRngStream:
    def test_substreams_independent_of_parent_consumption(self):
        a = RngStream(5)
        b = RngStream(5)
        a.normal(100)
        assert_allclose(a.substream(3).normal(4), b.substream(3).normal(4))

    def test_distinct_substreams_differ(self):
        root = RngStream(5)
        assert not np.allclose(root.substream(0).normal(4), root.substream(1).normal(4))

    def test_seed_reproducible(self):
        assert_allclose(RngStream(9, (1, 2)).uniform(3), RngStream(9).substream(1).substream(2).uniform(3))


class TestLogpdf:
    z = np.array([[0.3, 1.7], [2.2, 0.05]])

    def test_mvn_diag(self):
        spec = DistSpec.mvn_diag(np.array([0.1, -0.2]), np.array([0.5, 2.0]))
        expected = stats.norm.logpdf(self.z, [0.1, -0.2], np.sqrt([0.5, 2.0])).sum(axis=-1)
        assert_allclose(logpdf(spec, self.z).data, expected)

    def test_mvn_full(self):
        L = np.array([[1.2, 0.0], [0.4, 0.7]])
        mean = np.array([0.5, -1.0])
        expected = stats.multivariate_normal(mean, L @ L.T).logpdf(self.z)
        assert_allclose(logpdf(DistSpec.mvn_full(mean, L), self.z).data, expected)

    def test_log_normal(self):
        spec = DistSpec.log_normal(np.array([0.2]), np.array([0.3]))
        x = self.z[:, :1]
        expected = stats.lognorm.logpdf(x[:, 0], s=np.sqrt(0.3), scale=np.exp(0.2))
        assert_allclose(logpdf(spec, x).data, expected)

    def test_logit_normal(self):
        spec = DistSpec.logit_normal(np.array([0.4]), np.array([1.5]))
        p = np.array([[0.2], [0.9]])
        u = special.logit(p[:, 0])
        expected = stats.norm.logpdf(u, 0.4, np.sqrt(1.5)) - np.log(p[:, 0] * (1 - p[:, 0]))
        assert_allclose(logpdf(spec, p).data, expected)

    def test_gamma(self):
        spec = DistSpec.gamma(np.array([2.5, 0.7]), np.array([1.3, 4.0]))
        expected = stats.gamma.logpdf(self.z, [2.5, 0.7], scale=1.0 / np.array([1.3, 4.0])).sum(axis=-1)
        assert_allclose(logpdf(spec, self.z).data, expected)

    def test_beta(self):
        spec = DistSpec.beta(np.array([2.0]), np.array([3.5]))
        p = np.array([[0.1], [0.65]])
        assert_allclose(logpdf(spec, p).data, stats.beta.logpdf(p[:, 0], 2.0, 3.5))

    def test_neg_binomial(self):
        spec = DistSpec.neg_binomial(np.array([1.7]), np.array([0.3]))
        k = np.array([[0.0], [3.0], [11.0]])
        # scipy counts failures with success probability 1 - p
        expected = stats.nbinom.logpmf(k[:, 0], 1.7, 0.7)
        assert_allclose(logpdf(spec, k).data, expected)

    def test_bernoulli_logit(self):
        logits = np.array([0.3, -2.0, 4.0])
        y = np.array([1.0, 0.0, 1.0])
        expected = np.sum(y * np.log(special.expit(logits)) + (1 - y) * np.log(special.expit(-logits)))
        assert_allclose(logpdf(DistSpec.bernoulli_logit(logits), y).item(), expected)

    def test_out_of_support_is_minus_inf(self):
        assert logpdf(DistSpec.log_normal(0.0, 1.0), np.array([-1.0])).item() == -np.inf
        assert logpdf(DistSpec.gamma(1.0, 1.0), np.array([0.0])).item() == -np.inf
        assert logpdf(DistSpec.beta(1.0, 1.0), np.array([1.5])).item() == -np.inf
        assert logpdf(DistSpec.neg_binomial(2.0, 0.5), np.array([1.5])).item() == -np.inf

    def test_nan_parameter_raises(self):
        with pytest.raises(ValueError):
            logpdf(DistSpec.mvn_diag(np.nan, 1.0), np.zeros(1))

    def test_wrong_parameter_names(self):
        with pytest.raises(ValueError):
            DistSpec(Family.GAMMA, {"shape": 1.0, "scale": 1.0})

    def test_gradient_wrt_parameters(self):
        z = np.array([0.4, 1.9])

        def f(v):
            return logpdf(DistSpec.gamma(nd.exp(v[:1]), nd.exp(v[1:])), z[:, None])

        tape = nd.Tape()
        v0 = np.array([0.3, -0.2])
        analytic = nd.grad(tape, nd.tsum(f(tape.watch(v0, "v"))))["v"]
        numeric = nd.finite_diff_grad(lambda v: float(np.sum(f(v).data)), v0)
        assert_allclose(analytic, numeric, rtol=1e-6)


class TestSampling:
    def test_rsample_mvn_diag(self):
        spec = DistSpec.mvn_diag(np.array([1.0, -1.0]), np.array([4.0, 0.25]))
        out = rsample(spec, np.array([[1.0, 2.0]])).data
        assert_allclose(out, [[3.0, 0.0]])

    def test_rsample_mvn_full(self):
        L = np.array([[2.0, 0.0], [1.0, 3.0]])
        out = rsample(DistSpec.mvn_full(np.zeros(2), L), np.array([[1.0, 1.0]])).data
        assert_allclose(out, [[2.0, 4.0]])

    def test_rsample_rejects_gamma_and_beta(self):
        with pytest.raises(NotReparameterizableError):
            rsample(DistSpec.gamma(1.0, 1.0), np.zeros(1))
        with pytest.raises(NotReparameterizableError):
            rsample(DistSpec.beta(1.0, 1.0), np.zeros(1))

    def test_reparameterizable_flag(self):
        assert DistSpec.logit_normal(0.0, 1.0).reparameterizable
        assert not DistSpec.beta(1.0, 1.0).reparameterizable

    @pytest.mark.parametrize("spec, mean", [
        (DistSpec.gamma(2.0, 3.0), 2.0 / 3.0),
        (DistSpec.beta(2.0, 6.0), 0.25),
        (DistSpec.neg_binomial(3.0, 0.4), 3.0 * 0.4 / 0.6),
        (DistSpec.log_normal(0.0, 0.5), np.exp(0.25)),
    ])
    def test_sample_means(self, spec, mean):
        draws = sample(spec, RngStream(11), size=(40000,))
        assert draws.shape == (40000,)
        assert abs(draws.mean() - mean) < 0.03 * max(mean, 1.0)

    def test_sample_validates(self):
        with pytest.raises(ValueError):
            sample(DistSpec.gamma(-1.0, 1.0), RngStream(0))
        with pytest.raises(ValueError):
            sample(DistSpec.neg_binomial(1.0, 1.0), RngStream(0))


class TestMoments:
    def test_gamma_moments(self):
        spec = DistSpec.gamma(np.array([2.5]), np.array([0.5]))
        assert_allclose(gamma_mean(spec).data, [5.0])
        assert_allclose(gamma_expected_log(spec).data, special.digamma(2.5) - np.log(0.5))

    def test_beta_expected_logs_by_sampling(self):
        spec = DistSpec.beta(np.array([3.0]), np.array([1.5]))
        e_log_p, e_log_q = beta_expected_logs(spec)
        draws = RngStream(2).generator.beta(3.0, 1.5, size=200000)
        assert_allclose(e_log_p.data, np.log(draws).mean(), atol=5e-3)
        assert_allclose(e_log_q.data, np.log1p(-draws).mean(), atol=5e-3)

    @pytest.mark.parametrize("spec, frozen", [
        (DistSpec.gamma(np.array([1.7]), np.array([2.3])), stats.gamma(1.7, scale=1 / 2.3)),
        (DistSpec.beta(np.array([0.6]), np.array([4.0])), stats.beta(0.6, 4.0)),
        (DistSpec.mvn_diag(np.array([0.0]), np.array([0.2])), stats.norm(0.0, np.sqrt(0.2))),
    ])
    def test_entropy(self, spec, frozen):
        assert_allclose(entropy(spec).item(), frozen.entropy())


class TestPolyaGamma:
    def test_moments_at_zero(self):
        mean, var = pg_moments(np.array([0.0]))
        assert_allclose(mean, [0.25])
        assert_allclose(var, [1.0 / 24.0])

    def test_moments_continuous_at_threshold(self):
        below, _ = pg_moments(np.array([0.999e-3]))
        above, _ = pg_moments(np.array([1.001e-3]))
        assert_allclose(below, above, rtol=1e-6)

    @pytest.mark.parametrize("c", [0.0, 1.5, 6.0])
    def test_sample_mean_and_variance(self, c):
        draws = polya_gamma_sample(np.full(40000, c), RngStream(3), trunc=5)
        mean, var = pg_moments(np.array([c]))
        assert np.all(draws > 0)
        assert_allclose(draws.mean(), mean[0], rtol=0.02)
        assert_allclose(draws.var(), var[0], rtol=0.1)

    def test_single_term_is_moment_matched(self):
        draws = polya_gamma_sample(np.full(40000, 2.0), RngStream(4), trunc=1)
        mean, _ = pg_moments(np.array([2.0]))
        assert_allclose(draws.mean(), mean[0], rtol=0.02)

    def test_invalid_truncation(self):
        with pytest.raises(ValueError):
            polya_gamma_sample(1.0, RngStream(0), trunc=0)


class TestCrt:
    def test_zero_and_one_customers(self):
        out = crt_sample(np.array([0, 1, 0, 1]), 0.8, RngStream(0))
        assert_allclose(out, [0, 1, 0, 1])

    def test_bounds(self):
        n = np.array([5, 20, 3])
        out = crt_sample(n, 2.0, RngStream(1))
        assert np.all(out >= 1) and np.all(out <= n)

    def test_expected_tables(self):
        r, n = 1.5, 12
        draws = crt_sample(np.full(20000, n), r, RngStream(2))
        expected = np.sum(r / (r + np.arange(n)))
        assert_allclose(draws.mean(), expected, rtol=0.02)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            crt_sample(np.array([-1]), 1.0, RngStream(0))
        with pytest.raises(ValueError):
            crt_sample(np.array([2]), 0.0, RngStream(0))
