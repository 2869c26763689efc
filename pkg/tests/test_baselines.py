"""Gibbs samplers and mean-field baselines."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from models.joint import GammaBetaPriors, poislog_synth, synth_logistic
from tools.baselines import (
    GibbsState, gamma_beta_initial, jj_bound, mfvi_logistic_diag, mfvi_logistic_full, mfvi_poislog,
    nb_gibbs, nb_gibbs_step, pg_gibbs, point_mixer_posterior, poislog_gibbs, run_chain, update_lambda,
)
from tools.distributions import RngStream
from tools.errors import NonFiniteError

INFORMATIVE = GammaBetaPriors(a=2.0, b=1.0, alpha=3.0, beta=4.0)


@pytest.fixture(scope="module")
def poislog_data():
    return poislog_synth(2.0, 0.5, 300, RngStream(31))


@pytest.fixture(scope="module")
def logistic_data():
    return synth_logistic(500, 2, RngStream(32), beta=np.array([0.5, 2.0, -1.0]))


class TestChainDriver:
    def test_shapes_and_thinning(self):
        calls = []

        def step(state):
            calls.append(state.iteration)
            return state.advance(x=np.array([state.iteration, -state.iteration], dtype=float))

        draws = run_chain(step, GibbsState({"x": np.zeros(2)}), draws=4, burn_in=3, thin=2)
        assert draws.shape == (4, 2)
        assert len(calls) == 3 + 4 * 2
        assert_allclose(draws[:, 0], [4.0, 6.0, 8.0, 10.0])

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            run_chain(lambda s: s, GibbsState({"x": np.zeros(1)}), draws=1, thin=0)

    def test_non_finite_draws(self):
        with pytest.raises(NonFiniteError):
            run_chain(lambda s: s.advance(x=np.array([np.nan])), GibbsState({"x": np.zeros(1)}),
                      draws=2, burn_in=0)

    def test_step_streams_follow_iteration(self):
        state = gamma_beta_initial(5)
        assert state.step_rng().path == (0,)
        assert state.advance().step_rng().path == (1,)


class TestGammaBetaGibbs:
    def test_no_data_recovers_the_prior(self):
        draws = nb_gibbs(np.zeros(0), INFORMATIVE, seed=1, burn_in=5, draws=6000)
        assert_allclose(draws[:, 0].mean(), 2.0, atol=0.1)
        assert_allclose(draws[:, 0].var(), 2.0, rtol=0.15)
        assert_allclose(draws[:, 1].mean(), 3.0 / 7.0, atol=0.01)

    def test_same_seed_same_chain(self, mites_counts):
        a = nb_gibbs(mites_counts, seed=3, burn_in=10, draws=50)
        b = nb_gibbs(mites_counts, seed=3, burn_in=10, draws=50)
        assert_allclose(a, b, rtol=0, atol=0)

    def test_red_mites_posterior(self, mites_counts):
        draws = nb_gibbs(mites_counts, seed=4, burn_in=500, draws=2000)
        r, p = draws[:, 0], draws[:, 1]
        assert 0.6 < r.mean() < 1.6
        assert 0.4 < p.mean() < 0.65
        assert np.all((p > 0) & (p < 1))

    def test_poislog_recovers_truth(self, poislog_data):
        draws = poislog_gibbs(poislog_data.x[:, 0], poislog_data.x[:, 1], seed=5, burn_in=300, draws=2000)
        assert abs(draws[:, 0].mean() - 2.0) < 0.6
        assert abs(draws[:, 1].mean() - 0.5) < 0.1

    def test_single_sweep_uses_step_stream(self, mites_counts):
        state = gamma_beta_initial(6)
        a = nb_gibbs_step(state, mites_counts, GammaBetaPriors())
        b = nb_gibbs_step(state, mites_counts, GammaBetaPriors(), rng=state.step_rng())
        assert a["r"] == b["r"] and a["p"] == b["p"]
        assert a.iteration == 1


class TestPolyaGammaGibbs:
    def test_recovers_coefficients(self, logistic_data):
        draws = pg_gibbs(logistic_data.x, logistic_data.y, seed=7, burn_in=200, draws=1000)
        assert draws.shape == (1000, 3)
        assert_allclose(draws.mean(axis=0), [0.5, 2.0, -1.0], atol=0.6)

    def test_separable_sign(self):
        x = np.linspace(-2.0, 2.0, 40)
        X = np.column_stack([np.ones_like(x), x])
        y = (x > 0).astype(float)
        draws = pg_gibbs(X, y, alpha_prior=0.01, seed=8, burn_in=200, draws=500)
        assert np.mean(draws[:, 1] > 0) > 0.95


class TestLogisticMfvi:
    def test_bounds_never_decrease(self, logistic_data):
        for fit in (mfvi_logistic_full, mfvi_logistic_diag):
            state = fit(logistic_data.x, logistic_data.y, max_iters=500, tol=1e-8)
            trace = np.asarray(state.bound_trace)
            assert state.converged
            assert np.all(np.diff(trace) >= -1e-8 * np.maximum(1.0, np.abs(trace[1:])))

    def test_full_dominates_diag(self, logistic_data):
        full = mfvi_logistic_full(logistic_data.x, logistic_data.y)
        diag = mfvi_logistic_diag(logistic_data.x, logistic_data.y)
        assert full.bound >= diag.bound - 1e-6
        assert np.all(diag.var <= np.diag(full.cov) * (1.0 + 1e-6))

    def test_full_mean_near_gibbs(self, logistic_data):
        full = mfvi_logistic_full(logistic_data.x, logistic_data.y)
        draws = pg_gibbs(logistic_data.x, logistic_data.y, seed=9, burn_in=200, draws=1000)
        assert_allclose(full.mu, draws.mean(axis=0), atol=0.3)

    def test_lambda_is_root_second_moment(self):
        X = np.array([[1.0, 2.0], [0.0, 1.0]])
        mu, cov = np.array([0.5, -1.0]), np.array([[0.2, 0.05], [0.05, 0.1]])
        second = cov + np.outer(mu, mu)
        expected = np.sqrt([x @ second @ x for x in X])
        assert_allclose(update_lambda(X, mu, cov), expected)

    def test_bound_is_below_evidence_estimate(self):
        # log evidence by Monte Carlo over the prior on a tiny problem
        X = np.array([[1.0, 0.3], [1.0, -1.2], [1.0, 0.8]])
        y = np.array([1.0, 0.0, 1.0])
        alpha = 1.0
        state = mfvi_logistic_full(X, y, alpha_prior=alpha)
        beta = RngStream(10).normal((200000, 2))
        loglik = (y * (beta @ X.T) - np.logaddexp(0.0, beta @ X.T)).sum(axis=1)
        log_evidence = np.log(np.mean(np.exp(loglik)))
        assert jj_bound(X, y, alpha, state.mu, state.cov, state.lam) <= log_evidence + 1e-3

    def test_samples_follow_covariance(self, logistic_data):
        state = mfvi_logistic_full(logistic_data.x, logistic_data.y)
        draws = state.sample(RngStream(11), 40000)
        assert_allclose(np.cov(draws.T), state.cov, atol=0.05 * np.max(np.abs(state.cov)))


class TestGammaBetaMfvi:
    def test_point_mixer_starts_at_unit_parameters(self):
        post = point_mixer_posterior()
        psi = post.mixer.push(np.zeros((3, 1))).data
        assert_allclose(psi, 0.0)
        assert post.z_names == ["r", "p"]

    def test_agrees_with_gibbs(self, poislog_data):
        n, l = poislog_data.x[:, 0], poislog_data.x[:, 1]
        fit = mfvi_poislog(n, l, iterations=1500, seed=12)
        params = fit.params
        gibbs = poislog_gibbs(n, l, seed=13, burn_in=300, draws=3000)
        assert_allclose(params["a_tilde"] / params["b_tilde"], gibbs[:, 0].mean(), rtol=0.2)
        assert_allclose(params["alpha_tilde"] / (params["alpha_tilde"] + params["beta_tilde"]),
                        gibbs[:, 1].mean(), atol=0.05)
        draws = fit.sample(RngStream(14), 100)
        assert draws.shape == (100, 2)
