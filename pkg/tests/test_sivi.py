"""Semi-implicit posterior: bounds, regularizers, sampling, serialization, training."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from flows.sivi import (
    ConditionalBlock, ExplicitConditional, NoiseFamily, build_posterior, correction_A_K, iw_lower_bound,
    load_posterior, lower_bound_K, mixer_spread, posterior_draws, regularizer_B_K, save_posterior,
    upper_bound_K,
)
from flows.training import TrainConfig, constant_schedule, ramp_schedule, train
from models.joint import ModelRef, ModelTag, ToyModel
from tests.conftest import gaussian_posterior
from tools import ndcore as nd
from tools.diagnostics import GaussianSandwichCase, gaussian_oracle
from tools.distributions import Family, RngStream
from tools.errors import NotReparameterizableError, ShapeError, TrainingDiverged


class TestGaussianSandwich:
    """q(z) = N(0, 1) built as N(psi, 0.5) with psi ~ N(0, 0.5), against a N(0, 1) target."""

    oracle = gaussian_oracle(GaussianSandwichCase(sigma_sq=0.5, tau_sq=0.5))

    def test_lower_bound_at_zero_components(self, sanity_posterior, standard_normal_model):
        est = lower_bound_K(sanity_posterior, standard_normal_model, K=0, J=20000, rng=RngStream(1))
        assert_allclose(est.value, self.oracle.lower, atol=0.02)
        assert est.standard_error < 0.01

    def test_upper_bound_at_one_component(self, sanity_posterior, standard_normal_model):
        # the single component is shared by all j, so average over independent replicates
        root = RngStream(2)
        values = [upper_bound_K(sanity_posterior, standard_normal_model, K=1, J=5, rng=root.substream(r)).value
                  for r in range(4000)]
        assert_allclose(np.mean(values), self.oracle.upper, atol=0.05)

    def test_lower_bound_tightens_with_K(self, sanity_posterior, standard_normal_model):
        loose = lower_bound_K(sanity_posterior, standard_normal_model, K=0, J=5000, rng=RngStream(3))
        tight = lower_bound_K(sanity_posterior, standard_normal_model, K=100, J=5000, rng=RngStream(3))
        assert tight.value > loose.value + 0.2
        assert tight.value < self.oracle.elbo + 0.05

    def test_upper_bound_decreases_in_K(self, sanity_posterior, standard_normal_model):
        # common noise per replicate: the K components are nested as K grows
        Ks = [1, 2, 4, 8, 16]
        root = RngStream(4)
        values = np.array([[upper_bound_K(sanity_posterior, standard_normal_model, K=K, J=50,
                                          rng=root.substream(r)).value for K in Ks]
                           for r in range(300)])
        diffs = np.diff(values, axis=1)
        se = diffs.std(axis=0, ddof=1) / np.sqrt(values.shape[0])
        assert np.all(diffs.mean(axis=0) <= 2.0 * se)

    def test_sandwich_closes_at_many_components(self, sanity_posterior, standard_normal_model):
        root = RngStream(40)
        lower, upper = [], []
        for r in range(150):
            lower.append(lower_bound_K(sanity_posterior, standard_normal_model, K=100, J=20,
                                       rng=root.substream(r)).value)
            upper.append(upper_bound_K(sanity_posterior, standard_normal_model, K=100, J=20,
                                       rng=root.substream(r)).value)
        lower, upper = np.mean(lower), np.mean(upper)
        assert_allclose(upper, self.oracle.elbo, atol=0.05)
        assert_allclose(lower, self.oracle.elbo, atol=0.05)
        assert abs(lower - upper) <= 0.1
        assert lower <= upper

    def test_importance_weighted_bound_at_many_components(self, sanity_posterior, standard_normal_model):
        root = RngStream(41)
        values = np.array([[iw_lower_bound(sanity_posterior, standard_normal_model, K=100, Ktilde=Kt,
                                           J_outer=10, rng=root.substream(r)).value for Kt in (1, 5, 10)]
                           for r in range(100)])
        assert_allclose(values[:, 2].mean(), self.oracle.elbo, atol=0.05)
        diffs = np.diff(values, axis=1)
        se = diffs.std(axis=0, ddof=1) / np.sqrt(values.shape[0])
        assert np.all(diffs.mean(axis=0) >= -3.0 * se)

    def test_oracle_values(self):
        assert_allclose(self.oracle.elbo, 0.0, atol=1e-12)
        assert_allclose(self.oracle.lower, -0.34657, atol=1e-5)
        assert_allclose(self.oracle.upper, 0.65343, atol=1e-5)


class TestBoundIdentities:
    def test_importance_weighted_single_sample_equals_lower_bound(self, sanity_posterior, standard_normal_model):
        lb = lower_bound_K(sanity_posterior, standard_normal_model, K=5, J=40, rng=RngStream(4))
        iw = iw_lower_bound(sanity_posterior, standard_normal_model, K=5, Ktilde=1, J_outer=40, rng=RngStream(4))
        assert iw.value == lb.value
        assert iw.Ktilde_used == 1

    def test_importance_weighting_raises_the_bound(self, sanity_posterior, standard_normal_model):
        one = iw_lower_bound(sanity_posterior, standard_normal_model, K=0, Ktilde=1, J_outer=2000,
                             rng=RngStream(5))
        many = iw_lower_bound(sanity_posterior, standard_normal_model, K=0, Ktilde=20, J_outer=2000,
                              rng=RngStream(5))
        assert many.value > one.value

    def test_regularizer_vanishes_without_components(self, sanity_posterior):
        assert regularizer_B_K(sanity_posterior, K=0, J=100, rng=RngStream(6)) == 0.0

    def test_correction_vanishes_with_one_component(self, sanity_posterior):
        assert correction_A_K(sanity_posterior, K=1, J=100, rng=RngStream(6)) == 0.0

    def test_correction_is_non_negative(self, sanity_posterior):
        assert correction_A_K(sanity_posterior, K=20, J=200, rng=RngStream(7)) >= 0.0

    def test_regularizer_approaches_mutual_information(self, sanity_posterior):
        b = regularizer_B_K(sanity_posterior, K=50, J=4000, rng=RngStream(8))
        # I(z; psi) = 0.5 log(s^2 / sigma^2) = 0.5 log 2
        assert 0.2 < b < 0.4

    def test_point_mixer_is_degenerate(self, point_posterior):
        assert_allclose(regularizer_B_K(point_posterior, K=30, J=50, rng=RngStream(9)), 0.0, atol=1e-12)
        assert_allclose(correction_A_K(point_posterior, K=30, J=50, rng=RngStream(9)), 0.0, atol=1e-12)
        assert mixer_spread(point_posterior, RngStream(9)) == 0.0

    @pytest.mark.parametrize("K", [1, 30])
    def test_point_mixer_bound_ignores_K(self, point_posterior, standard_normal_model, K):
        flat = lower_bound_K(point_posterior, standard_normal_model, K=0, J=40, rng=RngStream(9))
        mixed = lower_bound_K(point_posterior, standard_normal_model, K=K, J=40, rng=RngStream(9))
        assert mixed.value == flat.value
        assert_allclose(mixed.per_sample_terms, flat.per_sample_terms, rtol=0, atol=0)

    def test_upper_bound_needs_components(self, sanity_posterior, standard_normal_model):
        with pytest.raises(ValueError):
            upper_bound_K(sanity_posterior, standard_normal_model, K=0)

    def test_invalid_sizes(self, sanity_posterior, standard_normal_model):
        with pytest.raises(ValueError):
            lower_bound_K(sanity_posterior, standard_normal_model, K=-1)
        with pytest.raises(ValueError):
            lower_bound_K(sanity_posterior, standard_normal_model, J=0)
        with pytest.raises(ValueError):
            iw_lower_bound(sanity_posterior, standard_normal_model, Ktilde=0)
        with pytest.raises(ValueError):
            correction_A_K(sanity_posterior, K=0)

    def test_same_stream_same_value(self, sanity_posterior, standard_normal_model):
        a = lower_bound_K(sanity_posterior, standard_normal_model, K=10, J=30, rng=RngStream(10))
        b = lower_bound_K(sanity_posterior, standard_normal_model, K=10, J=30, rng=RngStream(10))
        assert a.value == b.value
        assert_allclose(a.per_sample_terms, b.per_sample_terms, rtol=0, atol=0)

    def test_gamma_beta_conditional_needs_conjugate_path(self, nb_model):
        post = build_posterior(ExplicitConditional([ConditionalBlock(Family.GAMMA), ConditionalBlock(Family.BETA)]),
                               [4], 2, seed=1)
        with pytest.raises(NotReparameterizableError):
            lower_bound_K(post, nb_model, K=2, J=5)


class TestPathwiseGradients:
    def _check(self, post, model, K, batch=None):
        def value(phi, xi):
            est = lower_bound_K(post.with_params(phi, xi), model, batch=batch, K=K, J=6, rng=RngStream(11))
            return est.value

        tape = nd.Tape()
        est = lower_bound_K(post, model, batch=batch, K=K, J=6, rng=RngStream(11), tape=tape)
        grads = nd.grad(tape, est.tensor)
        phi0, xi0 = post.phi.data, post.xi.data
        num_phi = nd.finite_diff_grad(lambda v: value(v, xi0), phi0, step=1e-6)
        assert_allclose(grads["phi"], num_phi, rtol=1e-4, atol=1e-6)
        if xi0.size:
            num_xi = nd.finite_diff_grad(lambda v: value(phi0, v), xi0, step=1e-6)
            assert_allclose(grads["xi"], num_xi, rtol=1e-4, atol=1e-6)

    def test_learned_variance_on_banana(self):
        post = build_posterior(ExplicitConditional([ConditionalBlock(Family.MVN_DIAG, 2)]), [5], 3, seed=2)
        self._check(post, ToyModel("banana"), K=4)

    def test_full_covariance(self):
        conditional = ExplicitConditional([ConditionalBlock(Family.MVN_FULL, 2)])
        post = build_posterior(conditional, [4], 3, seed=3)
        post = post.with_params(post.phi.data, np.array([0.3, -0.2, 0.1]))
        self._check(post, ToyModel("x_shaped"), K=3)

    def test_log_and_logit_normal_on_counts(self, nb_model):
        conditional = ExplicitConditional([ConditionalBlock(Family.LOG_NORMAL, variance=0.01),
                                           ConditionalBlock(Family.LOGIT_NORMAL, variance=0.01)])
        post = build_posterior(conditional, [4], 2, seed=4)
        self._check(post, nb_model, K=2, batch=np.arange(0, 150, 3))


class TestPosterior:
    def test_draw_shapes_and_moments(self, sanity_posterior):
        draws = posterior_draws(sanity_posterior, RngStream(12), 20000)
        assert draws.shape == (20000, 1)
        assert_allclose(draws.mean(), 0.0, atol=0.03)
        assert_allclose(draws.var(), 1.0, atol=0.05)

    def test_zero_draws(self, sanity_posterior):
        assert posterior_draws(sanity_posterior, RngStream(0), 0).shape == (0, 1)

    def test_gamma_beta_draws_in_support(self):
        post = build_posterior(ExplicitConditional([ConditionalBlock(Family.GAMMA), ConditionalBlock(Family.BETA)]),
                               [4], 2, seed=5, z_names=["r", "p"])
        draws = posterior_draws(post, RngStream(13), 500)
        assert np.all(draws[:, 0] > 0)
        assert np.all((draws[:, 1] > 0) & (draws[:, 1] < 1))

    def test_pepper_salt_noise(self):
        post = gaussian_posterior(noise=NoiseFamily.PEPPER_SALT)
        eps = post.mixer.sample_noise(RngStream(14), 200)
        assert set(np.unique(eps)) == {-1.0, 1.0}

    def test_shape_mismatch(self):
        conditional = ExplicitConditional([ConditionalBlock(Family.MVN_DIAG, 2)])
        post = build_posterior(conditional, [3], 2)
        with pytest.raises(ShapeError):
            type(post)(post.mixer, ExplicitConditional([ConditionalBlock(Family.MVN_DIAG, 3)]),
                       post.xi, 0, [])

    def test_default_names(self):
        post = build_posterior(ExplicitConditional([ConditionalBlock(Family.MVN_DIAG, 3)]), [2], 2)
        assert post.z_names == ["z1", "z2", "z3"]

    def test_save_and_load(self, tmp_path):
        conditional = ExplicitConditional([ConditionalBlock(Family.LOG_NORMAL, variance=0.01),
                                           ConditionalBlock(Family.LOGIT_NORMAL)])
        post = build_posterior(conditional, [6, 3], 4, NoiseFamily.PEPPER_SALT, seed=6, z_names=["r", "p"])
        path = save_posterior(post, tmp_path / "nested" / "posterior.json")
        loaded = load_posterior(path)
        assert loaded.z_names == ["r", "p"]
        assert loaded.mixer.noise == NoiseFamily.PEPPER_SALT
        assert_allclose(loaded.phi.data, post.phi.data, rtol=0, atol=0)
        assert_allclose(posterior_draws(loaded, RngStream(15), 50), posterior_draws(post, RngStream(15), 50))

    def test_unknown_format_version(self, tmp_path, sanity_posterior):
        path = save_posterior(sanity_posterior, tmp_path / "p.json")
        path.write_text(path.read_text().replace('"format_version": 1', '"format_version": 99'))
        with pytest.raises(ValueError):
            load_posterior(path)


class _NanModel(ModelRef):
    tag = ModelTag.TOY
    z_names = ["z1"]

    def log_joint_scaled(self, z, batch, scale):
        return nd.tsum(z, axis=-1) * np.nan


class TestTraining:
    def test_ramp_schedule(self):
        schedule = ramp_schedule(100, 100, fraction=0.5)
        values = [schedule(t) for t in range(100)]
        assert values[0] == 1
        assert values[-1] == 100
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert schedule(50) == 100

    def test_zero_ramp_is_constant(self):
        assert ramp_schedule(0, 10)(5) == 0

    def test_schedule_must_not_decrease(self):
        cfg = TrainConfig(iterations=5, k_schedule=lambda t: 5 - t)
        with pytest.raises(ValueError):
            cfg.validate()

    def test_batch_size_range(self):
        with pytest.raises(ValueError):
            TrainConfig(iterations=1, batch_size=20).validate(n_data=10)

    def test_training_moves_towards_target(self, standard_normal_model):
        # start far off: psi centred at 3 with a small spread
        post = gaussian_posterior(tau_sq=0.01, m=3.0)
        cfg = TrainConfig(iterations=300, J=20, k_schedule=constant_schedule(5), phi_lr=0.05, seed=1,
                          log_every=0)
        result = train(post, standard_normal_model, cfg)
        assert result.iterations_run == 300
        assert np.all(result.k_trace == 5)
        assert result.spread_trace.shape == (300,)
        assert np.mean(result.trace[-50:]) > np.mean(result.trace[:50]) + 1.0
        assert abs(posterior_draws(result.posterior, RngStream(0), 2000).mean()) < 0.5
        assert_allclose(result.loss_trace, -result.trace)

    def test_training_is_reproducible(self, standard_normal_model):
        cfg = TrainConfig(iterations=20, J=8, k_schedule=ramp_schedule(6, 20), seed=3, log_every=0)
        a = train(build_posterior(ExplicitConditional([ConditionalBlock(Family.MVN_DIAG)]), [4], 2, seed=7),
                  standard_normal_model, cfg)
        b = train(build_posterior(ExplicitConditional([ConditionalBlock(Family.MVN_DIAG)]), [4], 2, seed=7),
                  standard_normal_model, cfg)
        assert_allclose(a.trace, b.trace, rtol=0, atol=0)
        assert_allclose(a.posterior.phi.data, b.posterior.phi.data, rtol=0, atol=0)

    def test_callback_sees_every_iteration(self, sanity_posterior, standard_normal_model):
        seen = []
        train(sanity_posterior, standard_normal_model, TrainConfig(iterations=7, J=4, log_every=0),
              callback=lambda t, value, K: seen.append((t, K)))
        assert seen == [(t, 0) for t in range(7)]

    def test_nan_bound_raises_diverged(self, sanity_posterior):
        with pytest.raises(TrainingDiverged) as info:
            train(sanity_posterior, _NanModel(), TrainConfig(iterations=5, J=4, log_every=0))
        assert info.value.iteration == 0

    def test_minibatched_training_runs(self, nb_model):
        conditional = ExplicitConditional([ConditionalBlock(Family.LOG_NORMAL, variance=0.01),
                                           ConditionalBlock(Family.LOGIT_NORMAL, variance=0.01)])
        post = build_posterior(conditional, [8], 3, seed=8, z_names=["r", "p"])
        cfg = TrainConfig(iterations=10, J=5, k_schedule=constant_schedule(3), batch_size=30, seed=2,
                          log_every=0)
        result = train(post, nb_model, cfg)
        assert np.all(np.isfinite(result.trace))


@pytest.mark.slow
@pytest.mark.parametrize("k_max, collapses", [(0, True), (10, False)])
def test_mixer_spread_without_components(k_max, collapses):
    # on a bimodal target the K = 0 bound rewards a point-mass mixer
    conditional = ExplicitConditional([ConditionalBlock(Family.MVN_DIAG, variance=0.1)])
    post = build_posterior(conditional, [30, 60, 30], 10, seed=11)
    cfg = TrainConfig(iterations=3000, J=50, k_schedule=ramp_schedule(k_max, 3000), phi_lr=0.01, seed=12,
                      log_every=0)
    result = train(post, ToyModel("bimodal"), cfg)
    start, end = result.spread_trace[0], np.mean(result.spread_trace[-100:])
    if collapses:
        assert end < 0.1 * start
    else:
        assert end > 0.5 * start
