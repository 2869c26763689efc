"""Toy targets, log joints, datasets and loaders."""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate, special, stats

from models.joint import (
    DataKind, Dataset, GammaBetaPriors, LogisticModel, PoissonLogModel, ToyModel,
    load_counts, load_logistic_csv, load_pairs_csv, logistic_log_joint, nb_log_joint, poislog_log_joint,
    poislog_synth, predictive_probs, split_dataset, synth_logistic,
)
from models.targets import TOY_DIMS, ToyVariant, toy_target_logpdf, toy_target_sample
from tools import ndcore as nd
from tools.distributions import RngStream
from tools.errors import ShapeError


class TestToyTargets:
    @pytest.mark.parametrize("variant", list(ToyVariant))
    def test_density_integrates_to_one(self, variant):
        d = TOY_DIMS[variant]
        if d == 1:
            grid = np.linspace(-30.0, 30.0, 24001)
            dens = np.exp(toy_target_logpdf(variant, grid[:, None]).data)
            total = integrate.trapezoid(dens, grid)
        else:
            axis = np.linspace(-15.0, 15.0, 601)
            zz = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1)
            dens = np.exp(toy_target_logpdf(variant, zz).data)
            total = integrate.trapezoid(integrate.trapezoid(dens, axis, axis=1), axis)
        assert_allclose(total, 1.0, atol=5e-3)

    def test_laplace_matches_scipy(self):
        z = np.array([[-1.3], [0.0], [4.0]])
        assert_allclose(toy_target_logpdf("laplace", z).data, stats.laplace.logpdf(z[:, 0], scale=2.0))

    def test_gamma_outside_support(self):
        assert toy_target_logpdf("gamma", np.array([[-0.5]])).item() == -np.inf

    def test_wrong_width(self):
        with pytest.raises(ValueError):
            toy_target_logpdf("banana", np.zeros((3, 1)))

    @pytest.mark.parametrize("variant", list(ToyVariant))
    def test_sample_shapes(self, variant):
        draws = toy_target_sample(variant, RngStream(0), 17)
        assert draws.shape == (17, TOY_DIMS[variant])
        assert np.all(np.isfinite(toy_target_logpdf(variant, draws).data))

    def test_bimodal_weights(self):
        draws = toy_target_sample("bimodal", RngStream(1), 20000)
        assert_allclose(np.mean(draws[:, 0] > 0), 0.7, atol=0.02)


class TestLogJoints:
    def test_nb_matches_scipy(self, mites_counts):
        priors = GammaBetaPriors()
        r, p = 1.3, 0.45
        expected = (stats.nbinom.logpmf(mites_counts, r, 1 - p).sum()
                    + stats.gamma.logpdf(r, priors.a, scale=1 / priors.b)
                    + stats.beta.logpdf(p, priors.alpha, priors.beta))
        assert_allclose(nb_log_joint(np.array(r), np.array(p), mites_counts, priors).item(), expected)

    def test_nb_batched(self, nb_model):
        z = np.array([[1.0, 0.3], [2.0, 0.6], [0.5, 0.1]])
        batched = nb_model.log_joint(z).data
        single = [nb_model.log_joint(row).item() for row in z]
        assert_allclose(batched, single)

    def test_nb_outside_support(self, nb_model):
        out = nb_model.log_joint(np.array([[-1.0, 0.3], [1.0, 1.2]])).data
        assert np.all(out == -np.inf)

    def test_poislog_kernel_ratio(self):
        # the kernel drops data-only terms; ratios between parameter values are exact
        n, l = np.array([4.0, 0.0, 7.0]), np.array([2.0, 0.0, 3.0])
        priors = GammaBetaPriors(1.0, 1.0, 1.0, 1.0)

        def full(r, p):
            nb = stats.nbinom.logpmf(n, r, 1 - p)
            # P(l | n, r) of the Chinese restaurant table distribution, up to terms free of r
            crt = l * np.log(r) + special.gammaln(r) - special.gammaln(n + r)
            # Gamma(1, 1) and Beta(1, 1) priors
            return nb.sum() + crt.sum() - r

        a = poislog_log_joint(np.array(1.5), np.array(0.3), n, l, priors).item()
        b = poislog_log_joint(np.array(0.7), np.array(0.6), n, l, priors).item()
        assert_allclose(a - b, full(1.5, 0.3) - full(0.7, 0.6), rtol=1e-10)

    def test_poislog_rejects_bad_pairs(self):
        with pytest.raises(ValueError):
            poislog_log_joint(np.array(1.0), np.array(0.5), np.array([1.0]), np.array([2.0]))

    def test_logistic_matches_manual(self):
        rng = np.random.default_rng(0)
        X = np.column_stack([np.ones(6), rng.normal(size=(6, 2))])
        y = np.array([0.0, 1.0, 1.0, 0.0, 1.0, 0.0])
        beta = np.array([0.2, -0.5, 1.0])
        eta = X @ beta
        expected = (np.sum(y * eta - np.logaddexp(0, eta))
                    + stats.norm.logpdf(beta, 0, np.sqrt(100.0)).sum())
        assert_allclose(logistic_log_joint(beta, X, y, 0.01).item(), expected)

    def test_logistic_gradient(self):
        rng = np.random.default_rng(1)
        X = np.column_stack([np.ones(8), rng.normal(size=(8, 2))])
        y = (rng.random(8) < 0.5).astype(float)
        b0 = np.array([0.1, 0.4, -0.3])
        tape = nd.Tape()
        analytic = nd.grad(tape, logistic_log_joint(tape.watch(b0, "b"), X, y, 0.5))["b"]
        numeric = nd.finite_diff_grad(lambda b: logistic_log_joint(b, X, y, 0.5).item(), b0)
        assert_allclose(analytic, numeric, rtol=1e-6)

    def test_minibatch_scaling(self, nb_model):
        z = np.array([1.2, 0.4])
        batch = np.arange(nb_model.n_data)
        assert_allclose(nb_model.log_joint(z, batch).item(), nb_model.log_joint(z).item())

    def test_width_checked(self, nb_model):
        with pytest.raises(ShapeError):
            nb_model.log_joint(np.zeros(3))

    def test_z_names(self, nb_model, tiny_poislog_model):
        assert nb_model.z_names == ["r", "p"]
        assert tiny_poislog_model.z_dim == 2
        assert ToyModel("banana").z_names == ["z1", "z2"]
        assert LogisticModel(np.ones((2, 3)), np.array([0.0, 1.0])).z_names == ["beta_0", "beta_1", "beta_2"]

    def test_priors_positive(self):
        with pytest.raises(ValueError):
            GammaBetaPriors(a=0.0)


class TestDatasets:
    def test_counts_validation(self):
        with pytest.raises(ValueError):
            Dataset(DataKind.COUNTS, np.array([1.0, 2.5]))
        with pytest.raises(ValueError):
            Dataset(DataKind.COUNTS, np.array([-1.0]))

    def test_pairs_validation(self):
        with pytest.raises(ValueError):
            Dataset(DataKind.PAIRS, np.array([[1.0, 3.0]]))

    def test_logistic_labels(self):
        with pytest.raises(ValueError):
            Dataset(DataKind.LOGISTIC, np.ones((2, 2)), np.array([0.0, 2.0]))

    def test_load_counts_skips_comments(self, tmp_path):
        path = tmp_path / "counts.txt"
        path.write_text("# provenance\n0\n3\n1\n")
        data = load_counts(path)
        assert_allclose(data.x, [0.0, 3.0, 1.0])

    def test_load_pairs(self, tmp_path):
        path = tmp_path / "pairs.csv"
        path.write_text("n,l\n3,1\n0,0\n")
        model = PoissonLogModel.from_dataset(load_pairs_csv(path))
        assert_allclose(model.n, [3.0, 0.0])
        assert_allclose(model.l, [1.0, 0.0])

    def test_load_logistic_adds_intercept(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("a,b,y\n0.5,1.0,1\n-0.2,0.3,0\n")
        data = load_logistic_csv(path)
        assert data.columns == ["intercept", "a", "b"]
        assert_allclose(data.x[:, 0], 1.0)
        assert_allclose(data.y, [1.0, 0.0])

    def test_split_is_partition(self):
        data = synth_logistic(50, 2, RngStream(3))
        train, test = split_dataset(data, 0.2, RngStream(4))
        assert train.n == 40 and test.n == 10
        rows = np.vstack([train.x, test.x])
        assert_allclose(np.sort(rows[:, 1]), np.sort(data.x[:, 1]))

    def test_split_fraction_checked(self):
        with pytest.raises(ValueError):
            split_dataset(synth_logistic(10, 1, RngStream(0)), 1.0, RngStream(0))

    def test_poislog_synth(self):
        data = poislog_synth(2.0, 0.5, 300, RngStream(5))
        n, l = data.x[:, 0], data.x[:, 1]
        assert np.all(l <= n)
        assert np.all((n == 0) == (l == 0))
        assert_allclose(n.mean(), 2.0, rtol=0.2)

    def test_predictive_probs(self):
        draws = np.array([[0.0, 1.0], [0.0, -1.0]])
        X = np.array([[1.0, 0.0], [1.0, 2.0]])
        mean, sd = predictive_probs(draws, X)
        assert_allclose(mean, [0.5, 0.5])
        assert_allclose(sd[0], 0.0)
        assert sd[1] > 0.5

    def test_predictive_needs_two_draws(self):
        with pytest.raises(ValueError):
            predictive_probs(np.zeros((1, 2)), np.ones((1, 2)))
