"""
Semi-Implicit Studio - Reference Baselines

Gold-standard and mean-field comparators for the SIVI runs:

  * Gibbs samplers: negative binomial (CRT augmentation), Poisson-logarithmic
    and Polya-Gamma logistic regression
  * MFVI for logistic regression with diagonal or full covariance, driven by
    the Jaakkola-Jordan quadratic bound
  * MFVI for the Gamma x Beta models, run as a degenerate SIVI (point mixer,
    K = 0) through the conjugate trainer
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg

from config.settings import GibbsDefaults, MfviDefaults, SiviDefaults
from flows.conjugate import hooks_for, train_conjugate
from flows.sivi import (
    ConditionalBlock, ExplicitConditional, ImplicitMixer, NoiseFamily, SemiImplicitPosterior,
    posterior_draws,
)
from flows.training import TrainConfig, TrainedPosterior, constant_schedule
from models.joint import GammaBetaPriors, ModelRef, NegBinomialModel, PoissonLogModel
from tools.distributions import Family, RngStream, crt_sample, pg_moments, polya_gamma_sample
from tools.errors import NonFiniteError
from tools.ndcore import Mlp

logger = logging.getLogger(__name__)

# p must stay strictly inside (0, 1) for log(1 - p); r strictly positive for the CRT
_P_EDGE = np.finfo(np.float64).eps
_R_FLOOR = 1e-300


# ============================================================
# Gibbs state and chain driver
# ============================================================

@dataclass
class GibbsState:
    values: dict[str, np.ndarray]
    iteration: int = 0
    rng: RngStream = field(default_factory=lambda: RngStream(0))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def advance(self, **values) -> "GibbsState":
        return GibbsState({**self.values, **values}, self.iteration + 1, self.rng)

    def step_rng(self) -> RngStream:
        return self.rng.substream(self.iteration)


GibbsStep = Callable[[GibbsState], GibbsState]


def run_chain(step: GibbsStep, state: GibbsState, draws: int, burn_in: int = GibbsDefaults.BURN_IN,
              thin: int = GibbsDefaults.THIN, keys: Optional[Sequence[str]] = None) -> np.ndarray:
    """Run burn_in + draws * thin sweeps and stack the kept states, shape (draws, dim)."""
    if draws < 0 or burn_in < 0 or thin < 1:
        raise ValueError("draws and burn-in must be non-negative and thin at least 1")
    keys = list(keys or state.values)
    for _ in range(burn_in):
        state = step(state)
    logger.info("Gibbs burn-in done (%d sweeps); collecting %d draws (thin=%d)", burn_in, draws, thin)
    kept = np.empty((draws, sum(np.atleast_1d(state[k]).size for k in keys)))
    for i in range(draws):
        for _ in range(thin):
            state = step(state)
        kept[i] = np.concatenate([np.atleast_1d(state[k]) for k in keys])
    if not np.all(np.isfinite(kept)):
        raise NonFiniteError("Gibbs chain produced non-finite draws")
    return kept


# ============================================================
# Gamma x Beta models
# ============================================================

def _beta_draw(alpha: float, beta: float, rng: RngStream) -> float:
    return float(np.clip(rng.generator.beta(alpha, beta), _P_EDGE, 1.0 - _P_EDGE))


def _gamma_draw(shape: float, rate: float, rng: RngStream) -> float:
    return max(float(rng.gamma(shape, 1.0 / rate)), _R_FLOOR)


def _r_rate(priors: GammaBetaPriors, n_obs: int, p: float) -> float:
    return priors.b - n_obs * np.log1p(-p) if n_obs else priors.b


def gamma_beta_initial(seed: int, r: float = 1.0, p: float = 0.5) -> GibbsState:
    return GibbsState({"r": np.float64(r), "p": np.float64(p)}, 0, RngStream(seed))


def nb_gibbs_step(state: GibbsState, counts: np.ndarray, priors: GammaBetaPriors,
                  rng: Optional[RngStream] = None) -> GibbsState:
    """One sweep: l_i ~ CRT(x_i, r), r | l, p ~ Gamma, p | r, x ~ Beta."""
    rng = rng or state.step_rng()
    counts = np.asarray(counts, dtype=np.int64)
    N = counts.size
    l = crt_sample(counts, float(state["r"]), rng.substream(0))
    r = _gamma_draw(priors.a + l.sum(), _r_rate(priors, N, float(state["p"])), rng.substream(1))
    p = _beta_draw(priors.alpha + counts.sum(), priors.beta + N * r, rng.substream(2))
    return state.advance(r=np.float64(r), p=np.float64(p))


def poislog_gibbs_step(state: GibbsState, n: np.ndarray, l: np.ndarray, priors: GammaBetaPriors,
                       rng: Optional[RngStream] = None) -> GibbsState:
    """Same sweep as the NB sampler with the table counts observed."""
    rng = rng or state.step_rng()
    n, l = np.asarray(n, dtype=np.int64), np.asarray(l, dtype=np.int64)
    N = n.size
    r = _gamma_draw(priors.a + l.sum(), _r_rate(priors, N, float(state["p"])), rng.substream(1))
    p = _beta_draw(priors.alpha + n.sum(), priors.beta + N * r, rng.substream(2))
    return state.advance(r=np.float64(r), p=np.float64(p))


def nb_gibbs(counts: np.ndarray, priors: GammaBetaPriors = GammaBetaPriors(), seed: int = 0,
             burn_in: int = GibbsDefaults.BURN_IN, draws: int = GibbsDefaults.DRAWS,
             thin: int = GibbsDefaults.THIN) -> np.ndarray:
    return run_chain(lambda s: nb_gibbs_step(s, counts, priors), gamma_beta_initial(seed),
                     draws, burn_in, thin, ("r", "p"))


def poislog_gibbs(n: np.ndarray, l: np.ndarray, priors: GammaBetaPriors = GammaBetaPriors(), seed: int = 0,
                  burn_in: int = GibbsDefaults.BURN_IN, draws: int = GibbsDefaults.DRAWS,
                  thin: int = GibbsDefaults.THIN) -> np.ndarray:
    return run_chain(lambda s: poislog_gibbs_step(s, n, l, priors), gamma_beta_initial(seed),
                     draws, burn_in, thin, ("r", "p"))


# ============================================================
# Polya-Gamma logistic regression
# ============================================================

def _precision_cholesky(precision: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(precision, lower=True)
    except linalg.LinAlgError:
        logger.warning("Posterior precision not positive definite; retrying with %.0e jitter",
                       GibbsDefaults.JITTER)
        return linalg.cholesky(precision + GibbsDefaults.JITTER * np.eye(precision.shape[0]), lower=True)


def pg_gibbs_step(state: GibbsState, X: np.ndarray, y: np.ndarray, A_diag: np.ndarray,
                  trunc: int = SiviDefaults.PG_TRUNC, rng: Optional[RngStream] = None) -> GibbsState:
    """omega_i ~ PG(1, x_i'beta), then beta ~ N(Sigma X'(y - 1/2), Sigma) with
    Sigma = (A + X' Omega X)^-1."""
    rng = rng or state.step_rng()
    beta = np.asarray(state["beta"], dtype=np.float64)
    omega = polya_gamma_sample(X @ beta, rng.substream(0), trunc=trunc)
    precision = np.diag(A_diag) + X.T @ (omega[:, None] * X)
    L = _precision_cholesky(precision)
    mu = linalg.cho_solve((L, True), X.T @ (y - 0.5))
    z = rng.substream(1).normal(beta.size)
    new_beta = mu + linalg.solve_triangular(L.T, z, lower=False)
    return state.advance(beta=new_beta, omega=omega)


def pg_gibbs(X: np.ndarray, y: np.ndarray, alpha_prior: float = 0.01, seed: int = 0,
             burn_in: int = GibbsDefaults.BURN_IN, draws: int = GibbsDefaults.DRAWS,
             thin: int = GibbsDefaults.THIN, trunc: int = SiviDefaults.PG_TRUNC) -> np.ndarray:
    """Posterior draws of beta, shape (draws, V + 1)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    A_diag = np.full(X.shape[1], alpha_prior)
    state = GibbsState({"beta": np.zeros(X.shape[1])}, 0, RngStream(seed))
    return run_chain(lambda s: pg_gibbs_step(s, X, y, A_diag, trunc), state, draws, burn_in, thin, ("beta",))


# ============================================================
# Mean-field VI for logistic regression
# ============================================================

@dataclass
class MfviState:
    mu: np.ndarray
    cov: np.ndarray
    lam: np.ndarray
    kind: str = "full"
    iterations: int = 0
    converged: bool = False
    bound_trace: list[float] = field(default_factory=list)

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov).copy()

    @property
    def bound(self) -> float:
        return self.bound_trace[-1] if self.bound_trace else float("nan")

    def sample(self, rng: RngStream, count: int) -> np.ndarray:
        L = linalg.cholesky(self.cov, lower=True)
        return self.mu + rng.normal((count, self.mu.size)) @ L.T


def update_lambda(X: np.ndarray, mu: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """lambda_i = sqrt(x_i' E[beta beta'] x_i)."""
    second = cov + np.outer(mu, mu)
    return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", X, second, X), 0.0))


def jj_bound(X: np.ndarray, y: np.ndarray, alpha_prior: float, mu: np.ndarray, cov: np.ndarray,
             lam: np.ndarray) -> float:
    """Quadratic lower bound on the log evidence under q = N(mu, cov)."""
    d = mu.size
    second = cov + np.outer(mu, mu)
    quad = np.einsum("ij,jk,ik->i", X, second, X)
    g = pg_moments(lam)[0] / 2.0
    per_datum = (y - 0.5) * (X @ mu) - np.logaddexp(lam / 2.0, -lam / 2.0) - g * (quad - lam * lam)
    _, logdet = np.linalg.slogdet(alpha_prior * cov)
    kl = 0.5 * (alpha_prior * np.trace(cov) + alpha_prior * mu @ mu - d - logdet)
    return float(per_datum.sum() - kl)


def _record(state: MfviState, X, y, alpha_prior, change: float, tol: float) -> bool:
    value = jj_bound(X, y, alpha_prior, state.mu, state.cov, state.lam)
    if state.bound_trace and value < state.bound_trace[-1] - 1e-8 * max(1.0, abs(value)):
        logger.warning("MFVI bound decreased at sweep %d (%.10g -> %.10g)",
                       state.iterations, state.bound_trace[-1], value)
    state.bound_trace.append(value)
    return change < tol


def mfvi_logistic_full(X: np.ndarray, y: np.ndarray, alpha_prior: float = 0.01,
                       max_iters: int = MfviDefaults.MAX_ITERS, tol: float = MfviDefaults.TOL) -> MfviState:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = X.shape[1]
    A = alpha_prior * np.eye(d)
    state = MfviState(np.zeros(d), np.eye(d) / alpha_prior, np.zeros(X.shape[0]), "full")
    target = X.T @ (y - 0.5)
    for it in range(1, max_iters + 1):
        state.lam = update_lambda(X, state.mu, state.cov)
        w = pg_moments(state.lam)[0]
        L = linalg.cholesky(A + X.T @ (w[:, None] * X), lower=True)
        cov = linalg.cho_solve((L, True), np.eye(d))
        cov = 0.5 * (cov + cov.T)
        mu = cov @ target
        change = max(np.max(np.abs(mu - state.mu), initial=0.0), np.max(np.abs(cov - state.cov)))
        state.mu, state.cov, state.iterations = mu, cov, it
        if _record(state, X, y, alpha_prior, change, tol):
            state.converged = True
            break
    _log_finish(state)
    return state


def mfvi_logistic_diag(X: np.ndarray, y: np.ndarray, alpha_prior: float = 0.01,
                       max_iters: int = MfviDefaults.MAX_ITERS, tol: float = MfviDefaults.TOL) -> MfviState:
    """Coordinate ascent over independent N(mu_v, sigma_v^2) factors."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = X.shape[1]
    mu = np.zeros(d)
    var = np.full(d, 1.0 / alpha_prior)
    state = MfviState(mu.copy(), np.diag(var), np.zeros(X.shape[0]), "diag")
    resid = y - 0.5
    for it in range(1, max_iters + 1):
        state.lam = update_lambda(X, mu, np.diag(var))
        w = pg_moments(state.lam)[0]
        new_mu, new_var = mu.copy(), var.copy()
        eta = X @ new_mu
        for v in range(d):
            x_v = X[:, v]
            eta_rest = eta - x_v * new_mu[v]
            new_var[v] = 1.0 / (alpha_prior + np.sum(w * x_v * x_v))
            new_mu[v] = new_var[v] * np.sum(x_v * (resid - w * eta_rest))
            eta = eta_rest + x_v * new_mu[v]
        change = max(np.max(np.abs(new_mu - mu), initial=0.0), np.max(np.abs(new_var - var), initial=0.0))
        mu, var = new_mu, new_var
        state.mu, state.cov, state.iterations = mu.copy(), np.diag(var), it
        if _record(state, X, y, alpha_prior, change, tol):
            state.converged = True
            break
    _log_finish(state)
    return state


def _log_finish(state: MfviState) -> None:
    if state.converged:
        logger.info("MFVI (%s) converged after %d sweeps, bound %.4f", state.kind, state.iterations, state.bound)
    else:
        logger.warning("MFVI (%s) hit the sweep cap (%d) before converging", state.kind, state.iterations)


# ============================================================
# Mean-field VI for the Gamma x Beta models
# ============================================================

@dataclass
class MfviGammaBeta:
    """q(r) q(p) = Gamma(a~, b~) Beta(alpha~, beta~)."""

    trained: TrainedPosterior

    @property
    def posterior(self) -> SemiImplicitPosterior:
        return self.trained.posterior

    @property
    def params(self) -> dict[str, float]:
        psi = self.posterior.mixer.push(np.zeros((1, 1))).data[0]
        a, b, alpha, beta = np.exp(psi)
        return {"a_tilde": float(a), "b_tilde": float(b), "alpha_tilde": float(alpha), "beta_tilde": float(beta)}

    def sample(self, rng: RngStream, count: int) -> np.ndarray:
        return posterior_draws(self.posterior, rng, count)


def point_mixer_posterior(z_names: Sequence[str] = ("r", "p"), seed: int = 0) -> SemiImplicitPosterior:
    """Gamma x Beta conditional fed by a mixer whose noise is a point mass.

    psi is the output bias itself, starting from Gamma(1, 1) x Beta(1, 1).
    """
    conditional = ExplicitConditional([ConditionalBlock(Family.GAMMA), ConditionalBlock(Family.BETA)])
    mixer = ImplicitMixer(Mlp.zeros([1, conditional.psi_dim]), 1, NoiseFamily.POINT)
    return SemiImplicitPosterior(mixer, conditional, conditional.initial_xi(), seed, list(z_names))


def mfvi_conjugate(model: ModelRef, iterations: int = 2000, seed: int = 0, J: int = 10,
                   phi_lr: float = 0.05) -> MfviGammaBeta:
    """MFVI as SIVI with a degenerate mixer and no extra mixture components."""
    post = point_mixer_posterior(model.z_names, seed)
    cfg = TrainConfig(iterations=iterations, J=J, k_schedule=constant_schedule(0), phi_lr=phi_lr,
                      seed=seed, log_every=max(iterations // 10, 1), track_spread=False)
    result = MfviGammaBeta(train_conjugate(post, hooks_for(model), cfg))
    logger.info("MFVI (%s): %s", model.tag.value,
                ", ".join(f"{k}={v:.4g}" for k, v in result.params.items()))
    return result


def mfvi_nb(counts: np.ndarray, priors: GammaBetaPriors = GammaBetaPriors(), iterations: int = 2000,
            seed: int = 0) -> MfviGammaBeta:
    return mfvi_conjugate(NegBinomialModel(counts, priors), iterations, seed)


def mfvi_poislog(n: np.ndarray, l: np.ndarray, priors: GammaBetaPriors = GammaBetaPriors(),
                 iterations: int = 2000, seed: int = 0) -> MfviGammaBeta:
    return mfvi_conjugate(PoissonLogModel(n, l, priors), iterations, seed)
