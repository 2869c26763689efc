"""
Semi-Implicit Studio - Conjugate Score Gradients

Training for semi-implicit posteriors whose explicit conditional cannot be
reparameterized (Gamma / Beta blocks) but is conditionally conjugate to the
model. The bound gradient splits into

  (i)   the closed-form mean-field ELBO of q(z | psi_j), backpropagated
        through psi_j = T_phi(eps_j)
  (ii)  the pathwise gradient of log r at fixed z_j
  (iii) the score term grad log q(z_j | psi_j) * log r

where log r = log q(z | psi_j) - log of the (K+1)-component mixture average.
All three come out of one backward pass over the surrogate scalar

  mean_j [ ELBO_j + log r_j + log q(z_j | psi_j) * stop(log r_j) ]

whose value is not itself a bound; the reported bound is evaluated
separately from the exact log joint.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

from flows.sivi import (
    BoundEstimate, SemiImplicitPosterior, clip_terms, draw_bound_noise, draw_z, log_q_matrix, mixer_spread,
)
from flows.training import SUB_SPREAD, StepCallback, TrainConfig, TrainedPosterior
from models.joint import GammaBetaPriors, ModelRef, NegBinomialModel, PoissonLogModel
from tools import ndcore as nd
from tools.distributions import (
    DistSpec, Family, RngStream, beta_expected_logs, entropy, gamma_expected_log, gamma_mean,
)
from tools.errors import MissingHooksError, TrainingDiverged
from tools.ndcore import Adam, DecayedAscent, Tape, Tensor

logger = logging.getLogger(__name__)


# ============================================================
# Density ratio
# ============================================================

@dataclass
class DensityRatioTerms:
    log_r: np.ndarray          # (J,)
    components: np.ndarray     # (J, K+1), column 0 is the generating conditional


def density_ratio(post: SemiImplicitPosterior, z: np.ndarray, eps: np.ndarray,
                  eps_batch: np.ndarray) -> DensityRatioTerms:
    """log r for each (z_j, eps_j) against the shared eps_batch (K rows, possibly 0)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    eps_batch = np.asarray(eps_batch, dtype=np.float64).reshape(-1, post.mixer.noise_dim)
    psi_j = post.mixer.push(eps)
    psi_k = post.mixer.push(eps_batch) if eps_batch.shape[0] else None
    logq = log_q_matrix(post, Tensor(z), psi_j, psi_k, None).data
    log_r = logq[:, 0] - nd.logmeanexp(logq, axis=1).data
    return DensityRatioTerms(log_r=log_r, components=logq)


# ============================================================
# Conjugate hooks
# ============================================================

class ConjugateModelHooks(ABC):
    """Closed-form expectations of log p(x, z) under the conditional q(z | psi)."""

    families: tuple[Family, ...] = ()

    def __init__(self, model: ModelRef):
        self.model = model

    def check(self, post: SemiImplicitPosterior) -> None:
        if tuple(post.conditional.families) != self.families:
            raise MissingHooksError(
                f"{type(self).__name__} needs conditional blocks {[f.value for f in self.families]}, "
                f"got {[f.value for f in post.conditional.families]}"
            )
        if any(b.z_dim != 1 for b in post.conditional.blocks):
            raise MissingHooksError("conjugate hooks expect scalar blocks")

    @abstractmethod
    def expected_log_joint(self, specs: list[DistSpec]) -> Tensor:
        """E_q[log p(x, z)] (or a lower bound on it), one value per psi row."""

    def expected_elbo(self, specs: list[DistSpec]) -> Tensor:
        total = self.expected_log_joint(specs)
        for spec in specs:
            total = total + entropy(spec)
        return total


class _GammaBetaHooks(ConjugateModelHooks):
    families = (Family.GAMMA, Family.BETA)

    @property
    def priors(self) -> GammaBetaPriors:
        return self.model.priors

    def _moments(self, specs):
        r_spec, p_spec = specs
        e_log_r = nd.tsum(gamma_expected_log(r_spec), axis=-1)
        e_r = nd.tsum(gamma_mean(r_spec), axis=-1)
        e_log_p, e_log_1mp = (nd.tsum(v, axis=-1) for v in beta_expected_logs(p_spec))
        return e_log_r, e_r, e_log_p, e_log_1mp

    def _expected_log_prior(self, e_log_r, e_r, e_log_p, e_log_1mp) -> Tensor:
        pr = self.priors
        return (pr.a * np.log(pr.b) + (pr.a - 1.0) * e_log_r - pr.b * e_r - special.gammaln(pr.a)
                + (pr.alpha - 1.0) * e_log_p + (pr.beta - 1.0) * e_log_1mp - special.betaln(pr.alpha, pr.beta))


class PoissonLogHooks(_GammaBetaHooks):
    """Exact expectations; the joint is linear in (log r, r, log p, log(1-p))."""

    def expected_log_joint(self, specs):
        e_log_r, e_r, e_log_p, e_log_1mp = self._moments(specs)
        m = self.model
        loglik = m.l.sum() * e_log_r + m.n.sum() * e_log_p + float(m.n.size) * e_r * e_log_1mp
        return loglik + self._expected_log_prior(e_log_r, e_r, e_log_p, e_log_1mp)


class NegBinomialHooks(_GammaBetaHooks):
    """Collapsed bound: log Gamma(x + r) - log Gamma(r) is convex in log r, so
    evaluating it at r~ = exp(E log r) lower-bounds its expectation."""

    def expected_log_joint(self, specs):
        e_log_r, e_r, e_log_p, e_log_1mp = self._moments(specs)
        x = self.model.counts
        r_tilde = nd.expand_dims(nd.exp(e_log_r), -1)
        loglik = (nd.tsum(nd.lgamma(x + r_tilde) - nd.lgamma(r_tilde), axis=-1)
                  - float(special.gammaln(x + 1.0).sum())
                  + x.sum() * e_log_p + float(x.size) * e_r * e_log_1mp)
        return loglik + self._expected_log_prior(e_log_r, e_r, e_log_p, e_log_1mp)


def hooks_for(model: ModelRef) -> ConjugateModelHooks:
    if isinstance(model, PoissonLogModel):
        return PoissonLogHooks(model)
    if isinstance(model, NegBinomialModel):
        return NegBinomialHooks(model)
    raise MissingHooksError(f"no conjugate hooks for model {model.tag.value}")


# ============================================================
# Score-function gradient
# ============================================================

@dataclass
class ScoreGradient:
    phi: np.ndarray
    xi: np.ndarray
    estimate: BoundEstimate
    log_r: np.ndarray


def score_grad_phi(post: SemiImplicitPosterior, hooks: ConjugateModelHooks, K: int, J: int,
                   rng: RngStream) -> ScoreGradient:
    """Three-term gradient of the surrogate lower bound w.r.t. phi (and xi)."""
    hooks.check(post)
    noise = draw_bound_noise(post, rng, J, K)
    tape = Tape()
    phi = tape.watch(post.phi.data, "phi")
    xi = tape.watch(post.xi.data, "xi")

    psi_j = post.mixer.push(noise.eps_j, phi)
    z = draw_z(post, psi_j, xi, noise)
    specs = [spec for _, spec in post.conditional.specs(psi_j, xi)]
    elbo = hooks.expected_elbo(specs)

    psi_k = post.mixer.push(noise.eps_k, phi) if K else None
    logq = log_q_matrix(post, z, psi_j, psi_k, xi)
    log_q0 = logq[:, 0]
    log_r = log_q0 - nd.logmeanexp(logq, axis=1)
    surrogate = nd.tmean(elbo + log_r + log_q0 * nd.stop_gradient(log_r))
    grads = nd.grad(tape, surrogate)

    terms = hooks.model.log_joint(z.data) - nd.logmeanexp(logq.data, axis=1)
    terms, clipped = clip_terms(nd.stop_gradient(terms), "(conjugate bound)")
    estimate = BoundEstimate(value=float(np.mean(terms.data)), per_sample_terms=terms.data.copy(),
                             K_used=K, clipped=clipped)
    return ScoreGradient(grads["phi"], grads["xi"], estimate, log_r.data.copy())


def train_conjugate(post: SemiImplicitPosterior, hooks: ConjugateModelHooks, cfg: TrainConfig,
                    callback: Optional[StepCallback] = None) -> TrainedPosterior:
    """The training loop with score_grad_phi in place of pathwise gradients.

    The closed-form hooks always use the full data, so cfg.batch_size must be None.
    """
    hooks.check(post)
    if cfg.batch_size is not None:
        raise ValueError(f"conjugate training uses the full data; got batch_size={cfg.batch_size}")
    cfg.validate(hooks.model.n_data)
    logger.info("Training SIVI (conjugate): iterations=%d K_max=%d J=%d", cfg.iterations, cfg.k_max(), cfg.J)

    root = RngStream(cfg.seed)
    phi_opt = Adam(lr=cfg.phi_lr)
    xi_opt = DecayedAscent(cfg.xi_step, cfg.xi_decay, cfg.xi_decay_every)
    trace, k_trace, spread = [], [], []
    clipped_total = 0

    for t in range(cfg.iterations):
        step = root.substream(t)
        K = cfg.k_schedule(t)
        g = score_grad_phi(post, hooks, K, cfg.J, step)
        value = g.estimate.value
        if np.isnan(value) or np.isnan(g.phi).any():
            logger.error("Conjugate bound or gradient became NaN at iteration %d; aborting", t)
            raise TrainingDiverged(f"conjugate training diverged at iteration {t}", trace, t)
        clipped_total += g.estimate.clipped
        xi_data = post.xi.data
        if cfg.learn_xi and xi_data.size:
            xi_data = xi_opt.step(xi_data, g.xi, t)
        phi_data = phi_opt.step(post.phi.data, g.phi)
        post = post.with_params(phi_data, xi_data)

        trace.append(value)
        k_trace.append(K)
        if cfg.track_spread:
            spread.append(mixer_spread(post, step.substream(SUB_SPREAD), cfg.J))
        if callback is not None:
            callback(t, value, K)
        if cfg.log_every and (t + 1) % cfg.log_every == 0:
            logger.info("iter %d  K=%d  -bound=%.4f", t + 1, K, -value)

    return TrainedPosterior(post, np.asarray(trace), np.asarray(k_trace, dtype=np.int64),
                            np.asarray(spread), clipped_total)
