"""
Semi-Implicit Studio - Training Loop

Stochastic ascent on the surrogate lower bound. Each iteration t:
  1. K_t = k_schedule(t); draw the shared psi^(1:K_t)
  2. draw a minibatch of M rows (full data when M is unset)
  3. J inner samples psi_j -> z_j and the per-sample bound terms
  4. step xi (decayed plain ascent), then phi (Adam)

Randomness per iteration comes from RngStream(seed).substream(t), so a run
is bit-reproducible and independent of logging or callbacks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from config.settings import SiviDefaults
from flows.sivi import (
    SemiImplicitPosterior, bound_terms, clip_terms, draw_bound_noise, mixer_spread,
)
from models.joint import ModelRef
from tools import ndcore as nd
from tools.distributions import RngStream
from tools.errors import NotReparameterizableError, TrainingDiverged
from tools.ndcore import Adam, DecayedAscent, Tape

logger = logging.getLogger(__name__)

SUB_BATCH = 3
SUB_SPREAD = 4

KSchedule = Callable[[int], int]


# ============================================================
# K_t schedules
# ============================================================

def constant_schedule(k: int) -> KSchedule:
    if k < 0:
        raise ValueError("K must be non-negative")
    return lambda t: k


def ramp_schedule(k_max: int, iterations: int, fraction: float = SiviDefaults.RAMP_FRACTION,
                  k_start: int = 1) -> KSchedule:
    """Linear ramp from k_start to k_max over the first `fraction` of iterations, then flat."""
    if k_max < 0:
        raise ValueError("K must be non-negative")
    if k_max == 0:
        return constant_schedule(0)
    k_start = min(k_start, k_max)
    ramp_len = max(1, int(round(fraction * iterations)))

    def schedule(t: int) -> int:
        if t >= ramp_len:
            return k_max
        return int(k_start + (k_max - k_start) * t // ramp_len)

    return schedule


# ============================================================
# Config and result
# ============================================================

@dataclass
class TrainConfig:
    iterations: int
    J: int = SiviDefaults.J
    k_schedule: KSchedule = field(default_factory=lambda: constant_schedule(0))
    batch_size: Optional[int] = None
    n_data: Optional[int] = None
    phi_lr: float = SiviDefaults.PHI_LR
    xi_step: float = SiviDefaults.XI_STEP
    xi_decay: float = SiviDefaults.XI_DECAY
    xi_decay_every: int = SiviDefaults.XI_DECAY_EVERY
    learn_xi: bool = True
    seed: int = 0
    log_every: int = SiviDefaults.LOG_EVERY
    track_spread: bool = True

    def validate(self, n_data: int = 0) -> "TrainConfig":
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.J < 1:
            raise ValueError("J must be at least 1")
        if min(self.phi_lr, self.xi_step) <= 0 or self.xi_decay_every < 1:
            raise ValueError("step sizes must be positive")
        n_total = self.n_data if self.n_data is not None else n_data
        if self.batch_size is not None and not 1 <= self.batch_size <= n_total:
            raise ValueError(f"minibatch size {self.batch_size} must lie in [1, N={n_total}]")
        previous = 0
        for t in range(self.iterations):
            k = self.k_schedule(t)
            if k < 0 or k < previous:
                raise ValueError(f"K schedule must be non-negative and non-decreasing (t={t}, K={k})")
            previous = k
        return self

    def k_max(self) -> int:
        return self.k_schedule(self.iterations - 1) if self.iterations else self.k_schedule(0)


@dataclass
class TrainedPosterior:
    posterior: SemiImplicitPosterior
    trace: np.ndarray
    k_trace: np.ndarray
    spread_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    clipped: int = 0

    @property
    def loss_trace(self) -> np.ndarray:
        """Negative bound per iteration."""
        return -self.trace

    @property
    def iterations_run(self) -> int:
        return self.trace.size


StepCallback = Callable[[int, float, int], None]


def subsample(rng: RngStream, n_data: int, batch_size: Optional[int]) -> Optional[np.ndarray]:
    if batch_size is None or batch_size >= n_data:
        return None
    return np.sort(rng.choice(n_data, batch_size, replace=False))


# ============================================================
# Algorithm loop
# ============================================================

def train(post: SemiImplicitPosterior, model: ModelRef, cfg: TrainConfig,
          callback: Optional[StepCallback] = None) -> TrainedPosterior:
    """Maximize the surrogate lower bound for a reparameterizable conditional.

    The data are the ones attached to `model`. Raises TrainingDiverged with the
    finite part of the trace if the bound becomes NaN.
    """
    if not post.conditional.reparameterizable:
        raise NotReparameterizableError("use flows.conjugate.train_conjugate for Gamma/Beta conditionals")
    n_data = cfg.n_data if cfg.n_data is not None else model.n_data
    cfg.validate(n_data)
    logger.info("Training SIVI: iterations=%d K_max=%d J=%d M=%s", cfg.iterations, cfg.k_max(), cfg.J,
                cfg.batch_size or "all")

    root = RngStream(cfg.seed)
    phi_opt = Adam(lr=cfg.phi_lr)
    xi_opt = DecayedAscent(cfg.xi_step, cfg.xi_decay, cfg.xi_decay_every)
    phi_data, xi_data = post.phi.data.copy(), post.xi.data.copy()
    trace, k_trace, spread = [], [], []
    clipped_total = 0

    for t in range(cfg.iterations):
        step = root.substream(t)
        K = cfg.k_schedule(t)
        batch = subsample(step.substream(SUB_BATCH), n_data, cfg.batch_size)
        noise = draw_bound_noise(post, step, cfg.J, K)

        tape = Tape()
        phi = tape.watch(phi_data, "phi")
        xi = tape.watch(xi_data, "xi")
        terms = bound_terms(post, model, noise, batch, n_data, phi, xi)
        terms, clipped = clip_terms(terms, f"at iteration {t}")
        clipped_total += clipped
        objective = nd.tmean(terms)
        value = objective.item()
        if np.isnan(value):
            logger.error("Bound became NaN at iteration %d; aborting", t)
            raise TrainingDiverged(f"surrogate bound is NaN at iteration {t}", trace, t)

        grads = nd.grad(tape, objective)
        if cfg.learn_xi and xi_data.size:
            xi_data = xi_opt.step(xi_data, grads["xi"], t)
        phi_data = phi_opt.step(phi_data, grads["phi"])
        post = post.with_params(phi_data, xi_data)

        trace.append(value)
        k_trace.append(K)
        if cfg.track_spread:
            spread.append(mixer_spread(post, step.substream(SUB_SPREAD), cfg.J))
        if callback is not None:
            callback(t, value, K)
        if cfg.log_every and (t + 1) % cfg.log_every == 0:
            logger.info("iter %d  K=%d  bound=%.4f", t + 1, K, value)

    logger.info("Training finished after %d iterations", cfg.iterations)
    return TrainedPosterior(post, np.asarray(trace), np.asarray(k_trace, dtype=np.int64),
                            np.asarray(spread), clipped_total)
