"""
Semi-Implicit Studio - Distribution Families

Log-densities, exact samplers and reparameterized samplers for every
family used by the variational posteriors, priors and likelihoods, plus the
two auxiliary samplers the Gibbs baselines need:

- polya_gamma_sample: truncated gamma-series Polya-Gamma draw whose last
  term is moment-matched to the discarded tail.
- crt_sample: Chinese-restaurant-table counts.

logpdf sums over the last (event) axis and broadcasts over leading axes.
Out-of-support points evaluate to -inf; NaN parameters raise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np
from scipy import special

from tools import ndcore as nd
from tools.errors import NotReparameterizableError
from tools.ndcore import Tensor, as_tensor

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
LOGIT_EPS = 1e-12
PG_SMALL_C = 1e-3


# ============================================================
# Random streams
# ============================================================

class RngStream:
    """Seeded counter-based random stream with index-derived substreams.

    A substream depends only on (seed, path), never on how much the parent
    has been consumed, so two runs that consume differently still agree on
    every substream.
    """

    def __init__(self, seed: int, path: Sequence[int] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def substream(self, index: int) -> "RngStream":
        return RngStream(self.seed, self.path + (int(index),))

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def gamma(self, shape, scale=1.0, size=None) -> np.ndarray:
        return self.generator.gamma(shape, scale, size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path})"


# ============================================================
# Family specs
# ============================================================

class Family(str, Enum):
    MVN_DIAG = "MvnDiag"
    MVN_FULL = "MvnFull"
    LOG_NORMAL = "LogNormal"
    LOGIT_NORMAL = "LogitNormal"
    GAMMA = "Gamma"
    BETA = "Beta"
    NEG_BINOMIAL = "NegBinomial"
    BERNOULLI_LOGIT = "BernoulliLogit"


REPARAMETERIZABLE = frozenset({Family.MVN_DIAG, Family.MVN_FULL, Family.LOG_NORMAL, Family.LOGIT_NORMAL})

_PARAM_NAMES = {
    Family.MVN_DIAG: ("mean", "var"),
    Family.MVN_FULL: ("mean", "chol"),
    Family.LOG_NORMAL: ("mean", "var"),
    Family.LOGIT_NORMAL: ("mean", "var"),
    Family.GAMMA: ("shape", "rate"),
    Family.BETA: ("alpha", "beta"),
    Family.NEG_BINOMIAL: ("r", "p"),
    Family.BERNOULLI_LOGIT: ("logits",),
}


@dataclass(frozen=True)
class DistSpec:
    """A family tag plus its parameter tensors (possibly taped)."""

    family: Family
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        expected = _PARAM_NAMES[self.family]
        if tuple(sorted(self.params)) != tuple(sorted(expected)):
            raise ValueError(f"{self.family.value} expects parameters {expected}, got {tuple(self.params)}")
        object.__setattr__(self, "params", {k: as_tensor(v) for k, v in self.params.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def reparameterizable(self) -> bool:
        return self.family in REPARAMETERIZABLE

    def validate(self) -> "DistSpec":
        """Raise ValueError on NaN or out-of-range parameter values."""
        for name, value in self.params.items():
            if np.isnan(value.data).any():
                raise ValueError(f"{self.family.value}: parameter {name!r} contains NaN")
        positive = {
            Family.MVN_DIAG: ("var",), Family.LOG_NORMAL: ("var",), Family.LOGIT_NORMAL: ("var",),
            Family.GAMMA: ("shape", "rate"), Family.BETA: ("alpha", "beta"), Family.NEG_BINOMIAL: ("r",),
        }.get(self.family, ())
        for name in positive:
            if np.any(self.params[name].data <= 0):
                raise ValueError(f"{self.family.value}: parameter {name!r} must be positive")
        if self.family == Family.NEG_BINOMIAL:
            p = self.params["p"].data
            if np.any((p <= 0) | (p >= 1)):
                raise ValueError("NegBinomial: p must lie in (0, 1)")
        if self.family == Family.MVN_FULL:
            L = self.params["chol"].data
            if L.ndim != 2 or L.shape[0] != L.shape[1] or np.any(np.diagonal(L) <= 0):
                raise ValueError("MvnFull: Cholesky factor must be square with positive diagonal")
        return self

    # --- constructors ---
    @classmethod
    def mvn_diag(cls, mean, var) -> "DistSpec":
        return cls(Family.MVN_DIAG, {"mean": mean, "var": var})

    @classmethod
    def mvn_full(cls, mean, chol) -> "DistSpec":
        return cls(Family.MVN_FULL, {"mean": mean, "chol": chol})

    @classmethod
    def log_normal(cls, mean, var) -> "DistSpec":
        return cls(Family.LOG_NORMAL, {"mean": mean, "var": var})

    @classmethod
    def logit_normal(cls, mean, var) -> "DistSpec":
        return cls(Family.LOGIT_NORMAL, {"mean": mean, "var": var})

    @classmethod
    def gamma(cls, shape, rate) -> "DistSpec":
        return cls(Family.GAMMA, {"shape": shape, "rate": rate})

    @classmethod
    def beta(cls, alpha, beta) -> "DistSpec":
        return cls(Family.BETA, {"alpha": alpha, "beta": beta})

    @classmethod
    def neg_binomial(cls, r, p) -> "DistSpec":
        return cls(Family.NEG_BINOMIAL, {"r": r, "p": p})

    @classmethod
    def bernoulli_logit(cls, logits) -> "DistSpec":
        return cls(Family.BERNOULLI_LOGIT, {"logits": logits})


# ============================================================
# Log densities
# ============================================================

def _guard(z: Tensor, ok: np.ndarray, fill: float) -> Tensor:
    """Replace out-of-support entries by a harmless value before taking logs."""
    return nd.where(ok, z, fill)


def _mask_support(value: Tensor, ok: np.ndarray) -> Tensor:
    return nd.where(ok, value, -np.inf)


def logpdf(spec: DistSpec, z: Union[Tensor, np.ndarray], tape: Optional[nd.Tape] = None) -> Tensor:
    """Log density (or mass) summed over the last axis of `z`.

    `tape` is accepted for symmetry with the other operations; recording
    follows whatever tape the parameters or `z` already live on.
    """
    for name, value in spec.params.items():
        if np.isnan(value.data).any():
            raise ValueError(f"{spec.family.value}: parameter {name!r} contains NaN")
    z = as_tensor(z)
    fam = spec.family

    if fam == Family.MVN_DIAG:
        mean, var = spec["mean"], spec["var"]
        terms = -0.5 * (nd.log(var) + LOG_2PI) - 0.5 * nd.square(z - mean) / var
        return nd.tsum(terms, axis=-1)

    if fam == Family.MVN_FULL:
        mean, L = spec["mean"], spec["chol"]
        d = L.shape[0]
        diff = z - mean
        batch = diff.shape[:-1]
        cols = nd.transpose(nd.reshape(diff, (-1, d)))
        sol = nd.solve_triangular(L, cols)
        quad = nd.reshape(nd.tsum(nd.square(sol), axis=0), batch)
        logdet = nd.tsum(nd.log(nd.diagonal(L)))
        return -0.5 * quad - logdet - 0.5 * d * LOG_2PI

    if fam == Family.LOG_NORMAL:
        mean, var = spec["mean"], spec["var"]
        ok = z.data > 0
        lz = nd.log(_guard(z, ok, 1.0))
        terms = -lz - 0.5 * (nd.log(var) + LOG_2PI) - 0.5 * nd.square(lz - mean) / var
        return nd.tsum(_mask_support(terms, ok), axis=-1)

    if fam == Family.LOGIT_NORMAL:
        mean, var = spec["mean"], spec["var"]
        p = nd.clip(z, LOGIT_EPS, 1.0 - LOGIT_EPS)
        lp, l1p = nd.log(p), nd.log1p(-p)
        terms = -lp - l1p - 0.5 * (nd.log(var) + LOG_2PI) - 0.5 * nd.square(lp - l1p - mean) / var
        return nd.tsum(terms, axis=-1)

    if fam == Family.GAMMA:
        a, b = spec["shape"], spec["rate"]
        ok = z.data > 0
        zs = _guard(z, ok, 1.0)
        terms = a * nd.log(b) + (a - 1.0) * nd.log(zs) - b * zs - nd.lgamma(a)
        return nd.tsum(_mask_support(terms, ok), axis=-1)

    if fam == Family.BETA:
        al, be = spec["alpha"], spec["beta"]
        ok = (z.data > 0) & (z.data < 1)
        zs = _guard(z, ok, 0.5)
        terms = ((al - 1.0) * nd.log(zs) + (be - 1.0) * nd.log1p(-zs)
                 - nd.lgamma(al) - nd.lgamma(be) + nd.lgamma(al + be))
        return nd.tsum(_mask_support(terms, ok), axis=-1)

    if fam == Family.NEG_BINOMIAL:
        r, p = spec["r"], spec["p"]
        ok = (z.data >= 0) & (np.floor(z.data) == z.data)
        x = _guard(z, ok, 0.0)
        terms = (nd.lgamma(x + r) - nd.lgamma(r) - nd.lgamma(x + 1.0)
                 + x * nd.log(p) + r * nd.log1p(-p))
        return nd.tsum(_mask_support(terms, ok), axis=-1)

    if fam == Family.BERNOULLI_LOGIT:
        logits = spec["logits"]
        ok = (z.data == 0) | (z.data == 1)
        y = _guard(z, ok, 0.0)
        terms = y * logits - nd.softplus(logits)
        return nd.tsum(_mask_support(terms, ok), axis=-1)

    raise ValueError(f"unknown family {fam}")


# ============================================================
# Sampling
# ============================================================

def rsample(spec: DistSpec, noise: Union[Tensor, np.ndarray]) -> Tensor:
    """Pathwise sample: a differentiable transform of standard-normal noise."""
    if not spec.reparameterizable:
        raise NotReparameterizableError(
            f"{spec.family.value} has no pathwise sampler; use sample() with score-function gradients"
        )
    eps = as_tensor(noise)
    fam = spec.family
    if fam == Family.MVN_FULL:
        return spec["mean"] + nd.matmul(nd.reshape(eps, (-1, eps.shape[-1])),
                                        nd.transpose(spec["chol"])).reshape(eps.shape)
    loc = spec["mean"] + nd.sqrt(spec["var"]) * eps
    if fam == Family.LOG_NORMAL:
        return nd.exp(loc)
    if fam == Family.LOGIT_NORMAL:
        return nd.sigmoid(loc)
    return loc


def sample(spec: DistSpec, rng: RngStream, size: Optional[Sequence[int]] = None) -> np.ndarray:
    """Exact, non-differentiable draw; shape is the broadcast parameter shape unless `size` is given."""
    spec.validate()
    P = {k: v.data for k, v in spec.params.items()}
    fam = spec.family
    if fam in REPARAMETERIZABLE:
        if fam == Family.MVN_FULL:
            d = P["chol"].shape[0]
            shape = tuple(size) if size is not None else np.shape(P["mean"])
            eps = rng.normal(shape if shape else (d,))
        else:
            shape = tuple(size) if size is not None else np.broadcast(P["mean"], P["var"]).shape
            eps = rng.normal(shape)
        return rsample(spec, eps).data
    gen = rng.generator
    if fam == Family.GAMMA:
        shape = tuple(size) if size is not None else np.broadcast(P["shape"], P["rate"]).shape
        return gen.gamma(P["shape"], 1.0 / P["rate"], size=shape)
    if fam == Family.BETA:
        shape = tuple(size) if size is not None else np.broadcast(P["alpha"], P["beta"]).shape
        g1 = gen.gamma(P["alpha"], 1.0, size=shape)
        g2 = gen.gamma(P["beta"], 1.0, size=shape)
        return g1 / (g1 + g2)
    if fam == Family.NEG_BINOMIAL:
        shape = tuple(size) if size is not None else np.broadcast(P["r"], P["p"]).shape
        return gen.negative_binomial(P["r"], 1.0 - P["p"], size=shape).astype(np.float64)
    if fam == Family.BERNOULLI_LOGIT:
        shape = tuple(size) if size is not None else np.shape(P["logits"])
        return (gen.random(shape) < special.expit(P["logits"])).astype(np.float64)
    raise ValueError(f"unknown family {fam}")


# ============================================================
# Closed-form moments used by conjugate hooks
# ============================================================

def gamma_expected_log(spec: DistSpec) -> Tensor:
    return nd.digamma(spec["shape"]) - nd.log(spec["rate"])


def gamma_mean(spec: DistSpec) -> Tensor:
    return spec["shape"] / spec["rate"]


def beta_expected_logs(spec: DistSpec) -> tuple[Tensor, Tensor]:
    """(E log p, E log(1 - p)) under Beta(alpha, beta)."""
    total = nd.digamma(spec["alpha"] + spec["beta"])
    return nd.digamma(spec["alpha"]) - total, nd.digamma(spec["beta"]) - total


def entropy(spec: DistSpec) -> Tensor:
    """Differential entropy, summed over the last axis."""
    fam = spec.family
    if fam == Family.GAMMA:
        a, b = spec["shape"], spec["rate"]
        h = a - nd.log(b) + nd.lgamma(a) + (1.0 - a) * nd.digamma(a)
    elif fam == Family.BETA:
        al, be = spec["alpha"], spec["beta"]
        h = (nd.lgamma(al) + nd.lgamma(be) - nd.lgamma(al + be)
             - (al - 1.0) * nd.digamma(al) - (be - 1.0) * nd.digamma(be)
             + (al + be - 2.0) * nd.digamma(al + be))
    elif fam == Family.MVN_DIAG:
        h = 0.5 * (nd.log(spec["var"]) + LOG_2PI + 1.0)
    else:
        raise ValueError(f"no closed-form entropy for {fam.value}")
    return nd.tsum(h, axis=-1)


# ============================================================
# Polya-Gamma and CRT samplers
# ============================================================

def pg_moments(c: np.ndarray, b: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of PG(b, c)."""
    c = np.abs(np.asarray(c, dtype=np.float64))
    small = c < PG_SMALL_C
    safe = np.where(small, 1.0, c)
    t = np.tanh(safe / 2.0)
    mean = np.where(small, 0.25 - c * c / 48.0, t / (2.0 * safe))
    var = np.where(small, 1.0 / 24.0 - c * c / 120.0,
                   (2.0 * t - safe * (1.0 - t * t)) / (4.0 * safe ** 3))
    return b * mean, b * var


def polya_gamma_sample(c: Union[float, np.ndarray], rng: RngStream, b: float = 1.0,
                       trunc: int = 5) -> np.ndarray:
    """Truncated series draw of PG(b, c).

    The first trunc-1 gamma terms are exact; the last is a single gamma
    matched to the mean and variance of the remaining infinite tail.
    """
    if trunc < 1:
        raise ValueError("truncation level must be at least 1")
    if b <= 0:
        raise ValueError("PG shape b must be positive")
    c = np.asarray(c, dtype=np.float64)
    kappa = c * c / (4.0 * np.pi ** 2)
    k = np.arange(1, trunc, dtype=np.float64)
    denom = (k - 0.5) ** 2 + kappa[..., None]
    head = np.zeros(c.shape)
    head_mean = np.zeros(c.shape)
    head_var = np.zeros(c.shape)
    if trunc > 1:
        g = rng.gamma(b, 1.0, size=c.shape + (trunc - 1,))
        head = (g / denom).sum(axis=-1) / (2.0 * np.pi ** 2)
        head_mean = (b / denom).sum(axis=-1) / (2.0 * np.pi ** 2)
        head_var = (b / denom ** 2).sum(axis=-1) / (4.0 * np.pi ** 4)
    total_mean, total_var = pg_moments(c, b)
    tail_mean = np.maximum(total_mean - head_mean, 1e-300)
    tail_var = np.maximum(total_var - head_var, 1e-300)
    tail = rng.gamma(tail_mean ** 2 / tail_var, tail_var / tail_mean, size=c.shape)
    return head + tail


def crt_sample(n: Union[int, np.ndarray], r: Union[float, np.ndarray], rng: RngStream) -> np.ndarray:
    """Table counts l = sum_{t=1..n} Bernoulli(r / (r + t - 1)), vectorized over n."""
    n = np.asarray(n, dtype=np.int64)
    if np.any(n < 0):
        raise ValueError("CRT customer counts must be non-negative")
    r = np.broadcast_to(np.asarray(r, dtype=np.float64), n.shape)
    if np.any(r <= 0):
        raise ValueError("CRT concentration must be positive")
    flat_n, flat_r = n.ravel(), r.ravel()
    total = int(flat_n.sum())
    if total == 0:
        return np.zeros(n.shape, dtype=np.int64)
    owner = np.repeat(np.arange(flat_n.size), flat_n)
    start = np.repeat(np.cumsum(flat_n) - flat_n, flat_n)
    t = np.arange(total) - start
    prob = flat_r[owner] / (flat_r[owner] + t)
    hits = (rng.uniform(total) < prob).astype(np.float64)
    return np.bincount(owner, weights=hits, minlength=flat_n.size).astype(np.int64).reshape(n.shape)
