"""
Semi-Implicit Studio - Model Log Joints & Datasets

Log joint densities log p(x, z) for every inference task, with per-datum
likelihood terms so minibatches can be rescaled by N/M, plus dataset
ingestion and the synthetic data generators.

Models:
- ToyModel:          a toy target used directly as log p(z)
- NegBinomialModel:  x_i ~ NB(r, p), r ~ Gamma(a, rate b), p ~ Beta(alpha, beta)
- PoissonLogModel:   (n_i, l_i) pairs, joint r^l p^n (1-p)^r up to data-only constants
- LogisticModel:     y_i ~ Bernoulli(sigmoid(x_i' beta)), beta ~ N(0, alpha^-1 I)
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import special

from models.targets import TOY_DIMS, ToyVariant, toy_target_logpdf
from tools import ndcore as nd
from tools.distributions import DistSpec, RngStream, crt_sample, logpdf
from tools.errors import ShapeError
from tools.ndcore import Tensor, as_tensor

logger = logging.getLogger(__name__)

TensorLike = Union[Tensor, np.ndarray, float]


# ============================================================
# Datasets
# ============================================================

class DataKind(str, Enum):
    COUNTS = "counts"
    PAIRS = "pairs"
    LOGISTIC = "logistic"


@dataclass
class Dataset:
    """Observed data. counts: x (N,); pairs: x (N, 2) = (n, l); logistic: x (N, V+1), y (N,)."""

    kind: DataKind
    x: np.ndarray
    y: Optional[np.ndarray] = None
    columns: list[str] = field(default_factory=list)
    source: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.shape[0] < 1:
            raise ValueError("dataset must contain at least one row")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("dataset contains non-finite entries")
        if self.kind == DataKind.COUNTS:
            if self.x.ndim != 1 or np.any(self.x < 0) or np.any(np.floor(self.x) != self.x):
                raise ValueError("counts must be a vector of non-negative integers")
        elif self.kind == DataKind.PAIRS:
            if self.x.ndim != 2 or self.x.shape[1] != 2:
                raise ValueError("pairs data must have two columns (n, l)")
            n, l = self.x[:, 0], self.x[:, 1]
            if np.any(l < 0) or np.any(l > n):
                raise ValueError("pairs must satisfy 0 <= l <= n")
        elif self.kind == DataKind.LOGISTIC:
            if self.y is None:
                raise ValueError("logistic data needs labels")
            self.y = np.asarray(self.y, dtype=np.float64)
            if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
                raise ValueError(f"design {self.x.shape} and labels {self.y.shape} disagree")
            if not np.all((self.y == 0) | (self.y == 1)):
                raise ValueError("logistic labels must be 0 or 1")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.kind, self.x[idx], None if self.y is None else self.y[idx],
                       list(self.columns), self.source)


def load_counts(path: Union[str, Path]) -> Dataset:
    """One integer per line; lines starting with '#' are provenance comments."""
    frame = pd.read_csv(path, header=None, comment="#", skip_blank_lines=True)
    counts = frame.iloc[:, 0].to_numpy(dtype=np.float64)
    logger.info("Loaded %d counts from %s", counts.size, path)
    return Dataset(DataKind.COUNTS, counts, columns=["x"], source=str(path))


def load_pairs_csv(path: Union[str, Path]) -> Dataset:
    frame = pd.read_csv(path, comment="#")
    missing = {"n", "l"} - set(frame.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    return Dataset(DataKind.PAIRS, frame[["n", "l"]].to_numpy(dtype=np.float64),
                   columns=["n", "l"], source=str(path))


def load_logistic_csv(path: Union[str, Path], label: str = "y") -> Dataset:
    """CSV with a header; `label` is the response, every other column a covariate.

    An intercept column is prepended.
    """
    frame = pd.read_csv(path, comment="#")
    if label not in frame.columns:
        raise ValueError(f"{path}: no label column {label!r}")
    covariates = [c for c in frame.columns if c != label]
    X = frame[covariates].to_numpy(dtype=np.float64)
    X = np.column_stack([np.ones(len(frame)), X])
    logger.info("Loaded %d rows x %d covariates from %s", X.shape[0], len(covariates), path)
    return Dataset(DataKind.LOGISTIC, X, frame[label].to_numpy(dtype=np.float64),
                   columns=["intercept"] + covariates, source=str(path))


def split_dataset(data: Dataset, test_fraction: float, rng: RngStream) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    perm = rng.generator.permutation(data.n)
    n_test = max(1, int(round(test_fraction * data.n)))
    if n_test >= data.n:
        raise ValueError("split leaves no training rows")
    return data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))


def poislog_synth(r: float, p: float, N: int, rng: RngStream) -> Dataset:
    """n_i ~ NB(r, p), l_i ~ CRT(n_i, r)."""
    if r <= 0 or not 0 <= p < 1 or N < 1:
        raise ValueError("need r > 0, p in [0, 1), N >= 1")
    n = rng.substream(0).generator.negative_binomial(r, 1.0 - p, size=N)
    l = crt_sample(n, r, rng.substream(1))
    return Dataset(DataKind.PAIRS, np.column_stack([n, l]), columns=["n", "l"], source="synthetic")


def synth_logistic(n: int, V: int, rng: RngStream, beta: Optional[np.ndarray] = None) -> Dataset:
    """Correlated Gaussian covariates and labels from a known coefficient vector."""
    gen = rng.generator
    if beta is None:
        beta = gen.normal(0.0, 1.0, size=V + 1)
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (V + 1,):
        raise ShapeError(f"beta must have {V + 1} entries")
    cov = 0.5 * np.eye(V) + 0.5
    covariates = gen.multivariate_normal(np.zeros(V), cov, size=n)
    X = np.column_stack([np.ones(n), covariates])
    y = (gen.random(n) < special.expit(X @ beta)).astype(np.float64)
    return Dataset(DataKind.LOGISTIC, X, y, ["intercept"] + [f"x{v + 1}" for v in range(V)], "synthetic")


# ============================================================
# Free log-joint functions
# ============================================================

@dataclass(frozen=True)
class GammaBetaPriors:
    """r ~ Gamma(a, rate b); p ~ Beta(alpha, beta)."""

    a: float = 0.01
    b: float = 0.01
    alpha: float = 0.01
    beta: float = 0.01

    def __post_init__(self):
        if min(self.a, self.b, self.alpha, self.beta) <= 0:
            raise ValueError("prior hyperparameters must be positive")


def _guard_rp(r: TensorLike, p: TensorLike) -> tuple[Tensor, Tensor, np.ndarray]:
    r, p = as_tensor(r), as_tensor(p)
    ok = (r.data > 0) & (p.data > 0) & (p.data < 1)
    return nd.where(ok, r, 1.0), nd.where(ok, p, 0.5), ok


def gamma_beta_log_prior(r: Tensor, p: Tensor, priors: GammaBetaPriors) -> Tensor:
    a, b, al, be = priors.a, priors.b, priors.alpha, priors.beta
    log_gamma = a * np.log(b) + (a - 1.0) * nd.log(r) - b * r - special.gammaln(a)
    log_beta = (al - 1.0) * nd.log(p) + (be - 1.0) * nd.log1p(-p) - special.betaln(al, be)
    return log_gamma + log_beta


def nb_log_likelihood(r: Tensor, p: Tensor, counts: np.ndarray) -> Tensor:
    x = np.asarray(counts, dtype=np.float64)
    spec = DistSpec.neg_binomial(nd.expand_dims(r, -1), nd.expand_dims(p, -1))
    return logpdf(spec, x)


def nb_log_joint(r: TensorLike, p: TensorLike, counts: np.ndarray,
                 priors: GammaBetaPriors = GammaBetaPriors(), scale: float = 1.0) -> Tensor:
    """log p(counts, r, p); broadcasts over any batch shape of (r, p)."""
    rs, ps, ok = _guard_rp(r, p)
    total = scale * nb_log_likelihood(rs, ps, counts) + gamma_beta_log_prior(rs, ps, priors)
    return nd.where(ok, total, -np.inf)


def poislog_log_joint(r: TensorLike, p: TensorLike, n: np.ndarray, l: np.ndarray,
                      priors: GammaBetaPriors = GammaBetaPriors(), scale: float = 1.0) -> Tensor:
    """log p(pairs, r, p) with the data-only normalizers dropped."""
    n, l = np.asarray(n, dtype=np.float64), np.asarray(l, dtype=np.float64)
    if np.any(l < 0) or np.any(l > n):
        raise ValueError("pairs must satisfy 0 <= l <= n")
    rs, ps, ok = _guard_rp(r, p)
    loglik = l.sum() * nd.log(rs) + n.sum() * nd.log(ps) + float(n.size) * rs * nd.log1p(-ps)
    total = scale * loglik + gamma_beta_log_prior(rs, ps, priors)
    return nd.where(ok, total, -np.inf)


def logistic_loglik_batch(beta: TensorLike, X: np.ndarray, y: np.ndarray) -> Tensor:
    """sum_i [y_i x_i'beta - log(1 + exp(x_i'beta))] for beta of shape (d,) or (J, d)."""
    beta = as_tensor(beta)
    X = np.asarray(X, dtype=np.float64)
    if beta.shape[-1] != X.shape[1]:
        raise ShapeError(f"beta has {beta.shape[-1]} entries, design has {X.shape[1]} columns")
    logits = nd.matmul(beta, X.T)
    return nd.tsum(logits * np.asarray(y, dtype=np.float64) - nd.softplus(logits), axis=-1)


def logistic_log_prior(beta: TensorLike, alpha_prior: float) -> Tensor:
    beta = as_tensor(beta)
    return logpdf(DistSpec.mvn_diag(np.zeros(beta.shape[-1]), np.full(beta.shape[-1], 1.0 / alpha_prior)), beta)


def logistic_log_joint(beta: TensorLike, X: np.ndarray, y: np.ndarray, alpha_prior: float = 0.01) -> Tensor:
    return logistic_loglik_batch(beta, X, y) + logistic_log_prior(beta, alpha_prior)


def predictive_probs(beta_draws: np.ndarray, X_test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per test row: mean and sample sd of sigmoid(x' beta_j) over draws."""
    beta_draws = np.atleast_2d(np.asarray(beta_draws, dtype=np.float64))
    if beta_draws.shape[0] < 2:
        raise ValueError("need at least two draws")
    probs = special.expit(np.asarray(X_test, dtype=np.float64) @ beta_draws.T)
    return probs.mean(axis=1), probs.std(axis=1, ddof=1)


# ============================================================
# Model references
# ============================================================

class ModelTag(str, Enum):
    TOY = "toy"
    NEG_BINOMIAL = "nb"
    POISSON_LOG = "poislog"
    LOGISTIC = "logistic"


class ModelRef(ABC):
    """A log joint over a batch of latent vectors z of shape (..., z_dim)."""

    tag: ModelTag
    z_names: list[str]

    @property
    def z_dim(self) -> int:
        return len(self.z_names)

    @property
    def n_data(self) -> int:
        return 0

    @abstractmethod
    def log_joint_scaled(self, z: Tensor, batch: Optional[np.ndarray], scale: float) -> Tensor:
        ...

    def log_joint(self, z: TensorLike, batch: Optional[np.ndarray] = None) -> Tensor:
        """log p(z) + (N/M) log p(x_batch | z); the full data when `batch` is None."""
        z = as_tensor(z)
        if z.shape[-1] != self.z_dim:
            raise ShapeError(f"{self.tag.value} expects z of width {self.z_dim}, got {z.shape}")
        if batch is None:
            return self.log_joint_scaled(z, None, 1.0)
        batch = np.asarray(batch, dtype=np.int64)
        if batch.size == 0:
            raise ValueError("minibatch is empty")
        return self.log_joint_scaled(z, batch, self.n_data / batch.size)


class ToyModel(ModelRef):
    tag = ModelTag.TOY

    def __init__(self, variant: Union[ToyVariant, str]):
        self.variant = ToyVariant(variant)
        self.z_names = [f"z{i + 1}" for i in range(TOY_DIMS[self.variant])]

    def log_joint_scaled(self, z, batch, scale):
        return toy_target_logpdf(self.variant, z)


class NegBinomialModel(ModelRef):
    tag = ModelTag.NEG_BINOMIAL
    z_names = ["r", "p"]

    def __init__(self, counts: np.ndarray, priors: GammaBetaPriors = GammaBetaPriors()):
        self.counts = np.asarray(counts, dtype=np.float64)
        self.priors = priors

    @property
    def n_data(self) -> int:
        return self.counts.size

    def log_joint_scaled(self, z, batch, scale):
        counts = self.counts if batch is None else self.counts[batch]
        return nb_log_joint(z[..., 0], z[..., 1], counts, self.priors, scale)


class PoissonLogModel(ModelRef):
    tag = ModelTag.POISSON_LOG
    z_names = ["r", "p"]

    def __init__(self, n: np.ndarray, l: np.ndarray, priors: GammaBetaPriors = GammaBetaPriors()):
        self.n = np.asarray(n, dtype=np.float64)
        self.l = np.asarray(l, dtype=np.float64)
        self.priors = priors

    @classmethod
    def from_dataset(cls, data: Dataset, priors: GammaBetaPriors = GammaBetaPriors()) -> "PoissonLogModel":
        return cls(data.x[:, 0], data.x[:, 1], priors)

    @property
    def n_data(self) -> int:
        return self.n.size

    def log_joint_scaled(self, z, batch, scale):
        n = self.n if batch is None else self.n[batch]
        l = self.l if batch is None else self.l[batch]
        return poislog_log_joint(z[..., 0], z[..., 1], n, l, self.priors, scale)


class LogisticModel(ModelRef):
    tag = ModelTag.LOGISTIC

    def __init__(self, X: np.ndarray, y: np.ndarray, alpha_prior: float = 0.01,
                 z_names: Optional[Sequence[str]] = None):
        if alpha_prior <= 0:
            raise ValueError("prior precision must be positive")
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.alpha_prior = alpha_prior
        self.z_names = list(z_names) if z_names else [f"beta_{v}" for v in range(self.X.shape[1])]

    @classmethod
    def from_dataset(cls, data: Dataset, alpha_prior: float = 0.01) -> "LogisticModel":
        return cls(data.x, data.y, alpha_prior, [f"beta_{v}" for v in range(data.x.shape[1])])

    @property
    def n_data(self) -> int:
        return self.X.shape[0]

    def log_joint_scaled(self, z, batch, scale):
        X = self.X if batch is None else self.X[batch]
        y = self.y if batch is None else self.y[batch]
        return scale * logistic_loglik_batch(z, X, y) + logistic_log_prior(z, self.alpha_prior)
