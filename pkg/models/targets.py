"""
Semi-Implicit Studio - Toy Targets

Normalized toy posteriors used to show what a semi-implicit family
can express that a single Gaussian or log-normal cannot: skewness, heavy
tails, multimodality and strong nonlinear dependence.

Every target has an exact log density and an exact sampler, so trained
posteriors can be compared to ground truth draws.
"""

from __future__ import annotations

from enum import Enum
from typing import Union

import numpy as np
from scipy import special

from tools import ndcore as nd
from tools.distributions import Family, RngStream
from tools.ndcore import Tensor, as_tensor

LOG_2PI = float(np.log(2.0 * np.pi))


class ToyVariant(str, Enum):
    LAPLACE = "laplace"
    BIMODAL = "bimodal"
    GAMMA = "gamma"
    TWO_GAUSSIANS_2D = "two_gaussians_2d"
    BANANA = "banana"
    X_SHAPED = "x_shaped"
    STANDARD_NORMAL = "standard_normal"


# (weight, mean, covariance) per component
_MIXTURES = {
    ToyVariant.BIMODAL: [
        (0.3, np.array([-2.0]), np.array([[1.0]])),
        (0.7, np.array([2.0]), np.array([[1.0]])),
    ],
    ToyVariant.TWO_GAUSSIANS_2D: [
        (0.5, np.full(2, -2.0), np.eye(2)),
        (0.5, np.full(2, 2.0), np.eye(2)),
    ],
    ToyVariant.X_SHAPED: [
        (0.5, np.zeros(2), np.array([[2.0, 1.8], [1.8, 2.0]])),
        (0.5, np.zeros(2), np.array([[2.0, -1.8], [-1.8, 2.0]])),
    ],
    ToyVariant.STANDARD_NORMAL: [
        (1.0, np.zeros(1), np.eye(1)),
    ],
}

TOY_DIMS = {
    ToyVariant.LAPLACE: 1,
    ToyVariant.BIMODAL: 1,
    ToyVariant.GAMMA: 1,
    ToyVariant.TWO_GAUSSIANS_2D: 2,
    ToyVariant.BANANA: 2,
    ToyVariant.X_SHAPED: 2,
    ToyVariant.STANDARD_NORMAL: 1,
}

# explicit conditional used for each target; gamma needs positive support
TOY_CONDITIONAL = {v: Family.MVN_DIAG for v in ToyVariant}
TOY_CONDITIONAL[ToyVariant.GAMMA] = Family.LOG_NORMAL

LAPLACE_SCALE = 2.0
GAMMA_SHAPE = 2.0


def _gaussian_logpdf(z: Tensor, mean: np.ndarray, cov: np.ndarray) -> Tensor:
    d = mean.size
    precision = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    diff = z - mean
    flat = nd.reshape(diff, (-1, d))
    quad = nd.tsum(nd.matmul(flat, precision) * flat, axis=-1)
    quad = nd.reshape(quad, diff.shape[:-1])
    return -0.5 * quad - 0.5 * (logdet + d * LOG_2PI)


def toy_target_logpdf(variant: Union[ToyVariant, str], z: Union[Tensor, np.ndarray]) -> Tensor:
    """Log density of a toy target at z of shape (..., dim)."""
    variant = ToyVariant(variant)
    z = as_tensor(z)
    if z.shape[-1] != TOY_DIMS[variant]:
        raise ValueError(f"{variant.value} is {TOY_DIMS[variant]}-dimensional, got z of shape {z.shape}")

    if variant == ToyVariant.LAPLACE:
        b = LAPLACE_SCALE
        return nd.tsum(-np.log(2.0 * b) - nd.tabs(z) / b, axis=-1)

    if variant == ToyVariant.GAMMA:
        ok = z.data > 0
        zs = nd.where(ok, z, 1.0)
        terms = (GAMMA_SHAPE - 1.0) * nd.log(zs) - zs - float(special.gammaln(GAMMA_SHAPE))
        return nd.tsum(nd.where(ok, terms, -np.inf), axis=-1)

    if variant == ToyVariant.BANANA:
        z1, z2 = z[..., 0], z[..., 1]
        return (-0.5 * nd.square(z1 - nd.square(z2) / 4.0) - 0.5 * LOG_2PI
                - 0.5 * nd.square(z2) / 4.0 - 0.5 * (np.log(4.0) + LOG_2PI))

    components = [np.log(w) + _gaussian_logpdf(z, mean, cov) for w, mean, cov in _MIXTURES[variant]]
    if len(components) == 1:
        return components[0]
    return nd.logsumexp(nd.stack(components, axis=-1), axis=-1)


def toy_target_sample(variant: Union[ToyVariant, str], rng: RngStream, count: int) -> np.ndarray:
    """Exact draws of shape (count, dim)."""
    variant = ToyVariant(variant)
    gen = rng.generator
    if variant == ToyVariant.LAPLACE:
        return gen.laplace(0.0, LAPLACE_SCALE, size=(count, 1))
    if variant == ToyVariant.GAMMA:
        return gen.gamma(GAMMA_SHAPE, 1.0, size=(count, 1))
    if variant == ToyVariant.BANANA:
        z2 = gen.normal(0.0, 2.0, size=count)
        z1 = gen.normal(z2 ** 2 / 4.0, 1.0)
        return np.column_stack([z1, z2])
    comps = _MIXTURES[variant]
    weights = np.array([w for w, _, _ in comps])
    which = gen.choice(len(comps), size=count, p=weights)
    out = np.empty((count, TOY_DIMS[variant]))
    for c, (_, mean, cov) in enumerate(comps):
        idx = np.flatnonzero(which == c)
        out[idx] = gen.multivariate_normal(mean, cov, size=idx.size)
    return out
