"""
Semi-Implicit Studio - Semi-Implicit Family & Bound Estimators

The variational family h(z) = E_{psi ~ q_phi(psi)} q_xi(z | psi), where
psi = T_phi(eps) is an MLP pushforward of simple noise and q_xi(z | psi) is
an explicit, block-wise conditional.

Estimators (all Monte Carlo, J outer samples, K shared mixture samples):
- lower_bound_K:   surrogate lower bound; the log-density denominator
                   averages K+1 conditionals including the generating one
- upper_bound_K:   same, but the generating conditional is left out
- iw_lower_bound:  K~-sample importance-weighted version of the lower bound
- regularizer_B_K / correction_A_K: the gap terms between the bounds

Noise layout (substreams of the caller's RngStream):
    0 -> eps_j (mixer noise for the J samples)
    1 -> eps_z (conditional noise for z_j)
    2 -> eps_k (mixer noise for the K shared components)
Changing K therefore never changes psi_j or z_j for the same stream.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from config.settings import SiviDefaults
from models.joint import ModelRef
from models.schemas import ConditionalBlockDoc, PosteriorDocument
from tools import ndcore as nd
from tools.distributions import REPARAMETERIZABLE, DistSpec, Family, RngStream, logpdf, rsample, sample
from tools.errors import NotReparameterizableError, ShapeError
from tools.ndcore import Mlp, ParamVector, Tape, Tensor, as_tensor

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
TERM_CLIP = SiviDefaults.CLIP

SUB_EPS_J, SUB_EPS_Z, SUB_EPS_K = 0, 1, 2


# ============================================================
# Implicit mixer
# ============================================================

class NoiseFamily(str, Enum):
    GAUSSIAN = "gaussian"
    PEPPER_SALT = "pepper_salt"
    POINT = "point"


@dataclass
class ImplicitMixer:
    """psi = T_phi(eps) with eps from `noise`."""

    mlp: Mlp
    noise_dim: int
    noise: NoiseFamily = NoiseFamily.GAUSSIAN

    def __post_init__(self):
        self.noise = NoiseFamily(self.noise)
        if self.mlp.in_dim != self.noise_dim:
            raise ShapeError(f"mixer input width {self.mlp.in_dim} != noise dim {self.noise_dim}")

    @property
    def out_dim(self) -> int:
        return self.mlp.out_dim

    def sample_noise(self, rng: RngStream, count: int) -> np.ndarray:
        shape = (count, self.noise_dim)
        if self.noise == NoiseFamily.GAUSSIAN:
            return rng.normal(shape)
        if self.noise == NoiseFamily.PEPPER_SALT:
            return np.where(rng.uniform(shape) < 0.5, -1.0, 1.0)
        return np.zeros(shape)

    def push(self, eps: np.ndarray, phi: Optional[Tensor] = None) -> Tensor:
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape[0] == 0:
            return Tensor(np.zeros((0, self.out_dim)))
        if self.noise == NoiseFamily.POINT:
            # every row sees the same input; evaluate once so rows agree bit for bit
            return nd.broadcast_to(self.mlp.forward(eps[:1], phi), (eps.shape[0], self.out_dim))
        return self.mlp.forward(eps, phi)


def mix_sample(mixer: ImplicitMixer, rng: RngStream, count: int, tape: Optional[Tape] = None) -> Tensor:
    """`count` draws psi = T_phi(eps); phi is watched as "phi" when taped."""
    if count < 1:
        raise ValueError("count must be at least 1")
    phi = tape.watch(mixer.mlp.params.data, "phi") if tape is not None else None
    return mixer.push(mixer.sample_noise(rng, count), phi)


# ============================================================
# Explicit conditional
# ============================================================

_NORMAL_TYPES = (Family.MVN_DIAG, Family.LOG_NORMAL, Family.LOGIT_NORMAL)
_POSITIVE_PAIR = (Family.GAMMA, Family.BETA)


@dataclass(frozen=True)
class ConditionalBlock:
    """One factor of q_xi(z | psi) covering `z_dim` coordinates.

    Normal-type blocks take their location from psi; the variance is fixed
    when `variance` is set and otherwise learned in xi as a log variance.
    MvnFull always learns a Cholesky factor (exp on its diagonal).
    Gamma/Beta blocks read both parameters from psi through exp links.
    """

    family: Family
    z_dim: int = 1
    variance: Optional[float] = None
    init_variance: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.family not in _NORMAL_TYPES + _POSITIVE_PAIR + (Family.MVN_FULL,):
            raise ValueError(f"{self.family.value} cannot be a variational conditional")
        if self.z_dim < 1:
            raise ValueError("block dimension must be at least 1")
        if self.variance is not None and self.variance <= 0:
            raise ValueError("fixed variance must be positive")

    @property
    def psi_dim(self) -> int:
        return 2 * self.z_dim if self.family in _POSITIVE_PAIR else self.z_dim

    def xi_blocks(self, prefix: str) -> list[tuple[str, np.ndarray]]:
        d = self.z_dim
        if self.family == Family.MVN_FULL:
            return [(f"{prefix}.chol_off", np.zeros(d * (d - 1) // 2)),
                    (f"{prefix}.chol_logdiag", np.full(d, 0.5 * np.log(self.init_variance)))]
        if self.family in _NORMAL_TYPES and self.variance is None:
            return [(f"{prefix}.log_var", np.full(d, np.log(self.init_variance)))]
        return []

    def spec(self, psi: Tensor, xi: Tensor, layout: ParamVector, prefix: str) -> DistSpec:
        d = self.z_dim
        if self.family in _POSITIVE_PAIR:
            first, second = nd.exp(psi[..., :d]), nd.exp(psi[..., d:])
            return DistSpec(self.family, dict(zip(("shape", "rate") if self.family == Family.GAMMA
                                                  else ("alpha", "beta"), (first, second))))
        if self.family == Family.MVN_FULL:
            off = layout.slice_of(xi, f"{prefix}.chol_off")
            logdiag = layout.slice_of(xi, f"{prefix}.chol_logdiag")
            L = (nd.scatter(off, (d, d), np.tril_indices(d, -1))
                 + nd.scatter(nd.exp(logdiag), (d, d), np.diag_indices(d)))
            return DistSpec.mvn_full(psi, L)
        if self.variance is None:
            var = nd.exp(layout.slice_of(xi, f"{prefix}.log_var"))
        else:
            var = Tensor(np.full(d, self.variance))
        return DistSpec(self.family, {"mean": psi, "var": var})


@dataclass
class ExplicitConditional:
    """Product of blocks; z and psi are the concatenation of the block slices."""

    blocks: list[ConditionalBlock]

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("conditional needs at least one block")
        self.layout = ParamVector.from_blocks(
            [item for i, b in enumerate(self.blocks) for item in b.xi_blocks(f"b{i}")]
        )

    @property
    def z_dim(self) -> int:
        return sum(b.z_dim for b in self.blocks)

    @property
    def psi_dim(self) -> int:
        return sum(b.psi_dim for b in self.blocks)

    @property
    def reparameterizable(self) -> bool:
        return all(b.family in REPARAMETERIZABLE for b in self.blocks)

    @property
    def families(self) -> list[Family]:
        return [b.family for b in self.blocks]

    def initial_xi(self) -> ParamVector:
        return self.layout.with_data(self.layout.data)

    def _slices(self):
        z0 = p0 = 0
        for i, block in enumerate(self.blocks):
            yield i, block, slice(z0, z0 + block.z_dim), slice(p0, p0 + block.psi_dim)
            z0 += block.z_dim
            p0 += block.psi_dim

    def specs(self, psi: Tensor, xi: Optional[Tensor] = None) -> list[tuple[slice, DistSpec]]:
        psi = as_tensor(psi)
        if psi.shape[-1] != self.psi_dim:
            raise ShapeError(f"conditional expects psi width {self.psi_dim}, got {psi.shape}")
        xi = as_tensor(xi) if xi is not None else Tensor(self.layout.data)
        return [(zs, block.spec(psi[..., ps], xi, self.layout, f"b{i}"))
                for i, block, zs, ps in self._slices()]

    def log_prob(self, z: Tensor, psi: Tensor, xi: Optional[Tensor] = None) -> Tensor:
        z = as_tensor(z)
        total = None
        for zs, spec in self.specs(psi, xi):
            term = logpdf(spec, z[..., zs])
            total = term if total is None else total + term
        return total

    def rsample(self, psi: Tensor, xi: Optional[Tensor], noise: np.ndarray) -> Tensor:
        if not self.reparameterizable:
            raise NotReparameterizableError(
                "conditional has Gamma/Beta blocks; train it with flows.conjugate instead"
            )
        noise = np.asarray(noise, dtype=np.float64)
        parts = [rsample(spec, noise[..., zs]) for zs, spec in self.specs(psi, xi)]
        return parts[0] if len(parts) == 1 else nd.concat(parts, axis=-1)

    def sample(self, psi: np.ndarray, xi: Optional[np.ndarray], rng: RngStream) -> np.ndarray:
        """Exact draw for every family, one row per psi row."""
        psi = np.asarray(psi, dtype=np.float64)
        xi_t = Tensor(xi) if xi is not None else None
        out = np.empty(psi.shape[:-1] + (self.z_dim,))
        for i, (zs, spec) in enumerate(self.specs(Tensor(psi), xi_t)):
            sub = rng.substream(i)
            if spec.reparameterizable:
                out[..., zs] = rsample(spec, sub.normal(psi.shape[:-1] + (zs.stop - zs.start,))).data
            else:
                out[..., zs] = sample(spec, sub)
        return out

    def describe(self) -> list[ConditionalBlockDoc]:
        return [ConditionalBlockDoc(family=b.family.value, z_dim=b.z_dim, variance=b.variance,
                                    init_variance=b.init_variance) for b in self.blocks]


@dataclass
class SemiImplicitPosterior:
    mixer: ImplicitMixer
    conditional: ExplicitConditional
    xi: ParamVector
    seed: int = 0
    z_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.mixer.out_dim != self.conditional.psi_dim:
            raise ShapeError(f"mixer emits {self.mixer.out_dim} values, conditional needs "
                             f"{self.conditional.psi_dim}")
        if self.xi.size != self.conditional.layout.size:
            raise ShapeError("xi does not match the conditional's parameter layout")
        if not self.z_names:
            self.z_names = [f"z{i + 1}" for i in range(self.conditional.z_dim)]

    @property
    def z_dim(self) -> int:
        return self.conditional.z_dim

    @property
    def phi(self) -> ParamVector:
        return self.mixer.mlp.params

    def with_params(self, phi: np.ndarray, xi: np.ndarray) -> "SemiImplicitPosterior":
        mixer = ImplicitMixer(self.mixer.mlp.with_params(phi), self.mixer.noise_dim, self.mixer.noise)
        return SemiImplicitPosterior(mixer, self.conditional, self.xi.with_data(xi),
                                     self.seed, list(self.z_names))


def build_posterior(conditional: ExplicitConditional, hidden: Sequence[int], noise_dim: int,
                    noise: Union[NoiseFamily, str] = NoiseFamily.GAUSSIAN, seed: int = 0,
                    z_names: Optional[Sequence[str]] = None) -> SemiImplicitPosterior:
    """Glorot-initialized mixer feeding `conditional`."""
    sizes = [noise_dim, *hidden, conditional.psi_dim]
    mlp = Mlp.glorot(sizes, RngStream(seed).substream(0).generator)
    return SemiImplicitPosterior(ImplicitMixer(mlp, noise_dim, NoiseFamily(noise)), conditional,
                                 conditional.initial_xi(), seed, list(z_names or []))


# ============================================================
# Bound estimators
# ============================================================

@dataclass
class BoundNoise:
    eps_j: np.ndarray
    eps_z: np.ndarray
    eps_k: np.ndarray
    rng: RngStream

    @property
    def J(self) -> int:
        return self.eps_j.shape[0]

    @property
    def K(self) -> int:
        return self.eps_k.shape[0]


def draw_bound_noise(post: SemiImplicitPosterior, rng: RngStream, J: int, K: int) -> BoundNoise:
    if J < 1:
        raise ValueError("J must be at least 1")
    if K < 0:
        raise ValueError("K must be non-negative")
    return BoundNoise(
        eps_j=post.mixer.sample_noise(rng.substream(SUB_EPS_J), J),
        eps_z=rng.substream(SUB_EPS_Z).normal((J, post.z_dim)),
        eps_k=post.mixer.sample_noise(rng.substream(SUB_EPS_K), K),
        rng=rng,
    )


@dataclass
class BoundEstimate:
    value: float
    per_sample_terms: np.ndarray
    K_used: int
    Ktilde_used: int = 1
    clipped: int = 0
    tensor: Optional[Tensor] = field(default=None, repr=False)

    @property
    def J(self) -> int:
        return self.per_sample_terms.size

    @property
    def standard_error(self) -> float:
        if self.J < 2:
            return float("nan")
        return float(np.std(self.per_sample_terms, ddof=1) / np.sqrt(self.J))


def log_q_matrix(post: SemiImplicitPosterior, z: Tensor, psi_j: Tensor, psi_k: Optional[Tensor],
                 xi: Optional[Tensor]) -> Tensor:
    """(J, K+1) matrix of log q(z_j | psi); column 0 uses psi_j, columns 1..K the shared psi_k."""
    J, p = psi_j.shape
    cols = [nd.expand_dims(psi_j, 1)]
    if psi_k is not None and psi_k.shape[0] > 0:
        cols.append(nd.broadcast_to(nd.expand_dims(psi_k, 0), (J, psi_k.shape[0], p)))
    psi_all = nd.concat(cols, axis=1) if len(cols) > 1 else cols[0]
    return post.conditional.log_prob(nd.expand_dims(z, 1), psi_all, xi)


def draw_z(post: SemiImplicitPosterior, psi_j: Tensor, xi: Optional[Tensor], noise: BoundNoise) -> Tensor:
    """Pathwise z_j when the conditional allows it, otherwise a constant exact draw."""
    if post.conditional.reparameterizable:
        return post.conditional.rsample(psi_j, xi, noise.eps_z)
    xi_data = None if xi is None else xi.data
    return Tensor(post.conditional.sample(psi_j.data, xi_data, noise.rng.substream(SUB_EPS_Z)))


def clip_terms(terms: Tensor, where: str = "") -> tuple[Tensor, int]:
    over = int(np.sum(np.abs(terms.data) > TERM_CLIP))
    if over:
        logger.warning("Clipped %d per-sample bound terms to +/-%.0e %s", over, TERM_CLIP, where)
    return nd.clip(terms, -TERM_CLIP, TERM_CLIP), over


def _model_log_joint(model: ModelRef, z: Tensor, batch: Optional[np.ndarray], N: Optional[int]) -> Tensor:
    if batch is None:
        return model.log_joint(z)
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size == 0:
        raise ValueError("minibatch is empty")
    n_total = model.n_data if N is None else N
    if batch.size > n_total:
        raise ValueError("minibatch larger than the data set")
    return model.log_joint_scaled(z, batch, n_total / batch.size)


def bound_terms(post: SemiImplicitPosterior, model: ModelRef, noise: BoundNoise,
                batch: Optional[np.ndarray] = None, N: Optional[int] = None,
                phi: Optional[Tensor] = None, xi: Optional[Tensor] = None,
                upper: bool = False) -> Tensor:
    """Per-sample terms log p(x, z_j) - log of the mixture denominator, shape (J,)."""
    if not post.conditional.reparameterizable:
        raise NotReparameterizableError(
            "pathwise bounds need a reparameterizable conditional; use flows.conjugate"
        )
    if upper and noise.K < 1:
        raise ValueError("the upper bound needs K >= 1")
    psi_j = post.mixer.push(noise.eps_j, phi)
    z = draw_z(post, psi_j, xi, noise)
    psi_k = post.mixer.push(noise.eps_k, phi) if noise.K else None
    logq = log_q_matrix(post, z, psi_j, psi_k, xi)
    denom = nd.logmeanexp(logq[:, 1:] if upper else logq, axis=1)
    return _model_log_joint(model, z, batch, N) - denom


def _watch(post: SemiImplicitPosterior, tape: Optional[Tape]) -> tuple[Optional[Tensor], Optional[Tensor]]:
    if tape is None:
        return None, None
    return tape.watch(post.phi.data, "phi"), tape.watch(post.xi.data, "xi")


def _estimate(terms: Tensor, K: int, Ktilde: int = 1, where: str = "") -> BoundEstimate:
    terms, clipped = clip_terms(terms, where)
    mean = nd.tmean(terms)
    return BoundEstimate(value=mean.item(), per_sample_terms=terms.data.copy(), K_used=K,
                         Ktilde_used=Ktilde, clipped=clipped, tensor=mean)


def lower_bound_K(post: SemiImplicitPosterior, model: ModelRef, batch: Optional[np.ndarray] = None,
                  N: Optional[int] = None, K: int = 0, J: int = 50, rng: Optional[RngStream] = None,
                  tape: Optional[Tape] = None) -> BoundEstimate:
    """Surrogate lower bound with K shared mixture components.

    With a tape, phi and xi are watched as "phi" and "xi" and the returned
    estimate's `tensor` is the differentiable mean.
    """
    rng = rng if rng is not None else RngStream(post.seed)
    noise = draw_bound_noise(post, rng, J, K)
    phi, xi = _watch(post, tape)
    return _estimate(bound_terms(post, model, noise, batch, N, phi, xi), K, where="(lower bound)")


def upper_bound_K(post: SemiImplicitPosterior, model: ModelRef, batch: Optional[np.ndarray] = None,
                  N: Optional[int] = None, K: int = 1, J: int = 50, rng: Optional[RngStream] = None,
                  tape: Optional[Tape] = None) -> BoundEstimate:
    if K < 1:
        raise ValueError("the upper bound is undefined for K = 0")
    rng = rng if rng is not None else RngStream(post.seed)
    noise = draw_bound_noise(post, rng, J, K)
    phi, xi = _watch(post, tape)
    return _estimate(bound_terms(post, model, noise, batch, N, phi, xi, upper=True), K, where="(upper bound)")


def iw_lower_bound(post: SemiImplicitPosterior, model: ModelRef, batch: Optional[np.ndarray] = None,
                   N: Optional[int] = None, K: int = 0, Ktilde: int = 1, J_outer: int = 50,
                   rng: Optional[RngStream] = None) -> BoundEstimate:
    """log of the Ktilde-sample importance average, averaged over J_outer replications."""
    if Ktilde < 1:
        raise ValueError("Ktilde must be at least 1")
    rng = rng if rng is not None else RngStream(post.seed)
    noise = draw_bound_noise(post, rng, J_outer * Ktilde, K)
    terms = bound_terms(post, model, noise, batch, N)
    grouped = nd.logmeanexp(nd.reshape(terms, (J_outer, Ktilde)), axis=1)
    return _estimate(grouped, K, Ktilde, where="(importance-weighted bound)")


def _log_q_untaped(post: SemiImplicitPosterior, K: int, J: int, rng: RngStream) -> np.ndarray:
    noise = draw_bound_noise(post, rng, J, K)
    psi_j = post.mixer.push(noise.eps_j)
    z = draw_z(post, psi_j, None, noise)
    psi_k = post.mixer.push(noise.eps_k) if K else None
    return log_q_matrix(post, z, psi_j, psi_k, None).data


def regularizer_B_K(post: SemiImplicitPosterior, K: int, J: int = 50, rng: Optional[RngStream] = None) -> float:
    """Mean over j of log q(z_j | psi_j) minus the (K+1)-component log mixture."""
    rng = rng if rng is not None else RngStream(post.seed)
    logq = _log_q_untaped(post, K, J, rng)
    return float(np.mean(logq[:, 0] - nd.logmeanexp(logq, axis=1).data))


def correction_A_K(post: SemiImplicitPosterior, K: int, J: int = 50, rng: Optional[RngStream] = None) -> float:
    """Gap between log of the K-component mixture average and the average log density.

    Expectations over psi^(1:K) of the per-component log density are taken by
    averaging over the K components of each replicate.
    """
    if K < 1:
        raise ValueError("A_K needs K >= 1")
    rng = rng if rng is not None else RngStream(post.seed)
    comps = _log_q_untaped(post, K, J, rng)[:, 1:]
    shifted = comps - comps.max(axis=1, keepdims=True)
    return float(np.mean(nd.logmeanexp(shifted, axis=1).data - shifted.mean(axis=1)))


# ============================================================
# Sampling and diagnostics on a posterior
# ============================================================

def posterior_draws(post: SemiImplicitPosterior, rng: RngStream, count: int) -> np.ndarray:
    """`count` iid draws eps -> psi -> z, shape (count, z_dim)."""
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return np.zeros((0, post.z_dim))
    psi = post.mixer.push(post.mixer.sample_noise(rng.substream(SUB_EPS_J), count)).data
    return post.conditional.sample(psi, post.xi.data, rng.substream(SUB_EPS_Z))


def mixer_spread(post: SemiImplicitPosterior, rng: RngStream, count: int = 50) -> float:
    """Average over psi dimensions of the sample sd of `count` mixer outputs."""
    psi = post.mixer.push(post.mixer.sample_noise(rng, count)).data
    return float(np.mean(np.std(psi, axis=0)))


# ============================================================
# Serialization
# ============================================================

def posterior_to_document(post: SemiImplicitPosterior) -> PosteriorDocument:
    return PosteriorDocument(
        format_version=FORMAT_VERSION,
        layer_sizes=list(post.mixer.mlp.layer_sizes),
        phi=post.phi.data.tolist(),
        xi=post.xi.data.tolist(),
        conditional=post.conditional.describe(),
        noise_dim=post.mixer.noise_dim,
        noise=post.mixer.noise.value,
        seed=post.seed,
        z_names=list(post.z_names),
    )


def posterior_from_document(doc: PosteriorDocument) -> SemiImplicitPosterior:
    if doc.format_version != FORMAT_VERSION:
        raise ValueError(f"unsupported posterior format version {doc.format_version}")
    conditional = ExplicitConditional([
        ConditionalBlock(Family(b.family), b.z_dim, b.variance, b.init_variance) for b in doc.conditional
    ])
    layout = Mlp.layout_for(doc.layer_sizes)
    mlp = Mlp(list(doc.layer_sizes), ParamVector(np.asarray(doc.phi), layout))
    mixer = ImplicitMixer(mlp, doc.noise_dim, NoiseFamily(doc.noise))
    return SemiImplicitPosterior(mixer, conditional, conditional.layout.with_data(np.asarray(doc.xi)),
                                 doc.seed, list(doc.z_names))


def save_posterior(post: SemiImplicitPosterior, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(posterior_to_document(post).model_dump_json(indent=2))
    logger.info("Saved posterior to %s", path)
    return path


def load_posterior(path: Union[str, Path]) -> SemiImplicitPosterior:
    doc = PosteriorDocument.model_validate(json.loads(Path(path).read_text()))
    return posterior_from_document(doc)
