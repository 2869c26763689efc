"""
Semi-Implicit Studio - Pydantic Schemas

Run configurations, run reports and serialized posteriors. Everything a
run reads or writes as JSON is validated against these models.
"""

from __future__ import annotations

from enum import Enum
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from models.targets import ToyVariant

SCHEMA_VERSION = 1


# ============================================================
# Enums
# ============================================================

class Experiment(str, Enum):
    TOY = "toy"
    NB = "nb"
    POISLOG = "poislog"
    LOGISTIC = "logistic"


class ScheduleKind(str, Enum):
    RAMP = "ramp"            # 1 -> K over the first ramp_fraction of iterations
    CONSTANT = "constant"    # K throughout


class CovarianceKind(str, Enum):
    DIAG = "diag"
    FULL = "full"


# ============================================================
# Run configuration
# ============================================================

class SiviSettings(BaseModel):
    """Semi-implicit posterior and optimizer settings."""

    K: int = Field(ge=0, description="Mixture components in the surrogate bound (K_max of the schedule)")
    J: int = Field(default=50, ge=1, description="Outer Monte Carlo samples per step")
    schedule: ScheduleKind = Field(default=ScheduleKind.RAMP)
    ramp_fraction: float = Field(default=0.5, gt=0.0, le=1.0)
    hidden: list[int] = Field(default_factory=lambda: [30, 60, 30], description="Hidden MLP widths")
    noise_dim: int = Field(default=10, ge=1)
    noise: Literal["gaussian", "pepper_salt", "point"] = "gaussian"
    sigma0_sq: Optional[float] = Field(default=0.1, gt=0.0,
                                       description="Fixed conditional variance; null learns it in xi")
    covariance: CovarianceKind = Field(default=CovarianceKind.DIAG,
                                       description="Logistic only: diagonal or full explicit covariance")
    iterations: int = Field(default=2000, ge=0)
    phi_lr: float = Field(default=0.01, gt=0.0)
    xi_step: float = Field(default=0.001, gt=0.0)
    xi_decay: float = Field(default=0.9, gt=0.0, le=1.0)
    xi_decay_every: int = Field(default=100, ge=1)
    batch_size: Optional[int] = Field(default=None, ge=1)
    draws: int = Field(default=2000, ge=0, description="Posterior draws exported after training")

    @field_validator("hidden")
    @classmethod
    def _widths_positive(cls, v: list[int]) -> list[int]:
        if any(w < 1 for w in v):
            raise ValueError("hidden widths must be >= 1")
        return v


class SyntheticSettings(BaseModel):
    N: int = Field(default=100, ge=1, description="Rows to generate")
    r: float = Field(default=2.0, gt=0.0)
    p: float = Field(default=0.5, gt=0.0, lt=1.0)
    V: int = Field(default=2, ge=1, description="Logistic covariates")


class ModelSettings(BaseModel):
    variant: Optional[str] = Field(default=None, description="Toy target name")
    a: float = Field(default=0.01, gt=0.0)
    b: float = Field(default=0.01, gt=0.0)
    alpha: float = Field(default=0.01, gt=0.0)
    beta: float = Field(default=0.01, gt=0.0)
    alpha_prior: float = Field(default=0.01, gt=0.0, description="Gaussian prior precision (logistic)")
    synthetic: Optional[SyntheticSettings] = None


class BaselineSettings(BaseModel):
    gibbs: bool = True
    mfvi: bool = True
    mfvi_diag: bool = True
    mfvi_full: bool = True
    gibbs_burn_in: int = Field(default=2000, ge=0)
    gibbs_draws: int = Field(default=10000, ge=1)
    gibbs_thin: int = Field(default=1, ge=1)
    pg_trunc: int = Field(default=5, ge=1)
    mfvi_iterations: int = Field(default=5000, ge=1)
    mfvi_tol: float = Field(default=1e-8, gt=0.0)
    mfvi_nb_iterations: int = Field(default=2000, ge=0)


class RunConfig(BaseModel):
    schema_version: Literal[1] = SCHEMA_VERSION
    experiment: Experiment
    seed: int = Field(default=0, ge=0)
    dataset: Optional[str] = Field(default=None, description="Counts file or CSV")
    test_dataset: Optional[str] = None
    test_fraction: Optional[float] = Field(default=None, gt=0.0, lt=1.0)
    label: str = "y"
    output_dir: str = "./output"
    model: ModelSettings = Field(default_factory=ModelSettings)
    sivi: SiviSettings
    baselines: BaselineSettings = Field(default_factory=BaselineSettings)
    k_sweep: list[int] = Field(default_factory=list)
    ks_draws: int = Field(default=2000, ge=2)

    @field_validator("k_sweep")
    @classmethod
    def _sweep_non_negative(cls, v: list[int]) -> list[int]:
        if any(k < 0 for k in v):
            raise ValueError("k_sweep entries must be >= 0")
        return v

    @model_validator(mode="after")
    def _cross_field(self) -> "RunConfig":
        if self.experiment == Experiment.TOY:
            if not self.model.variant:
                raise ValueError("toy experiments need model.variant")
            known = [v.value for v in ToyVariant]
            if self.model.variant not in known:
                raise ValueError(f"unknown toy variant {self.model.variant!r}; expected one of {known}")
        if self.experiment == Experiment.POISLOG and self.sivi.batch_size is not None:
            raise ValueError("poislog experiments train on the full data; remove sivi.batch_size")
        if self.experiment == Experiment.NB and not self.dataset:
            raise ValueError("nb experiments need a counts file in `dataset`")
        if self.experiment == Experiment.LOGISTIC and not self.dataset and self.model.synthetic is None:
            raise ValueError("logistic experiments need `dataset` (or model.synthetic)")
        for name in ("dataset", "test_dataset"):
            path = getattr(self, name)
            if path and not Path(path).exists():
                raise ValueError(f"{name} file not found: {path}")
        return self


class ValidationIssue(BaseModel):
    loc: str
    msg: str
    type: str
    line: Optional[int] = None
    column: Optional[int] = None


# ============================================================
# Results
# ============================================================

class KsResult(BaseModel):
    statistic: float = Field(ge=0.0, le=1.0)
    p_value: float = Field(ge=0.0, le=1.0)
    n1: int
    n2: int


class KsEntry(BaseModel):
    method: str
    reference: str
    variable: str
    statistic: float
    p_value: float
    n1: int
    n2: int
    K: Optional[int] = None


class MomentTable(BaseModel):
    method: str
    variables: list[str]
    means: list[float]
    sds: list[float]
    correlation: list[list[float]]
    zero_variance: list[str] = Field(default_factory=list)


class RunReport(BaseModel):
    schema_version: Literal[1] = SCHEMA_VERSION
    experiment: Experiment
    seed: int
    config: dict
    traces: dict[str, str] = Field(default_factory=dict, description="name -> trace CSV")
    draw_files: dict[str, str] = Field(default_factory=dict, description="method -> draws CSV")
    posterior_file: Optional[str] = None
    ks_table: list[KsEntry] = Field(default_factory=list)
    moments: list[MomentTable] = Field(default_factory=list)
    predictive: dict[str, dict[str, float]] = Field(default_factory=dict)
    predictive_file: Optional[str] = None
    k_sweep: list[KsEntry] = Field(default_factory=list)
    k_sweep_spearman: dict[str, float] = Field(default_factory=dict)
    plot_files: list[str] = Field(default_factory=list)
    timing: dict[str, float] = Field(default_factory=dict)
    status: str = "ok"
    notes: list[str] = Field(default_factory=list)


# ============================================================
# Serialized posterior
# ============================================================

class ConditionalBlockDoc(BaseModel):
    family: str
    z_dim: int = Field(ge=1)
    variance: Optional[float] = None
    init_variance: float = 0.1


class PosteriorDocument(BaseModel):
    format_version: int = 1
    layer_sizes: list[int]
    phi: list[float]
    xi: list[float]
    conditional: list[ConditionalBlockDoc]
    noise_dim: int
    noise: str
    seed: int
    z_names: list[str] = Field(default_factory=list)
