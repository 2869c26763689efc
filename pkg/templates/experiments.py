"""
Semi-Implicit Studio - Experiment Templates

Per-experiment defaults. A user config is deep-merged over the template for
its `experiment` before schema validation, so a config holding little more
than the experiment name gets the standard setup:

  toy       MLP [30, 60, 30], 10-dim Gaussian noise, fixed sigma0^2 = 0.1
  nb        red-mite counts, LogNormal x LogitNormal with sigma0 = 0.1, K = 1000
  poislog   Gamma x Beta conditional (score gradients), K = 200
  logistic  MLP [100, 200, 100], 50-dim noise, learned covariance, K = 500
"""

from __future__ import annotations

import copy
from typing import Any

from config.settings import GibbsDefaults, MfviDefaults, RunDefaults, SiviDefaults
from flows.sivi import ConditionalBlock, ExplicitConditional
from models.schemas import CovarianceKind, Experiment, RunConfig
from models.targets import TOY_CONDITIONAL, TOY_DIMS, ToyVariant
from tools.distributions import Family


# ============================================================
# DEFAULTS
# ============================================================

_COMMON: dict[str, Any] = {
    "seed": RunDefaults.SEED,
    "output_dir": str(RunDefaults.OUTPUT_DIR),
    "ks_draws": RunDefaults.KS_DRAWS,
    "sivi": {
        "J": SiviDefaults.J,
        "ramp_fraction": SiviDefaults.RAMP_FRACTION,
        "phi_lr": SiviDefaults.PHI_LR,
        "xi_step": SiviDefaults.XI_STEP,
        "xi_decay": SiviDefaults.XI_DECAY,
        "xi_decay_every": SiviDefaults.XI_DECAY_EVERY,
        "draws": RunDefaults.DRAWS,
    },
    "baselines": {
        "gibbs_burn_in": GibbsDefaults.BURN_IN,
        "gibbs_draws": GibbsDefaults.DRAWS,
        "gibbs_thin": GibbsDefaults.THIN,
        "pg_trunc": SiviDefaults.PG_TRUNC,
        "mfvi_iterations": MfviDefaults.MAX_ITERS,
        "mfvi_tol": MfviDefaults.TOL,
    },
}

EXPERIMENT_DEFAULTS: dict[str, dict[str, Any]] = {
    Experiment.TOY.value: {
        # the toy runs have no reference baselines
        "sivi": {"K": 100, "hidden": [30, 60, 30], "noise_dim": 10, "sigma0_sq": 0.1, "iterations": 5000},
        "baselines": {"gibbs": False, "mfvi": False, "mfvi_diag": False, "mfvi_full": False},
    },
    Experiment.NB.value: {
        "dataset": str(RunDefaults.RED_MITES),
        "sivi": {"K": 1000, "hidden": [30, 60, 30], "noise_dim": 10, "sigma0_sq": 0.01, "iterations": 2000},
        "baselines": {"mfvi_diag": False, "mfvi_full": False},
        "k_sweep": [1, 5, 20, 100, 1000],
    },
    Experiment.POISLOG.value: {
        "model": {"synthetic": {"N": 100, "r": 2.0, "p": 0.5}},
        "sivi": {"K": 200, "hidden": [30, 60, 30], "noise_dim": 10, "sigma0_sq": None, "iterations": 2000},
        "baselines": {"mfvi_diag": False, "mfvi_full": False},
    },
    Experiment.LOGISTIC.value: {
        "test_fraction": 0.2,
        "sivi": {"K": 500, "hidden": [100, 200, 100], "noise_dim": 50, "sigma0_sq": None,
                 "covariance": CovarianceKind.FULL.value, "iterations": 1000},
        "baselines": {"mfvi": False},
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; lists and scalars in `override` replace."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def with_defaults(raw: dict) -> dict:
    """Merge a raw config over the template of its experiment (unknown names pass through)."""
    template = EXPERIMENT_DEFAULTS.get(str(raw.get("experiment", "")))
    if template is None:
        return raw
    merged = deep_merge(deep_merge(_COMMON, template), raw)
    # a user-supplied dataset replaces the synthetic default
    if raw.get("dataset") and "synthetic" not in raw.get("model", {}):
        merged.get("model", {}).pop("synthetic", None)
    return merged


# ============================================================
# CONDITIONALS
# ============================================================

def build_conditional(config: RunConfig, z_dim: int) -> ExplicitConditional:
    """The explicit conditional q(z | psi) each experiment trains."""
    sivi = config.sivi
    if config.experiment == Experiment.TOY:
        variant = ToyVariant(config.model.variant)
        return ExplicitConditional([ConditionalBlock(TOY_CONDITIONAL[variant], TOY_DIMS[variant],
                                                     variance=sivi.sigma0_sq)])
    if config.experiment == Experiment.NB:
        return ExplicitConditional([ConditionalBlock(Family.LOG_NORMAL, variance=sivi.sigma0_sq),
                                    ConditionalBlock(Family.LOGIT_NORMAL, variance=sivi.sigma0_sq)])
    if config.experiment == Experiment.POISLOG:
        return ExplicitConditional([ConditionalBlock(Family.GAMMA), ConditionalBlock(Family.BETA)])
    if sivi.covariance == CovarianceKind.FULL:
        return ExplicitConditional([ConditionalBlock(Family.MVN_FULL, z_dim)])
    return ExplicitConditional([ConditionalBlock(Family.MVN_DIAG, z_dim, variance=sivi.sigma0_sq)])
