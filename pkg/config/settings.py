"""
Semi-Implicit Studio - Configuration

Process-level defaults. Every value can be overridden through the
environment (or a .env file next to the working directory); run-specific
settings live in the JSON/YAML run configs instead.
"""

import os
from pathlib import Path
from dotenv import load_dotenv

load_dotenv()

BASE_DIR = Path(__file__).parent.parent
DATA_DIR = Path(os.getenv("SIVI_DATA_DIR", str(BASE_DIR / "data")))
OUTPUT_DIR = Path(os.getenv("OUTPUT_DIR", "./output"))


def _int(name: str, default: int) -> int:
    return int(os.getenv(name, str(default)))


def _float(name: str, default: float) -> float:
    return float(os.getenv(name, str(default)))


# ============================================================
# SIVI OPTIMIZER DEFAULTS
# ============================================================

class SiviDefaults:
    J = _int("SIVI_J", 50)
    PHI_LR = _float("SIVI_PHI_LR", 0.01)           # Adam on the mixer weights
    XI_STEP = _float("SIVI_XI_STEP", 0.001)        # plain ascent on xi ...
    XI_DECAY = _float("SIVI_XI_DECAY", 0.9)        # ... decayed by 0.9 every XI_DECAY_EVERY steps
    XI_DECAY_EVERY = _int("SIVI_XI_DECAY_EVERY", 100)
    RAMP_FRACTION = _float("SIVI_RAMP_FRACTION", 0.5)
    CLIP = _float("SIVI_CLIP", 1e8)
    LOG_EVERY = _int("SIVI_LOG_EVERY", 100)
    PG_TRUNC = _int("SIVI_PG_TRUNC", 5)


# ============================================================
# BASELINES
# ============================================================

class GibbsDefaults:
    BURN_IN = _int("GIBBS_BURN_IN", 2000)
    DRAWS = _int("GIBBS_DRAWS", 10000)
    THIN = _int("GIBBS_THIN", 1)
    JITTER = _float("GIBBS_JITTER", 1e-10)


class MfviDefaults:
    TOL = _float("MFVI_TOL", 1e-8)
    MAX_ITERS = _int("MFVI_MAX_ITERS", 5000)


# ============================================================
# RUNS
# ============================================================

class RunDefaults:
    OUTPUT_DIR = OUTPUT_DIR
    DRAWS = _int("SIVI_DRAWS", 2000)
    KS_DRAWS = _int("SIVI_KS_DRAWS", 2000)
    SEED = _int("SIVI_SEED", 0)
    LOG_LEVEL = os.getenv("SIVI_LOG_LEVEL", "INFO")
    RED_MITES = DATA_DIR / "red_mites.txt"
