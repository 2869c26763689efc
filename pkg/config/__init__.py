from .settings import SiviDefaults, GibbsDefaults, MfviDefaults, RunDefaults, DATA_DIR, OUTPUT_DIR
