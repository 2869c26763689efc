"""
Semi-Implicit Studio - Experiment Pipeline

Config in, artifacts out. A run:
  1. loads the JSON/YAML config, merges it over the experiment template and
     validates it (ConfigError with a machine-readable issue list otherwise)
  2. prepares data, trains the semi-implicit posterior and runs the enabled
     baselines (Gibbs, MFVI)
  3. writes draws and traces as CSV, the posterior as JSON, plot data,
     report.json (deterministic) and timing.json (wall clock)

Every random choice descends from the config seed through fixed stage tags,
so (config, seed) determines every byte of the draw and trace files.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
import yaml
from pydantic import ValidationError

from config.run_log import RunLogger
from config.settings import SiviDefaults
from flows.conjugate import hooks_for, train_conjugate
from flows.sivi import build_posterior, load_posterior, posterior_draws, save_posterior
from flows.training import TrainConfig, TrainedPosterior, constant_schedule, ramp_schedule, train
from models.joint import (
    Dataset, GammaBetaPriors, LogisticModel, ModelRef, NegBinomialModel, PoissonLogModel, ToyModel,
    load_counts, load_logistic_csv, load_pairs_csv, poislog_synth, predictive_probs, split_dataset,
    synth_logistic,
)
from models.schemas import (
    Experiment, KsEntry, RunConfig, RunReport, ScheduleKind, SiviSettings, ValidationIssue,
)
from models.targets import TOY_DIMS, ToyVariant, toy_target_logpdf, toy_target_sample
from templates.experiments import build_conditional, with_defaults
from tools.baselines import (
    mfvi_conjugate, mfvi_logistic_diag, mfvi_logistic_full, nb_gibbs, pg_gibbs, poislog_gibbs,
)
from tools.diagnostics import (
    density_grid, histogram_table, ks_two_sample, log_density_grid, quartile_drop, spearman_trend,
    summary_stats,
)
from tools.distributions import RngStream
from tools.errors import ConfigError, TrainingDiverged

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"

# stage tags for seed derivation
SEED_INIT, SEED_TRAIN, SEED_DRAWS, SEED_GIBBS, SEED_MFVI, SEED_TARGET, SEED_DATA, SEED_SPLIT = range(8)


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([int(seed), *tags]).generate_state(1)[0])


# ============================================================
# Config loading and validation
# ============================================================

def _syntax_issue(kind: str, msg: str, line: Optional[int], column: Optional[int]) -> ValidationIssue:
    return ValidationIssue(loc="", msg=msg, type=kind, line=line, column=column)


def _read_raw(config_path: Union[str, Path]) -> tuple[Optional[dict], list[ValidationIssue]]:
    path = Path(config_path)
    if not path.exists():
        return None, [ValidationIssue(loc="", msg=f"config file not found: {path}", type="missing_file")]
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() in (".yaml", ".yml"):
            raw = yaml.safe_load(text)
        else:
            raw = json.loads(text)
    except json.JSONDecodeError as e:
        return None, [_syntax_issue("json_syntax", e.msg, e.lineno, e.colno)]
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        return None, [_syntax_issue("yaml_syntax", str(getattr(e, "problem", None) or e),
                                    mark.line + 1 if mark else None, mark.column + 1 if mark else None)]
    if not isinstance(raw, dict):
        return None, [ValidationIssue(loc="", msg="config must be a mapping", type="type_error")]
    # dataset paths are relative to the config file when they exist there
    for key in ("dataset", "test_dataset"):
        value = raw.get(key)
        if isinstance(value, str) and not Path(value).is_absolute() and (path.parent / value).exists():
            raw[key] = str(path.parent / value)
    return raw, []


def _issues_from(error: ValidationError) -> list[ValidationIssue]:
    return [ValidationIssue(loc=".".join(str(p) for p in e["loc"]), msg=e["msg"], type=e["type"])
            for e in error.errors()]


def load_config(config_path: Union[str, Path], seed: Optional[int] = None,
                out: Optional[Union[str, Path]] = None) -> RunConfig:
    """Parse, merge over the experiment template, apply overrides and validate."""
    raw, issues = _read_raw(config_path)
    if raw is not None:
        if seed is not None:
            raw["seed"] = seed
        if out is not None:
            raw["output_dir"] = str(out)
        try:
            return RunConfig.model_validate(with_defaults(raw))
        except ValidationError as e:
            issues = _issues_from(e)
    raise ConfigError(f"invalid run config {config_path} ({len(issues)} issue(s))",
                      [issue.model_dump() for issue in issues])


def validate(config_path: Union[str, Path]) -> list[ValidationIssue]:
    """Schema and cross-field checks only; an empty list means the config is valid."""
    try:
        load_config(config_path)
    except ConfigError as e:
        return [ValidationIssue.model_validate(issue) for issue in e.errors]
    return []


# ============================================================
# Artifact helpers
# ============================================================

def write_draws(path: Path, draws: np.ndarray, names: list[str]) -> Path:
    pd.DataFrame(np.asarray(draws), columns=names).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_trace(path: Path, trained: TrainedPosterior) -> Path:
    frame = pd.DataFrame({"iteration": np.arange(1, trained.iterations_run + 1), "K": trained.k_trace,
                          "bound": trained.trace, "loss": trained.loss_trace})
    if trained.spread_trace.size == trained.iterations_run:
        frame["spread"] = trained.spread_trace
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def evenly_spaced(draws: np.ndarray, count: int) -> np.ndarray:
    """`count` rows spread over the whole chain (all rows when there are fewer)."""
    if draws.shape[0] <= count:
        return draws
    return draws[np.linspace(0, draws.shape[0] - 1, count).round().astype(np.int64)]


def make_schedule(sivi: SiviSettings, K: int):
    if sivi.schedule == ScheduleKind.RAMP:
        return ramp_schedule(K, sivi.iterations, sivi.ramp_fraction)
    return constant_schedule(K)


# ============================================================
# Runner
# ============================================================

class ExperimentRunner:
    """Runs one validated RunConfig and fills in its RunReport."""

    def __init__(self, config: RunConfig, run_log: RunLogger):
        self.config = config
        self.out = Path(config.output_dir)
        self.run_log = run_log
        self.report = RunReport(experiment=config.experiment, seed=config.seed,
                                config=config.model_dump(mode="json"))
        self.timing: dict[str, float] = {}
        self.draws: dict[str, np.ndarray] = {}
        self.names: list[str] = []

    # ── bookkeeping ──

    def seed(self, *tags: int) -> int:
        return derive_seed(self.config.seed, *tags)

    def timed(self, stage: str, fn, *args, **kwargs):
        start = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        finally:
            self.timing[stage] = self.timing.get(stage, 0.0) + time.perf_counter() - start

    def save_draws(self, method: str, draws: np.ndarray) -> None:
        self.draws[method] = draws
        path = write_draws(self.out / f"draws_{method}.csv", draws, self.names)
        self.report.draw_files[method] = path.name
        self.run_log.log(f"Wrote {draws.shape[0]} {method} draws -> {path.name}")

    def ks_rows(self, method: str, reference: str, K: Optional[int] = None) -> list[KsEntry]:
        n = self.config.ks_draws
        a = self.draws[method][:n]
        b = evenly_spaced(self.draws[reference], n)
        if a.shape[0] < 2 or b.shape[0] < 2:
            self.report.notes.append(f"KS {method} vs {reference} skipped: fewer than 2 draws")
            return []
        rows = []
        for i, name in enumerate(self.names):
            ks = ks_two_sample(a[:, i], b[:, i])
            rows.append(KsEntry(method=method, reference=reference, variable=name, statistic=ks.statistic,
                                p_value=ks.p_value, n1=ks.n1, n2=ks.n2, K=K))
        return rows

    # ── SIVI ──

    def train_sivi(self, model: ModelRef, K: int, tag: str = "sivi") -> TrainedPosterior:
        sivi = self.config.sivi
        conditional = build_conditional(self.config, model.z_dim)
        post = build_posterior(conditional, sivi.hidden, sivi.noise_dim, sivi.noise,
                               seed=self.seed(SEED_INIT), z_names=model.z_names)
        cfg = TrainConfig(iterations=sivi.iterations, J=sivi.J, k_schedule=make_schedule(sivi, K),
                          batch_size=sivi.batch_size, phi_lr=sivi.phi_lr, xi_step=sivi.xi_step,
                          xi_decay=sivi.xi_decay, xi_decay_every=sivi.xi_decay_every,
                          seed=self.seed(SEED_TRAIN), log_every=SiviDefaults.LOG_EVERY)
        self.run_log.log(f"Training {tag}: K={K} J={sivi.J} iterations={sivi.iterations}")
        try:
            if conditional.reparameterizable:
                trained = self.timed(tag, train, post, model, cfg)
            else:
                trained = self.timed(tag, train_conjugate, post, hooks_for(model), cfg)
        except TrainingDiverged as e:
            partial = pd.DataFrame({"iteration": np.arange(1, len(e.trace) + 1), "bound": e.trace})
            path = self.out / f"trace_{tag}_partial.csv"
            partial.to_csv(path, index=False, float_format=FLOAT_FORMAT)
            self.report.traces[f"{tag}_partial"] = path.name
            raise
        path = write_trace(self.out / f"trace_{tag}.csv", trained)
        self.report.traces[tag] = path.name
        if trained.clipped:
            self.report.notes.append(f"{tag}: {trained.clipped} bound terms clipped")
        return trained

    def sivi_draws(self, trained: TrainedPosterior) -> np.ndarray:
        return posterior_draws(trained.posterior, RngStream(self.seed(SEED_DRAWS)), self.config.sivi.draws)

    def export_posterior(self, trained: TrainedPosterior) -> None:
        path = save_posterior(trained.posterior, self.out / "posterior.json")
        self.report.posterior_file = path.name
        post = trained.posterior
        rng = RngStream(self.seed(SEED_DRAWS)).substream(99)
        psi = post.mixer.push(post.mixer.sample_noise(rng, self.config.sivi.draws)).data
        frame = pd.DataFrame(psi, columns=[f"psi{i + 1}" for i in range(psi.shape[1])])
        frame.to_csv(self.out / "mixer_psi.csv", index=False, float_format=FLOAT_FORMAT)
        self.report.plot_files.append("mixer_psi.csv")

    def finish_plots(self) -> None:
        usable = {m: d for m, d in self.draws.items() if d.shape[0] >= 2}
        if not usable:
            return
        histogram_table(usable, self.names).to_csv(self.out / "plot_histograms.csv", index=False,
                                                    float_format=FLOAT_FORMAT)
        self.report.plot_files.append("plot_histograms.csv")
        if len(self.names) == 2:
            for method, d in usable.items():
                name = f"plot_density_{method}.csv"
                density_grid(d).to_csv(self.out / name, index=False, float_format=FLOAT_FORMAT)
                self.report.plot_files.append(name)

    def moments(self) -> None:
        for method, d in self.draws.items():
            if d.shape[0] >= 2:
                self.report.moments.append(summary_stats(d, self.names, method))

    # ── experiments ──

    def run_toy(self) -> None:
        variant = ToyVariant(self.config.model.variant)
        model = ToyModel(variant)
        self.names = list(model.z_names)
        trained = self.train_sivi(model, self.config.sivi.K)
        self.export_posterior(trained)
        self.save_draws("sivi", self.sivi_draws(trained))
        target = toy_target_sample(variant, RngStream(self.seed(SEED_TARGET)), self.config.ks_draws)
        self.save_draws("target", target)
        self.report.ks_table.extend(self.ks_rows("sivi", "target"))
        if TOY_DIMS[variant] == 2:
            lo = target.min(axis=0) - 1.0
            hi = target.max(axis=0) + 1.0
            grid = log_density_grid(lambda z: toy_target_logpdf(variant, z).data, lo, hi)
            grid.to_csv(self.out / "plot_target_log_density.csv", index=False, float_format=FLOAT_FORMAT)
            self.report.plot_files.append("plot_target_log_density.csv")

    def _gamma_beta_baselines(self, model: ModelRef, gibbs) -> None:
        base = self.config.baselines
        if base.gibbs:
            self.save_draws("gibbs", self.timed("gibbs", gibbs, seed=self.seed(SEED_GIBBS),
                                                burn_in=base.gibbs_burn_in, draws=base.gibbs_draws,
                                                thin=base.gibbs_thin))
        if base.mfvi:
            mfvi = self.timed("mfvi", mfvi_conjugate, model, base.mfvi_nb_iterations, self.seed(SEED_MFVI))
            self.report.notes.append("mfvi: " + ", ".join(f"{k}={v:.6g}" for k, v in mfvi.params.items()))
            trace = pd.DataFrame({"iteration": np.arange(1, mfvi.trained.iterations_run + 1),
                                  "bound": mfvi.trained.trace})
            trace.to_csv(self.out / "trace_mfvi.csv", index=False, float_format=FLOAT_FORMAT)
            self.report.traces["mfvi"] = "trace_mfvi.csv"
            self.save_draws("mfvi", mfvi.sample(RngStream(self.seed(SEED_MFVI, 1)), self.config.sivi.draws))
        if "gibbs" in self.draws:
            for method in ("sivi", "mfvi"):
                if method in self.draws:
                    self.report.ks_table.extend(self.ks_rows(method, "gibbs"))

    def run_nb(self) -> None:
        cfg = self.config
        data = load_counts(cfg.dataset)
        priors = GammaBetaPriors(cfg.model.a, cfg.model.b, cfg.model.alpha, cfg.model.beta)
        model = NegBinomialModel(data.x, priors)
        self.names = list(model.z_names)
        trained = self.train_sivi(model, cfg.sivi.K)
        self.export_posterior(trained)
        self.save_draws("sivi", self.sivi_draws(trained))
        self._gamma_beta_baselines(
            model, lambda **kw: nb_gibbs(data.x, priors, **kw))
        if cfg.k_sweep:
            self.k_sweep(model)

    def k_sweep(self, model: ModelRef) -> None:
        if "gibbs" not in self.draws:
            self.report.notes.append("k_sweep skipped: needs Gibbs reference draws")
            return
        saved = self.draws.get("sivi")
        for K in self.config.k_sweep:
            if K == self.config.sivi.K and saved is not None:
                draws = saved
            else:
                draws = self.sivi_draws(self.train_sivi(model, K, tag=f"sivi_K{K}"))
            self.draws["sivi"] = draws
            self.report.k_sweep.extend(self.ks_rows("sivi", "gibbs", K=K))
        self.draws["sivi"] = saved
        for name in self.names:
            rows = [e for e in self.report.k_sweep if e.variable == name]
            self.report.k_sweep_spearman[name] = spearman_trend([e.K for e in rows], [e.statistic for e in rows])

    def run_poislog(self) -> None:
        cfg = self.config
        if cfg.dataset:
            data = load_pairs_csv(cfg.dataset)
        else:
            syn = cfg.model.synthetic
            data = poislog_synth(syn.r, syn.p, syn.N, RngStream(self.seed(SEED_DATA)))
            pd.DataFrame(data.x.astype(np.int64), columns=["n", "l"]).to_csv(self.out / "data_poislog.csv",
                                                                           index=False)
        priors = GammaBetaPriors(cfg.model.a, cfg.model.b, cfg.model.alpha, cfg.model.beta)
        model = PoissonLogModel.from_dataset(data, priors)
        self.names = list(model.z_names)
        trained = self.train_sivi(model, cfg.sivi.K)
        self.report.notes.append(f"sivi loss quartile drop: {quartile_drop(trained.loss_trace):.6g}")
        self.export_posterior(trained)
        self.save_draws("sivi", self.sivi_draws(trained))
        self._gamma_beta_baselines(
            model, lambda **kw: poislog_gibbs(model.n, model.l, priors, **kw))

    def _logistic_data(self) -> tuple[Dataset, Optional[Dataset]]:
        cfg = self.config
        if cfg.dataset:
            data = load_logistic_csv(cfg.dataset, cfg.label)
        else:
            syn = cfg.model.synthetic
            data = synth_logistic(syn.N, syn.V, RngStream(self.seed(SEED_DATA)))
        if cfg.test_dataset:
            return data, load_logistic_csv(cfg.test_dataset, cfg.label)
        if cfg.test_fraction:
            return split_dataset(data, cfg.test_fraction, RngStream(self.seed(SEED_SPLIT)))
        return data, None

    def run_logistic(self) -> None:
        cfg, base = self.config, self.config.baselines
        train_data, test_data = self._logistic_data()
        model = LogisticModel.from_dataset(train_data, cfg.model.alpha_prior)
        self.names = list(model.z_names)
        trained = self.train_sivi(model, cfg.sivi.K)
        self.export_posterior(trained)
        self.save_draws("sivi", self.sivi_draws(trained))

        if base.gibbs:
            self.save_draws("gibbs", self.timed("gibbs", pg_gibbs, model.X, model.y, cfg.model.alpha_prior,
                                                seed=self.seed(SEED_GIBBS), burn_in=base.gibbs_burn_in,
                                                draws=base.gibbs_draws, thin=base.gibbs_thin,
                                                trunc=base.pg_trunc))
        for index, (kind, fit, enabled) in enumerate((("mfvi_diag", mfvi_logistic_diag, base.mfvi_diag),
                                    ("mfvi_full", mfvi_logistic_full, base.mfvi_full))):
            if not enabled:
                continue
            state = self.timed(kind, fit, model.X, model.y, cfg.model.alpha_prior,
                               max_iters=base.mfvi_iterations, tol=base.mfvi_tol)
            if not state.converged:
                self.report.notes.append(f"{kind} stopped at the sweep cap ({state.iterations})")
            pd.DataFrame({"sweep": np.arange(1, len(state.bound_trace) + 1), "bound": state.bound_trace}) \
                .to_csv(self.out / f"trace_{kind}.csv", index=False, float_format=FLOAT_FORMAT)
            self.report.traces[kind] = f"trace_{kind}.csv"
            self.save_draws(kind, state.sample(RngStream(self.seed(SEED_MFVI, index)), cfg.sivi.draws))

        if "gibbs" in self.draws:
            for method in ("sivi", "mfvi_diag", "mfvi_full"):
                if method in self.draws:
                    self.report.ks_table.extend(self.ks_rows(method, "gibbs"))
        if test_data is not None:
            self.predictive(test_data)

    def predictive(self, test_data: Dataset) -> None:
        frames = []
        for method, d in self.draws.items():
            if d.shape[0] < 2:
                continue
            mean, sd = predictive_probs(d, test_data.x)
            self.report.predictive[method] = {"mean_prob": float(mean.mean()), "mean_sd": float(sd.mean())}
            frames.append(pd.DataFrame({"row": np.arange(mean.size), "method": method, "mean": mean, "sd": sd}))
        if frames:
            pd.concat(frames, ignore_index=True).to_csv(self.out / "predictive.csv", index=False,
                                                        float_format=FLOAT_FORMAT)
            self.report.predictive_file = "predictive.csv"

    # ── driver ──

    def execute(self) -> RunReport:
        runners = {
            Experiment.TOY: self.run_toy,
            Experiment.NB: self.run_nb,
            Experiment.POISLOG: self.run_poislog,
            Experiment.LOGISTIC: self.run_logistic,
        }
        try:
            runners[self.config.experiment]()
        except TrainingDiverged as e:
            self.report.status = "diverged"
            self.report.notes.append(str(e))
            self.write_report()
            raise
        self.moments()
        self.finish_plots()
        self.write_report()
        return self.report

    def write_report(self) -> None:
        (self.out / "report.json").write_text(self.report.model_dump_json(indent=2), encoding="utf-8")
        self.report.timing = dict(self.timing)
        (self.out / "timing.json").write_text(json.dumps(self.timing, indent=2), encoding="utf-8")
        self.run_log.log(f"Report written to {self.out / 'report.json'}")


# ============================================================
# Entry points
# ============================================================

def run(config_path: Union[str, Path], seed: Optional[int] = None,
        out: Optional[Union[str, Path]] = None) -> RunReport:
    config = load_config(config_path, seed, out)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with RunLogger(out_dir) as run_log:
        run_log.log(f"Experiment {config.experiment.value} (seed {config.seed}) -> {out_dir}")
        start = time.perf_counter()
        report = ExperimentRunner(config, run_log).execute()
        run_log.log(f"Done in {time.perf_counter() - start:.1f}s")
    return report


def draws(posterior_path: Union[str, Path], count: int, seed: int = 0,
          out: Optional[Union[str, Path]] = None) -> Path:
    """Sample a serialized posterior into a CSV (one draw per row)."""
    if count < 0:
        raise ValueError("count must be non-negative")
    post = load_posterior(posterior_path)
    samples = posterior_draws(post, RngStream(seed), count)
    path = Path(out) if out is not None else Path(posterior_path).with_name(f"draws_seed{seed}.csv")
    if path.is_dir():
        path = path / f"draws_seed{seed}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_draws(path, samples, list(post.z_names))
    logger.info("Wrote %d draws to %s", count, path)
    return path
