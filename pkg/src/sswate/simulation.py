"""Monte Carlo studies of the estimators on cluster-randomized trial data.

The generating process draws, for every unit, both potential gold-standard
outcomes Y(0) and Y(1), then potential silver-standard outcomes Y*(a) given
Y(a), then potential selection indicators V(a) given Y(a); cluster-level
treatment assignment reveals one arm of each triple. Random intercepts at
the cluster (optionally clinician, optionally silver-model) level induce the
configured intracluster correlations on the latent logistic scale.

Every draw comes from a substream keyed by (seed, replicate, role), so a
given replicate is identical across runs, schedules, and scenario variants
that share a role: for example, two scenarios differing only in the
silver-standard coefficients produce identical selection and gold outcomes,
which makes paired comparisons of selection-based estimators exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit

from .data_model import ModelSpec, TrialDataset
from .errors import (DataError, EstimationError, FitError, SimulationError,
                     SingularDenominatorError, SpecError)
from .estimators import interval_normal, interval_t, ipsw, sso, ssw, cluster_bootstrap
from .rng import substream

__all__ = [
    "LOGISTIC_SCALE",
    "icc_to_variance",
    "nested_variances",
    "ArmVaryingLogistic",
    "ParameterSet",
    "NestedDesign",
    "ScenarioConfig",
    "scenario_names",
    "resolve_scenario",
    "Replicate",
    "generate_replicate",
    "default_estimators",
    "run_study",
    "StudyResult",
    "figure2_grid",
    "FIGURE2_SCENARIOS",
    "MODEL1_TERMS",
    "IPSW_TERMS",
]

LOGISTIC_SCALE = np.pi ** 2 / 3.0

MODEL1_TERMS = "1, y, a, y:a, x1, x2, x3, x1:a, x2:a, x3:a, x4"
IPSW_TERMS = "1, a, x1, x2, x3, x4"

FIGURE2_SCENARIOS = ("figure2-sme-sv", "figure2-sme-lv", "figure2-lme-sv",
                     "figure2-lme-lv")


def icc_to_variance(icc: float) -> float:
    """Random-intercept variance for a target latent-scale ICC.

    Solves ICC = sigma^2 / (sigma^2 + pi^2/3) for sigma^2.
    """
    if not 0.0 <= icc < 1.0:
        raise SpecError(f"icc must be in [0, 1), got {icc}")
    return icc * LOGISTIC_SCALE / (1.0 - icc)


def nested_variances(wswc: float, wsac: float) -> tuple[float, float]:
    """Site and clinician variances hitting the two nested correlations.

    WSWC = (sigma_site^2 + sigma_clin^2) / (sigma_site^2 + sigma_clin^2 + pi^2/3)
    and WSAC replaces the numerator by sigma_site^2 alone. Requires
    0 <= wsac <= wswc < 1.
    """
    if not 0.0 <= wsac <= wswc < 1.0:
        raise SpecError(f"need 0 <= wsac <= wswc < 1, got wswc={wswc}, wsac={wsac}")
    sigma_site = wsac * LOGISTIC_SCALE / (1.0 - wswc)
    sigma_clin = (wswc - wsac) * LOGISTIC_SCALE / (1.0 - wswc)
    return sigma_site, sigma_clin


# ---- generating-process parameters -------------------------------------------


@dataclass(frozen=True)
class ArmVaryingLogistic:
    """Logistic coefficients linear in the arm indicator.

    The linear predictor under arm a is
    (alpha + alpha_a * a) + x @ (beta + a * beta_a) + (delta + delta_a * a) * y.
    """

    alpha: float
    alpha_a: float = 0.0
    beta: tuple = (0.0, 0.0, 0.0, 0.0)
    beta_a: tuple = (0.0, 0.0, 0.0, 0.0)
    delta: float = 0.0
    delta_a: float = 0.0

    def linear_predictor(self, a: int, x: np.ndarray, y=None) -> np.ndarray:
        coef = np.asarray(self.beta) + a * np.asarray(self.beta_a)
        lp = (self.alpha + self.alpha_a * a) + x @ coef
        if self.delta != 0.0 or self.delta_a != 0.0:
            if y is None:
                raise SpecError("this model requires the gold outcome")
            lp = lp + (self.delta + self.delta_a * a) * y
        return lp


@dataclass(frozen=True)
class ParameterSet:
    """Coefficient bundle for outcome, silver-standard, and selection models."""

    name: str
    outcome: ArmVaryingLogistic
    silver: ArmVaryingLogistic
    selection: ArmVaryingLogistic
    covariate_dependent: bool  # whether the silver model uses covariates


_OUTCOME = ArmVaryingLogistic(alpha=-1.0, alpha_a=0.75, beta=(0.15, 0.2, 0.15, -0.15))
_SELECTION_MAIN = ArmVaryingLogistic(alpha=-0.25, alpha_a=-0.25,
                                     beta=(-0.5, -0.5, 0.25, -0.25),
                                     delta=-0.15, delta_a=0.3)

_SILVER_NDX = ArmVaryingLogistic(alpha=-1.25, alpha_a=0.25, delta=1.5, delta_a=1.0)
_SILVER_DX = ArmVaryingLogistic(alpha=-1.25, alpha_a=0.5,
                                beta=(0.25, -0.25, -0.15, 0.1),
                                beta_a=(-0.5, 0.1, -0.1, 0.0),
                                delta=1.5, delta_a=1.0)

_SILVER_SME = ArmVaryingLogistic(alpha=-2.0, alpha_a=-0.75,
                                 beta=(-0.55, -0.35, 0.15, -0.1),
                                 beta_a=(0.2, 0.1, 0.0, 0.0),
                                 delta=4.0, delta_a=1.75)
_SILVER_LME = ArmVaryingLogistic(alpha=-0.25, alpha_a=0.05,
                                 beta=(-0.5, -0.35, 0.15, 0.0),
                                 beta_a=(0.15, 0.1, 0.0, 0.0),
                                 delta=0.7, delta_a=0.25)
_SELECTION_SV = ArmVaryingLogistic(alpha=-0.25, alpha_a=0.1,
                                   beta=(-0.75, -0.75, -0.75, 0.15),
                                   delta=0.15, delta_a=-0.3)
_SELECTION_LV = ArmVaryingLogistic(alpha=0.7, alpha_a=-0.25,
                                   beta=(-0.5, -0.5, -0.5, 0.1),
                                   delta=0.15, delta_a=-0.3)


def _main_parameters(dx: bool) -> ParameterSet:
    silver = _SILVER_DX if dx else _SILVER_NDX
    return ParameterSet(name="table1-dx" if dx else "table1-ndx", outcome=_OUTCOME,
                        silver=silver, selection=_SELECTION_MAIN,
                        covariate_dependent=dx)


def _figure2_parameters(me: str, val: str) -> ParameterSet:
    silver = {"sme": _SILVER_SME, "lme": _SILVER_LME}[me]
    selection = {"sv": _SELECTION_SV, "lv": _SELECTION_LV}[val]
    return ParameterSet(name=f"figure2-{me}-{val}", outcome=_OUTCOME, silver=silver,
                        selection=selection, covariate_dependent=True)


# ---- scenarios -----------------------------------------------------------------


@dataclass(frozen=True)
class NestedDesign:
    """Clinician level nested in cluster, for both outcome and selection."""

    wswc: float
    wsac: float
    clinicians_per_cluster: tuple = (2, 3)

    def __post_init__(self):
        nested_variances(self.wswc, self.wsac)  # validates the correlations
        lo, hi = self.clinicians_per_cluster
        if not (1 <= lo <= hi):
            raise SpecError("clinicians_per_cluster must be a nondecreasing range")


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario.

    ``icc_y`` and ``icc_v`` set cluster random-intercept variances for the
    outcome and selection models; when ``nested`` is given they are replaced
    by the site/clinician split implied by its correlations.
    ``sigma_b_ystar`` adds a cluster intercept inside the silver-standard
    model, a deliberate misspecification stressor.
    """

    name: str
    parameters: ParameterSet
    m: int = 30
    cluster_size_range: tuple = (100, 300)
    icc_y: float = 0.01
    icc_v: float = 0.01
    nested: NestedDesign | None = None
    sigma_b_ystar: float = 0.0
    pi_assign: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.m < 2:
            raise SpecError("a scenario needs at least two clusters")
        lo, hi = self.cluster_size_range
        if not (1 <= lo <= hi):
            raise SpecError("cluster_size_range must be a nondecreasing range")
        icc_to_variance(self.icc_y)
        icc_to_variance(self.icc_v)
        if not 0.0 < self.pi_assign < 1.0:
            raise SpecError("pi_assign must be in (0, 1)")
        if self.sigma_b_ystar < 0.0:
            raise SpecError("sigma_b_ystar must be nonnegative")


_SIZES = {"small": (100, 300), "large": (500, 1000)}
_ICCS = {"icc01": 0.01, "icc1": 0.1}
_NESTED = {"w01": (0.01, 0.005), "w1": (0.1, 0.05)}


def _build_registry() -> dict:
    registry = {}
    for dx_tag, dx in (("ndx", False), ("dx", True)):
        for icc_tag, icc in _ICCS.items():
            for size_tag, rng in _SIZES.items():
                name = f"table1-{dx_tag}-{icc_tag}-{size_tag}"
                registry[name] = ScenarioConfig(
                    name=name, parameters=_main_parameters(dx),
                    cluster_size_range=rng, icc_y=icc, icc_v=icc)
                name = f"tables3-{dx_tag}-{icc_tag}-{size_tag}"
                registry[name] = ScenarioConfig(
                    name=name, parameters=_main_parameters(dx),
                    cluster_size_range=rng, icc_y=icc, icc_v=icc,
                    sigma_b_ystar=float(np.sqrt(icc_to_variance(icc))))
        for nest_tag, (wswc, wsac) in _NESTED.items():
            for size_tag, rng in _SIZES.items():
                name = f"tables2-{dx_tag}-{nest_tag}-{size_tag}"
                registry[name] = ScenarioConfig(
                    name=name, parameters=_main_parameters(dx),
                    cluster_size_range=rng, icc_y=wswc, icc_v=wswc,
                    nested=NestedDesign(wswc=wswc, wsac=wsac))
    for me in ("sme", "lme"):
        for val in ("sv", "lv"):
            name = f"figure2-{me}-{val}"
            registry[name] = ScenarioConfig(
                name=name, parameters=_figure2_parameters(me, val),
                cluster_size_range=(100, 300), icc_y=0.01, icc_v=0.01)
    return registry


_REGISTRY = _build_registry()


def scenario_names() -> list:
    return sorted(_REGISTRY)


def resolve_scenario(name: str) -> ScenarioConfig:
    """Look up a scenario preset; case-insensitive, dotted levels accepted."""
    canonical = name.strip().lower()
    # map dotted level tags onto registry tags before discarding dots, so
    # e.g. icc0.1 becomes icc1 rather than colliding with icc01
    canonical = canonical.replace("0.01", "01").replace("0.1", "1")
    canonical = canonical.replace(".", "")
    if canonical not in _REGISTRY:
        raise SpecError(f"unknown scenario {name!r}; available: "
                        + ", ".join(scenario_names()))
    return _REGISTRY[canonical]


# ---- replicate generation ---------------------------------------------------------


@dataclass(frozen=True)
class Replicate:
    """One generated dataset plus its latent potential outcomes.

    Potential arrays have shape (n, 2) with columns for arms 0 and 1;
    ``true_ate`` is the realized mean of Y(1) - Y(0) over all units.
    """

    dataset: TrialDataset
    true_ate: float
    y_pot: np.ndarray
    ystar_pot: np.ndarray
    v_pot: np.ndarray


def _covariates(rng, cluster_sizes: np.ndarray) -> np.ndarray:
    m = cluster_sizes.size
    n = int(cluster_sizes.sum())
    x1 = 1.0 + rng.standard_normal(n)
    x2 = (0.5 + np.sqrt(0.05) * np.repeat(rng.standard_normal(m), cluster_sizes)
          + np.sqrt(0.50) * rng.standard_normal(n))
    x3 = (rng.random(n) < 0.55).astype(np.float64)
    x4 = np.repeat(rng.random(m), cluster_sizes)
    return np.column_stack([x1, x2, x3, x4])


def _cluster_effect(rng_label, config, seed, rep, sigma2_site, sigma2_clin,
                    cluster_sizes, clinician):
    """Per-unit random effect: site intercept plus optional clinician intercept."""
    site = substream(seed, rep, f"re-site-{rng_label}").normal(
        0.0, np.sqrt(sigma2_site), size=config.m)
    effect = np.repeat(site, cluster_sizes)
    if clinician is not None:
        n_clin = int(clinician.max()) + 1
        clin = substream(seed, rep, f"re-clin-{rng_label}").normal(
            0.0, np.sqrt(sigma2_clin), size=n_clin)
        effect = effect + clin[clinician]
    return effect


def generate_replicate(config: ScenarioConfig, seed: int, rep: int) -> Replicate:
    """Generate one trial replicate for the configured scenario."""
    par = config.parameters
    lo, hi = config.cluster_size_range
    sizes = substream(seed, rep, "sizes").integers(lo, hi + 1, size=config.m)
    n = int(sizes.sum())
    cluster = np.repeat(np.arange(config.m), sizes)
    x = _covariates(substream(seed, rep, "covariates"), sizes)

    clinician = None
    if config.nested is None:
        sig2_y, sig2_v = icc_to_variance(config.icc_y), icc_to_variance(config.icc_v)
        clin_y = clin_v = 0.0
    else:
        sig2_y, clin_y = nested_variances(config.nested.wswc, config.nested.wsac)
        sig2_v, clin_v = sig2_y, clin_y
        lo_c, hi_c = config.nested.clinicians_per_cluster
        counts = substream(seed, rep, "clinician-counts").integers(
            lo_c, hi_c + 1, size=config.m)
        local = substream(seed, rep, "clinician-assign").integers(0, counts[cluster])
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        clinician = offsets[cluster] + local

    b_y = _cluster_effect("y", config, seed, rep, sig2_y, clin_y, sizes, clinician)
    b_v = _cluster_effect("v", config, seed, rep, sig2_v, clin_v, sizes, clinician)
    b_ystar = 0.0
    if config.sigma_b_ystar > 0.0:
        b_ystar = np.repeat(substream(seed, rep, "re-site-ystar").normal(
            0.0, config.sigma_b_ystar, size=config.m), sizes)

    u_y = substream(seed, rep, "y").random(n)
    u_star = substream(seed, rep, "ystar").random(n)
    u_v = substream(seed, rep, "v").random(n)
    y_pot = np.empty((n, 2))
    ystar_pot = np.empty((n, 2), dtype=np.int64)
    v_pot = np.empty((n, 2), dtype=np.int64)
    for a in (0, 1):
        y_a = (u_y < expit(par.outcome.linear_predictor(a, x) + b_y)).astype(np.float64)
        y_pot[:, a] = y_a
        ystar_pot[:, a] = u_star < expit(
            par.silver.linear_predictor(a, x, y_a) + b_ystar)
        v_pot[:, a] = u_v < expit(par.selection.linear_predictor(a, x, y_a) + b_v)

    assign = (substream(seed, rep, "assign").random(config.m)
              < config.pi_assign).astype(np.int64)
    a_unit = assign[cluster]
    rows = np.arange(n)
    y_star = ystar_pot[rows, a_unit]
    v = v_pot[rows, a_unit]
    y_obs = np.where(v == 1, y_pot[rows, a_unit], np.nan)
    dataset = TrialDataset.from_columns(
        cluster, a_unit, y_star, v, y_obs, x, ("x1", "x2", "x3", "x4"),
        cluster_level=("x4",), clinician=clinician)
    return Replicate(dataset=dataset, true_ate=float((y_pot[:, 1] - y_pot[:, 0]).mean()),
                     y_pot=y_pot, ystar_pot=ystar_pot, v_pot=v_pot)


# ---- estimator suite -----------------------------------------------------------


@dataclass(frozen=True)
class _EstimatorDef:
    full: object
    point: object  # variance-free refit used inside the bootstrap


def default_estimators(names) -> dict:
    """Estimator callables by name.

    ``ssw`` fits the covariate classification spec (gold, treatment, their
    interaction, x1..x3 main effects and treatment interactions, x4);
    ``ssw-saturated`` uses the cell-ratio spec; ``ssw-homogeneous`` the
    treatment-free one; ``ipsw`` fits the selection terms of the generating
    process without the outcome.
    """
    model1 = ModelSpec.classification(MODEL1_TERMS)
    selection = ModelSpec.selection(IPSW_TERMS)
    defs = {
        "ssw": _EstimatorDef(
            full=lambda ds: ssw(ds, spec=model1),
            point=lambda ds: ssw(ds, spec=model1, with_variance=False)),
        "ssw-saturated": _EstimatorDef(
            full=lambda ds: ssw(ds, variant="saturated"),
            point=lambda ds: ssw(ds, variant="saturated", with_variance=False)),
        "ssw-homogeneous": _EstimatorDef(
            full=lambda ds: ssw(ds, variant="homogeneous"),
            point=lambda ds: ssw(ds, variant="homogeneous", with_variance=False)),
        "sso": _EstimatorDef(full=sso, point=sso),
        "ipsw": _EstimatorDef(full=lambda ds: ipsw(ds, selection),
                              point=lambda ds: ipsw(ds, selection)),
    }
    out = {}
    for name in names:
        if name not in defs:
            raise SpecError(f"unknown estimator {name!r}; available: "
                            + ", ".join(sorted(defs)))
        out[name] = defs[name]
    return out


_REPLICATE_ERRORS = (FitError, SingularDenominatorError, EstimationError, DataError)


@dataclass
class _Track:
    taus: list = field(default_factory=list)
    variances: list = field(default_factory=list)
    normal: list = field(default_factory=list)
    t: list = field(default_factory=list)
    boot: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    n_error: int = 0
    n_invalid: int = 0


@dataclass(frozen=True)
class StudyResult:
    """Monte Carlo summary for one scenario."""

    scenario: ScenarioConfig
    n_reps: int
    seed: int
    level: float
    true_ate: float
    estimators: dict
    replicates: pd.DataFrame

    def to_dict(self) -> dict:
        return {
            "scenario": asdict(self.scenario),
            "n_reps": self.n_reps,
            "seed": self.seed,
            "level": self.level,
            "true_ate": self.true_ate,
            "estimators": self.estimators,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)


def _coverage(intervals: list, truth: float):
    if not intervals:
        return None
    hits = sum(1 for lo, hi in intervals if lo <= truth <= hi)
    return hits / len(intervals)


def _summarize(track: _Track, n_reps: int, truth: float) -> dict:
    taus = np.asarray(track.taus)
    n_failed = track.n_error + track.n_invalid
    out = {
        "n_used": int(taus.size),
        "n_error": track.n_error,
        "n_invalid": track.n_invalid,
        "failure_rate": n_failed / n_reps,
        "mean_tau": float(taus.mean()) if taus.size else None,
        "bias": float(taus.mean() - truth) if taus.size else None,
        "empirical_variance": float(taus.var(ddof=1)) if taus.size > 1 else None,
        "mean_model_variance": (float(np.mean(track.variances))
                                if track.variances else None),
        "coverage_normal": _coverage(track.normal, truth),
        "coverage_t": _coverage(track.t, truth),
        "coverage_bootstrap": _coverage(track.boot, truth),
    }
    return out


def run_study(config: ScenarioConfig, estimators=("ssw",), n_reps: int = 1000,
              seed: int | None = None, level: float = 0.95,
              bootstrap_b: int | None = None,
              bootstrap_estimator: str = "ssw") -> StudyResult:
    """Run a scenario and summarize each estimator against the study truth.

    Coverage is judged against the study-level true ATE (the mean of the
    realized per-replicate values). Replicates where an estimator raises an
    estimation error, or returns an estimate outside [-1, 1], are excluded
    from its bias and variance summaries and counted in its failure rate.

    When ``bootstrap_b`` is set, the named estimator also gets a cluster
    bootstrap percentile interval per replicate (point refits only), which
    is expensive.
    """
    if seed is None:
        seed = config.seed
    defs = default_estimators(tuple(estimators))
    if bootstrap_b is not None and bootstrap_estimator not in defs:
        raise SpecError(f"bootstrap estimator {bootstrap_estimator!r} not in suite")
    tracks = {name: _Track() for name in defs}
    truths = []
    for rep in range(n_reps):
        try:
            replicate = generate_replicate(config, seed, rep)
        except DataError:
            for track in tracks.values():
                track.n_error += 1
            continue
        truths.append(replicate.true_ate)
        ds = replicate.dataset
        for name, est in defs.items():
            track = tracks[name]
            row = {"replicate": rep, "estimator": name, "tau_hat": np.nan,
                   "failed": True}
            try:
                report = est.full(ds)
            except _REPLICATE_ERRORS:
                track.n_error += 1
                track.rows.append(row)
                continue
            row["tau_hat"] = report.tau_hat
            if not report.valid:
                track.n_invalid += 1
                track.rows.append(row)
                continue
            row["failed"] = False
            track.taus.append(report.tau_hat)
            if report.variance is not None:
                track.variances.append(report.variance)
                iv_n = interval_normal(report, level)
                iv_t = interval_t(report, ds.m, level)
                track.normal.append((iv_n.lower, iv_n.upper))
                track.t.append((iv_t.lower, iv_t.upper))
                row["normal_lower"], row["normal_upper"] = iv_n.lower, iv_n.upper
                row["t_lower"], row["t_upper"] = iv_t.lower, iv_t.upper
            if bootstrap_b is not None and name == bootstrap_estimator:
                boot_seed = int(substream(seed, rep, "bootstrap-seed").integers(2 ** 63))
                try:
                    boot = cluster_bootstrap(ds, est.point, b=bootstrap_b,
                                             level=level, seed=boot_seed)
                    track.boot.append((boot.interval.lower, boot.interval.upper))
                    row["boot_lower"] = boot.interval.lower
                    row["boot_upper"] = boot.interval.upper
                except EstimationError:
                    pass
            track.rows.append(row)
    if not truths:
        raise SimulationError("no replicate could be generated")
    truth = float(np.mean(truths))
    summaries = {name: _summarize(track, n_reps, truth)
                 for name, track in tracks.items()}
    frame = pd.DataFrame([row for track in tracks.values() for row in track.rows])
    return StudyResult(scenario=config, n_reps=n_reps, seed=seed, level=level,
                       true_ate=truth, estimators=summaries, replicates=frame)


def figure2_grid(n_reps: int = 500, seed: int = 0,
                 estimators=("ssw", "ssw-homogeneous", "sso", "ipsw")) -> dict:
    """Run the two-by-two misclassification/validation-size comparison.

    All four cells share the seed, so draws for roles common to two cells
    (covariates, gold outcomes, selection under a shared selection bundle)
    are identical, making cross-cell estimator contrasts paired.

    Returns a dict with a replicate-level tidy frame (scenario, estimator,
    replicate, tau_hat, failed), a summary frame, and the per-scenario
    results.
    """
    results = {}
    tidy = []
    summary_rows = []
    for name in FIGURE2_SCENARIOS:
        result = run_study(resolve_scenario(name), estimators=estimators,
                           n_reps=n_reps, seed=seed)
        results[name] = result
        frame = result.replicates[["replicate", "estimator", "tau_hat", "failed"]].copy()
        frame.insert(0, "scenario", name)
        tidy.append(frame)
        for est_name, summ in result.estimators.items():
            spread = summ["empirical_variance"]
            summary_rows.append({
                "scenario": name, "estimator": est_name,
                "true_ate": result.true_ate, "bias": summ["bias"],
                "empirical_sd": None if spread is None else float(np.sqrt(spread)),
                "failure_rate": summ["failure_rate"],
            })
    return {
        "replicates": pd.concat(tidy, ignore_index=True),
        "summary": pd.DataFrame(summary_rows),
        "results": results,
    }
