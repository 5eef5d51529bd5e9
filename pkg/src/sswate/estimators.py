"""Treatment effect estimators and their intervals.

Four estimators of the average treatment effect are provided:

* :func:`ssw` - silver-standard weighting, in three classification-spec
  variants: ``covariate`` (user-specified spec), ``saturated`` (cell ratios,
  the closed form of the saturated GEE), and ``homogeneous`` (the
  deliberately misspecified (1, Y) baseline).
* :func:`sso` - the naive difference in silver-standard means.
* :func:`ipsw` - inverse probability of selection weighting of the
  gold-standard outcomes in the validation subset.

SSW reports carry the cluster-robust sandwich variance and support normal
and t intervals (t on m - 7 degrees of freedom, one for each of the seven
estimated probabilities entering tau). SSO and IPSW have no closed-form
variance here; their only interval is the cluster bootstrap percentile.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, ndtri
from scipy.stats import t as t_dist

from . import mestimation
from .classification_model import (check_ia4, fit_gee_logistic, nonparametric_pv,
                                   theta_from_table)
from .data_model import (ModelSpec, TrialDataset, design_columns,
                         homogeneous_spec, saturated_spec)
from .errors import (DataError, EstimationError, FitError, SeparationError,
                     SingularDenominatorError, SpecError)
from .rng import substream

__all__ = [
    "Interval",
    "EstimateReport",
    "BootstrapResult",
    "ssw",
    "sso",
    "ipsw",
    "interval_normal",
    "interval_t",
    "with_interval",
    "cluster_bootstrap",
    "reports_to_csv",
]

_SELECTION_FLOOR = 1e-3
_T_PROBABILITIES = 7  # estimated probabilities defining tau: four cells, pi, mu1, mu0


@dataclass(frozen=True)
class Interval:
    """A two-sided confidence interval."""

    lower: float
    upper: float
    method: str
    level: float
    df: int | None = None
    n_boot: int | None = None

    def to_dict(self) -> dict:
        out = {"lower": self.lower, "upper": self.upper, "method": self.method,
               "level": self.level}
        if self.df is not None:
            out["df"] = self.df
        if self.n_boot is not None:
            out["n_boot"] = self.n_boot
        return out


@dataclass(frozen=True)
class EstimateReport:
    """One estimator's output on one dataset.

    ``valid`` is True when tau is finite and inside [-1, 1]; summaries and
    the CLI exit status key off this flag. ``variance`` is the model-based
    variance of tau when the estimator provides one.
    """

    method: str
    tau_hat: float
    mu1_hat: float
    mu0_hat: float
    n: int
    m: int
    variance: float | None = None
    interval: Interval | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        ok = np.isfinite(self.tau_hat) and -1.0 <= self.tau_hat <= 1.0
        if self.variance is not None:
            ok = ok and np.isfinite(self.variance) and self.variance >= 0.0
        return bool(ok)

    @property
    def se(self) -> float | None:
        if self.variance is None or self.variance < 0.0:
            return None
        return float(np.sqrt(self.variance))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "tau_hat": self.tau_hat,
            "mu1_hat": self.mu1_hat,
            "mu0_hat": self.mu0_hat,
            "variance": self.variance,
            "se": self.se,
            "interval": None if self.interval is None else self.interval.to_dict(),
            "valid": self.valid,
            "n": self.n,
            "m": self.m,
            "diagnostics": self.diagnostics,
        }


def with_interval(report: EstimateReport, interval: Interval) -> EstimateReport:
    """Attach an interval to a report."""
    return replace(report, interval=interval)


def reports_to_csv(reports) -> str:
    """One-line-per-report CSV summary."""
    header = "method,tau_hat,mu1_hat,mu0_hat,se,lower,upper,interval_method,valid,n,m"
    lines = [header]
    for r in reports:
        iv = r.interval
        lines.append(",".join([
            r.method, repr(r.tau_hat), repr(r.mu1_hat), repr(r.mu0_hat),
            "" if r.se is None else repr(r.se),
            "" if iv is None else repr(iv.lower),
            "" if iv is None else repr(iv.upper),
            "" if iv is None else iv.method,
            str(r.valid), str(r.n), str(r.m),
        ]))
    return "\n".join(lines) + "\n"


# ---- silver-standard weighting --------------------------------------------


def _ssw_variance(dataset, spec, lam):
    scores = mestimation.estimating_functions(dataset, spec, lam.theta, lam)
    jac = mestimation.jacobian_analytic(dataset, spec, lam)
    sand = mestimation.sandwich_variance(jac, scores, dataset.m)
    _, var = mestimation.contrast(lam, sand, mestimation.tau_contrast(lam.theta.p))
    return var, sand.condition


def ssw(dataset: TrialDataset, spec: ModelSpec | None = None, variant: str = "covariate",
        with_variance: bool = True, tol: float = 1e-10, max_iter: int = 100,
        ia4_eps: float = 0.05) -> EstimateReport:
    """Silver-standard weighting estimate of the average treatment effect.

    Parameters
    ----------
    dataset : TrialDataset
    spec : ModelSpec, optional
        Classification spec for the ``covariate`` variant; ignored by the
        other variants.
    variant : {"covariate", "saturated", "homogeneous"}
    with_variance : bool
        Skip the sandwich when False (used by bootstrap refits, which only
        need the point estimate).
    ia4_eps : float
        Reporting threshold for near-violations of the identification gap;
        flag counts land in the diagnostics.

    Notes
    -----
    The ``saturated`` variant computes the four cell ratios directly, which
    is exact and still defined when a ratio is 0 or 1; in that degenerate
    case the variance is unavailable and a diagnostic note is attached.
    """
    diagnostics: dict = {"variant": variant, "n_validated": dataset.n_validated_total}
    if variant == "covariate":
        if spec is None:
            raise SpecError("the covariate variant requires a classification spec")
        if spec.role != "classification":
            raise SpecError("ssw requires a classification-role spec")
        use_spec = spec
        theta = fit_gee_logistic(dataset, use_spec, tol=tol, max_iter=max_iter)
        lam = mestimation.solve_lambda(dataset, use_spec, theta=theta)
        mu1, mu0 = lam.mu1, lam.mu0
        method = "SSW"
    elif variant in ("saturated", "homogeneous"):
        if variant == "homogeneous":
            use_spec = homogeneous_spec()
            theta = fit_gee_logistic(dataset, use_spec, tol=tol, max_iter=max_iter)
            lam = mestimation.solve_lambda(dataset, use_spec, theta=theta)
            mu1, mu0 = lam.mu1, lam.mu0
            method = "SSW-homogeneous"
        else:
            use_spec = saturated_spec()
            table = nonparametric_pv(dataset)
            pi = dataset.pi_hat
            g1, g0 = mestimation.unit_terms_from_probs(
                dataset.a, dataset.y_star, table.prob(1, 1), table.prob(0, 1),
                table.prob(1, 0), table.prob(0, 0), pi)
            mu1, mu0 = float(g1.mean()), float(g0.mean())
            method = "SSW-saturated"
            try:
                theta = theta_from_table(table, tol=tol)
                lam = mestimation.LambdaEstimate(theta=theta, pi=pi, mu1=mu1, mu0=mu0)
            except SeparationError as err:
                theta = lam = None
                diagnostics["notes"] = [f"variance unavailable: {err}"]
    else:
        raise SpecError(f"unknown ssw variant {variant!r}")

    if theta is not None:
        diagnostics["gee_iterations"] = theta.iterations
        diagnostics["score_norm"] = theta.score_norm
        flags = check_ia4(theta, dataset, use_spec, eps=ia4_eps)
        diagnostics["ia4_flagged"] = len(flags)
        if flags:
            diagnostics["ia4_min_gap"] = min(f.gap for f in flags)

    variance = None
    if with_variance and lam is not None:
        variance, condition = _ssw_variance(dataset, use_spec, lam)
        diagnostics["sandwich_condition"] = condition

    tau = mu1 - mu0
    return EstimateReport(method=method, tau_hat=float(tau), mu1_hat=mu1, mu0_hat=mu0,
                          n=dataset.n, m=dataset.m, variance=variance,
                          diagnostics=diagnostics)


# ---- comparison estimators --------------------------------------------------


def sso(dataset: TrialDataset) -> EstimateReport:
    """Difference in silver-standard means (ignores the validation data)."""
    pi = dataset.pi_hat
    a = dataset.a.astype(np.float64)
    ystar = dataset.y_star.astype(np.float64)
    mu1 = float(np.mean(a * ystar / pi))
    mu0 = float(np.mean((1.0 - a) * ystar / (1.0 - pi)))
    return EstimateReport(method="SSO", tau_hat=mu1 - mu0, mu1_hat=mu1, mu0_hat=mu0,
                          n=dataset.n, m=dataset.m,
                          diagnostics={"pi_hat": pi})


def ipsw(dataset: TrialDataset, selection_spec: ModelSpec, tol: float = 1e-10,
         max_iter: int = 100) -> EstimateReport:
    """Inverse probability of selection weighting of the validated gold outcomes.

    Fits the selection model P(V = 1 | A, X) on all rows, then weights each
    validated unit by the inverse of its fitted selection probability and the
    assignment probability. Fitted selection probabilities below 1e-3 are a
    hard error naming the affected units.
    """
    if selection_spec.role != "selection":
        raise SpecError("ipsw requires a selection-role spec")
    fit = fit_gee_logistic(dataset, selection_spec, subset="all",
                           outcome="selection", tol=tol, max_iter=max_iter)
    design = design_columns(selection_spec, None, dataset.a, dataset.x,
                            dataset.covariate_names)
    p_sel = expit(design @ fit.theta)
    low = p_sel < _SELECTION_FLOOR
    if low.any():
        rows = np.flatnonzero(low)[:5].tolist()
        raise EstimationError(
            f"{int(low.sum())} units have fitted selection probability below "
            f"{_SELECTION_FLOOR:g} (first row indices {rows}); weights are unstable")
    pi = dataset.pi_hat
    v = dataset.v.astype(np.float64)
    a = dataset.a.astype(np.float64)
    y = np.where(dataset.v == 1, dataset.y, 0.0)
    mu1 = float(np.mean(v * a * y / (p_sel * pi)))
    mu0 = float(np.mean(v * (1.0 - a) * y / (p_sel * (1.0 - pi))))
    return EstimateReport(
        method="IPSW", tau_hat=mu1 - mu0, mu1_hat=mu1, mu0_hat=mu0,
        n=dataset.n, m=dataset.m,
        diagnostics={"pi_hat": pi, "selection_iterations": fit.iterations,
                     "min_selection_prob": float(p_sel.min())})


# ---- intervals ---------------------------------------------------------------


def _se_or_raise(report: EstimateReport) -> float:
    if report.se is None:
        raise EstimationError(
            f"{report.method} carries no model-based variance; use cluster_bootstrap")
    return report.se


def interval_normal(report: EstimateReport, level: float = 0.95) -> Interval:
    """Normal-quantile interval around tau."""
    se = _se_or_raise(report)
    q = float(ndtri(0.5 + level / 2.0))
    return Interval(lower=report.tau_hat - q * se, upper=report.tau_hat + q * se,
                    method="normal", level=level)


def interval_t(report: EstimateReport, m: int, level: float = 0.95) -> Interval:
    """t interval on m - 7 degrees of freedom (the corrected interval)."""
    if m <= _T_PROBABILITIES:
        raise EstimationError(
            f"t interval needs more than {_T_PROBABILITIES} clusters, got {m}")
    se = _se_or_raise(report)
    df = m - _T_PROBABILITIES
    q = float(t_dist.ppf(0.5 + level / 2.0, df))
    return Interval(lower=report.tau_hat - q * se, upper=report.tau_hat + q * se,
                    method="t", level=level, df=df)


# ---- cluster bootstrap ----------------------------------------------------------


@dataclass(frozen=True)
class BootstrapResult:
    """Percentile interval plus replicate accounting."""

    interval: Interval
    taus: np.ndarray
    n_boot: int
    n_invalid: int

    @property
    def invalid_rate(self) -> float:
        return self.n_invalid / self.n_boot


def cluster_bootstrap(dataset: TrialDataset, estimator, b: int = 1000,
                      level: float = 0.95, seed: int = 0) -> BootstrapResult:
    """Cluster bootstrap percentile interval.

    Resamples m clusters with replacement, relabels them as distinct, re-runs
    the full estimator on each resampled dataset, and takes empirical
    quantiles (linear interpolation) of the replicate estimates. Replicates
    that raise estimation errors or produce invalid reports are excluded; more
    than 50% invalid is an error.

    Parameters
    ----------
    dataset : TrialDataset
    estimator : callable
        Maps a dataset to an :class:`EstimateReport`.
    b : int
        Number of replicates, at least 100.
    seed : int
        Replicate r draws from the (seed, r, "bootstrap") substream, so
        results do not depend on execution order.
    """
    if b < 100:
        raise EstimationError(f"bootstrap needs at least 100 replicates, got {b}")
    m = dataset.m
    taus = []
    n_invalid = 0
    for r in range(b):
        rng = substream(seed, r, "bootstrap")
        resampled = rng.integers(0, m, size=m)
        try:
            report = estimator(dataset.take_clusters(resampled))
        except (FitError, SingularDenominatorError, EstimationError, DataError):
            n_invalid += 1
            continue
        if not report.valid:
            n_invalid += 1
            continue
        taus.append(report.tau_hat)
    if n_invalid > b / 2:
        raise EstimationError(
            f"{n_invalid} of {b} bootstrap replicates were invalid; the "
            "percentile interval is not reliable")
    taus = np.asarray(taus)
    alpha = 1.0 - level
    lower, upper = np.quantile(taus, [alpha / 2.0, 1.0 - alpha / 2.0], method="linear")
    interval = Interval(lower=float(lower), upper=float(upper),
                        method="bootstrap_percentile", level=level, n_boot=b)
    return BootstrapResult(interval=interval, taus=taus, n_boot=b, n_invalid=n_invalid)
