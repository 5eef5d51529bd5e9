"""Logistic classification model for the silver-standard outcome.

The model P(Y* = 1 | V = 1, Y, A, X) = expit(D' theta) is fit on the
validated subset by an independence-working-correlation GEE, whose score is
the pooled logistic score summed over validated units. With the saturated
spec (1, Y, A, Y:A) the solution is available in closed form as the four
(Y, A) cell ratios of Y*; :func:`nonparametric_pv` computes those ratios and
:func:`theta_from_table` maps them back to coefficients.

The same solver fits the selection model P(V = 1 | A, X) for inverse
probability of selection weighting by switching the response to V and the
subset to all rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .data_model import (DesignRow, ModelSpec, TrialDataset, counterfactual_design,
                         design_columns, saturated_spec)
from .errors import (EmptyCellError, FitError, NonConvergenceError,
                     RankDeficiencyError, SeparationError, SpecError)

__all__ = [
    "ThetaEstimate",
    "ClassificationTable",
    "Ia4Flag",
    "fit_gee_logistic",
    "predict_pv",
    "nonparametric_pv",
    "theta_from_table",
    "check_ia4",
]

_COEF_BOUND = 30.0  # coefficient max-norm beyond which an unconverged fit is separation


@dataclass(frozen=True)
class ThetaEstimate:
    """A converged coefficient vector with fit metadata.

    ``score_norm`` is the max-norm of the estimating score at ``theta``; it is
    at most ``tol * n_used`` for any estimate returned by the solver.
    """

    theta: np.ndarray
    spec: ModelSpec
    n_used: int
    iterations: int
    score_norm: float
    tol: float

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        if theta.shape != (self.spec.p,):
            raise SpecError("coefficient length does not match the spec")
        if not np.isfinite(theta).all():
            raise FitError("non-finite coefficients")

    @property
    def p(self) -> int:
        return self.theta.shape[0]


def _deviance(eta: np.ndarray, r: np.ndarray) -> float:
    # 2 * sum(log(1 + exp(eta)) - r * eta), stable for large |eta|
    return float(2.0 * (np.logaddexp(0.0, eta) - r * eta).sum())


def _response(dataset: TrialDataset, outcome: str, keep: np.ndarray) -> np.ndarray:
    if outcome == "silver":
        return dataset.y_star[keep].astype(np.float64)
    if outcome == "selection":
        return dataset.v[keep].astype(np.float64)
    raise SpecError(f"unknown outcome {outcome!r}")


def fit_gee_logistic(dataset: TrialDataset, spec: ModelSpec, subset: str = "validated",
                     outcome: str = "silver", tol: float = 1e-10,
                     max_iter: int = 100) -> ThetaEstimate:
    """Fit the logistic model by damped Newton iteration.

    Parameters
    ----------
    dataset : TrialDataset
    spec : ModelSpec
    subset : {"validated", "all"}
        Rows entering the score. Specs referencing the gold outcome require
        the validated subset.
    outcome : {"silver", "selection"}
        Response column: Y* for the classification model, V for the
        selection model.
    tol : float
        Convergence requires the score max-norm to be at most
        ``tol * n_used``.
    max_iter : int
        Newton iteration cap.

    Returns
    -------
    ThetaEstimate

    Raises
    ------
    SeparationError
        If the coefficient max-norm exceeds 30 while the score is still
        above tolerance.
    RankDeficiencyError
        If the weighted normal equations are singular.
    NonConvergenceError
        If ``max_iter`` iterations or the step-halving budget are exhausted.
    """
    if subset not in ("validated", "all"):
        raise SpecError(f"unknown subset {subset!r}")
    keep = dataset.v == 1 if subset == "validated" else np.ones(dataset.n, dtype=bool)
    if not keep.any():
        raise FitError("no rows available to fit")
    y = dataset.y[keep] if spec.uses_gold else None
    design = design_columns(spec, y, dataset.a[keep], dataset.x[keep],
                            dataset.covariate_names)
    r = _response(dataset, outcome, keep)
    n_used = design.shape[0]
    score_bound = tol * max(1, n_used)

    theta = np.zeros(spec.p)
    eta = design @ theta
    dev = _deviance(eta, r)
    for iteration in range(max_iter + 1):
        prob = expit(eta)
        score = design.T @ (r - prob)
        score_norm = float(np.abs(score).max()) if spec.p else 0.0
        if score_norm <= score_bound:
            return ThetaEstimate(theta=theta, spec=spec, n_used=n_used,
                                 iterations=iteration, score_norm=score_norm, tol=tol)
        if np.abs(theta).max() > _COEF_BOUND:
            raise SeparationError(
                f"coefficients exceeded max-norm {_COEF_BOUND:g} with score "
                f"max-norm {score_norm:.3g} still above tolerance; the "
                "validated data appear separable under this spec")
        if iteration == max_iter:
            break
        weights = prob * (1.0 - prob)
        hessian = design.T @ (design * weights[:, None])
        try:
            step = np.linalg.solve(hessian, score)
        except np.linalg.LinAlgError as err:
            raise RankDeficiencyError(f"singular normal equations: {err}") from err
        # step halving on the binomial deviance
        scale = 1.0
        for _ in range(40):
            trial = theta + scale * step
            trial_eta = design @ trial
            trial_dev = _deviance(trial_eta, r)
            if trial_dev <= dev + 1e-10 * (1.0 + abs(dev)):
                break
            scale *= 0.5
        else:
            raise NonConvergenceError("step halving failed to reduce the deviance")
        theta, eta, dev = trial, trial_eta, trial_dev
    raise NonConvergenceError(
        f"score max-norm {score_norm:.3g} above tolerance {score_bound:.3g} "
        f"after {max_iter} iterations")


def predict_pv(theta: ThetaEstimate, row) -> float:
    """expit(d' theta) for one design row (a :class:`DesignRow` or a vector)."""
    values = row.values if isinstance(row, DesignRow) else np.asarray(row, dtype=np.float64)
    if values.shape != (theta.p,):
        raise SpecError(f"design row has length {values.shape[0]}, expected {theta.p}")
    return float(expit(values @ theta.theta))


@dataclass(frozen=True)
class ClassificationTable:
    """Validated-subset (Y, A) cell counts and Y* positives.

    ``counts[y, a]`` is the number of validated units in the cell and
    ``positives[y, a]`` how many of them have Y* = 1, so
    ``prob(y, a) = positives[y, a] / counts[y, a]``.
    """

    counts: np.ndarray
    positives: np.ndarray

    def prob(self, y: int, a: int) -> float:
        return float(self.positives[y, a] / self.counts[y, a])

    @property
    def probs(self) -> np.ndarray:
        return self.positives / self.counts

    @property
    def n_validated(self) -> int:
        return int(self.counts.sum())


def nonparametric_pv(dataset: TrialDataset) -> ClassificationTable:
    """Cell ratios P(Y* = 1 | Y = y, A = a, V = 1) for all four (y, a) cells.

    These are the closed-form saturated-spec fit. Raises
    :class:`EmptyCellError` naming the first empty cell.
    """
    keep = dataset.v == 1
    y = dataset.y[keep].astype(np.int64)
    a = dataset.a[keep]
    ystar = dataset.y_star[keep]
    counts = np.zeros((2, 2))
    positives = np.zeros((2, 2))
    np.add.at(counts, (y, a), 1.0)
    np.add.at(positives, (y, a), ystar.astype(np.float64))
    for yy in (0, 1):
        for aa in (0, 1):
            if counts[yy, aa] == 0:
                raise EmptyCellError(f"validation cell (y={yy}, a={aa}) is empty")
    return ClassificationTable(counts=counts, positives=positives)


def theta_from_table(table: ClassificationTable, tol: float = 1e-10) -> ThetaEstimate:
    """Saturated-spec coefficients reproducing the cell ratios exactly.

    Raises :class:`SeparationError` when a cell ratio is 0 or 1, where no
    finite coefficient vector exists.
    """
    probs = table.probs
    if ((probs <= 0.0) | (probs >= 1.0)).any():
        yy, aa = [int(v[0]) for v in np.where((probs <= 0.0) | (probs >= 1.0))]
        raise SeparationError(
            f"cell (y={yy}, a={aa}) has ratio {probs[yy, aa]:g}; no finite "
            "saturated coefficients exist")
    lo = logit(probs)
    theta = np.array([
        lo[0, 0],
        lo[1, 0] - lo[0, 0],
        lo[0, 1] - lo[0, 0],
        lo[1, 1] - lo[1, 0] - lo[0, 1] + lo[0, 0],
    ])
    # score of the saturated GEE at these coefficients, cell by cell
    fitted = expit(np.array([theta[0], theta[0] + theta[1], theta[0] + theta[2],
                             theta.sum()]))
    cells = np.array([table.positives[0, 0], table.positives[1, 0],
                      table.positives[0, 1], table.positives[1, 1]])
    sizes = np.array([table.counts[0, 0], table.counts[1, 0],
                      table.counts[0, 1], table.counts[1, 1]])
    score_norm = float(np.abs(cells - sizes * fitted).max())
    return ThetaEstimate(theta=theta, spec=saturated_spec(),
                         n_used=table.n_validated, iterations=0,
                         score_norm=score_norm, tol=tol)


@dataclass(frozen=True)
class Ia4Flag:
    """One unit whose weighting denominator at arm ``a`` is below eps."""

    obs_index: int
    a: int
    gap: float


def check_ia4(theta: ThetaEstimate, dataset: TrialDataset, spec: ModelSpec,
              eps: float = 0.05) -> list:
    """Flag units where |p(D_{1a}) - p(D_{0a})| < eps for either arm.

    The gap is the denominator of the silver-standard weighting transform,
    so near-zero gaps make the estimator unstable (assumption IA4).
    """
    flags = []
    for a in (0, 1):
        p1 = expit(counterfactual_design(dataset, spec, 1, a) @ theta.theta)
        p0 = expit(counterfactual_design(dataset, spec, 0, a) @ theta.theta)
        gap = np.abs(p1 - p0)
        for i in np.flatnonzero(gap < eps):
            flags.append(Ia4Flag(obs_index=int(i), a=a, gap=float(gap[i])))
    return flags
