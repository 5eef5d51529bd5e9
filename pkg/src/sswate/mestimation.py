"""Stacked estimating equations and the cluster-robust sandwich variance.

The silver-standard weighting estimator solves, jointly in
lambda = (theta, pi, mu1, mu0), the cluster-indexed system

    m_i(lambda) = [ sum_{j: V_ij=1} D_ij (Y*_ij - expit(D_ij' theta))
                    sum_j (A_ij - pi)
                    sum_j (g1_ij(theta, pi) - mu1)
                    sum_j (g0_ij(theta, pi) - mu0) ]

where g1 and g0 are the per-unit weighting transforms

    g1_ij = (A_ij Y*_ij - pi p(D_ij,01)) / (pi [p(D_ij,11) - p(D_ij,01)])
    g0_ij = ((1-A_ij) Y*_ij - (1-pi) p(D_ij,00)) / ((1-pi) [p(D_ij,10) - p(D_ij,00)])

with p(D_ij,ya) = expit(D_ij,ya' theta) evaluated at the counterfactual
design rows. The system is block triangular, so :func:`solve_lambda` never
root-finds jointly: theta comes from the classification GEE, pi is the
treated proportion, and mu1, mu0 are means of the per-unit transforms.

The sandwich is V = B^{-1} M B^{-T} with B the average cluster Jacobian and
M the average outer product of cluster scores; the reported covariance of
lambda-hat is V / m.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .classification_model import ThetaEstimate, fit_gee_logistic
from .data_model import ModelSpec, TrialDataset, counterfactual_design, design_columns
from .errors import SingularDenominatorError, SpecError

__all__ = [
    "LambdaEstimate",
    "SandwichVariance",
    "ssw_unit_terms",
    "unit_terms_from_probs",
    "solve_lambda",
    "estimating_functions",
    "jacobian_analytic",
    "sandwich_variance",
    "contrast",
    "tau_contrast",
]

_DENOM_EPS = 1e-6
_CONDITION_WARN = 1e10


@dataclass(frozen=True)
class LambdaEstimate:
    """Solution of the stacked system: (theta, pi, mu1, mu0)."""

    theta: ThetaEstimate
    pi: float
    mu1: float
    mu0: float

    def __post_init__(self):
        if not 0.0 < self.pi < 1.0:
            raise SpecError("pi must lie strictly inside (0, 1)")

    @property
    def dim(self) -> int:
        return self.theta.p + 3

    @property
    def tau(self) -> float:
        return self.mu1 - self.mu0

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.theta.theta, [self.pi, self.mu1, self.mu0]])


def tau_contrast(p: int) -> np.ndarray:
    """The contrast vector k = (0_p, 0, 1, -1) picking mu1 - mu0."""
    k = np.zeros(p + 3)
    k[p + 1] = 1.0
    k[p + 2] = -1.0
    return k


def unit_terms_from_probs(a, y_star, p11, p01, p10, p00, pi,
                          labels=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit weighting transforms (g1, g0) from counterfactual probabilities.

    Probabilities may be scalars or per-unit arrays. Raises
    :class:`SingularDenominatorError` naming the first unit whose denominator
    gap falls below 1e-6.
    """
    a = np.asarray(a, dtype=np.float64)
    y_star = np.asarray(y_star, dtype=np.float64)
    p11, p01, p10, p00 = (np.broadcast_to(np.asarray(p, dtype=np.float64), a.shape)
                          for p in (p11, p01, p10, p00))
    for arm, gap in ((1, p11 - p01), (0, p10 - p00)):
        small = np.abs(gap) < _DENOM_EPS
        if small.any():
            i = int(np.flatnonzero(small)[0])
            where = f"unit {labels[i]!r}" if labels is not None else f"row index {i}"
            raise SingularDenominatorError(
                f"|p(D_1{arm}) - p(D_0{arm})| = {abs(gap[i]):.2e} < {_DENOM_EPS:g} "
                f"at {where}; assumption IA4 is violated at this estimate")
    g1 = (a * y_star - pi * p01) / (pi * (p11 - p01))
    g0 = ((1.0 - a) * y_star - (1.0 - pi) * p00) / ((1.0 - pi) * (p10 - p00))
    return g1, g0


def _counterfactual_probs(dataset: TrialDataset, spec: ModelSpec, theta: np.ndarray):
    designs = {(y, a): counterfactual_design(dataset, spec, y, a)
               for y in (0, 1) for a in (0, 1)}
    probs = {ya: expit(d @ theta) for ya, d in designs.items()}
    return designs, probs


def ssw_unit_terms(dataset: TrialDataset, spec: ModelSpec, theta, pi: float):
    """(g1, g0) for every observation, at classification coefficients ``theta``."""
    theta = theta.theta if isinstance(theta, ThetaEstimate) else np.asarray(theta)
    _, probs = _counterfactual_probs(dataset, spec, theta)
    labels = [dataset.cluster_labels[c] for c in dataset.cluster]
    return unit_terms_from_probs(dataset.a, dataset.y_star, probs[(1, 1)],
                                 probs[(0, 1)], probs[(1, 0)], probs[(0, 0)],
                                 pi, labels=labels)


def solve_lambda(dataset: TrialDataset, spec: ModelSpec, theta: ThetaEstimate | None = None,
                 tol: float = 1e-10, max_iter: int = 100) -> LambdaEstimate:
    """Solve the stacked system block by block.

    ``theta`` may be supplied (for example the closed-form saturated fit);
    otherwise the classification GEE is fit on the validated subset. ``pi``
    is the individual-level treated proportion, and mu1, mu0 are the means
    of the per-unit transforms over all observations.
    """
    if theta is None:
        theta = fit_gee_logistic(dataset, spec, subset="validated",
                                 outcome="silver", tol=tol, max_iter=max_iter)
    elif theta.spec.labels != spec.labels:
        raise SpecError("supplied coefficients were fit under a different spec")
    pi = dataset.pi_hat
    g1, g0 = ssw_unit_terms(dataset, spec, theta, pi)
    return LambdaEstimate(theta=theta, pi=pi, mu1=float(g1.mean()), mu0=float(g0.mean()))


def _lambda_array(spec: ModelSpec, lam) -> np.ndarray:
    arr = lam.as_array() if isinstance(lam, LambdaEstimate) else np.asarray(lam, dtype=np.float64)
    if arr.shape != (spec.p + 3,):
        raise SpecError(f"lambda has length {arr.shape[0]}, expected {spec.p + 3}")
    return arr


def estimating_functions(dataset: TrialDataset, spec: ModelSpec,
                         theta_fit: ThetaEstimate | None, lam) -> np.ndarray:
    """Evaluate the cluster scores m_i(lambda).

    Parameters
    ----------
    dataset : TrialDataset
    spec : ModelSpec
        Classification spec defining the theta block layout.
    theta_fit : ThetaEstimate or None
        Optional fit whose layout is validated against ``spec``.
    lam : LambdaEstimate or array of length p + 3
        Evaluation point.

    Returns
    -------
    ndarray of shape (m, p + 3)
        One row per cluster, in cluster order. Clusters without validated
        units contribute zero rows to the classification block.
    """
    if theta_fit is not None and theta_fit.spec.labels != spec.labels:
        raise SpecError("theta_fit spec does not match the supplied spec")
    arr = _lambda_array(spec, lam)
    p = spec.p
    theta, pi, mu1, mu0 = arr[:p], arr[p], arr[p + 1], arr[p + 2]

    out = np.zeros((dataset.m, p + 3))
    keep = dataset.v == 1
    if keep.any():
        design = design_columns(spec, dataset.y[keep], dataset.a[keep],
                                dataset.x[keep], dataset.covariate_names)
        resid = dataset.y_star[keep] - expit(design @ theta)
        np.add.at(out[:, :p], dataset.cluster[keep], design * resid[:, None])
    g1, g0 = ssw_unit_terms(dataset, spec, theta, pi)
    tail = np.column_stack([dataset.a - pi, g1 - mu1, g0 - mu0])
    out[:, p:] = dataset.cluster_reduce(tail)
    return out


def jacobian_analytic(dataset: TrialDataset, spec: ModelSpec, lam) -> np.ndarray:
    """Sum over clusters of the analytic Jacobian d m_i / d lambda'.

    The theta block is the negative observed information of the
    classification GEE. The mu rows follow the quotient rule applied to the
    per-unit transforms, kept in unsimplified form:

        d g1 / d theta = [ -pi^2 p'(D01) D01 (p(D11) - p(D01))
                           - pi (A Y* - pi p(D01)) (D11 p'(D11) - D01 p'(D01)) ]
                         / (pi^2 (p(D11) - p(D01))^2)

    with p'(D) = p(D)(1 - p(D)), and symmetrically for g0 with (1 - pi) and
    the a = 0 rows; d g1 / d pi = -A Y* / (pi^2 (p(D11) - p(D01))) and
    d g0 / d pi = +(1 - A) Y* / ((1 - pi)^2 (p(D10) - p(D00))).
    """
    arr = _lambda_array(spec, lam)
    p = spec.p
    theta, pi = arr[:p], arr[p]
    n = dataset.n
    jac = np.zeros((p + 3, p + 3))

    keep = dataset.v == 1
    if keep.any():
        design = design_columns(spec, dataset.y[keep], dataset.a[keep],
                                dataset.x[keep], dataset.covariate_names)
        prob = expit(design @ theta)
        w = prob * (1.0 - prob)
        jac[:p, :p] = -(design.T @ (design * w[:, None]))

    jac[p, p] = -float(n)

    designs, probs = _counterfactual_probs(dataset, spec, theta)
    d11, d01, d10, d00 = designs[(1, 1)], designs[(0, 1)], designs[(1, 0)], designs[(0, 0)]
    p11, p01, p10, p00 = probs[(1, 1)], probs[(0, 1)], probs[(1, 0)], probs[(0, 0)]
    dp11, dp01, dp10, dp00 = (q * (1.0 - q) for q in (p11, p01, p10, p00))
    a = dataset.a.astype(np.float64)
    ystar = dataset.y_star.astype(np.float64)

    gap1 = p11 - p01
    denom1 = pi ** 2 * gap1 ** 2
    num_level1 = -pi ** 2 * (dp01 * gap1)                    # multiplies D01
    num_quot1 = -pi * (a * ystar - pi * p01)                 # multiplies (D11 p' - D01 p')
    row_mu1 = (d01 * (num_level1 / denom1)[:, None]
               + (d11 * dp11[:, None] - d01 * dp01[:, None]) * (num_quot1 / denom1)[:, None]).sum(axis=0)
    jac[p + 1, :p] = row_mu1
    jac[p + 1, p] = float((-(a * ystar) / (pi ** 2 * gap1)).sum())
    jac[p + 1, p + 1] = -float(n)

    gap0 = p10 - p00
    denom0 = (1.0 - pi) ** 2 * gap0 ** 2
    num_level0 = -(1.0 - pi) ** 2 * (dp00 * gap0)            # multiplies D00
    num_quot0 = -(1.0 - pi) * ((1.0 - a) * ystar - (1.0 - pi) * p00)
    row_mu0 = (d00 * (num_level0 / denom0)[:, None]
               + (d10 * dp10[:, None] - d00 * dp00[:, None]) * (num_quot0 / denom0)[:, None]).sum(axis=0)
    jac[p + 2, :p] = row_mu0
    jac[p + 2, p] = float((((1.0 - a) * ystar) / ((1.0 - pi) ** 2 * gap0)).sum())
    jac[p + 2, p + 2] = -float(n)
    return jac


@dataclass(frozen=True)
class SandwichVariance:
    """Cluster-robust covariance of lambda-hat.

    ``v_lambda`` is B^{-1} M B^{-T} / m, the covariance at the scale of the
    estimate itself; ``bread`` and ``meat`` are the averaged Jacobian and
    score outer products; ``condition`` is the bread's condition number.
    """

    v_lambda: np.ndarray
    bread: np.ndarray
    meat: np.ndarray
    m: int
    condition: float


def sandwich_variance(jacobian: np.ndarray, m_values: np.ndarray, m: int) -> SandwichVariance:
    """Assemble the sandwich from the total Jacobian and per-cluster scores.

    Parameters
    ----------
    jacobian : ndarray
        Sum over clusters of d m_i / d lambda' (as from
        :func:`jacobian_analytic`).
    m_values : ndarray of shape (m, dim)
        Per-cluster scores (as from :func:`estimating_functions`).
    m : int
        Number of clusters.
    """
    m_values = np.atleast_2d(np.asarray(m_values, dtype=np.float64))
    jacobian = np.atleast_2d(np.asarray(jacobian, dtype=np.float64))
    bread = jacobian / m
    meat = m_values.T @ m_values / m
    condition = float(np.linalg.cond(bread))
    if not np.isfinite(condition) or condition > _CONDITION_WARN:
        warnings.warn(f"bread matrix condition number {condition:.3g} exceeds "
                      f"{_CONDITION_WARN:g}; the sandwich may be unstable",
                      RuntimeWarning, stacklevel=2)
    bread_inv = np.linalg.solve(bread, np.eye(bread.shape[0]))
    v = bread_inv @ meat @ bread_inv.T
    return SandwichVariance(v_lambda=v / m, bread=bread, meat=meat, m=int(m),
                            condition=condition)


def contrast(lam: LambdaEstimate, sandwich: SandwichVariance, k) -> tuple[float, float]:
    """Point estimate and variance of the linear contrast k' lambda.

    The sandwich is positive semidefinite in exact arithmetic, so a tiny
    negative quadratic form is rounding noise and is clamped to zero.  A
    negative value that is large relative to the matrix scale is returned
    as is; callers treat it as a failed variance.
    """
    k = np.asarray(k, dtype=np.float64)
    if k.shape != (lam.dim,):
        raise SpecError(f"contrast has length {k.shape[0]}, expected {lam.dim}")
    var = float(k @ sandwich.v_lambda @ k)
    if var < 0.0:
        scale = float(np.trace(np.abs(sandwich.v_lambda))) * float(k @ k)
        if -var <= 1e-8 * max(scale, np.finfo(np.float64).tiny):
            var = 0.0
    return float(k @ lam.as_array()), var
