import numpy as np
import pytest
from scipy.special import expit, logit

from sswate.classification_model import (
    ThetaEstimate, fit_gee_logistic, nonparametric_pv, theta_from_table,
)
from sswate.data_model import ModelSpec, TrialDataset, saturated_spec
from sswate.errors import SingularDenominatorError, SpecError
from sswate.mestimation import (
    LambdaEstimate, SandwichVariance, contrast, estimating_functions,
    jacobian_analytic, sandwich_variance, solve_lambda, ssw_unit_terms,
    tau_contrast, unit_terms_from_probs,
)


def balanced_cells_dataset():
    """40 rows, 2 clusters, all validated; cell ratios 0.1/0.9/0.2/0.8.

    Both arms have silver-standard mean 1/2 and pi-hat = 1/2, so the
    weighting transform gives mu1 = mu0 = 1/2 and tau = 0 by hand:
    mu1 = (mean(A Y*) - pi p01) / (pi (p11 - p01)) = (0.25 - 0.1) / 0.3 = 0.5,
    mu0 = (mean((1-A) Y*) - (1-pi) p00) / ((1-pi)(p10 - p00)) = 0.2 / 0.4 = 0.5.
    """
    a, y, ystar = [], [], []
    for arm, yy, n, pos in ((1, 0, 10, 2), (1, 1, 10, 8), (0, 0, 10, 1), (0, 1, 10, 9)):
        a += [arm] * n
        y += [yy] * n
        ystar += [1] * pos + [0] * (n - pos)
    return TrialDataset.from_columns(
        np.where(np.asarray(a) == 1, "t", "c"), a, ystar,
        np.ones(40, dtype=int), np.asarray(y, dtype=float), np.empty((40, 0)))


def four_unit_dataset():
    """Two clusters of two units, nobody validated, silver outcomes (1,0,1,0)."""
    return TrialDataset.from_columns(
        ["t", "t", "c", "c"], [1, 1, 0, 0], [1, 0, 1, 0], [0, 0, 0, 0],
        [np.nan] * 4, np.empty((4, 0)))


def hand_theta():
    """Saturated coefficients with cells p01=0.2, p11=0.8, p00=0.1, p10=0.9."""
    l = {ya: logit(p) for ya, p in {(0, 0): 0.1, (1, 0): 0.9, (0, 1): 0.2, (1, 1): 0.8}.items()}
    theta = np.array([l[(0, 0)], l[(1, 0)] - l[(0, 0)], l[(0, 1)] - l[(0, 0)],
                      l[(1, 1)] - l[(1, 0)] - l[(0, 1)] + l[(0, 0)]])
    return ThetaEstimate(theta=theta, spec=saturated_spec(), n_used=4,
                         iterations=0, score_norm=0.0, tol=1e-10)


def sim_dataset(seed=0, m=8, lo=40, hi=80, validated_share=0.5):
    """Logistic DGM with a covariate, for Jacobian and solver checks."""
    rng = np.random.default_rng(seed)
    sizes = rng.integers(lo, hi, size=m)
    cl = np.repeat(np.arange(m), sizes)
    n = cl.size
    a = np.repeat(np.arange(m) % 2, sizes)
    x1 = rng.normal(1.0, 1.0, n)
    y = (rng.random(n) < expit(-1.0 + 0.75 * a + 0.15 * x1)).astype(float)
    ystar = (rng.random(n) < expit(-1.25 + 0.25 * a + 0.3 * x1 + (1.5 + a) * y)).astype(int)
    v = (rng.random(n) < validated_share).astype(int)
    gold = np.where(v == 1, y, np.nan)
    ds = TrialDataset.from_columns(cl, a, ystar, v, gold, x1.reshape(-1, 1), ("x1",))
    return ds, ModelSpec.classification("1, y, a, y:a, x1")


# ---- hand-computed solutions -------------------------------------------------

def test_hand_dataset_tau_zero_closed_form():
    ds = balanced_cells_dataset()
    theta = theta_from_table(nonparametric_pv(ds))
    lam = solve_lambda(ds, saturated_spec(), theta=theta)
    assert lam.pi == 0.5
    assert abs(lam.mu1 - 0.5) < 1e-12
    assert abs(lam.mu0 - 0.5) < 1e-12
    assert abs(lam.tau) < 1e-12


def test_hand_dataset_tau_zero_newton_route():
    ds = balanced_cells_dataset()
    lam = solve_lambda(ds, saturated_spec())
    assert abs(lam.mu1 - 0.5) < 1e-9
    assert abs(lam.tau) < 1e-9


def test_four_unit_transform_values():
    ds = four_unit_dataset()
    g1, g0 = ssw_unit_terms(ds, saturated_spec(), hand_theta(), pi=0.5)
    assert np.allclose(g1, [3.0, -1 / 3, -1 / 3, -1 / 3], atol=1e-12)
    assert np.allclose(g0, [-0.125, -0.125, 2.375, -0.125], atol=1e-12)


def test_four_unit_cluster_scores():
    ds = four_unit_dataset()
    theta = hand_theta()
    lam = np.concatenate([theta.theta, [0.5, 0.5, 0.5]])
    scores = estimating_functions(ds, saturated_spec(), theta, lam)
    assert scores.shape == (2, 7)
    # no validated rows anywhere: the classification block is all zero
    assert np.all(scores[:, :4] == 0.0)
    assert np.allclose(scores[:, 4], [1.0, -1.0], atol=1e-12)
    assert np.allclose(scores[:, 5], [5 / 3, -5 / 3], atol=1e-12)
    assert np.allclose(scores[:, 6], [-1.25, 1.25], atol=1e-12)
    # (0.5, 0.5, 0.5) solves the system, so the scores sum to zero
    assert np.abs(scores.sum(axis=0)).max() < 1e-12


def test_contrast_on_hand_dataset():
    ds = balanced_cells_dataset()
    lam = solve_lambda(ds, saturated_spec(), theta=theta_from_table(nonparametric_pv(ds)))
    scores = estimating_functions(ds, saturated_spec(), lam.theta, lam)
    jac = jacobian_analytic(ds, saturated_spec(), lam)
    sand = sandwich_variance(jac, scores, ds.m)
    est, var = contrast(lam, sand, tau_contrast(lam.theta.p))
    assert abs(est) < 1e-12
    assert var >= 0.0
    with pytest.raises(SpecError, match="length"):
        contrast(lam, sand, np.zeros(5))


def test_contrast_clamps_rounding_negatives_only():
    lam = LambdaEstimate(theta=hand_theta(), pi=0.5, mu1=0.5, mu0=0.5)
    k = tau_contrast(lam.theta.p)

    def sand_with_mu_block(block):
        v = np.eye(7) * 0.05
        v[5:, 5:] = block
        return SandwichVariance(v_lambda=v, bread=np.eye(7), meat=v, m=4,
                                condition=1.0)

    # mu variances at rounding level below a 0.05-scale theta block: clamp
    noise = np.array([[-1e-15, 0.0], [0.0, 3e-16]])
    _, var = contrast(lam, sand_with_mu_block(noise), k)
    assert var == 0.0
    # a negative comparable to the matrix scale is reported as is
    bad = np.array([[0.05, 0.08], [0.08, 0.05]])
    _, var = contrast(lam, sand_with_mu_block(bad), k)
    assert var == pytest.approx(-0.06)


# ---- solver and scores on simulated data --------------------------------------

def test_scores_vanish_at_solution():
    ds, spec = sim_dataset(seed=1)
    lam = solve_lambda(ds, spec)
    total = estimating_functions(ds, spec, lam.theta, lam).sum(axis=0)
    assert np.abs(total).max() <= 1e-8 * ds.n


def test_solve_lambda_rejects_foreign_theta():
    ds, spec = sim_dataset(seed=2)
    other = fit_gee_logistic(ds, saturated_spec())
    with pytest.raises(SpecError, match="different spec"):
        solve_lambda(ds, spec, theta=other)


def test_degenerate_cluster_without_validated_rows():
    ds, spec = sim_dataset(seed=3)
    v = ds.v.copy()
    y = ds.y.copy()
    first = ds.cluster == 0
    v[first] = 0
    y[first] = np.nan
    degen = TrialDataset.from_columns(ds.cluster, ds.a, ds.y_star, v, y, ds.x, ("x1",))
    lam = solve_lambda(degen, spec)
    scores = estimating_functions(degen, spec, lam.theta, lam)
    assert np.all(scores[0, :spec.p] == 0.0)
    assert np.abs(scores.sum(axis=0)).max() <= 1e-8 * degen.n


def test_singular_denominator_names_unit():
    ds = balanced_cells_dataset()
    flat = ThetaEstimate(theta=np.array([0.2, 0.0, 0.0, 0.0]), spec=saturated_spec(),
                         n_used=40, iterations=0, score_norm=0.0, tol=1e-10)
    with pytest.raises(SingularDenominatorError, match="IA4"):
        ssw_unit_terms(ds, saturated_spec(), flat, pi=0.5)


def test_unit_terms_from_probs_scalar_broadcast():
    g1, g0 = unit_terms_from_probs([1, 1, 0, 0], [1, 0, 1, 0],
                                   0.8, 0.2, 0.9, 0.1, 0.5)
    assert np.allclose(g1, [3.0, -1 / 3, -1 / 3, -1 / 3], atol=1e-12)
    assert np.allclose(g0, [-0.125, -0.125, 2.375, -0.125], atol=1e-12)


# ---- analytic Jacobian ---------------------------------------------------------

def finite_difference_jacobian(ds, spec, lam_arr, h=1e-6):
    dim = lam_arr.size
    jac = np.empty((dim, dim))
    for k in range(dim):
        up, dn = lam_arr.copy(), lam_arr.copy()
        up[k] += h
        dn[k] -= h
        f_up = estimating_functions(ds, spec, None, up).sum(axis=0)
        f_dn = estimating_functions(ds, spec, None, dn).sum(axis=0)
        jac[:, k] = (f_up - f_dn) / (2.0 * h)
    return jac


def assert_jacobian_close(analytic, numeric, rel=1e-5):
    assert np.abs(analytic - numeric).max() <= rel * max(1.0, np.abs(analytic).max())


def test_jacobian_matches_finite_differences_at_solution():
    ds, spec = sim_dataset(seed=4)
    lam = solve_lambda(ds, spec)
    arr = lam.as_array()
    assert_jacobian_close(jacobian_analytic(ds, spec, arr),
                          finite_difference_jacobian(ds, spec, arr))


def test_jacobian_matches_finite_differences_at_perturbations():
    ds, spec = sim_dataset(seed=5)
    arr = solve_lambda(ds, spec).as_array()
    rng = np.random.default_rng(17)
    for _ in range(20):
        point = arr + rng.uniform(-0.05, 0.05, size=arr.size)
        point[spec.p] = min(max(point[spec.p], 0.05), 0.95)
        assert_jacobian_close(jacobian_analytic(ds, spec, point),
                              finite_difference_jacobian(ds, spec, point))


def test_jacobian_fixed_blocks():
    ds, spec = sim_dataset(seed=6)
    lam = solve_lambda(ds, spec)
    jac = jacobian_analytic(ds, spec, lam)
    p, n = spec.p, ds.n
    # pi and mu diagonal entries are -N; cross-mu entries vanish
    assert jac[p, p] == -n
    assert jac[p + 1, p + 1] == -n and jac[p + 2, p + 2] == -n
    assert jac[p + 1, p + 2] == 0.0 and jac[p + 2, p + 1] == 0.0
    # theta block never feeds back from (pi, mu): upper-right block is zero
    assert np.all(jac[:p, p:] == 0.0)
    assert np.all(jac[p, :p] == 0.0) and jac[p, p + 1] == 0.0 and jac[p, p + 2] == 0.0


def test_jacobian_theta_block_is_negative_information():
    ds, spec = sim_dataset(seed=7)
    lam = solve_lambda(ds, spec)
    jac = jacobian_analytic(ds, spec, lam)
    keep = ds.v == 1
    from sswate.data_model import design_columns
    design = design_columns(spec, ds.y[keep], ds.a[keep], ds.x[keep], ("x1",))
    prob = expit(design @ lam.theta.theta)
    info = design.T @ (design * (prob * (1 - prob))[:, None])
    assert np.allclose(jac[:spec.p, :spec.p], -info, rtol=1e-12, atol=1e-12)


# ---- sandwich -------------------------------------------------------------------

def test_sandwich_scalar_toy_matches_hand_algebra():
    # pi-only system: m_i = sum_j (A_ij - pi), jacobian = -N
    # cluster sums at pi-hat = 0.4 are (1.2, -0.2, -1.0)
    scores = np.array([[1.2], [-0.2], [-1.0]])
    sand = sandwich_variance(np.array([[-10.0]]), scores, m=3)
    assert sand.bread[0, 0] == pytest.approx(-10.0 / 3.0)
    assert sand.meat[0, 0] == pytest.approx((1.2 ** 2 + 0.2 ** 2 + 1.0 ** 2) / 3.0)
    # V/m equals sum of squared cluster sums over N^2
    assert sand.v_lambda[0, 0] == pytest.approx(2.48 / 100.0, abs=1e-12)


def test_sandwich_symmetric_psd():
    ds, spec = sim_dataset(seed=8)
    lam = solve_lambda(ds, spec)
    sand = sandwich_variance(jacobian_analytic(ds, spec, lam),
                             estimating_functions(ds, spec, lam.theta, lam), ds.m)
    v = sand.v_lambda
    scale = np.abs(v).max()
    assert np.abs(v - v.T).max() <= 1e-10 * scale
    eigvals = np.linalg.eigvalsh((v + v.T) / 2.0)
    assert eigvals.min() >= -1e-10 * np.trace(v)


def test_sandwich_condition_warning():
    jac = np.diag([-2.0, -2e-12])
    scores = np.array([[1.0, 0.0], [0.0, 1.0]])
    with pytest.warns(RuntimeWarning, match="condition"):
        sandwich_variance(jac, scores, m=2)


def test_tau_contrast_layout():
    k = tau_contrast(4)
    assert k.tolist() == [0, 0, 0, 0, 0, 1, -1]
