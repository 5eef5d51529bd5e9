"""Treatment effect estimation for cluster-randomized trials whose binary
outcome is misclassified and partially validated.

The package implements the silver-standard weighting (SSW) estimator of the
average treatment effect, the naive silver-standard-only (SSO) and inverse
probability of selection weighting (IPSW) comparators, stacked estimating
equations with a cluster-robust sandwich variance, and the simulation
machinery used to study them.
"""

from .errors import (
    SswateError, DataError, SpecError, FitError, NonConvergenceError,
    SeparationError, RankDeficiencyError, EmptyCellError,
    SingularDenominatorError, EstimationError, SimulationError,
)
from .data_model import (
    Term, ModelSpec, saturated_spec, homogeneous_spec, Observation,
    TrialDataset, DesignRow, build_design, counterfactual_row,
    design_columns, counterfactual_design, CsvSchema, LoadResult,
    load_csv, save_csv,
)
from .classification_model import (
    ThetaEstimate, fit_gee_logistic, predict_pv, ClassificationTable,
    nonparametric_pv, theta_from_table, Ia4Flag, check_ia4,
)
from .mestimation import (
    LambdaEstimate, tau_contrast, unit_terms_from_probs, ssw_unit_terms,
    solve_lambda, estimating_functions, jacobian_analytic, SandwichVariance,
    sandwich_variance, contrast,
)
from .estimators import (
    Interval, EstimateReport, BootstrapResult, ssw, sso, ipsw,
    interval_normal, interval_t, with_interval, cluster_bootstrap,
    reports_to_csv,
)
from .simulation import (
    icc_to_variance, nested_variances, ArmVaryingLogistic, ParameterSet,
    NestedDesign, ScenarioConfig, scenario_names, resolve_scenario,
    Replicate, generate_replicate, default_estimators, run_study,
    StudyResult, figure2_grid,
)
from .rng import substream

__version__ = "0.1.0"
