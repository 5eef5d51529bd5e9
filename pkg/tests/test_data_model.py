import numpy as np
import pytest

from sswate.data_model import (
    CsvSchema, ModelSpec, TrialDataset, build_design, counterfactual_design,
    counterfactual_row, design_columns, homogeneous_spec, load_csv,
    parse_terms, saturated_spec, save_csv,
)
from sswate.errors import DataError, SpecError


def small_dataset():
    # two clusters, one treated and one control, everyone validated
    return TrialDataset.from_columns(
        cluster_ids=["s1", "s1", "s2", "s2"],
        a=[1, 1, 0, 0],
        y_star=[1, 0, 1, 0],
        v=[1, 1, 1, 1],
        y=[1.0, 0.0, 1.0, 1.0],
        x=np.array([[2.0, 0.3], [1.0, 0.3], [0.5, 0.9], [1.5, 0.9]]),
        covariate_names=("x1", "x4"),
        cluster_level=("x4",),
    )


def write_csv(path, text):
    path.write_text(text)
    return path


BASIC_CSV = (
    "cluster,a,y_star,v,y,x1\n"
    "s1,1,1,1,1,2.0\n"
    "s1,1,0,0,,1.0\n"
    "s2,0,1,1,0,0.5\n"
    "s2,0,0,0,NA,1.5\n"
)


# ---- specs ----------------------------------------------------------------

def test_parse_terms_labels():
    terms = parse_terms("1, y, a, y:a, x1, x1:a")
    assert [t.label for t in terms] == ["1", "y", "a", "y:a", "x1", "x1:a"]
    # '+'-separated and sequence forms parse identically
    assert parse_terms("1 + y + a") == parse_terms(["1", "y", "a"])


def test_model1_style_spec_has_eleven_terms():
    spec = ModelSpec.classification("1,y,a,y:a,x1,x2,x3,x1:a,x2:a,x3:a,x4")
    assert spec.p == 11
    assert spec.covariate_names == ("x1", "x2", "x3", "x4")


def test_duplicate_terms_rejected():
    with pytest.raises(SpecError, match="duplicate"):
        parse_terms("1, y, y")


def test_classification_spec_requires_intercept_gold_treatment():
    with pytest.raises(SpecError, match="'a'"):
        ModelSpec.classification("1, y")
    with pytest.raises(SpecError, match="'y'"):
        ModelSpec.classification("1, a")
    # the treatment-homogeneous baseline is the only sanctioned exception
    assert homogeneous_spec().labels == ("1", "y")


def test_selection_spec_rejects_gold_terms():
    with pytest.raises(SpecError, match="gold"):
        ModelSpec.selection("1, a, y")
    with pytest.raises(SpecError, match="gold"):
        ModelSpec.selection("1, a, y:a")
    assert ModelSpec.selection("1, a, x1").p == 3


def test_saturated_spec():
    assert saturated_spec().labels == ("1", "y", "a", "y:a")


# ---- dataset invariants ----------------------------------------------------

def test_small_dataset_shapes():
    ds = small_dataset()
    assert ds.n == 4 and ds.m == 2
    assert ds.cluster_labels == ("s1", "s2")
    assert ds.pi_hat == 0.5
    assert ds.cluster_sizes.tolist() == [2, 2]
    assert ds.n_validated.tolist() == [2, 2]
    obs = ds.observation(0)
    assert (obs.cluster, obs.a, obs.y_star, obs.v, obs.y) == ("s1", 1, 1, 1, 1.0)


def test_gold_missing_on_validated_row_rejected():
    with pytest.raises(DataError, match="missing on validated"):
        TrialDataset.from_columns(["c1", "c2"], [1, 0], [1, 0], [1, 1],
                                  [np.nan, 0.0], np.empty((2, 0)))


def test_gold_present_on_nonvalidated_row_rejected():
    with pytest.raises(DataError, match="present on non-validated"):
        TrialDataset.from_columns(["c1", "c2"], [1, 0], [1, 0], [0, 1],
                                  [1.0, 0.0], np.empty((2, 0)))


def test_mixed_treatment_cluster_rejected():
    with pytest.raises(DataError, match="varies within cluster"):
        TrialDataset.from_columns(["c1", "c1", "c2"], [1, 0, 0], [1, 0, 1],
                                  [0, 0, 0], [np.nan] * 3, np.empty((3, 0)))


def test_single_arm_rejected():
    with pytest.raises(DataError, match="both treatment arms"):
        TrialDataset.from_columns(["c1", "c2"], [1, 1], [1, 0], [0, 0],
                                  [np.nan, np.nan], np.empty((2, 0)))


def test_cluster_level_covariate_must_be_constant():
    with pytest.raises(DataError, match="cluster-level covariate"):
        TrialDataset.from_columns(["c1", "c1", "c2"], [1, 1, 0], [1, 0, 1],
                                  [0, 0, 0], [np.nan] * 3,
                                  np.array([[0.1], [0.2], [0.3]]),
                                  covariate_names=("x4",), cluster_level=("x4",))


def test_reserved_covariate_name_rejected():
    with pytest.raises(DataError, match="reserved"):
        TrialDataset.from_columns(["c1", "c2"], [1, 0], [1, 0], [0, 0],
                                  [np.nan, np.nan], np.array([[1.0], [2.0]]),
                                  covariate_names=("y",))


def test_arrays_are_immutable():
    ds = small_dataset()
    with pytest.raises(ValueError):
        ds.a[0] = 0


def test_take_clusters_relabels_repeats():
    ds = small_dataset()
    boot = ds.take_clusters([0, 1, 1])
    assert boot.m == 3 and boot.n == 6
    assert boot.cluster.tolist() == [0, 0, 1, 1, 2, 2]
    # clusters 1 and 2 are both copies of the control cluster
    assert boot.a.tolist() == [1, 1, 0, 0, 0, 0]
    assert np.array_equal(boot.x[2:4], boot.x[4:6])


def test_take_clusters_single_arm_resample_rejected():
    ds = small_dataset()
    with pytest.raises(DataError, match="both treatment arms"):
        ds.take_clusters([0, 0])


def test_cluster_reduce():
    ds = small_dataset()
    assert ds.cluster_reduce(np.ones(4)).tolist() == [2.0, 2.0]
    two_col = ds.cluster_reduce(np.column_stack([ds.a, ds.y_star]))
    assert two_col.tolist() == [[2.0, 1.0], [0.0, 1.0]]


# ---- design construction ---------------------------------------------------

def test_saturated_row_values():
    row = design_columns(saturated_spec(), 1.0, 1.0, np.empty((1, 0)), ())
    assert row.tolist() == [[1.0, 1.0, 1.0, 1.0]]


def test_interaction_spec_row_values():
    # covariate main effects are not required for their interactions
    spec = ModelSpec.classification("1, y, a, x1:a, x4")
    x = np.array([[2.0, 0.3]])
    row = design_columns(spec, 0.0, 1.0, x, ("x1", "x4"))
    assert row.tolist() == [[1.0, 0.0, 1.0, 2.0, 0.3]]


def test_counterfactual_row_changes_only_y_a_entries():
    ds = small_dataset()
    spec = ModelSpec.classification("1, y, a, x1:a, x4")
    rows = build_design(ds, spec, subset="validated")
    factual = rows[0][0]  # y=1, a=1, x1=2.0, x4=0.3
    assert factual.values.tolist() == [1.0, 1.0, 1.0, 2.0, 0.3]
    cf = counterfactual_row(factual, 1, 0)
    assert cf.values.tolist() == [1.0, 1.0, 0.0, 0.0, 0.3]
    assert (cf.y_setting, cf.a_setting) == (1.0, 0.0)
    # re-evaluating at the factual setting reproduces the row
    back = counterfactual_row(cf, factual.y_setting, factual.a_setting)
    assert np.array_equal(back.values, factual.values)


def test_counterfactual_identity_property():
    rng = np.random.default_rng(7)
    spec = ModelSpec.classification("1, y, a, y:a, x1, x1:a, x4")
    for _ in range(20):
        x = rng.normal(size=(1, 2))
        y, a = rng.integers(0, 2, size=2)
        base = design_columns(spec, float(y), float(a), x, ("x1", "x4"))[0]
        flipped = design_columns(spec, 1.0 - y, 1.0 - a, x, ("x1", "x4"))[0]
        # entries free of Y and A never move
        fixed = [i for i, t in enumerate(spec.terms)
                 if not (t.uses_gold or t.uses_treatment)]
        assert np.array_equal(base[fixed], flipped[fixed])


def test_build_design_subsets_and_order():
    ds = small_dataset()
    rows = build_design(ds, saturated_spec(), subset="validated")
    assert [len(r) for r in rows] == [2, 2]
    assert [r.obs_index for r in rows[0]] == [0, 1]
    again = build_design(ds, saturated_spec(), subset="validated")
    assert all(np.array_equal(a.values, b.values)
               for ca, cb in zip(rows, again) for a, b in zip(ca, cb))


def test_gold_spec_on_all_rows_rejected():
    ds = TrialDataset.from_columns(["c1", "c1", "c2"], [1, 1, 0], [1, 0, 1],
                                   [1, 0, 1], [1.0, np.nan, 0.0], np.empty((3, 0)))
    with pytest.raises(SpecError, match="non-validated"):
        build_design(ds, saturated_spec(), subset="all")
    assert len(build_design(ds, ModelSpec.selection("1, a"), subset="all")) == 2


def test_counterfactual_design_matches_rowwise():
    ds = small_dataset()
    spec = ModelSpec.classification("1, y, a, y:a, x1, x1:a")
    full = counterfactual_design(ds, spec, 1, 0)
    rows = build_design(ds, spec, subset="validated")
    flat = [r for cluster in rows for r in cluster]
    for i, row in enumerate(flat):
        assert np.array_equal(full[row.obs_index], counterfactual_row(row, 1, 0).values)


def test_unknown_covariate_named():
    ds = small_dataset()
    with pytest.raises(SpecError, match="x9"):
        build_design(ds, ModelSpec.classification("1, y, a, x9"), subset="validated")


# ---- CSV loading ------------------------------------------------------------

def test_load_basic_csv(tmp_path):
    result = load_csv(write_csv(tmp_path / "t.csv", BASIC_CSV),
                      CsvSchema(covariates=("x1",)))
    ds = result.dataset
    assert result.n_read == 4 and result.dropped == {}
    assert ds.m == 2 and ds.n == 4
    assert ds.covariate_names == ("x1",)
    assert ds.y_star.tolist() == [1, 0, 1, 0]
    assert np.isnan(ds.y[1]) and np.isnan(ds.y[3])
    assert ds.y[0] == 1.0 and ds.y[2] == 0.0


def test_load_infers_covariates(tmp_path):
    result = load_csv(write_csv(tmp_path / "t.csv", BASIC_CSV))
    assert result.dataset.covariate_names == ("x1",)


def test_dropped_row_accounting(tmp_path):
    text = (
        "cluster,a,y_star,v,y,x1\n"
        "s1,1,1,1,1,2.0\n"
        "s1,,0,0,,1.0\n"      # missing treatment
        "s1,1,,0,,1.0\n"      # missing silver outcome
        "s1,1,0,,,1.0\n"      # missing selection flag
        "s1,1,0,0,,\n"        # missing covariate
        "s2,0,1,1,0,0.5\n"
    )
    result = load_csv(write_csv(tmp_path / "t.csv", text))
    assert result.n_read == 6
    assert result.dataset.n == 2
    assert result.dropped == {"missing treatment": 1, "missing silver outcome": 1,
                              "missing selection flag": 1, "missing covariate": 1}
    assert result.dropped_rows == ((3, "missing treatment"), (4, "missing silver outcome"),
                                   (5, "missing selection flag"), (6, "missing covariate"))


def test_missing_column_rejected(tmp_path):
    path = write_csv(tmp_path / "t.csv", "cluster,a,y_star,v\ns1,1,1,0\n")
    with pytest.raises(DataError, match="missing columns.*'y'"):
        load_csv(path)


def test_nonbinary_value_reports_row(tmp_path):
    text = BASIC_CSV.replace("s2,0,1,1,0,0.5", "s2,2,1,1,0,0.5")
    with pytest.raises(DataError, match="row 4"):
        load_csv(write_csv(tmp_path / "t.csv", text))


def test_nonnumeric_value_reports_row(tmp_path):
    text = BASIC_CSV.replace("s2,0,1,1,0,0.5", "s2,no,1,1,0,0.5")
    with pytest.raises(DataError, match="non-numeric.*row 4"):
        load_csv(write_csv(tmp_path / "t.csv", text))


def test_gold_without_selection_rejected(tmp_path):
    text = BASIC_CSV.replace("s1,1,0,0,,1.0", "s1,1,0,0,1,1.0")
    with pytest.raises(DataError, match="row 3"):
        load_csv(write_csv(tmp_path / "t.csv", text))


def test_validated_without_gold_rejected(tmp_path):
    text = BASIC_CSV.replace("s1,1,1,1,1,2.0", "s1,1,1,1,,2.0")
    with pytest.raises(DataError, match="row 2"):
        load_csv(write_csv(tmp_path / "t.csv", text))


def test_csv_round_trip(tmp_path):
    ds = small_dataset()
    schema = CsvSchema(covariates=("x1", "x4"), cluster_level=("x4",))
    save_csv(ds, tmp_path / "out.csv", schema)
    back = load_csv(tmp_path / "out.csv", schema).dataset
    assert back.m == ds.m and back.n == ds.n
    assert back.cluster_labels == ds.cluster_labels
    assert np.array_equal(back.a, ds.a)
    assert np.array_equal(back.y_star, ds.y_star)
    assert np.array_equal(back.v, ds.v)
    assert np.array_equal(back.y[back.v == 1], ds.y[ds.v == 1])
    assert np.allclose(back.x, ds.x)
