"""Trial data structures, CSV loading, and design-matrix construction.

The central object is :class:`TrialDataset`, a column-oriented, immutable view
of one cluster-randomized trial: cluster membership, cluster-constant binary
treatment, the silver-standard outcome observed on everyone, the validation
flag, the gold-standard outcome observed only on validated units, and a
covariate matrix. Model specifications (:class:`ModelSpec`) are ordered lists
of terms over (intercept, gold outcome, treatment, their product, covariates,
covariate-by-treatment products) and are evaluated into design rows either at
observed values or at counterfactual (y, a) settings.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import DataError, SpecError

__all__ = [
    "Term",
    "ModelSpec",
    "saturated_spec",
    "homogeneous_spec",
    "Observation",
    "TrialDataset",
    "DesignRow",
    "build_design",
    "counterfactual_row",
    "design_columns",
    "counterfactual_design",
    "CsvSchema",
    "LoadResult",
    "load_csv",
    "save_csv",
]

_RESERVED_LABELS = ("1", "y", "a", "y:a")


@dataclass(frozen=True)
class Term:
    """One design-matrix column.

    ``kind`` is one of ``intercept``, ``gold``, ``treat``, ``gold_treat``,
    ``cov``, ``cov_treat``; ``name`` is the covariate name for the last two.
    """

    kind: str
    name: str | None = None

    def __post_init__(self):
        if self.kind in ("cov", "cov_treat"):
            if not self.name:
                raise SpecError("covariate terms need a covariate name")
        elif self.kind not in ("intercept", "gold", "treat", "gold_treat"):
            raise SpecError(f"unknown term kind {self.kind!r}")
        elif self.name is not None:
            raise SpecError(f"term kind {self.kind!r} takes no covariate name")

    @property
    def label(self) -> str:
        if self.kind == "intercept":
            return "1"
        if self.kind == "gold":
            return "y"
        if self.kind == "treat":
            return "a"
        if self.kind == "gold_treat":
            return "y:a"
        if self.kind == "cov":
            return self.name
        return f"{self.name}:a"

    @property
    def uses_gold(self) -> bool:
        return self.kind in ("gold", "gold_treat")

    @property
    def uses_treatment(self) -> bool:
        return self.kind in ("treat", "gold_treat", "cov_treat")


def _parse_term(token: str) -> Term:
    token = token.strip()
    low = token.lower()
    if low in ("1", "intercept"):
        return Term("intercept")
    if low == "y":
        return Term("gold")
    if low == "a":
        return Term("treat")
    if low in ("y:a", "a:y"):
        return Term("gold_treat")
    if ":" in token:
        left, _, right = token.partition(":")
        left, right = left.strip(), right.strip()
        if right.lower() == "a":
            return Term("cov_treat", left)
        if left.lower() == "a":
            return Term("cov_treat", right)
        raise SpecError(f"cannot parse term {token!r}: only ':a' interactions are supported")
    if not token:
        raise SpecError("empty term")
    return Term("cov", token)


def parse_terms(terms) -> tuple[Term, ...]:
    """Parse a spec declaration into :class:`Term` objects.

    Accepts a comma- or plus-separated string such as ``"1, y, a, y:a, x1:a"``
    or a sequence of labels/:class:`Term` instances.
    """
    if isinstance(terms, str):
        tokens = [t for t in terms.replace("+", ",").split(",") if t.strip()]
    else:
        tokens = list(terms)
    parsed = tuple(t if isinstance(t, Term) else _parse_term(t) for t in tokens)
    labels = [t.label for t in parsed]
    dupes = {lab for lab in labels if labels.count(lab) > 1}
    if dupes:
        raise SpecError(f"duplicate terms: {sorted(dupes)}")
    return parsed


@dataclass(frozen=True)
class ModelSpec:
    """Ordered design specification for the classification or selection model.

    Classification specs must contain the intercept, the gold outcome, and the
    treatment (the treatment requirement is lifted only for the deliberately
    treatment-homogeneous baseline, built with ``treatment_free=True``).
    Selection specs may never reference the gold outcome.
    """

    terms: tuple[Term, ...]
    role: str = "classification"
    treatment_free: bool = False

    def __post_init__(self):
        object.__setattr__(self, "terms", parse_terms(self.terms))
        if self.role not in ("classification", "selection"):
            raise SpecError(f"unknown spec role {self.role!r}")
        labels = set(self.labels)
        if self.role == "classification":
            missing = {"1", "y"} - labels
            if not self.treatment_free:
                missing |= {"a"} - labels
            if missing:
                raise SpecError(f"classification spec must contain {sorted(missing)}")
        else:
            if self.treatment_free:
                raise SpecError("treatment_free applies to classification specs only")
            gold = [t.label for t in self.terms if t.uses_gold]
            if gold:
                raise SpecError(f"selection spec cannot reference the gold outcome: {gold}")

    @classmethod
    def classification(cls, terms, treatment_free: bool = False) -> "ModelSpec":
        return cls(parse_terms(terms), "classification", treatment_free)

    @classmethod
    def selection(cls, terms) -> "ModelSpec":
        return cls(parse_terms(terms), "selection")

    @property
    def p(self) -> int:
        return len(self.terms)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(t.label for t in self.terms)

    @property
    def covariate_names(self) -> tuple[str, ...]:
        seen = []
        for t in self.terms:
            if t.name and t.name not in seen:
                seen.append(t.name)
        return tuple(seen)

    @property
    def uses_gold(self) -> bool:
        return any(t.uses_gold for t in self.terms)


def saturated_spec() -> ModelSpec:
    """The saturated classification spec (1, Y, A, Y:A)."""
    return ModelSpec.classification("1, y, a, y:a")


def homogeneous_spec() -> ModelSpec:
    """The treatment- and covariate-homogeneous baseline spec (1, Y)."""
    return ModelSpec.classification("1, y", treatment_free=True)


@dataclass(frozen=True)
class Observation:
    """One row of a trial dataset."""

    cluster: object
    a: int
    y_star: int
    v: int
    y: float | None
    x: np.ndarray
    clinician: object | None = None


def _require_binary(values: np.ndarray, what: str):
    bad = ~np.isin(values, (0, 1))
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise DataError(f"{what} must be 0/1; found {values[idx]!r} at row index {idx}")


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Immutable column store for one trial.

    Rows are grouped by cluster: ``cluster`` holds integer codes ``0..m-1``
    that are nondecreasing along the rows, and ``cluster_labels[code]`` is the
    original identifier. The gold outcome ``y`` is NaN exactly where ``v`` is
    0. Covariates named in ``cluster_level`` must be constant within cluster.
    """

    cluster: np.ndarray
    a: np.ndarray
    y_star: np.ndarray
    v: np.ndarray
    y: np.ndarray
    x: np.ndarray
    covariate_names: tuple[str, ...] = ()
    cluster_level: frozenset = frozenset()
    cluster_labels: tuple = ()
    clinician: np.ndarray | None = None
    _offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cluster = np.ascontiguousarray(self.cluster, dtype=np.int64)
        a = np.ascontiguousarray(self.a, dtype=np.int64)
        y_star = np.ascontiguousarray(self.y_star, dtype=np.int64)
        v = np.ascontiguousarray(self.v, dtype=np.int64)
        y = np.ascontiguousarray(self.y, dtype=np.float64)
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        n = cluster.shape[0]
        if x.ndim != 2 or x.shape[0] != n:
            raise DataError("covariate matrix must be 2-D with one row per observation")
        for arr, what in ((a, "treatment"), (y_star, "silver outcome"), (v, "selection flag"), (y, "gold outcome")):
            if arr.shape != (n,):
                raise DataError(f"{what} column has wrong length")
        if n == 0:
            raise DataError("dataset is empty")

        if cluster[0] != 0 or not np.isin(np.diff(cluster), (0, 1)).all():
            raise DataError("cluster codes must be nondecreasing 0..m-1 with no gaps")
        m = int(cluster[-1]) + 1
        labels = tuple(self.cluster_labels) if self.cluster_labels else tuple(range(m))
        if len(labels) != m or len(set(labels)) != m:
            raise DataError("cluster_labels must be one unique label per cluster")

        _require_binary(a, "treatment")
        _require_binary(y_star, "silver outcome")
        _require_binary(v, "selection flag")
        gold_present = np.isfinite(y)
        if (gold_present & (v == 0)).any():
            idx = int(np.flatnonzero(gold_present & (v == 0))[0])
            raise DataError(f"gold outcome present on non-validated row index {idx}")
        if (~gold_present & (v == 1)).any():
            idx = int(np.flatnonzero(~gold_present & (v == 1))[0])
            raise DataError(f"gold outcome missing on validated row index {idx}")
        _require_binary(y[gold_present], "gold outcome")
        if not np.isfinite(x).all():
            raise DataError("covariates must be finite")

        names = tuple(self.covariate_names)
        if len(names) != x.shape[1] or len(set(names)) != len(names):
            raise DataError("covariate_names must match covariate columns and be unique")
        for name in names:
            if name.lower() in _RESERVED_LABELS:
                raise DataError(f"covariate name {name!r} shadows a reserved term label")

        offsets = np.searchsorted(cluster, np.arange(m), side="left")
        if not (a == a[np.repeat(offsets, np.diff(np.append(offsets, n)))]).all():
            bad = np.flatnonzero(a != a[np.repeat(offsets, np.diff(np.append(offsets, n)))])[0]
            raise DataError(f"treatment varies within cluster {labels[cluster[bad]]!r}")
        level = frozenset(self.cluster_level)
        if not level <= set(names):
            raise DataError(f"unknown cluster-level covariates: {sorted(level - set(names))}")
        for name in sorted(level):
            col = x[:, names.index(name)]
            if not (col == col[np.repeat(offsets, np.diff(np.append(offsets, n)))]).all():
                raise DataError(f"cluster-level covariate {name!r} varies within a cluster")

        pi = a.mean()
        if not 0.0 < pi < 1.0:
            raise DataError("both treatment arms must be present")

        clin = self.clinician
        if clin is not None:
            clin = np.ascontiguousarray(clin)
            if clin.shape != (n,):
                raise DataError("clinician column has wrong length")

        for name, arr in (("cluster", cluster), ("a", a), ("y_star", y_star), ("v", v), ("y", y), ("x", x), ("clinician", clin)):
            if arr is not None:
                arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "cluster_level", level)
        object.__setattr__(self, "cluster_labels", labels)
        object.__setattr__(self, "_offsets", offsets)

    @classmethod
    def from_columns(cls, cluster_ids, a, y_star, v, y, x, covariate_names=(),
                     cluster_level=(), clinician=None) -> "TrialDataset":
        """Build a dataset from raw columns, coding clusters by first appearance."""
        ids = np.asarray(cluster_ids)
        seen: dict = {}
        codes = np.empty(len(ids), dtype=np.int64)
        for i, lab in enumerate(ids.tolist()):
            codes[i] = seen.setdefault(lab, len(seen))
        order = np.argsort(codes, kind="stable")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(len(ids), -1)
        clin = None if clinician is None else np.asarray(clinician)[order]
        return cls(
            cluster=codes[order],
            a=np.asarray(a)[order],
            y_star=np.asarray(y_star)[order],
            v=np.asarray(v)[order],
            y=np.asarray(y, dtype=np.float64)[order],
            x=x[order],
            covariate_names=tuple(covariate_names),
            cluster_level=cluster_level,
            cluster_labels=tuple(seen.keys()),
            clinician=clin,
        )

    # ---- shapes and summaries -------------------------------------------

    @property
    def n(self) -> int:
        return self.cluster.shape[0]

    @property
    def m(self) -> int:
        return len(self.cluster_labels)

    @property
    def offsets(self) -> np.ndarray:
        """Start index of each cluster's row block."""
        return self._offsets

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.diff(np.append(self._offsets, self.n))

    @property
    def n_validated(self) -> np.ndarray:
        """Validated count per cluster."""
        return np.bincount(self.cluster, weights=self.v, minlength=self.m).astype(np.int64)

    @property
    def n_validated_total(self) -> int:
        return int(self.v.sum())

    @property
    def pi_hat(self) -> float:
        """Individual-level treated proportion."""
        return float(self.a.mean())

    def observation(self, i: int) -> Observation:
        yi = float(self.y[i]) if np.isfinite(self.y[i]) else None
        clin = None if self.clinician is None else self.clinician[i]
        return Observation(self.cluster_labels[self.cluster[i]], int(self.a[i]),
                           int(self.y_star[i]), int(self.v[i]), yi,
                           self.x[i].copy(), clin)

    def take_clusters(self, indices) -> "TrialDataset":
        """Dataset holding the given clusters, relabeled 0..len(indices)-1.

        Repeated indices are allowed and become distinct clusters, which is
        the resampling step of the cluster bootstrap.
        """
        indices = np.asarray(indices, dtype=np.int64)
        ends = np.append(self._offsets, self.n)
        rows = np.concatenate([np.arange(self._offsets[i], ends[i + 1]) for i in indices])
        sizes = self.cluster_sizes[indices]
        return TrialDataset(
            cluster=np.repeat(np.arange(len(indices)), sizes),
            a=self.a[rows],
            y_star=self.y_star[rows],
            v=self.v[rows],
            y=self.y[rows],
            x=self.x[rows],
            covariate_names=self.covariate_names,
            cluster_level=self.cluster_level,
            cluster_labels=tuple(range(len(indices))),
            clinician=None if self.clinician is None else self.clinician[rows],
        )

    def cluster_reduce(self, values: np.ndarray) -> np.ndarray:
        """Sum per-observation values (1-D or 2-D) within clusters."""
        values = np.asarray(values)
        if values.ndim == 1:
            return np.add.reduceat(values, self._offsets)
        return np.add.reduceat(values, self._offsets, axis=0)


# ---- design construction -------------------------------------------------


def design_columns(spec: ModelSpec, y, a, x: np.ndarray, names: tuple) -> np.ndarray:
    """Evaluate spec terms into an (n, p) design matrix.

    ``y`` and ``a`` may be scalars (a counterfactual setting applied to every
    row) or per-row arrays; ``y`` may be None when the spec has no gold terms.
    """
    n = x.shape[0]
    a_col = None if a is None else np.broadcast_to(np.asarray(a, dtype=np.float64), (n,))
    y_col = None if y is None else np.broadcast_to(np.asarray(y, dtype=np.float64), (n,))
    cols = []
    for term in spec.terms:
        if term.uses_gold:
            if y_col is None or not np.isfinite(y_col).all():
                raise SpecError(
                    "specification references the gold outcome but the rows "
                    "being built include non-validated observations")
        if term.kind == "intercept":
            cols.append(np.ones(n))
        elif term.kind == "gold":
            cols.append(y_col)
        elif term.kind == "treat":
            cols.append(a_col)
        elif term.kind == "gold_treat":
            cols.append(y_col * a_col)
        else:
            if term.name not in names:
                raise SpecError(f"covariate {term.name!r} not in dataset columns {list(names)}")
            col = x[:, names.index(term.name)]
            cols.append(col if term.kind == "cov" else col * a_col)
    return np.column_stack(cols) if cols else np.empty((n, 0))


def counterfactual_design(dataset: TrialDataset, spec: ModelSpec, y, a) -> np.ndarray:
    """(n, p) design with the gold outcome and treatment set to (y, a) everywhere."""
    return design_columns(spec, y, a, dataset.x, dataset.covariate_names)


@dataclass(frozen=True)
class DesignRow:
    """One evaluated design row with its provenance.

    ``y_setting`` and ``a_setting`` record the outcome/treatment values the
    row was evaluated at (observed or counterfactual); ``x`` keeps the unit's
    covariates so counterfactual rows can be rebuilt from this row alone.
    """

    values: np.ndarray
    spec: ModelSpec
    obs_index: int
    y_setting: float | None
    a_setting: float
    x: np.ndarray
    covariate_names: tuple


def build_design(dataset: TrialDataset, spec: ModelSpec, subset: str = "all") -> list:
    """Evaluate the spec at observed values, grouped by cluster.

    Parameters
    ----------
    dataset : TrialDataset
    spec : ModelSpec
    subset : {"all", "validated"}
        Rows to include. A spec that references the gold outcome requires
        ``subset="validated"``.

    Returns
    -------
    list of list of DesignRow
        One inner list per cluster, in cluster order; row order within a
        cluster follows the dataset.
    """
    if subset not in ("all", "validated"):
        raise SpecError(f"unknown subset {subset!r}")
    keep = dataset.v == 1 if subset == "validated" else np.ones(dataset.n, dtype=bool)
    idx = np.flatnonzero(keep)
    y = dataset.y[idx] if spec.uses_gold else None
    values = design_columns(spec, y, dataset.a[idx], dataset.x[idx], dataset.covariate_names)
    out = [[] for _ in range(dataset.m)]
    for pos, i in enumerate(idx):
        yi = float(dataset.y[i]) if np.isfinite(dataset.y[i]) else None
        out[dataset.cluster[i]].append(DesignRow(
            values=values[pos], spec=spec, obs_index=int(i), y_setting=yi,
            a_setting=float(dataset.a[i]), x=dataset.x[i],
            covariate_names=dataset.covariate_names))
    return out


def counterfactual_row(row: DesignRow, y, a) -> DesignRow:
    """Re-evaluate a design row at the counterfactual setting (y, a)."""
    values = design_columns(row.spec, y, a, row.x.reshape(1, -1), row.covariate_names)[0]
    return replace(row, values=values, y_setting=None if y is None else float(y),
                   a_setting=float(a))


# ---- CSV interface -------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Column-name mapping for :func:`load_csv` and :func:`save_csv`.

    ``covariates=None`` means every column not otherwise mapped is a
    covariate. ``cluster_level`` names covariates that must be constant
    within cluster.
    """

    cluster: str = "cluster"
    treatment: str = "a"
    silver: str = "y_star"
    selection: str = "v"
    gold: str = "y"
    clinician: str | None = None
    covariates: tuple | None = None
    cluster_level: tuple = ()


@dataclass(frozen=True)
class LoadResult:
    """A loaded dataset plus dropped-row accounting.

    ``dropped`` maps a reason to a count; ``dropped_rows`` lists
    (1-based file row, reason) pairs in file order.
    """

    dataset: TrialDataset
    n_read: int
    dropped: dict
    dropped_rows: tuple


def _numeric(frame: pd.DataFrame, col: str, rows: np.ndarray) -> np.ndarray:
    raw = frame[col]
    out = pd.to_numeric(raw, errors="coerce")
    bad = out.isna() & raw.notna()
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataError(f"column {col!r} has non-numeric value {raw.iloc[i]!r} at row {rows[i]}")
    return out.to_numpy(dtype=np.float64)


def load_csv(path, schema: CsvSchema = CsvSchema()) -> LoadResult:
    """Load a trial CSV file.

    Missing values are the empty string or ``NA``. Rows missing the
    treatment, silver outcome, selection flag, clinician (when mapped), or a
    covariate are dropped and counted by reason. A gold outcome present on a
    non-validated row, or absent on a validated row, is an error, as are
    non-binary values in binary columns and clusters with mixed treatment.

    Returns
    -------
    LoadResult
    """
    try:
        frame = pd.read_csv(path, na_values=("", "NA"), keep_default_na=False,
                            skip_blank_lines=False)
    except (pd.errors.ParserError, UnicodeDecodeError, OSError) as err:
        raise DataError(f"cannot parse {path}: {err}") from err
    if schema.covariates is None:
        mapped = {schema.cluster, schema.treatment, schema.silver, schema.selection,
                  schema.gold, schema.clinician}
        covariates = tuple(c for c in frame.columns if c not in mapped)
    else:
        covariates = tuple(schema.covariates)
    required = [schema.cluster, schema.treatment, schema.silver, schema.selection,
                schema.gold, *covariates]
    if schema.clinician:
        required.append(schema.clinician)
    missing_cols = [c for c in required if c not in frame.columns]
    if missing_cols:
        raise DataError(f"missing columns: {missing_cols}")

    rows = frame.index.to_numpy() + 2  # 1-based file rows, after the header
    drop_reasons = [
        ("missing treatment", frame[schema.treatment].isna()),
        ("missing silver outcome", frame[schema.silver].isna()),
        ("missing selection flag", frame[schema.selection].isna()),
    ]
    if schema.clinician:
        drop_reasons.append(("missing clinician", frame[schema.clinician].isna()))
    cov_missing = frame[list(covariates)].isna().any(axis=1) if covariates else \
        pd.Series(False, index=frame.index)
    drop_reasons.append(("missing covariate", cov_missing))
    if frame[schema.cluster].isna().any():
        i = int(np.flatnonzero(frame[schema.cluster].isna())[0])
        raise DataError(f"missing cluster id at row {rows[i]}")

    dropped_rows = []
    drop_mask = np.zeros(len(frame), dtype=bool)
    for reason, mask in drop_reasons:
        fresh = mask.to_numpy() & ~drop_mask
        dropped_rows.extend((int(r), reason) for r in rows[fresh])
        drop_mask |= mask.to_numpy()
    kept = frame.loc[~drop_mask]
    rows = rows[~drop_mask]
    if kept.empty:
        raise DataError("no usable rows after exclusions")

    def binary(col: str, what: str) -> np.ndarray:
        vals = _numeric(kept, col, rows)
        bad = ~np.isin(vals, (0.0, 1.0))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DataError(f"{what} column {col!r} has non-binary value "
                            f"{kept[col].iloc[i]!r} at row {rows[i]}")
        return vals.astype(np.int64)

    a = binary(schema.treatment, "treatment")
    y_star = binary(schema.silver, "silver outcome")
    v = binary(schema.selection, "selection flag")
    y = _numeric(kept, schema.gold, rows)
    gold_present = ~np.isnan(y)
    for i in np.flatnonzero(gold_present & (v == 0))[:1]:
        raise DataError(f"gold outcome present on non-validated row {rows[i]}")
    for i in np.flatnonzero(~gold_present & (v == 1))[:1]:
        raise DataError(f"gold outcome missing on validated row {rows[i]}")
    bad = gold_present & ~np.isin(y, (0.0, 1.0))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataError(f"gold outcome column {schema.gold!r} has non-binary value "
                        f"{kept[schema.gold].iloc[i]!r} at row {rows[i]}")
    x = np.column_stack([_numeric(kept, c, rows) for c in covariates]) if covariates \
        else np.empty((len(kept), 0))

    dataset = TrialDataset.from_columns(
        cluster_ids=kept[schema.cluster].to_numpy(),
        a=a, y_star=y_star, v=v, y=y, x=x,
        covariate_names=covariates, cluster_level=schema.cluster_level,
        clinician=kept[schema.clinician].to_numpy() if schema.clinician else None)
    counts: dict = {}
    for _, reason in dropped_rows:
        counts[reason] = counts.get(reason, 0) + 1
    return LoadResult(dataset=dataset, n_read=len(frame), dropped=counts,
                      dropped_rows=tuple(dropped_rows))


def save_csv(dataset: TrialDataset, path, schema: CsvSchema = CsvSchema()):
    """Write a dataset as CSV; the gold outcome is blank on non-validated rows."""
    labels = np.asarray(dataset.cluster_labels, dtype=object)
    data = {schema.cluster: labels[dataset.cluster]}
    if schema.clinician and dataset.clinician is not None:
        data[schema.clinician] = dataset.clinician
    data[schema.treatment] = dataset.a
    data[schema.silver] = dataset.y_star
    data[schema.selection] = dataset.v
    gold = pd.array(dataset.y, dtype="Int64")
    gold[dataset.v == 0] = pd.NA
    data[schema.gold] = gold
    for j, name in enumerate(dataset.covariate_names):
        data[name] = dataset.x[:, j]
    pd.DataFrame(data).to_csv(path, index=False, na_rep="")
