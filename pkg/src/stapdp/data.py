"""Data model and file ingestion.

Two delimited files describe a study: a subjects table with one row per
subject-occasion (outcome, covariates, optional weight) and a distances
table in long format with one row per subject-occasion-feature triple.
The loader joins them into a Dataset whose rows are canonically ordered
(subjects sorted by id, rows within a subject by occasion), so that any
permutation of the input files loads to the identical object.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def _fail(problems):
    shown = problems[:10]
    more = len(problems) - len(shown)
    msg = "; ".join(shown)
    if more > 0:
        msg += f"; and {more} more"
    raise DataError(msg)


@dataclass(frozen=True)
class DistanceSet:
    """Distances from one observation to every feature within the radius.

    May be empty.  Values are kept sorted; only the multiset matters to the
    model, and sorting makes equality checks trivial.
    """

    values: np.ndarray
    radius: float

    def __post_init__(self):
        v = np.sort(np.asarray(self.values, dtype=float))
        object.__setattr__(self, "values", v)
        if v.size and (not np.isfinite(v).all() or v.min() < 0 or v.max() > self.radius):
            raise DataError(
                f"distances must lie in [0, {self.radius}], got range "
                f"[{v.min()}, {v.max()}]"
            )

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class SchemaConfig:
    """Column names, domain radius, and basis settings for a study's files."""

    radius: float
    id_col: str = "id"
    occasion_col: str = "occasion"
    y_col: str = "y"
    weight_col: str = "weight"
    x_cols: tuple = ()
    z_cols: tuple = ()
    distance_col: str = "distance"
    include_intercept: bool = True
    delimiter: str = ","
    n_basis: int = 7
    degree: int = 3
    penalty_order: int = 2

    def __post_init__(self):
        object.__setattr__(self, "x_cols", tuple(self.x_cols))
        object.__setattr__(self, "z_cols", tuple(self.z_cols))
        if not np.isfinite(self.radius) or self.radius <= 0:
            raise DataError(f"radius must be positive, got {self.radius}")

    @classmethod
    def from_json(cls, path) -> "SchemaConfig":
        with open(path) as fh:
            raw = json.load(fh)
        cols = raw.get("columns", {})
        basis = raw.get("basis", {})
        return cls(
            radius=raw["radius"],
            id_col=cols.get("id", "id"),
            occasion_col=cols.get("occasion", "occasion"),
            y_col=cols.get("y", "y"),
            weight_col=cols.get("weight", "weight"),
            x_cols=tuple(cols.get("x", ())),
            z_cols=tuple(cols.get("z", ())),
            distance_col=cols.get("distance", "distance"),
            include_intercept=raw.get("include_intercept", True),
            delimiter=raw.get("delimiter", ","),
            n_basis=basis.get("n_basis", 7),
            degree=basis.get("degree", 3),
            penalty_order=basis.get("penalty_order", 2),
        )

    def to_json(self, path) -> None:
        raw = {
            "radius": self.radius,
            "columns": {
                "id": self.id_col,
                "occasion": self.occasion_col,
                "y": self.y_col,
                "weight": self.weight_col,
                "x": list(self.x_cols),
                "z": list(self.z_cols),
                "distance": self.distance_col,
            },
            "include_intercept": self.include_intercept,
            "delimiter": self.delimiter,
            "basis": {
                "n_basis": self.n_basis,
                "degree": self.degree,
                "penalty_order": self.penalty_order,
            },
        }
        with open(path, "w") as fh:
            json.dump(raw, fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass(frozen=True)
class ObservationRow:
    """One subject-occasion: outcome, covariate rows, weight, its distance set."""

    subject_id: object
    occasion: object
    y: float
    x: np.ndarray
    z: np.ndarray
    weight: float
    distances: DistanceSet


@dataclass(frozen=True)
class Dataset:
    """Canonically ordered study data.

    Rows are sorted by (subject id, occasion); ``row_subject`` indexes each
    row into ``subject_ids``, which is sorted and unique.  ``distances``
    holds one DistanceSet per row.
    """

    subject_ids: tuple
    row_subject: np.ndarray
    occasions: tuple
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    w: np.ndarray
    distances: tuple
    radius: float
    x_names: tuple
    z_names: tuple
    dropped_distances: int = 0

    def __post_init__(self):
        problems = []
        n = self.y.shape[0]
        if self.row_subject.shape != (n,) or self.w.shape != (n,):
            raise DataError("row arrays must share one length")
        if self.X.shape[0] != n or self.Z.shape[0] != n or len(self.occasions) != n:
            raise DataError("row arrays must share one length")
        if len(self.distances) != n:
            raise DataError("need exactly one distance set per row")
        if not np.isfinite(self.y).all():
            problems.append("outcome contains non-finite values")
        if self.X.size and not np.isfinite(self.X).all():
            problems.append("X contains non-finite values")
        if self.Z.size and not np.isfinite(self.Z).all():
            problems.append("Z contains non-finite values")
        if n and (not np.isfinite(self.w).all() or self.w.min() <= 0):
            problems.append("weights must be positive and finite")
        if n:
            counts = np.bincount(self.row_subject, minlength=len(self.subject_ids))
            missing = [str(self.subject_ids[i]) for i in np.flatnonzero(counts == 0)]
            if missing:
                problems.append(f"subjects with no observation rows: {missing[:10]}")
        elif self.subject_ids:
            problems.append("subjects with no observation rows: "
                            f"{[str(s) for s in self.subject_ids[:10]]}")
        for ds in self.distances:
            if ds.radius != self.radius:
                problems.append("distance set radius differs from dataset radius")
                break
        if problems:
            _fail(problems)

    @property
    def n_rows(self) -> int:
        return self.y.shape[0]

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    @property
    def subject_index(self) -> dict:
        """Map subject id to the row indices belonging to it."""
        out = {sid: [] for sid in self.subject_ids}
        for row, si in enumerate(self.row_subject):
            out[self.subject_ids[si]].append(row)
        return {sid: np.asarray(rows, dtype=np.intp) for sid, rows in out.items()}

    @property
    def rows(self) -> list:
        return [
            ObservationRow(
                subject_id=self.subject_ids[si],
                occasion=self.occasions[r],
                y=float(self.y[r]),
                x=self.X[r],
                z=self.Z[r],
                weight=float(self.w[r]),
                distances=self.distances[r],
            )
            for r, si in enumerate(self.row_subject)
        ]

    def row_bounds(self) -> tuple:
        """(starts, ends) of each subject's contiguous row block."""
        starts = np.searchsorted(self.row_subject, np.arange(self.n_subjects), side="left")
        ends = np.searchsorted(self.row_subject, np.arange(self.n_subjects), side="right")
        return starts, ends


def build_dataset(
    subject_ids,
    occasions,
    y,
    X,
    Z,
    w,
    distance_values,
    radius,
    x_names=(),
    z_names=(),
    dropped_distances=0,
) -> Dataset:
    """Assemble a Dataset from per-row arrays, canonicalizing the order.

    ``subject_ids`` is per row; ``distance_values`` maps (subject id,
    occasion) to an array of distances, rows absent from the map getting an
    empty set.
    """
    subject_ids = list(subject_ids)
    n = len(subject_ids)
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float).reshape(n, -1) if np.size(X) else np.zeros((n, 0))
    Z = np.asarray(Z, dtype=float).reshape(n, -1) if np.size(Z) else np.zeros((n, 0))
    w = np.asarray(w, dtype=float)
    occasions = list(occasions)

    uniq = sorted(set(subject_ids))
    sid_to_idx = {sid: i for i, sid in enumerate(uniq)}
    row_subject = np.array([sid_to_idx[s] for s in subject_ids], dtype=np.intp)
    order = np.lexsort((np.asarray(occasions, dtype=object), row_subject))

    keys = {(sid, occ) for sid, occ in zip(subject_ids, occasions)}
    stray = sorted(set(distance_values) - keys, key=str)
    if stray:
        _fail([f"distances for unknown subject-occasion pair {k!r}" for k in stray])

    dsets = tuple(
        DistanceSet(
            np.asarray(distance_values.get((subject_ids[i], occasions[i]), ()), dtype=float),
            radius,
        )
        for i in order
    )
    return Dataset(
        subject_ids=tuple(uniq),
        row_subject=row_subject[order],
        occasions=tuple(occasions[i] for i in order),
        y=y[order],
        X=X[order],
        Z=Z[order],
        w=w[order],
        distances=dsets,
        radius=float(radius),
        x_names=tuple(x_names),
        z_names=tuple(z_names),
        dropped_distances=int(dropped_distances),
    )


def empty_dataset(radius: float = 1.0) -> Dataset:
    """A Dataset with no subjects; the sampler run on it draws from the prior."""
    return build_dataset([], [], [], [], [], [], {}, radius)


def _require_columns(frame, cols, path):
    missing = [c for c in cols if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing required column(s) {missing}")


def load_dataset(subjects_path, distances_path, schema: SchemaConfig) -> Dataset:
    """Read the subjects and distances tables and join them into a Dataset.

    Distances beyond the schema radius are dropped and counted in
    ``Dataset.dropped_distances``; a distance row whose (id, occasion) pair
    matches no subject row is an error.
    """
    subjects_path, distances_path = Path(subjects_path), Path(distances_path)
    subj = pd.read_csv(subjects_path, sep=schema.delimiter)
    dist = pd.read_csv(distances_path, sep=schema.delimiter)

    needed = [schema.id_col, schema.occasion_col, schema.y_col]
    needed += list(schema.x_cols) + list(schema.z_cols)
    _require_columns(subj, needed, subjects_path)
    _require_columns(dist, [schema.id_col, schema.occasion_col, schema.distance_col],
                     distances_path)

    problems = []
    y = pd.to_numeric(subj[schema.y_col], errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(y))
    for r in bad[:10]:
        problems.append(f"row {r + 1} of {subjects_path.name}: "
                        f"non-numeric outcome {subj[schema.y_col].iloc[r]!r}")
    if len(bad) > 10:
        problems.append(f"and {len(bad) - 10} more non-numeric outcomes")

    def numeric_block(cols):
        if not cols:
            return np.zeros((len(subj), 0))
        block = np.empty((len(subj), len(cols)))
        for j, c in enumerate(cols):
            col = pd.to_numeric(subj[c], errors="coerce").to_numpy(dtype=float)
            for r in np.flatnonzero(~np.isfinite(col))[:5]:
                problems.append(f"row {r + 1} of {subjects_path.name}: "
                                f"non-numeric value in column {c!r}")
            block[:, j] = col
        return block

    X = numeric_block(list(schema.x_cols))
    Z = numeric_block(list(schema.z_cols))

    if schema.weight_col in subj.columns:
        w = pd.to_numeric(subj[schema.weight_col], errors="coerce").to_numpy(dtype=float)
        for r in np.flatnonzero(~(np.isfinite(w) & (w > 0)))[:10]:
            problems.append(f"row {r + 1} of {subjects_path.name}: "
                            f"weight must be positive, got {subj[schema.weight_col].iloc[r]!r}")
    else:
        w = np.ones(len(subj))

    dvals = pd.to_numeric(dist[schema.distance_col], errors="coerce").to_numpy(dtype=float)
    for r in np.flatnonzero(~np.isfinite(dvals) | (dvals < 0))[:10]:
        problems.append(f"row {r + 1} of {distances_path.name}: "
                        f"invalid distance {dist[schema.distance_col].iloc[r]!r}")
    if problems:
        _fail(problems)

    subj_keys = set(zip(subj[schema.id_col].tolist(), subj[schema.occasion_col].tolist()))
    dist_keys = list(zip(dist[schema.id_col].tolist(), dist[schema.occasion_col].tolist()))
    stray = sorted({k for k in dist_keys if k not in subj_keys}, key=str)
    if stray:
        _fail([f"distances for unknown subject-occasion pair {k!r}" for k in stray])

    keep = dvals <= schema.radius
    dropped = int((~keep).sum())
    distance_values = {}
    for key, d, ok in zip(dist_keys, dvals, keep):
        if ok:
            distance_values.setdefault(key, []).append(d)

    if schema.include_intercept:
        X = np.column_stack([np.ones(len(subj)), X]) if X.size else np.ones((len(subj), 1))
        x_names = ("intercept",) + schema.x_cols
    else:
        x_names = schema.x_cols

    return build_dataset(
        subject_ids=subj[schema.id_col].tolist(),
        occasions=subj[schema.occasion_col].tolist(),
        y=y,
        X=X,
        Z=Z,
        w=w,
        distance_values=distance_values,
        radius=schema.radius,
        x_names=x_names,
        z_names=schema.z_cols,
        dropped_distances=dropped,
    )


def save_dataset(dataset: Dataset, subjects_path, distances_path, schema: SchemaConfig) -> None:
    """Write a Dataset back to the two-file format, in canonical order."""
    row_ids = [dataset.subject_ids[i] for i in dataset.row_subject]
    cols = {schema.id_col: row_ids,
            schema.occasion_col: list(dataset.occasions),
            schema.y_col: dataset.y}
    x_cols = list(dataset.x_names)
    offset = 0
    if schema.include_intercept and x_cols and x_cols[0] == "intercept":
        offset = 1
        x_cols = x_cols[1:]
    for j, name in enumerate(x_cols):
        cols[name] = dataset.X[:, j + offset]
    for j, name in enumerate(dataset.z_names):
        cols[name] = dataset.Z[:, j]
    cols[schema.weight_col] = dataset.w
    pd.DataFrame(cols).to_csv(subjects_path, sep=schema.delimiter, index=False,
                              float_format="%.17g", lineterminator="\n")

    ids, occs, dists = [], [], []
    for sid, occ, ds in zip(row_ids, dataset.occasions, dataset.distances):
        ids.extend([sid] * len(ds))
        occs.extend([occ] * len(ds))
        dists.extend(ds.values.tolist())
    pd.DataFrame({schema.id_col: ids, schema.occasion_col: occs,
                  schema.distance_col: dists}).to_csv(
        distances_path, sep=schema.delimiter, index=False,
        float_format="%.17g", lineterminator="\n")


@dataclass(frozen=True)
class ValidationReport:
    """Descriptive summary of a Dataset with soft warnings."""

    n_subjects: int
    n_rows: int
    n_features: int
    histogram_edges: np.ndarray
    histogram_counts: np.ndarray
    n_without_near_feature: int
    warnings: tuple

    def lines(self) -> list:
        out = [
            f"subjects: {self.n_subjects}",
            f"rows: {self.n_rows}",
            f"feature distances: {self.n_features}",
            f"subjects with no near feature: {self.n_without_near_feature}",
        ]
        for lo, hi, c in zip(self.histogram_edges[:-1], self.histogram_edges[1:],
                             self.histogram_counts):
            out.append(f"  [{lo:.3g}, {hi:.3g}): {c}")
        out.extend(f"warning: {w}" for w in self.warnings)
        return out


def validate(dataset: Dataset, near_radius: float = 1.0, n_bins: int = 10) -> ValidationReport:
    """Summarize feature distances and flag subjects with thin exposure support."""
    all_d = np.concatenate([ds.values for ds in dataset.distances]) if dataset.distances \
        else np.zeros(0)
    edges = np.linspace(0.0, dataset.radius, n_bins + 1)
    counts, _ = np.histogram(all_d, bins=edges)
    nearest = np.full(dataset.n_subjects, np.inf)
    empty_rows = 0
    for r, ds in enumerate(dataset.distances):
        if len(ds):
            si = dataset.row_subject[r]
            nearest[si] = min(nearest[si], float(ds.values.min()))
        else:
            empty_rows += 1
    no_near = int((nearest > near_radius).sum())
    warnings = []
    if empty_rows:
        warnings.append(f"{empty_rows} row(s) have no feature within the radius")
    if no_near:
        warnings.append(
            f"{no_near} subject(s) have no feature within {near_radius} distance units; "
            "their curves are weakly identified near zero"
        )
    if dataset.n_rows and dataset.dropped_distances:
        warnings.append(f"{dataset.dropped_distances} distance(s) beyond the radius were dropped")
    return ValidationReport(
        n_subjects=dataset.n_subjects,
        n_rows=dataset.n_rows,
        n_features=int(all_d.size),
        histogram_edges=edges,
        histogram_counts=counts,
        n_without_near_feature=no_near,
        warnings=tuple(warnings),
    )
