"""Trial data containers, CSV ingestion and validation.

A trial has two levels. Clusters carry the assignment ``W``, cluster
covariates ``Z`` and, in the treated arm only, the continuous compliance
metrics ``C``. Individuals carry covariates ``X``, binary compliance ``D``
(treated arm only) and the outcome ``Y``.

Values are stored columnar in numpy arrays. Missing cells hold ``nan``, but
the status arrays (``d_status``, ``y_status``) are the authority on
missingness and on its reason.
"""

import csv
import math
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "MissingReason",
    "TrialDataError",
    "ClusterRecord",
    "IndividualRecord",
    "CovariateTransform",
    "TrialDataset",
    "LatentState",
    "TrialSummary",
    "load_trial",
    "write_trial",
    "summarize",
]


class MissingReason(IntEnum):
    OBSERVED = 0
    # Never observable by design: control-arm compliance.
    STRUCTURAL = 1
    # Should have been observed but was not recorded.
    INCIDENTAL = 2


class TrialDataError(ValueError):
    """Invalid trial data. Carries the offending file, line and column when known."""

    def __init__(self, message, *, path=None, line=None, column=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.column = column


@dataclass(frozen=True)
class ClusterRecord:
    cluster_id: str
    W: int
    Z: tuple
    C_obs: Optional[tuple]
    n_i: int


@dataclass(frozen=True)
class IndividualRecord:
    cluster_id: str
    X: tuple
    D_obs: Optional[int]
    Y_obs: Optional[float]
    d_missing: MissingReason
    y_missing: MissingReason


@dataclass(frozen=True)
class CovariateTransform:
    """Centering and scaling applied to ``X`` and ``Z`` before fitting."""

    x_center: np.ndarray
    x_scale: np.ndarray
    z_center: np.ndarray
    z_scale: np.ndarray

    @classmethod
    def identity(cls, n_x, n_z):
        return cls(np.zeros(n_x), np.ones(n_x), np.zeros(n_z), np.ones(n_z))

    @classmethod
    def fit(cls, X, Z):
        def moments(a):
            center = a.mean(axis=0) if a.shape[0] else np.zeros(a.shape[1])
            scale = a.std(axis=0, ddof=1) if a.shape[0] > 1 else np.ones(a.shape[1])
            # A constant column cannot be scaled; leave it centered only.
            scale = np.where(np.isfinite(scale) & (scale > 0), scale, 1.0)
            return center, scale

        xc, xs = moments(X)
        zc, zs = moments(Z)
        return cls(xc, xs, zc, zs)

    def apply_x(self, X):
        return (X - self.x_center) / self.x_scale

    def apply_z(self, Z):
        return (Z - self.z_center) / self.z_scale

    def invert_x(self, X):
        return X * self.x_scale + self.x_center

    def invert_z(self, Z):
        return Z * self.z_scale + self.z_center


def _as_matrix(a, rows):
    a = np.asarray(a, dtype=float)
    if a.ndim == 2:
        return a
    return a.reshape(rows, -1) if rows else a.reshape(0, 0)


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Immutable, validated trial data.

    ``X_raw`` and ``Z_raw`` are the covariates as ingested; ``X`` and ``Z``
    are the standardized versions the model uses.
    """

    cluster_ids: tuple
    W: np.ndarray
    Z_raw: np.ndarray
    C: np.ndarray
    cluster_of: np.ndarray
    X_raw: np.ndarray
    D: np.ndarray
    Y: np.ndarray
    d_status: np.ndarray
    y_status: np.ndarray
    transform: CovariateTransform = field(repr=False, default=None)

    @classmethod
    def from_arrays(
        cls,
        cluster_ids: Sequence,
        W,
        Z,
        C,
        cluster_of,
        X,
        D,
        Y,
        standardize: bool = True,
    ) -> "TrialDataset":
        """Build a dataset from arrays, deriving missingness from ``nan`` cells.

        ``C`` rows of control clusters and ``D`` of control individuals must
        be ``nan``. A ``nan`` in treated-arm ``D`` or in any ``Y`` is flagged
        as incidentally missing.
        """
        W = np.asarray(W)
        n_clusters = W.shape[0]
        Z = _as_matrix(Z, n_clusters)
        C = _as_matrix(C, n_clusters)
        cluster_of = np.asarray(cluster_of, dtype=np.intp)
        X = _as_matrix(X, cluster_of.shape[0])
        D = np.asarray(D, dtype=float)
        Y = np.asarray(Y, dtype=float)

        if not np.all(np.isin(W, (0, 1))):
            raise TrialDataError("W must be 0 or 1")
        if cluster_of.size and (cluster_of.min() < 0 or cluster_of.max() >= n_clusters):
            raise TrialDataError("individual references a cluster that does not exist")
        treated_ind = W[cluster_of] == 1 if cluster_of.size else np.zeros(0, bool)

        d_status = np.full(D.shape, MissingReason.OBSERVED, dtype=np.int8)
        d_status[~treated_ind] = MissingReason.STRUCTURAL
        d_status[treated_ind & np.isnan(D)] = MissingReason.INCIDENTAL
        y_status = np.where(np.isnan(Y), MissingReason.INCIDENTAL, MissingReason.OBSERVED).astype(np.int8)

        transform = CovariateTransform.fit(X, Z) if standardize else CovariateTransform.identity(X.shape[1], Z.shape[1])
        ds = cls(
            cluster_ids=tuple(str(c) for c in cluster_ids),
            W=_readonly(W, np.int8),
            Z_raw=_readonly(Z, float),
            C=_readonly(C, float),
            cluster_of=_readonly(cluster_of, np.intp),
            X_raw=_readonly(X, float),
            D=_readonly(D, float),
            Y=_readonly(Y, float),
            d_status=_readonly(d_status, np.int8),
            y_status=_readonly(y_status, np.int8),
            transform=transform,
        )
        ds.validate()
        return ds

    def validate(self):
        n_clusters = len(self.cluster_ids)
        if n_clusters == 0:
            raise TrialDataError("dataset has no clusters")
        if len(set(self.cluster_ids)) != n_clusters:
            raise TrialDataError("duplicate cluster ids")
        if self.C.shape[1] < 1:
            raise TrialDataError("at least one compliance metric column is required")
        treated = self.W == 1
        c_present = ~np.isnan(self.C)
        for i in range(n_clusters):
            if treated[i] and not c_present[i].all():
                raise TrialDataError(f"treated cluster {self.cluster_ids[i]!r} lacks compliance metrics")
            if not treated[i] and c_present[i].any():
                raise TrialDataError(f"control cluster {self.cluster_ids[i]!r} carries compliance metrics")
        if not np.all(np.isfinite(self.Z_raw)):
            raise TrialDataError("cluster covariates must be finite")
        if not np.all(np.isfinite(self.X_raw)):
            raise TrialDataError("individual covariates must be finite")
        if not np.all(np.isfinite(self.C[c_present])):
            raise TrialDataError("compliance metrics must be finite")
        treated_ind = self.treated_individual
        d_obs = self.d_status == MissingReason.OBSERVED
        if np.any(~treated_ind & ~np.isnan(self.D)):
            row = int(np.flatnonzero(~treated_ind & ~np.isnan(self.D))[0])
            raise TrialDataError(f"individual {row} in a control cluster has observed compliance")
        if not np.all(np.isin(self.D[d_obs], (0.0, 1.0))):
            raise TrialDataError("compliance D must be 0 or 1")
        y_obs = self.y_status == MissingReason.OBSERVED
        if not np.all(np.isfinite(self.Y[y_obs])):
            raise TrialDataError("observed outcomes must be finite")

    # -- shapes ---------------------------------------------------------------

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_ids)

    @property
    def n_individuals(self) -> int:
        return self.cluster_of.shape[0]

    @property
    def n_compliance_metrics(self) -> int:
        return self.C.shape[1]

    @property
    def n_cluster_covariates(self) -> int:
        return self.Z_raw.shape[1]

    @property
    def n_individual_covariates(self) -> int:
        return self.X_raw.shape[1]

    # -- derived arrays ---------------------------------------------------------

    @cached_property
    def X(self) -> np.ndarray:
        return _readonly(self.transform.apply_x(self.X_raw), float)

    @cached_property
    def Z(self) -> np.ndarray:
        return _readonly(self.transform.apply_z(self.Z_raw), float)

    @cached_property
    def cluster_sizes(self) -> np.ndarray:
        return _readonly(np.bincount(self.cluster_of, minlength=self.n_clusters), np.intp)

    @cached_property
    def treated_individual(self) -> np.ndarray:
        return _readonly(self.W[self.cluster_of] == 1, bool)

    @cached_property
    def d_observed(self) -> np.ndarray:
        return _readonly(self.d_status == MissingReason.OBSERVED, bool)

    @cached_property
    def y_observed(self) -> np.ndarray:
        return _readonly(self.y_status == MissingReason.OBSERVED, bool)

    # -- record views -----------------------------------------------------------

    @cached_property
    def clusters(self) -> tuple:
        out = []
        for i, cid in enumerate(self.cluster_ids):
            c_obs = tuple(self.C[i].tolist()) if self.W[i] == 1 else None
            out.append(ClusterRecord(cid, int(self.W[i]), tuple(self.Z_raw[i].tolist()), c_obs, int(self.cluster_sizes[i])))
        return tuple(out)

    @cached_property
    def individuals(self) -> tuple:
        out = []
        for j in range(self.n_individuals):
            d_reason = MissingReason(int(self.d_status[j]))
            y_reason = MissingReason(int(self.y_status[j]))
            out.append(
                IndividualRecord(
                    cluster_id=self.cluster_ids[self.cluster_of[j]],
                    X=tuple(self.X_raw[j].tolist()),
                    D_obs=int(self.D[j]) if d_reason == MissingReason.OBSERVED else None,
                    Y_obs=float(self.Y[j]) if y_reason == MissingReason.OBSERVED else None,
                    d_missing=d_reason,
                    y_missing=y_reason,
                )
            )
        return tuple(out)

    def same_content(self, other: "TrialDataset") -> bool:
        """Exact equality of ingested content (covariates compared raw)."""

        def eq(a, b):
            return a.shape == b.shape and np.array_equal(a, b, equal_nan=True)

        return (
            self.cluster_ids == other.cluster_ids
            and eq(self.W, other.W)
            and eq(self.Z_raw, other.Z_raw)
            and eq(self.C, other.C)
            and eq(self.cluster_of, other.cluster_of)
            and eq(self.X_raw, other.X_raw)
            and eq(self.D, other.D)
            and eq(self.Y, other.Y)
            and eq(self.d_status, other.d_status)
            and eq(self.y_status, other.y_status)
        )


@dataclass
class LatentState:
    """Per-chain latent quantities, held in completed form.

    ``S`` holds 0-based strata for every cluster. ``C``, ``D`` and ``Y`` are
    the completed arrays: observed cells are copied from the dataset and the
    rest carry the current imputations. ``U`` and ``V`` hold the latest probit
    augmentation draws for compliance and (binary family) outcomes.
    """

    S: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Y: np.ndarray
    U: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None

    def copy(self) -> "LatentState":
        return LatentState(
            self.S.copy(),
            self.C.copy(),
            self.D.copy(),
            self.Y.copy(),
            None if self.U is None else self.U.copy(),
            None if self.V is None else self.V.copy(),
        )

    def C_mis(self, data: TrialDataset) -> np.ndarray:
        return self.C[data.W == 0]

    def D_mis(self, data: TrialDataset) -> np.ndarray:
        return self.D[data.d_status == MissingReason.STRUCTURAL]

    def Y_mis(self, data: TrialDataset) -> np.ndarray:
        return self.Y[~data.y_observed]


@dataclass(frozen=True)
class TrialSummary:
    n_clusters_treated: int
    n_clusters_control: int
    n_individuals_treated: int
    n_individuals_control: int
    x_means: tuple
    z_means: tuple
    c_means_treated: tuple
    compliance_rate_treated: float
    n_d_incidental: int
    n_y_incidental: int

    @property
    def n_individuals(self) -> int:
        return self.n_individuals_treated + self.n_individuals_control

    @property
    def n_clusters(self) -> int:
        return self.n_clusters_treated + self.n_clusters_control


def summarize(dataset: TrialDataset) -> TrialSummary:
    """Per-arm counts and raw-scale means."""
    treated = dataset.W == 1
    treated_ind = dataset.treated_individual
    d_obs = dataset.d_observed
    c_means = dataset.C[treated].mean(axis=0) if treated.any() else np.full(dataset.n_compliance_metrics, np.nan)
    x_means = dataset.X_raw.mean(axis=0) if dataset.n_individuals else np.full(dataset.n_individual_covariates, np.nan)
    rate = float(dataset.D[d_obs].mean()) if d_obs.any() else float("nan")
    return TrialSummary(
        n_clusters_treated=int(treated.sum()),
        n_clusters_control=int((~treated).sum()),
        n_individuals_treated=int(treated_ind.sum()),
        n_individuals_control=int((~treated_ind).sum()),
        x_means=tuple(x_means.tolist()),
        z_means=tuple(dataset.Z_raw.mean(axis=0).tolist()),
        c_means_treated=tuple(c_means.tolist()),
        compliance_rate_treated=rate,
        n_d_incidental=int((dataset.d_status == MissingReason.INCIDENTAL).sum()),
        n_y_incidental=int((dataset.y_status == MissingReason.INCIDENTAL).sum()),
    )


# -- CSV ingestion -------------------------------------------------------------


def _numbered_columns(header, prefix, start):
    """Count consecutive ``prefix1..prefixN`` columns beginning at ``start``."""
    n = 0
    while start + n < len(header) and header[start + n] == f"{prefix}{n + 1}":
        n += 1
    return n


def _parse_float(text, *, path, line, column, allow_blank):
    text = text.strip()
    if text == "":
        if allow_blank:
            return math.nan
        raise TrialDataError("value is required", path=path, line=line, column=column)
    try:
        value = float(text)
    except ValueError:
        raise TrialDataError(f"not a number: {text!r}", path=path, line=line, column=column) from None
    if not math.isfinite(value):
        raise TrialDataError(f"non-finite value: {text!r}", path=path, line=line, column=column)
    return value


def _parse_binary(text, *, path, line, column, allow_blank):
    value = _parse_float(text, path=path, line=line, column=column, allow_blank=allow_blank)
    if not math.isnan(value) and value not in (0.0, 1.0):
        raise TrialDataError(f"must be 0 or 1, got {text.strip()!r}", path=path, line=line, column=column)
    return value


def _read_rows(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise TrialDataError(f"cannot read file: {exc.strerror}", path=path) from exc
    if not rows:
        raise TrialDataError("file is empty", path=path)
    header = [h.strip() for h in rows[0]]
    body = [(n + 2, r) for n, r in enumerate(rows[1:]) if any(cell.strip() for cell in r)]
    for line, r in body:
        if len(r) != len(header):
            raise TrialDataError(f"expected {len(header)} fields, found {len(r)}", path=path, line=line)
    return header, body


def load_trial(cluster_file_path, individual_file_path, standardize: bool = True) -> TrialDataset:
    """Read and validate ``clusters.csv`` and ``individuals.csv``.

    Errors name the file, the 1-based line and the column at fault.
    """
    cpath, ipath = Path(cluster_file_path), Path(individual_file_path)

    header, body = _read_rows(cpath)
    if header[:2] != ["cluster_id", "W"]:
        raise TrialDataError("header must start with cluster_id,W", path=cpath, line=1)
    n_z = _numbered_columns(header, "Z", 2)
    n_c = _numbered_columns(header, "C", 2 + n_z)
    if 2 + n_z + n_c != len(header):
        bad = header[2 + n_z + n_c]
        raise TrialDataError(f"unexpected column {bad!r}; expected Z1..ZP then C1..Cl", path=cpath, line=1)
    if n_c == 0:
        raise TrialDataError("at least one compliance column C1 is required", path=cpath, line=1)

    ids, W, Z, C = [], [], [], []
    index = {}
    for line, r in body:
        cid = r[0].strip()
        if cid == "":
            raise TrialDataError("cluster_id is required", path=cpath, line=line, column="cluster_id")
        if cid in index:
            raise TrialDataError(f"duplicate cluster_id {cid!r}", path=cpath, line=line, column="cluster_id")
        index[cid] = len(ids)
        w = _parse_binary(r[1], path=cpath, line=line, column="W", allow_blank=False)
        z = [_parse_float(r[2 + p], path=cpath, line=line, column=f"Z{p + 1}", allow_blank=False) for p in range(n_z)]
        c = [_parse_float(r[2 + n_z + q], path=cpath, line=line, column=f"C{q + 1}", allow_blank=True) for q in range(n_c)]
        for q, value in enumerate(c):
            if w == 1 and math.isnan(value):
                raise TrialDataError("treated cluster requires compliance metrics", path=cpath, line=line, column=f"C{q + 1}")
            if w == 0 and not math.isnan(value):
                raise TrialDataError("control cluster must leave compliance metrics blank", path=cpath, line=line, column=f"C{q + 1}")
        ids.append(cid)
        W.append(int(w))
        Z.append(z)
        C.append(c)
    if not ids:
        raise TrialDataError("no clusters", path=cpath)

    header, body = _read_rows(ipath)
    if not header or header[0] != "cluster_id" or header[-2:] != ["D", "Y"]:
        raise TrialDataError("header must be cluster_id,X1..XM,D,Y", path=ipath, line=1)
    n_x = _numbered_columns(header, "X", 1)
    if 1 + n_x + 2 != len(header):
        raise TrialDataError("header must be cluster_id,X1..XM,D,Y", path=ipath, line=1)

    cluster_of, X, D, Y = [], [], [], []
    for line, r in body:
        cid = r[0].strip()
        if cid not in index:
            raise TrialDataError(f"unknown cluster_id {cid!r}", path=ipath, line=line, column="cluster_id")
        i = index[cid]
        x = [_parse_float(r[1 + m], path=ipath, line=line, column=f"X{m + 1}", allow_blank=False) for m in range(n_x)]
        d = _parse_binary(r[1 + n_x], path=ipath, line=line, column="D", allow_blank=True)
        if W[i] == 0 and not math.isnan(d):
            raise TrialDataError("control-arm individuals must leave D blank", path=ipath, line=line, column="D")
        y = _parse_float(r[2 + n_x], path=ipath, line=line, column="Y", allow_blank=True)
        cluster_of.append(i)
        X.append(x)
        D.append(d)
        Y.append(y)

    return TrialDataset.from_arrays(
        ids,
        np.array(W, dtype=np.int8),
        np.array(Z, dtype=float).reshape(len(ids), n_z),
        np.array(C, dtype=float).reshape(len(ids), n_c),
        np.array(cluster_of, dtype=np.intp),
        np.array(X, dtype=float).reshape(len(cluster_of), n_x),
        np.array(D, dtype=float),
        np.array(Y, dtype=float),
        standardize=standardize,
    )


def _fmt(value):
    if isinstance(value, float) and math.isnan(value):
        return ""
    if float(value).is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(float(value))


def write_trial(dataset: TrialDataset, cluster_file_path, individual_file_path, extra_individual_columns=None):
    """Write the dataset in the CSV schemas read by :func:`load_trial`.

    Covariates are written on their raw scale. ``extra_individual_columns``
    maps additional column names to per-individual values appended at the end.
    """
    extra = extra_individual_columns or {}
    n_z, n_c, n_x = dataset.n_cluster_covariates, dataset.n_compliance_metrics, dataset.n_individual_covariates
    with open(cluster_file_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster_id", "W"] + [f"Z{p + 1}" for p in range(n_z)] + [f"C{q + 1}" for q in range(n_c)])
        for i, cid in enumerate(dataset.cluster_ids):
            w.writerow([cid, int(dataset.W[i])] + [_fmt(v) for v in dataset.Z_raw[i]] + [_fmt(v) for v in dataset.C[i]])
    with open(individual_file_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster_id"] + [f"X{m + 1}" for m in range(n_x)] + ["D", "Y"] + list(extra))
        for j in range(dataset.n_individuals):
            row = [dataset.cluster_ids[dataset.cluster_of[j]]]
            row += [_fmt(v) for v in dataset.X_raw[j]]
            row += [_fmt(dataset.D[j]), _fmt(dataset.Y[j])]
            row += [str(col[j]) for col in extra.values()]
            w.writerow(row)
