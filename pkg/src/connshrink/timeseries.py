"""Loading, validating and slicing per-subject regional time series.

A time series is stored as a ``T x Q`` array (time points by regions). The
on-disk format is a plain CSV: one row per volume, one comma-separated decimal
column per region, no header unless ``header=True``. Values are written with
17 significant digits so a save/load round trip is bit-exact.

Manifests are YAML (JSON is accepted too, since it is a YAML subset)::

    region_ids: [IC1, IC2, IC3]     # optional
    header: false                   # optional, applies to every listed CSV
    subjects:
      - subject_id: "100307"
        visits:
          - visit_id: 1
            path: ts/100307_visit-1.csv   # relative to the manifest
            n_volumes: 2400
            tr_seconds: 0.72
          - visit_id: 2
            ...
"""
from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import (
    DuplicateId,
    MissingFile,
    NonFinite,
    OutOfRange,
    ParseError,
    RankDeficient,
    SchemaError,
    ShapeError,
    ShapeMismatch,
)

RANK_RTOL = 1e-10


def default_region_ids(q):
    return [f"R{k + 1}" for k in range(q)]


@dataclass(frozen=True, eq=False)
class TimeSeriesMatrix:
    """Regional time courses of one subject-visit.

    Parameters
    ----------
    data : ndarray of shape (T, Q)
        Rows are volumes, columns are regions.
    region_ids : list of str, optional
        Defaults to ``R1 .. RQ``.
    tr_seconds : float
        Sampling interval.
    """

    data: np.ndarray
    region_ids: list = None
    tr_seconds: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 2:
            raise ShapeError(f"time series must be 2-D, got {data.ndim}-D")
        t, q = data.shape
        if t < 2 or q < 2:
            raise ShapeError(f"need T >= 2 and Q >= 2, got T={t}, Q={q}")
        if not np.all(np.isfinite(data)):
            bad = np.argwhere(~np.isfinite(data))[0]
            raise NonFinite(f"non-finite value at row {bad[0]}, column {bad[1]}")
        ids = default_region_ids(q) if self.region_ids is None else list(self.region_ids)
        if len(ids) != q:
            raise ShapeError(f"{len(ids)} region ids for {q} columns")
        if len(set(ids)) != q:
            raise DuplicateId("region ids must be unique")
        if not (self.tr_seconds > 0):
            raise OutOfRange(f"tr_seconds must be positive, got {self.tr_seconds}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "region_ids", ids)

    @property
    def n_volumes(self):
        return self.data.shape[0]

    @property
    def n_regions(self):
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, TimeSeriesMatrix):
            return NotImplemented
        return (
            self.region_ids == other.region_ids
            and self.tr_seconds == other.tr_seconds
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )


@dataclass(frozen=True, eq=False)
class SpatialMaps:
    """Group spatial maps, ``V`` locations by ``Q`` components."""

    maps: np.ndarray

    def __post_init__(self):
        maps = np.asarray(self.maps, dtype=float)
        if maps.ndim != 2:
            raise ShapeError("spatial maps must be 2-D (V x Q)")
        v, q = maps.shape
        if v < q:
            raise RankDeficient(f"V={v} locations cannot support Q={q} components")
        if not np.all(np.isfinite(maps)):
            raise NonFinite("spatial maps contain non-finite values")
        gram = maps.T @ maps
        eig = np.linalg.eigvalsh(gram)
        if eig[-1] <= 0 or eig[0] < RANK_RTOL * eig[-1]:
            raise RankDeficient(
                "maps^T maps is singular (smallest/largest eigenvalue "
                f"{eig[0]:.3g}/{eig[-1]:.3g})"
            )
        object.__setattr__(self, "maps", maps)

    @property
    def n_components(self):
        return self.maps.shape[1]


class SubsampleScheme(enum.Enum):
    OddEven = "odd_even"
    FirstSecondHalf = "first_second_half"


@dataclass
class VisitRecord:
    visit_id: int
    path: Path
    n_volumes: int
    tr_seconds: float


@dataclass
class SubjectRecord:
    subject_id: str
    visits: list = field(default_factory=list)

    def visit(self, visit_id):
        for v in self.visits:
            if v.visit_id == visit_id:
                return v
        return None


@dataclass
class ScanManifest:
    subjects: list
    region_ids: list = None
    header: bool = False

    @property
    def subject_ids(self):
        return [s.subject_id for s in self.subjects]

    def to_dict(self, relative_to=None):
        def rel(p):
            if relative_to is None:
                return str(p)
            return os.path.relpath(p, relative_to).replace(os.sep, "/")

        doc = {}
        if self.region_ids is not None:
            doc["region_ids"] = list(self.region_ids)
        doc["header"] = bool(self.header)
        doc["subjects"] = [
            {
                "subject_id": s.subject_id,
                "visits": [
                    {
                        "visit_id": v.visit_id,
                        "path": rel(v.path),
                        "n_volumes": v.n_volumes,
                        "tr_seconds": v.tr_seconds,
                    }
                    for v in s.visits
                ],
            }
            for s in self.subjects
        ]
        return doc


def _require(mapping, key, where):
    if not isinstance(mapping, dict) or key not in mapping:
        raise SchemaError(f"{where}: missing required key '{key}'")
    return mapping[key]


def load_manifest(path):
    """Read and validate a scan manifest.

    Raises
    ------
    SchemaError
        Malformed document or wrong field types.
    DuplicateId
        Repeated subject id, or repeated visit id within a subject.
    MissingFile
        A referenced CSV does not exist.
    """
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise MissingFile(f"manifest not found: {path}") from None
    except yaml.YAMLError as exc:
        raise SchemaError(f"{path}: not a valid YAML/JSON document ({exc})") from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be a mapping")
    base = path.parent
    raw_subjects = _require(doc, "subjects", str(path))
    if not isinstance(raw_subjects, list) or not raw_subjects:
        raise SchemaError("'subjects' must be a non-empty list")

    region_ids = doc.get("region_ids")
    if region_ids is not None and not isinstance(region_ids, list):
        raise SchemaError("'region_ids' must be a list")
    header = doc.get("header", False)
    if not isinstance(header, bool):
        raise SchemaError("'header' must be true or false")

    subjects = []
    seen = set()
    for k, s in enumerate(raw_subjects):
        where = f"subjects[{k}]"
        sid = str(_require(s, "subject_id", where))
        if sid in seen:
            raise DuplicateId(f"duplicate subject_id '{sid}'")
        seen.add(sid)
        raw_visits = _require(s, "visits", where)
        if not isinstance(raw_visits, list) or not raw_visits:
            raise SchemaError(f"{where}.visits must be a non-empty list")
        visits = []
        for j, v in enumerate(raw_visits):
            vwhere = f"{where}.visits[{j}]"
            try:
                vid = int(_require(v, "visit_id", vwhere))
                n_vol = int(_require(v, "n_volumes", vwhere))
                tr = float(_require(v, "tr_seconds", vwhere))
            except (TypeError, ValueError):
                raise SchemaError(f"{vwhere}: visit_id/n_volumes/tr_seconds must be numeric") from None
            if vid not in (1, 2):
                raise SchemaError(f"{vwhere}: visit_id must be 1 or 2, got {vid}")
            if any(x.visit_id == vid for x in visits):
                raise DuplicateId(f"subject '{sid}': duplicate visit_id {vid}")
            if not tr > 0:
                raise SchemaError(f"{vwhere}: tr_seconds must be positive")
            p = Path(str(_require(v, "path", vwhere)))
            if not p.is_absolute():
                p = base / p
            if not p.is_file():
                raise MissingFile(f"subject '{sid}' visit {vid}: file not found: {p}")
            n_rows = _count_rows(p) - (1 if header else 0)
            if n_rows != n_vol:
                raise SchemaError(
                    f"subject '{sid}' visit {vid}: n_volumes={n_vol} but file has {n_rows} rows"
                )
            visits.append(VisitRecord(vid, p, n_vol, tr))
        visits.sort(key=lambda r: r.visit_id)
        subjects.append(SubjectRecord(sid, visits))
    return ScanManifest(subjects, region_ids=region_ids, header=header)


def save_manifest(manifest, path):
    path = Path(path)
    doc = manifest.to_dict(relative_to=path.parent)
    path.write_text(yaml.safe_dump(doc, sort_keys=False))


def _count_rows(path):
    with open(path, newline="") as fh:
        return sum(1 for line in fh if line.strip())


def load_timeseries(path, expected_q=None, *, header=False, tr_seconds=1.0, region_ids=None):
    """Read a ``T x Q`` time-series CSV.

    Raises ``ParseError`` for non-numeric cells, ``ShapeError`` for ragged
    rows or a column count other than `expected_q`, and ``NonFinite`` for
    nan/inf entries.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"time-series file not found: {path}")
    rows = []
    ids = region_ids
    header_pending = header
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if header_pending:
                header_pending = False
                if ids is None:
                    ids = [c.strip() for c in row]
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric cell in {row!r}") from None
            if rows and len(vals) != len(rows[0]):
                raise ShapeError(
                    f"{path}:{lineno}: {len(vals)} columns, expected {len(rows[0])}"
                )
            rows.append(vals)
    if not rows:
        raise ShapeError(f"{path}: no data rows")
    data = np.array(rows, dtype=float)
    if expected_q is not None and data.shape[1] != expected_q:
        raise ShapeError(f"{path}: expected Q={expected_q} columns, found {data.shape[1]}")
    if not np.all(np.isfinite(data)):
        r, c = np.argwhere(~np.isfinite(data))[0]
        raise NonFinite(f"{path}: non-finite value at row {r + 1}, column {c + 1}")
    return TimeSeriesMatrix(data, region_ids=ids, tr_seconds=tr_seconds)


def _fmt(x):
    return format(float(x), ".17g")


def save_timeseries(ts, path, *, header=False):
    """Write `ts` in the CSV format read by :func:`load_timeseries`."""
    data = ts.data if isinstance(ts, TimeSeriesMatrix) else np.asarray(ts, dtype=float)
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(",".join(ts.region_ids) + "\n")
        for row in data:
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def load_spatial_maps(path):
    ts_like = load_timeseries(path)
    return SpatialMaps(ts_like.data)


def load_visit(manifest, subject, visit_id):
    """Load one visit; `subject` is a :class:`SubjectRecord` or a subject id.

    Returns None when the subject has no such visit.
    """
    if isinstance(subject, str):
        matches = [s for s in manifest.subjects if s.subject_id == subject]
        if not matches:
            raise SchemaError(f"subject {subject!r} not in manifest")
        subject = matches[0]
    rec = subject.visit(visit_id)
    if rec is None:
        return None
    return load_timeseries(
        rec.path,
        expected_q=None if manifest.region_ids is None else len(manifest.region_ids),
        header=manifest.header,
        tr_seconds=rec.tr_seconds,
        region_ids=manifest.region_ids,
    )


def truncate(ts, ell):
    """Keep the first `ell` volumes."""
    ell = int(ell)
    if ell < 2 or ell > ts.n_volumes:
        raise OutOfRange(f"scan length {ell} outside [2, {ts.n_volumes}]")
    if ell == ts.n_volumes:
        return ts
    return TimeSeriesMatrix(ts.data[:ell], region_ids=ts.region_ids, tr_seconds=ts.tr_seconds)


def subsample_indices(n_volumes, scheme):
    """0-based row indices of the two subsamples; an odd final row is dropped."""
    half = n_volumes // 2
    if scheme is SubsampleScheme.OddEven:
        return np.arange(0, 2 * half, 2), np.arange(1, 2 * half, 2)
    if scheme is SubsampleScheme.FirstSecondHalf:
        return np.arange(0, half), np.arange(half, 2 * half)
    raise TypeError(f"unknown subsample scheme {scheme!r}")


def subsample(ts, scheme):
    """Split `ts` into two disjoint halves of ``T // 2`` rows each.

    ``OddEven`` interleaves (volumes 1, 3, ... versus 2, 4, ...);
    ``FirstSecondHalf`` splits at the midpoint.
    """
    if ts.n_volumes < 4:
        raise OutOfRange(f"subsampling needs T >= 4, got {ts.n_volumes}")
    a, b = subsample_indices(ts.n_volumes, SubsampleScheme(scheme))
    return (
        TimeSeriesMatrix(ts.data[a], region_ids=ts.region_ids, tr_seconds=ts.tr_seconds),
        TimeSeriesMatrix(ts.data[b], region_ids=ts.region_ids, tr_seconds=ts.tr_seconds),
    )


def dual_regression_coefficients(data, maps):
    """Per-volume least-squares coefficients as a plain ``T x Q`` array.

    Solves ``min_b ||data[t] - maps @ b||`` for every volume ``t`` with no
    intercept, i.e. ``data @ maps @ inv(maps.T @ maps)``. Unlike
    :func:`dual_regression_stage1` this also accepts a single map.
    """
    if not isinstance(maps, SpatialMaps):
        maps = SpatialMaps(maps)
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise ShapeError("data must be 2-D (T x V)")
    if data.shape[1] != maps.maps.shape[0]:
        raise ShapeMismatch(
            f"data has V={data.shape[1]} locations, maps have V={maps.maps.shape[0]}"
        )
    if not np.all(np.isfinite(data)):
        raise NonFinite("data contain non-finite values")
    gram = maps.maps.T @ maps.maps
    return np.linalg.solve(gram, maps.maps.T @ data.T).T


def dual_regression_stage1(data, maps, *, region_ids=None, tr_seconds=None):
    """Component time courses from a ``T x V`` data matrix and ``V x Q`` maps."""
    if not isinstance(maps, SpatialMaps):
        maps = SpatialMaps(maps)
    if isinstance(data, TimeSeriesMatrix):
        tr = data.tr_seconds if tr_seconds is None else tr_seconds
        data = data.data
    else:
        tr = 1.0 if tr_seconds is None else tr_seconds
    coef = dual_regression_coefficients(data, maps)
    return TimeSeriesMatrix(
        coef,
        region_ids=region_ids or [f"IC{k + 1}" for k in range(maps.n_components)],
        tr_seconds=tr,
    )


class DualRegression(BaseEstimator, TransformerMixin):
    """First stage of dual regression as a transformer.

    ``fit`` takes the ``V x Q`` group maps; ``transform`` maps a ``T x V``
    data matrix to its ``T x Q`` component time courses.

    Examples
    --------
    >>> import numpy as np
    >>> dr = DualRegression().fit(np.eye(3))
    >>> dr.transform(np.arange(6.0).reshape(2, 3)).tolist()
    [[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]
    """

    def __init__(self, region_ids=None):
        self.region_ids = region_ids

    def fit(self, maps, y=None):
        self.maps_ = SpatialMaps(maps)
        self.n_components_ = self.maps_.n_components
        return self

    def transform(self, X):
        check_is_fitted(self, "maps_")
        if isinstance(X, TimeSeriesMatrix):
            X = X.data
        return dual_regression_coefficients(X, self.maps_)
