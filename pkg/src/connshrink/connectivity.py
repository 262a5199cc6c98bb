"""Pearson connectivity matrices and their vectorised edge form.

An edge vector holds the ``Q(Q-1)/2`` upper-triangle entries of a symmetric
``Q x Q`` matrix in row-major order: ``(0,1), (0,2), ..., (0,Q-1), (1,2), ...``.
Stacks of edge vectors (one row per subject) are plain ``(n, E)`` arrays.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import (
    DegenerateColumn,
    LengthError,
    OutOfRange,
    ParseError,
    ShapeError,
    ShapeMismatch,
    TooFewSubjects,
)
from .timeseries import TimeSeriesMatrix, default_region_ids


def n_edges(n_regions):
    return n_regions * (n_regions - 1) // 2


def n_regions_from_edges(n_edge):
    """Inverse of :func:`n_edges`; raises ``LengthError`` if there is none."""
    n_edge = int(n_edge)
    q = (1 + math.isqrt(1 + 8 * n_edge)) // 2
    if q < 2 or n_edges(q) != n_edge:
        raise LengthError(f"length {n_edge} is not Q(Q-1)/2 for any integer Q >= 2")
    return q


def edge_position(q, q_prime, n_regions):
    """Position of edge ``(q, q_prime)``, ``q < q_prime``, in an edge vector."""
    if not 0 <= q < q_prime < n_regions:
        raise OutOfRange(f"need 0 <= q < q' < Q, got q={q}, q'={q_prime}, Q={n_regions}")
    return q * n_regions - q * (q + 1) // 2 + (q_prime - q - 1)


@dataclass(frozen=True, order=True)
class EdgeIndex:
    q: int
    q_prime: int

    def __post_init__(self):
        if not 0 <= self.q < self.q_prime:
            raise OutOfRange(f"need 0 <= q < q', got ({self.q}, {self.q_prime})")

    def position(self, n_regions):
        return edge_position(self.q, self.q_prime, n_regions)


def edge_list(n_regions):
    """All edges of a ``Q``-region matrix, in canonical order."""
    rows, cols = np.triu_indices(n_regions, k=1)
    return [EdgeIndex(int(a), int(b)) for a, b in zip(rows, cols)]


def incident_edges(n_regions):
    """For each region, the positions of its ``Q - 1`` incident edges."""
    rows, cols = np.triu_indices(n_regions, k=1)
    return [np.flatnonzero((rows == k) | (cols == k)) for k in range(n_regions)]


@dataclass(frozen=True, eq=False)
class ConnectivityMatrix:
    """Symmetric ``Q x Q`` correlation matrix with unit diagonal."""

    values: np.ndarray
    region_ids: list = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] < 2:
            raise ShapeError(f"connectivity matrix must be square with Q >= 2, got {v.shape}")
        if not np.array_equal(v, v.T):
            raise ShapeError("connectivity matrix is not symmetric")
        if not np.all(np.diag(v) == 1.0):
            raise ShapeError("connectivity matrix diagonal must be exactly 1")
        if not np.all(np.abs(v) <= 1.0):
            raise OutOfRange("connectivity values must lie in [-1, 1]")
        ids = default_region_ids(v.shape[0]) if self.region_ids is None else list(self.region_ids)
        if len(ids) != v.shape[0]:
            raise ShapeError(f"{len(ids)} region ids for a {v.shape[0]}-region matrix")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "region_ids", ids)

    @property
    def n_regions(self):
        return self.values.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ConnectivityMatrix):
            return NotImplemented
        return self.region_ids == other.region_ids and bool(
            np.array_equal(self.values, other.values)
        )


def pearson_matrix(ts):
    """Sample Pearson correlation between every pair of regions.

    Parameters
    ----------
    ts : TimeSeriesMatrix or array of shape (T, Q)

    Returns
    -------
    ConnectivityMatrix

    Raises
    ------
    DegenerateColumn
        A region's time course is constant.
    """
    if not isinstance(ts, TimeSeriesMatrix):
        ts = TimeSeriesMatrix(ts)
    x = ts.data
    if x.shape[0] < 3:
        raise ShapeError(f"Pearson correlation needs T >= 3, got T={x.shape[0]}")
    xc = x - x.mean(axis=0)
    norms = np.sqrt(np.einsum("ij,ij->j", xc, xc))
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise DegenerateColumn([ts.region_ids[k] for k in bad])
    xn = xc / norms
    c = xn.T @ xn
    iu = np.triu_indices(c.shape[0], k=1)
    upper = np.clip(c[iu], -1.0, 1.0)
    out = np.eye(c.shape[0])
    out[iu] = upper
    out[(iu[1], iu[0])] = upper
    return ConnectivityMatrix(out, region_ids=ts.region_ids)


def vectorize(cm):
    """Upper-triangle entries of `cm` in canonical edge order."""
    v = cm.values if isinstance(cm, ConnectivityMatrix) else np.asarray(cm, dtype=float)
    return v[np.triu_indices(v.shape[0], k=1)].copy()


def devectorize(ev, region_ids=None):
    """Rebuild the symmetric, unit-diagonal matrix from an edge vector."""
    ev = np.asarray(ev, dtype=float)
    if ev.ndim != 1:
        raise LengthError("edge vector must be 1-D")
    q = n_regions_from_edges(ev.size)
    out = np.eye(q)
    iu = np.triu_indices(q, k=1)
    out[iu] = ev
    out[(iu[1], iu[0])] = ev
    return ConnectivityMatrix(out, region_ids=region_ids)


def as_edge_stack(estimates):
    """Stack a list of edge vectors (or pass through an array) as ``(n, E)``."""
    arr = np.asarray(estimates, dtype=float)
    if arr.ndim != 2:
        raise ShapeMismatch(
            "estimates must be a list of equal-length edge vectors "
            f"(got array of shape {arr.shape})"
        )
    return arr


def group_mean(estimates, n=None):
    """Element-wise mean over subjects.

    Values are sorted per edge before the (sequential) summation, so the
    result is bit-identical under any permutation of the subjects.
    """
    try:
        arr = as_edge_stack(estimates)
    except ValueError:
        raise ShapeMismatch("edge vectors have differing lengths") from None
    if n is not None and n != arr.shape[0]:
        raise ShapeMismatch(f"n={n} but {arr.shape[0]} estimates were given")
    if arr.shape[0] < 2:
        raise TooFewSubjects(f"group mean needs n >= 2 subjects, got {arr.shape[0]}")
    total = np.zeros(arr.shape[1])
    for row in np.sort(arr, axis=0):
        total += row
    return total / arr.shape[0]


def fisher_z(r):
    return np.arctanh(np.clip(r, -1.0, 1.0))


def inverse_fisher_z(z):
    return np.tanh(z)


class PearsonConnectivity(BaseEstimator, TransformerMixin):
    """Map a list of ``T x Q`` time series to an ``(n, E)`` edge array.

    Parameters
    ----------
    fisher_z : bool, default=False
        Return ``arctanh`` of the correlations instead of the raw values.
    """

    def __init__(self, fisher_z=False):
        self.fisher_z = fisher_z

    def fit(self, X, y=None):
        first = X[0]
        self.n_regions_ = first.n_regions if isinstance(first, TimeSeriesMatrix) else np.shape(first)[1]
        self.n_edges_ = n_edges(self.n_regions_)
        return self

    def transform(self, X):
        rows = [vectorize(pearson_matrix(ts)) for ts in X]
        out = as_edge_stack(rows)
        return fisher_z(out) if self.fisher_z else out


def _fmt(x):
    return "" if np.isnan(x) else format(float(x), ".17g")


def write_edge_csv(path, values, region_ids, value_name="value"):
    """``region_a,region_b,<value_name>`` rows in canonical edge order."""
    values = np.asarray(values, dtype=float)
    q = len(region_ids)
    if values.size != n_edges(q):
        raise ShapeMismatch(f"{values.size} values for {q} regions")
    rows, cols = np.triu_indices(q, k=1)
    with open(path, "w", newline="") as fh:
        fh.write(f"region_a,region_b,{value_name}\n")
        for a, b, v in zip(rows, cols, values):
            fh.write(f"{region_ids[a]},{region_ids[b]},{_fmt(v)}\n")


def read_edge_csv(path):
    """Inverse of :func:`write_edge_csv`; returns ``(values, region_ids)``."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        pairs, vals = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 fields")
            pairs.append((row[0], row[1]))
            try:
                vals.append(float(row[2]) if row[2] else float("nan"))
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric value {row[2]!r}") from None
    q = n_regions_from_edges(len(vals))
    ids = [pairs[0][0]] + [b for a, b in pairs[: q - 1]]
    return np.array(vals), ids


def write_matrix_csv(path, cm):
    with open(path, "w", newline="") as fh:
        fh.write("," + ",".join(cm.region_ids) + "\n")
        for rid, row in zip(cm.region_ids, cm.values):
            fh.write(rid + "," + ",".join(_fmt(x) for x in row) + "\n")
