"""Absolute percent error reliability and its edge / seed / omnibus summaries.

APE values are fractions (``1.0`` means 100 %). An APE whose reference is
smaller in magnitude than ``guard`` is undefined and stored as NaN; NaNs are
excluded from every median and counted in the summary.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .connectivity import incident_edges, n_edges, n_regions_from_edges
from .exceptions import EmptyCell, MissingReference, ParseError, ShapeMismatch

DEFAULT_GUARD = 1e-12


class Method(enum.Enum):
    Raw = "raw"
    SingleSessionShrink = "single_session_shrink"
    OracleShrink = "oracle_shrink"


class Kind(enum.Enum):
    Intersession = "intersession"
    EndPoint = "endpoint"


@dataclass(eq=False)
class ReliabilityRecord:
    subject_id: str
    method: Method
    kind: Kind
    scan_length: int
    ape: np.ndarray


@dataclass(eq=False)
class ReliabilitySummary:
    method: Method
    kind: Kind
    scan_length: int
    edge_level: np.ndarray
    seed_level: np.ndarray
    omnibus: float
    n_subjects: int
    excluded: dict = field(default_factory=dict)

    @property
    def cell(self):
        return (self.method, self.kind, self.scan_length)


def ape(estimate, reference, guard=DEFAULT_GUARD):
    """``|estimate - reference| / |reference|``, NaN where ``|reference| < guard``."""
    if not guard > 0:
        raise ValueError("guard must be positive")
    est = np.asarray(estimate, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if est.shape != ref.shape:
        raise ShapeMismatch(f"estimate {est.shape} vs reference {ref.shape}")
    mag = np.abs(ref)
    ok = mag >= guard
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(ok, np.abs(est - ref) / np.where(ok, mag, 1.0), np.nan)


def nan_median(a, axis=0):
    """Median ignoring NaNs, computed by a full sort.

    Even counts give the midpoint of the two central values; all-NaN slices
    give NaN.
    """
    a = np.moveaxis(np.asarray(a, dtype=float), axis, 0)
    s = np.sort(a, axis=0)  # NaNs sort last
    cnt = np.count_nonzero(~np.isnan(a), axis=0)
    lo = np.maximum((cnt - 1) // 2, 0)
    hi = np.maximum(cnt // 2, 0)
    lo_v = np.take_along_axis(s, lo[None, ...], axis=0)[0]
    hi_v = np.take_along_axis(s, np.minimum(hi, max(s.shape[0] - 1, 0))[None, ...], axis=0)[0]
    med = np.where(cnt % 2 == 1, lo_v, (lo_v + hi_v) / 2)
    return np.where(cnt > 0, med, np.nan)


def _check_refs(reference, n, n_edge, what):
    if reference is None:
        raise MissingReference(f"{what} reference estimates are missing")
    ref = np.asarray(reference, dtype=float)
    if ref.shape != (n, n_edge):
        raise MissingReference(
            f"{what} reference has shape {ref.shape}, expected {(n, n_edge)}"
        )
    return ref


def _records(estimates_by_method, reference, subject_ids, kind, guard):
    subject_ids = list(subject_ids)
    out = []
    for method, by_length in estimates_by_method.items():
        method = Method(method)
        for ell in sorted(by_length):
            est = np.asarray(by_length[ell], dtype=float)
            if est.shape[0] != len(subject_ids):
                raise ShapeMismatch(
                    f"{method.value} at l={ell}: {est.shape[0]} rows for {len(subject_ids)} subjects"
                )
            ref = _check_refs(reference, len(subject_ids), est.shape[1], kind.value)
            vals = ape(est, ref, guard)
            for sid, row in zip(subject_ids, vals):
                out.append(ReliabilityRecord(sid, method, kind, int(ell), row))
    return out


def intersession_records(visit1_estimates_by_length, visit2_full_raw, subject_ids, guard=DEFAULT_GUARD):
    """Score visit-1 estimates against each subject's full-length visit-2 raw estimate.

    Parameters
    ----------
    visit1_estimates_by_length : dict
        ``{method: {scan_length: (n, E) array}}``; rows follow `subject_ids`.
    visit2_full_raw : (n, E) array
        Raw estimates from all volumes of visit 2. The reference is raw for
        every method, shrunk ones included.
    subject_ids : sequence of str

    Returns
    -------
    list of ReliabilityRecord
        One per (method, scan length, subject).
    """
    return _records(visit1_estimates_by_length, visit2_full_raw, subject_ids, Kind.Intersession, guard)


def endpoint_records(visit1_estimates_by_length, visit1_full_raw, subject_ids, guard=DEFAULT_GUARD):
    """Score visit-1 estimates against the full-length raw estimate of visit 1 itself."""
    return _records(visit1_estimates_by_length, visit1_full_raw, subject_ids, Kind.EndPoint, guard)


def summarize(records, cell):
    """Edge-, seed- and omnibus-level medians for one (method, kind, scan_length) cell."""
    method, kind, ell = Method(cell[0]), Kind(cell[1]), int(cell[2])
    chosen = [
        r for r in records if r.method is method and r.kind is kind and r.scan_length == ell
    ]
    if not chosen:
        raise EmptyCell(f"no records for ({method.value}, {kind.value}, {ell})")
    mat = np.vstack([r.ape for r in chosen])
    q = n_regions_from_edges(mat.shape[1])
    edge_level = nan_median(mat, axis=0)
    seed_level = np.array([nan_median(edge_level[idx]) for idx in incident_edges(q)])
    omnibus = float(nan_median(edge_level))
    excluded = {
        "ape": int(np.count_nonzero(np.isnan(mat))),
        "edge": int(np.count_nonzero(np.isnan(edge_level))),
        "seed": int(np.count_nonzero(np.isnan(seed_level))),
        "omnibus": int(np.count_nonzero(np.isnan(edge_level))),
    }
    return ReliabilitySummary(
        method, kind, ell, edge_level, seed_level, omnibus, len(chosen), excluded
    )


def percent_change(shrunk_summary, raw_summary):
    """``100 * (shrunk - raw) / raw`` at each level; negative means shrinkage helped.

    Returns a dict with ``edge``, ``seed`` (arrays) and ``omnibus`` (float);
    NaN where the raw value is zero or undefined.
    """
    out = {}
    for level in ("edge_level", "seed_level", "omnibus"):
        s = np.asarray(getattr(shrunk_summary, level), dtype=float)
        r = np.asarray(getattr(raw_summary, level), dtype=float)
        if s.shape != r.shape:
            raise ShapeMismatch(f"{level}: {s.shape} vs {r.shape}")
        with np.errstate(divide="ignore", invalid="ignore"):
            pc = np.where(r != 0, 100.0 * (s - r) / np.where(r != 0, r, 1.0), np.nan)
        out[level.replace("_level", "")] = float(pc) if pc.ndim == 0 else pc
    return out


def _fmt(x):
    return "" if np.isnan(x) else format(float(x), ".17g")


def edge_labels(region_ids):
    rows, cols = np.triu_indices(len(region_ids), k=1)
    return [f"{region_ids[a]}|{region_ids[b]}" for a, b in zip(rows, cols)]


def write_records_csv(path, records, region_ids):
    """One row per record: ``subject_id,method,kind,scan_length`` then one APE column per edge."""
    labels = edge_labels(region_ids)
    with open(path, "w", newline="") as fh:
        fh.write("subject_id,method,kind,scan_length," + ",".join(labels) + "\n")
        for r in records:
            if r.ape.size != len(labels):
                raise ShapeMismatch(f"record has {r.ape.size} edges, expected {len(labels)}")
            fh.write(
                f"{r.subject_id},{r.method.value},{r.kind.value},{r.scan_length},"
                + ",".join(_fmt(v) for v in r.ape)
                + "\n"
            )


def read_records_csv(path):
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader)
        n_edge = len(head) - 4
        n_regions_from_edges(n_edge)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(head):
                raise ParseError(f"{path}:{lineno}: {len(row)} fields, expected {len(head)}")
            vals = np.array([float(v) if v else np.nan for v in row[4:]])
            out.append(ReliabilityRecord(row[0], Method(row[1]), Kind(row[2]), int(row[3]), vals))
    return out


def write_summary_csvs(summary, directory, region_ids):
    """Write the edge- and seed-level CSVs of one cell; returns their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if summary.edge_level.size != n_edges(len(region_ids)):
        raise ShapeMismatch("summary does not match region ids")
    stem = f"{summary.method.value}_{summary.kind.value}_l{summary.scan_length}"
    edge_path = directory / f"edge_{stem}.csv"
    seed_path = directory / f"seed_{stem}.csv"
    rows, cols = np.triu_indices(len(region_ids), k=1)
    with open(edge_path, "w", newline="") as fh:
        fh.write("region_a,region_b,median_ape\n")
        for a, b, v in zip(rows, cols, summary.edge_level):
            fh.write(f"{region_ids[a]},{region_ids[b]},{_fmt(v)}\n")
    with open(seed_path, "w", newline="") as fh:
        fh.write("region,median_ape\n")
        for rid, v in zip(region_ids, summary.seed_level):
            fh.write(f"{rid},{_fmt(v)}\n")
    return edge_path, seed_path


def write_omnibus_csv(path, summaries):
    with open(path, "w", newline="") as fh:
        fh.write("method,kind,scan_length,median_ape\n")
        for s in summaries:
            fh.write(f"{s.method.value},{s.kind.value},{s.scan_length},{_fmt(s.omnibus)}\n")
