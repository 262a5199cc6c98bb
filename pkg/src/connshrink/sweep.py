"""Scan-length sweep: estimates -> shrinkage -> reliability -> files.

The sweep works on :class:`CohortEstimates`, i.e. connectivity edge arrays
per visit and scan length, which can come from time series on disk
(:func:`estimates_from_manifest`) or straight from a parameter-level
synthetic cohort (:func:`estimates_from_cohort`).

Shrunk estimates are always scored against *raw* references: the full
visit-2 raw estimate for intersession reliability, the full visit-1 raw
estimate for end-point reliability. Oracle shrinkage uses visit 2 to fit its
variance components and is then scored against visit 2 too; that is the
intended benchmark design, not a leak to fix.
"""
from __future__ import annotations

import contextlib
import json
import logging
import os
import shutil
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .connectivity import fisher_z, inverse_fisher_z, pearson_matrix, vectorize
from .exceptions import MissingVisit, OutOfRange, SchemaError
from .reliability import (
    DEFAULT_GUARD,
    Kind,
    Method,
    endpoint_records,
    intersession_records,
    nan_median,
    percent_change,
    summarize,
    write_omnibus_csv,
    write_records_csv,
    write_summary_csvs,
)
from .shrinkage import (
    apply_shrinkage,
    compute_lambda,
    estimate_oracle_components,
    estimate_single_session_components,
    subsample_estimates,
    write_components_csv,
)
from .simulator import DEFAULT_SCAN_LENGTHS
from .timeseries import dual_regression_stage1, load_visit, truncate

log = logging.getLogger(__name__)

METHOD_ORDER = (Method.Raw, Method.SingleSessionShrink, Method.OracleShrink)
KIND_ORDER = (Kind.Intersession, Kind.EndPoint)


@dataclass(eq=False)
class CohortEstimates:
    """Raw connectivity edge arrays for a cohort, all ``(n, E)``.

    ``visit1[l]`` / ``visit2[l]`` are estimates from the first ``l``
    volumes; ``visit1_full`` / ``visit2_full`` use every volume. When
    present, ``subsamples[l]`` maps ``odd``, ``even``, ``first_half`` and
    ``second_half`` to the visit-1 subsample estimates at that length.
    """

    subject_ids: list
    region_ids: list
    scan_lengths: tuple
    visit1: dict
    visit1_full: np.ndarray
    visit2: dict = None
    visit2_full: np.ndarray = None
    subsamples: dict = None


def estimates_from_cohort(cohort):
    """Edge arrays of a parameter-level cohort; ``L`` is its longest scan length."""
    lengths = cohort.scan_lengths
    v1 = {ell: cohort.full[:, 0, k] for k, ell in enumerate(lengths)}
    v2 = {ell: cohort.full[:, 1, k] for k, ell in enumerate(lengths)}
    subs = {
        ell: {
            "odd": cohort.odd[:, 0, k],
            "even": cohort.even[:, 0, k],
            "first_half": cohort.first_half[:, 0, k],
            "second_half": cohort.second_half[:, 0, k],
        }
        for k, ell in enumerate(lengths)
    }
    q = cohort.params.q
    return CohortEstimates(
        subject_ids=list(cohort.subject_ids),
        region_ids=[f"R{k + 1}" for k in range(q)],
        scan_lengths=tuple(lengths),
        visit1=v1,
        visit1_full=cohort.full[:, 0, -1],
        visit2=v2,
        visit2_full=cohort.full[:, 1, -1],
        subsamples=subs,
    )


def _subject_estimates(manifest, subject, scan_lengths, maps, want_visit2, want_subsamples):
    out = {}
    for visit_id in (1, 2) if want_visit2 else (1,):
        ts = load_visit(manifest, subject, visit_id)
        if ts is None:
            raise MissingVisit(f"subject '{subject.subject_id}' has no visit {visit_id}")
        if maps is not None:
            ts = dual_regression_stage1(ts, maps)
        try:
            out[(visit_id, "full")] = vectorize(pearson_matrix(ts))
            for ell in scan_lengths:
                part = truncate(ts, ell)
                out[(visit_id, ell)] = vectorize(pearson_matrix(part))
                if visit_id == 1 and want_subsamples:
                    subs = subsample_estimates([part])
                    out[(visit_id, ell, "subs")] = {k: v[0] for k, v in subs.items()}
        except OutOfRange as exc:
            raise OutOfRange(f"subject '{subject.subject_id}' visit {visit_id}: {exc}") from None
        out["region_ids"] = ts.region_ids
    return out


def estimates_from_manifest(
    manifest, scan_lengths, *, maps=None, threads=1, visit2=True, subsamples=True
):
    """Compute every raw estimate the sweep needs from the manifest's time series.

    Subjects are processed in parallel on `threads` workers; results are
    merged in manifest order so the output does not depend on `threads`.
    """
    scan_lengths = tuple(int(x) for x in scan_lengths)

    def work(subject):
        return _subject_estimates(manifest, subject, scan_lengths, maps, visit2, subsamples)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_subject = list(pool.map(work, manifest.subjects))
    else:
        per_subject = [work(s) for s in manifest.subjects]

    region_ids = per_subject[0]["region_ids"]
    for s, est in zip(manifest.subjects, per_subject):
        if est["region_ids"] != region_ids:
            raise SchemaError(f"subject '{s.subject_id}' has different regions")

    def stack(key):
        return np.array([est[key] for est in per_subject])

    res = CohortEstimates(
        subject_ids=manifest.subject_ids,
        region_ids=list(region_ids),
        scan_lengths=scan_lengths,
        visit1={ell: stack((1, ell)) for ell in scan_lengths},
        visit1_full=stack((1, "full")),
    )
    if visit2:
        res.visit2 = {ell: stack((2, ell)) for ell in scan_lengths}
        res.visit2_full = stack((2, "full"))
    if subsamples:
        res.subsamples = {
            ell: {
                k: np.array([est[(1, ell, "subs")][k] for est in per_subject])
                for k in ("odd", "even", "first_half", "second_half")
            }
            for ell in scan_lengths
        }
    return res


@dataclass(eq=False)
class SweepResult:
    estimates: CohortEstimates
    methods: tuple
    kinds: tuple
    components: dict = field(default_factory=dict)  # (Method, l) -> (VarianceComponents, ShrinkageWeights)
    shrunk: dict = field(default_factory=dict)  # Method -> {l: (n, E)}
    records: list = field(default_factory=list)
    summaries: list = field(default_factory=list)

    def summary(self, method, kind, ell):
        for s in self.summaries:
            if s.cell == (Method(method), Kind(kind), int(ell)):
                return s
        raise KeyError((method, kind, ell))

    def omnibus(self, method, kind):
        """Omnibus APE per scan length, as an array in grid order."""
        return np.array(
            [self.summary(method, kind, ell).omnibus for ell in self.estimates.scan_lengths]
        )

    def median_lambda(self, method):
        return np.array(
            [
                float(nan_median(self.components[(Method(method), ell)][1].lam))
                for ell in self.estimates.scan_lengths
            ]
        )


def _ordered(values, order, enum_cls):
    chosen = {enum_cls(v) for v in values}
    return tuple(v for v in order if v in chosen)


def run_sweep(
    est,
    methods=METHOD_ORDER,
    kinds=KIND_ORDER,
    *,
    guard=DEFAULT_GUARD,
    fisher=False,
):
    """Shrink and score `est` for every selected method, kind and scan length.

    With ``fisher=True`` shrinkage runs on Fisher-z values and the result is
    mapped back to correlations before scoring; raw estimates are untouched.
    """
    methods = _ordered(methods, METHOD_ORDER, Method)
    kinds = _ordered(kinds, KIND_ORDER, Kind)
    if not methods or not kinds:
        raise SchemaError("select at least one method and one reliability kind")
    if Method.OracleShrink in methods and est.visit2 is None:
        raise MissingVisit("oracle shrinkage needs visit 2 for every subject")
    if Kind.Intersession in kinds and est.visit2_full is None:
        raise MissingVisit("intersession reliability needs visit 2 for every subject")
    if Method.SingleSessionShrink in methods and est.subsamples is None:
        raise SchemaError("single-session shrinkage needs subsample estimates")

    fwd = fisher_z if fisher else (lambda x: x)
    back = inverse_fisher_z if fisher else (lambda x: x)
    result = SweepResult(est, methods, kinds)
    by_method = {}
    for method in methods:
        by_length = {}
        for ell in est.scan_lengths:
            x1 = est.visit1[ell]
            if method is Method.Raw:
                by_length[ell] = x1
                continue
            if method is Method.OracleShrink:
                vc = estimate_oracle_components(fwd(x1), fwd(est.visit2[ell]))
            else:
                s = est.subsamples[ell]
                vc = estimate_single_session_components(
                    fwd(x1), fwd(s["odd"]), fwd(s["even"]),
                    fwd(s["first_half"]), fwd(s["second_half"]),
                )
            w = compute_lambda(vc)
            result.components[(method, ell)] = (vc, w)
            by_length[ell] = back(apply_shrinkage(fwd(x1), w))
        by_method[method] = by_length
        if method is not Method.Raw:
            result.shrunk[method] = by_length

    records = []
    if Kind.Intersession in kinds:
        records += intersession_records(by_method, est.visit2_full, est.subject_ids, guard)
    if Kind.EndPoint in kinds:
        records += endpoint_records(by_method, est.visit1_full, est.subject_ids, guard)
    result.records = records
    result.summaries = [
        summarize(records, (m, k, ell))
        for m in methods
        for k in kinds
        for ell in est.scan_lengths
    ]
    return result


def write_sweep(result, out_dir, config_echo=None):
    """Write all sweep outputs under `out_dir` atomically.

    Files are staged in a sibling temporary directory and moved into place
    only when everything has been written; on failure nothing is left
    behind. Returns the run summary document.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise FileExistsError(f"output directory {out_dir} is not empty")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".sweep-", dir=out_dir.parent))
    try:
        doc = _write_all(result, stage, config_echo or {})
        if out_dir.exists():
            out_dir.rmdir()
        os.replace(stage, out_dir)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return doc


def _write_all(result, root, config_echo):
    est = result.estimates
    rid = est.region_ids
    (root / "components").mkdir()
    (root / "records").mkdir()
    (root / "summaries").mkdir()

    comp_entries = []
    for (method, ell), (vc, w) in result.components.items():
        name = f"components/{vc.method.value}_l{ell}.csv"
        write_components_csv(root / name, vc, w, rid)
        comp_entries.append(
            {
                "method": method.value,
                "component_method": vc.method.value,
                "scan_length": ell,
                "file": name,
                "n_clamped": vc.n_clamped,
                "median_lambda": float(nan_median(w.lam)),
            }
        )

    cells = []
    for s in result.summaries:
        stem = f"{s.method.value}_{s.kind.value}_l{s.scan_length}"
        rec_name = f"records/{stem}.csv"
        cell_records = [
            r for r in result.records
            if r.method is s.method and r.kind is s.kind and r.scan_length == s.scan_length
        ]
        write_records_csv(root / rec_name, cell_records, rid)
        edge_path, seed_path = write_summary_csvs(s, root / "summaries", rid)
        cells.append(
            {
                "method": s.method.value,
                "kind": s.kind.value,
                "scan_length": s.scan_length,
                "omnibus": None if np.isnan(s.omnibus) else s.omnibus,
                "n_subjects": s.n_subjects,
                "excluded": s.excluded,
                "records_file": rec_name,
                "edge_file": edge_path.relative_to(root).as_posix(),
                "seed_file": seed_path.relative_to(root).as_posix(),
            }
        )
    write_omnibus_csv(root / "omnibus.csv", result.summaries)

    changes = []
    if Method.Raw in result.methods:
        for s in result.summaries:
            if s.method is Method.Raw:
                continue
            raw = result.summary(Method.Raw, s.kind, s.scan_length)
            pc = percent_change(s, raw)["omnibus"]
            changes.append((s, pc))
        with open(root / "percent_change.csv", "w", newline="") as fh:
            fh.write("method,kind,scan_length,omnibus_percent_change\n")
            for s, pc in changes:
                val = "" if np.isnan(pc) else format(pc, ".17g")
                fh.write(f"{s.method.value},{s.kind.value},{s.scan_length},{val}\n")

    doc = {
        "config": config_echo,
        "n_subjects": len(est.subject_ids),
        "region_ids": list(rid),
        "scan_lengths": list(est.scan_lengths),
        "methods": [m.value for m in result.methods],
        "kinds": [k.value for k in result.kinds],
        "cells": cells,
        "components": comp_entries,
        "omnibus_file": "omnibus.csv",
    }
    (root / "run_summary.json").write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")
    return doc


@contextlib.contextmanager
def timed(label):
    """Log wall time at INFO level; timings never go into output files."""
    t0 = time.perf_counter()
    yield
    log.info("%s took %.2fs", label, time.perf_counter() - t0)


DEFAULT_LENGTHS = DEFAULT_SCAN_LENGTHS
