"""Synthetic cohorts with known variance components.

Parameter level
    Edge estimates are drawn directly from the hierarchical model
    ``estimate = Z_i + W_i + U``: long-term subject value ``Z_i ~ N(mu, between_var)``,
    state deviation ``W_i ~ N(0, state_var)`` (one per visit, fresh ones
    for each half-session) and sampling noise ``U`` with variance
    ``sampling_coeff / scan_length``. Noise on the full-series estimates is
    nested across scan lengths (the mean of a growing prefix of white
    noise), so an estimate and the full-length estimate of the same visit
    are correlated exactly as truncated scans are.

Time-series level
    Each subject-visit gets a correlation matrix from a latent factor model
    and Gaussian time series are drawn from it; connectivity then has to be
    estimated through the normal pipeline.

Randomness: every draw comes from a Philox stream keyed by
``(seed, subject, visit, component)``, so output does not depend on the
order in which subjects are generated.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .connectivity import devectorize, n_edges, vectorize
from .exceptions import InvalidParams
from .timeseries import (
    ScanManifest,
    SubjectRecord,
    TimeSeriesMatrix,
    VisitRecord,
    default_region_ids,
    save_manifest,
    save_timeseries,
)

DEFAULT_SCAN_LENGTHS = tuple(range(300, 2401, 300))

# stream component ids
_LATENT, _FULL, _ODD_EVEN, _HALVES, _FACTOR, _SERIES = range(6)


def stream(seed, subject, visit, component):
    """Independent generator for one (subject, visit, component) triple."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(subject), int(visit), int(component)))
    return np.random.Generator(np.random.Philox(ss))


def _per_edge(name, value, e):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(e, float(arr))
    if arr.shape != (e,):
        raise InvalidParams(name, f"expected a scalar or {e} values, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidParams(name, "values must be finite")
    return arr


@dataclass(eq=False)
class GenerativeParams:
    """Ground-truth settings of a synthetic cohort.

    Per-edge fields accept a scalar (broadcast to every edge) or a vector
    of length ``q(q-1)/2``. ``half_state_var`` is the state variance
    between the two halves of a session; it defaults to ``state_var``.
    """

    n_subjects: int
    q: int
    mu: np.ndarray = 0.3
    between_var: np.ndarray = 0.01
    state_var: np.ndarray = 0.0
    sampling_coeff: np.ndarray = 3.0
    scan_lengths: tuple = DEFAULT_SCAN_LENGTHS
    seed: int = 0
    half_state_var: np.ndarray = None

    def __post_init__(self):
        if int(self.n_subjects) != self.n_subjects or self.n_subjects < 2:
            raise InvalidParams("n_subjects", "must be an integer >= 2")
        if int(self.q) != self.q or self.q < 2:
            raise InvalidParams("q", "must be an integer >= 2")
        self.n_subjects, self.q = int(self.n_subjects), int(self.q)
        e = n_edges(self.q)
        self.mu = _per_edge("mu", self.mu, e)
        if np.any(np.abs(self.mu) >= 1):
            raise InvalidParams("mu", "entries must lie in (-1, 1)")
        for name in ("between_var", "state_var", "sampling_coeff"):
            arr = _per_edge(name, getattr(self, name), e)
            if np.any(arr < 0):
                raise InvalidParams(name, "must be non-negative")
            setattr(self, name, arr)
        if self.half_state_var is None:
            self.half_state_var = self.state_var.copy()
        else:
            self.half_state_var = _per_edge("half_state_var", self.half_state_var, e)
            if np.any(self.half_state_var < 0):
                raise InvalidParams("half_state_var", "must be non-negative")
        lengths = [int(x) for x in self.scan_lengths]
        if not lengths or any(x < 2 for x in lengths):
            raise InvalidParams("scan_lengths", "need at least one length, each >= 2")
        if any(b <= a for a, b in zip(lengths, lengths[1:])):
            raise InvalidParams("scan_lengths", "must be strictly increasing")
        self.scan_lengths = tuple(lengths)
        try:
            self.seed = int(self.seed)
        except (TypeError, ValueError):
            raise InvalidParams("seed", "must be an integer") from None
        if not 0 <= self.seed < 2**64:
            raise InvalidParams("seed", "must fit in 64 unsigned bits")

    @property
    def n_edges(self):
        return n_edges(self.q)

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise InvalidParams("params", "must be a mapping")
        known = {
            "n_subjects", "q", "mu", "between_var", "state_var", "sampling_coeff",
            "scan_lengths", "seed", "half_state_var",
        }
        unknown = set(doc) - known - {"t_total"}
        if unknown:
            raise InvalidParams(sorted(unknown)[0], "unknown parameter")
        for req in ("n_subjects", "q"):
            if req not in doc:
                raise InvalidParams(req, "required")
        return cls(**{k: v for k, v in doc.items() if k in known})

    def to_dict(self):
        def compact(a):
            a = np.asarray(a)
            return float(a[0]) if np.all(a == a[0]) else [float(x) for x in a]

        return {
            "n_subjects": self.n_subjects,
            "q": self.q,
            "mu": compact(self.mu),
            "between_var": compact(self.between_var),
            "state_var": compact(self.state_var),
            "half_state_var": compact(self.half_state_var),
            "sampling_coeff": compact(self.sampling_coeff),
            "scan_lengths": list(self.scan_lengths),
            "seed": self.seed,
        }


@dataclass(eq=False)
class SyntheticCohort:
    """Parameter-level cohort.

    Estimate arrays have shape ``(n_subjects, 2, n_scan_lengths, n_edges)``
    (visit index 0 is visit 1). ``long_term`` is ``Z`` with shape
    ``(n, E)``; ``visit_truth`` is ``Z + W`` per visit, shape ``(n, 2, E)``.
    """

    params: GenerativeParams
    subject_ids: list
    full: np.ndarray
    odd: np.ndarray
    even: np.ndarray
    first_half: np.ndarray
    second_half: np.ndarray
    long_term: np.ndarray
    visit_truth: np.ndarray
    half_truth: np.ndarray = field(default=None)

    @property
    def scan_lengths(self):
        return self.params.scan_lengths

    def length_index(self, ell):
        return self.params.scan_lengths.index(int(ell))


def subject_ids_for(n):
    width = max(4, len(str(n)))
    return [f"sub-{k + 1:0{width}d}" for k in range(n)]


def simulate_parameter_level(params):
    """Draw a :class:`SyntheticCohort` from `params`."""
    if not isinstance(params, GenerativeParams):
        raise InvalidParams("params", "expected GenerativeParams")
    n, e = params.n_subjects, params.n_edges
    lengths = np.asarray(params.scan_lengths, dtype=float)
    k = lengths.size
    sd_z = np.sqrt(params.between_var)
    sd_w = np.sqrt(params.state_var)
    sd_wh = np.sqrt(params.half_state_var)
    sqrt_c = np.sqrt(params.sampling_coeff)
    # per-length sd of one half-sample estimate's noise: 2c/l
    sd_half = np.sqrt(2.0 * params.sampling_coeff[None, :] / lengths[:, None])
    steps = np.sqrt(np.diff(np.concatenate([[0.0], lengths])))[:, None]

    # draw raw normals per stream, then combine in one vectorised pass
    g_z = np.empty((n, e))
    g_w = np.empty((n, 2, e))
    g_full = np.empty((n, 2, k, e))
    g_oe = np.empty((n, 2, 2, k, e))
    g_h = np.empty((n, 2, 4, k, e))
    for i in range(n):
        g_z[i] = stream(params.seed, i, 0, _LATENT).standard_normal(e)
        for v in range(2):
            g_w[i, v] = stream(params.seed, i, v + 1, _LATENT).standard_normal(e)
            g_full[i, v] = stream(params.seed, i, v + 1, _FULL).standard_normal((k, e))
            g_oe[i, v] = stream(params.seed, i, v + 1, _ODD_EVEN).standard_normal((2, k, e))
            g_h[i, v] = stream(params.seed, i, v + 1, _HALVES).standard_normal((4, k, e))

    z_all = params.mu + sd_z * g_z
    vt = z_all[:, None, :] + sd_w * g_w
    y = vt[:, :, None, :]
    walk = np.cumsum(steps * g_full, axis=2)
    full = y + sqrt_c * walk / lengths[:, None]
    odd = y + sd_half * g_oe[:, :, 0]
    even = y + sd_half * g_oe[:, :, 1]
    zz = z_all[:, None, None, :]
    h1 = zz + sd_wh * g_h[:, :, 0]
    h2 = zz + sd_wh * g_h[:, :, 1]
    ht = np.stack([h1, h2], axis=3)
    first = h1 + sd_half * g_h[:, :, 2]
    second = h2 + sd_half * g_h[:, :, 3]

    return SyntheticCohort(
        params=params,
        subject_ids=subject_ids_for(n),
        full=full,
        odd=odd,
        even=even,
        first_half=first,
        second_half=second,
        long_term=z_all,
        visit_truth=vt,
        half_truth=ht,
    )


def ground_truth_lambda(params, ell):
    """Population shrinkage weight at scan length `ell`.

    ``(state_var + c/ell) / (state_var + c/ell + between_var)``, 0 where the
    denominator vanishes.
    """
    if not isinstance(params, GenerativeParams):
        raise InvalidParams("params", "expected GenerativeParams")
    if not ell >= 2:
        raise InvalidParams("ell", "scan length must be >= 2")
    within = params.state_var + params.sampling_coeff / float(ell)
    den = within + params.between_var
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, within / den, 0.0)


# ---------------------------------------------------------------------------
# time-series level


@dataclass(eq=False)
class TimeSeriesCohort:
    """Time-series-level cohort.

    ``series[(subject_id, visit_id)]`` is a :class:`TimeSeriesMatrix`;
    ``long_term`` (n, E) and ``visit_truth`` (n, 2, E) hold the latent
    correlations the series were drawn from.
    """

    params: GenerativeParams
    subject_ids: list
    region_ids: list
    t_total: int
    tr_seconds: float
    series: dict
    long_term: np.ndarray
    visit_truth: np.ndarray

    def true_components(self):
        """Per-edge components implied by the latent correlations."""
        between = np.var(self.long_term, axis=0, ddof=1)
        state = 0.5 * np.mean((self.visit_truth[:, 0] - self.visit_truth[:, 1]) ** 2, axis=0)
        rho = self.visit_truth
        # large-sample variance of a Gaussian Pearson correlation: (1 - rho^2)^2 / l
        coeff = np.mean((1.0 - rho**2) ** 2, axis=(0, 1))
        return {"between_var": between, "state_var": state, "sampling_coeff": coeff}


def _factor_loadings(mu, q, floor):
    target = devectorize(np.clip(mu, -0.999, 0.999)).values
    evals, evecs = np.linalg.eigh(target)
    evals = np.clip(evals, 0.0, None)
    g = evecs * np.sqrt(evals)
    rownorm = np.einsum("ij,ij->i", g, g)
    scale = np.sqrt((1.0 - floor) / max(rownorm.max(), 1e-12))
    return g * min(scale, 1.0)


def _corr_from_loadings(a, unique):
    cov = a @ a.T + np.diag(unique)
    d = np.sqrt(np.diag(cov))
    corr = cov / np.outer(d, d)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    return corr


def simulate_timeseries_level(params, t_total, *, tr_seconds=0.72, floor=0.05):
    """Draw Gaussian regional time series for every subject and both visits.

    Subject ``i`` at visit ``v`` has loadings ``G + E_i + F_iv``, where
    ``G`` reproduces ``mu`` through an eigen-factorisation, ``E_i`` is
    scaled from ``between_var`` and ``F_iv`` from ``state_var``. The
    covariance ``A A^T + diag(uniqueness)`` is normalised to a correlation
    matrix. The induced between-subject spread only approximately matches
    the requested variances; :meth:`TimeSeriesCohort.true_components`
    reports the exact latent values. ``sampling_coeff`` is not used: the
    sampling variance comes from the finite series itself.
    """
    if not isinstance(params, GenerativeParams):
        raise InvalidParams("params", "expected GenerativeParams")
    t_total = int(t_total)
    if t_total < max(params.scan_lengths):
        raise InvalidParams("t_total", f"must be >= the longest scan length {max(params.scan_lengths)}")
    if not 0 < floor < 1:
        raise InvalidParams("floor", "must lie in (0, 1)")
    q, n = params.q, params.n_subjects
    g = _factor_loadings(params.mu, q, floor)
    k = g.shape[1]
    unique = np.maximum(1.0 - np.einsum("ij,ij->i", g, g), floor)
    mean_row = max(np.mean(np.einsum("ij,ij->i", g, g)), 1e-12)
    tau_z = np.sqrt(np.mean(params.between_var) / (2.0 * mean_row))
    tau_w = np.sqrt(np.mean(params.state_var) / (2.0 * mean_row))

    ids = subject_ids_for(n)
    regions = default_region_ids(q)
    series = {}
    long_term = np.empty((n, n_edges(q)))
    visit_truth = np.empty((n, 2, n_edges(q)))
    for i in range(n):
        a_i = g + tau_z * stream(params.seed, i, 0, _FACTOR).standard_normal((q, k))
        long_term[i] = vectorize(_corr_from_loadings(a_i, unique))
        for v in range(2):
            a_iv = a_i + tau_w * stream(params.seed, i, v + 1, _FACTOR).standard_normal((q, k))
            corr = _corr_from_loadings(a_iv, unique)
            visit_truth[i, v] = vectorize(corr)
            chol = np.linalg.cholesky(corr)
            z = stream(params.seed, i, v + 1, _SERIES).standard_normal((t_total, q))
            series[(ids[i], v + 1)] = TimeSeriesMatrix(
                z @ chol.T, region_ids=regions, tr_seconds=tr_seconds
            )
    return TimeSeriesCohort(
        params=params,
        subject_ids=ids,
        region_ids=regions,
        t_total=t_total,
        tr_seconds=tr_seconds,
        series=series,
        long_term=long_term,
        visit_truth=visit_truth,
    )


def write_timeseries_cohort(cohort, out_dir):
    """Write manifest.yaml, one CSV per subject-visit and ground_truth.json."""
    out = Path(out_dir)
    ts_dir = out / "ts"
    ts_dir.mkdir(parents=True, exist_ok=True)
    subjects = []
    for sid in cohort.subject_ids:
        visits = []
        for v in (1, 2):
            p = ts_dir / f"{sid}_visit-{v}.csv"
            save_timeseries(cohort.series[(sid, v)], p)
            visits.append(VisitRecord(v, p, cohort.t_total, cohort.tr_seconds))
        subjects.append(SubjectRecord(sid, visits))
    manifest = ScanManifest(subjects, region_ids=list(cohort.region_ids), header=False)
    save_manifest(manifest, out / "manifest.yaml")

    truth = cohort.true_components()
    lam = {}
    for ell in cohort.params.scan_lengths:
        within = truth["state_var"] + truth["sampling_coeff"] / ell
        den = within + truth["between_var"]
        lam[str(ell)] = [float(x) for x in np.where(den > 0, within / np.where(den > 0, den, 1), 0)]
    doc = {
        "params": cohort.params.to_dict(),
        "t_total": cohort.t_total,
        "tr_seconds": cohort.tr_seconds,
        "region_ids": list(cohort.region_ids),
        "true_components": {k: [float(x) for x in v] for k, v in truth.items()},
        "true_lambda": lam,
        "long_term_mean": [float(x) for x in cohort.long_term.mean(axis=0)],
    }
    (out / "ground_truth.json").write_text(json.dumps(doc, indent=2) + "\n")
    return out / "manifest.yaml"
