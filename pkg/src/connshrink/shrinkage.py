"""Per-edge variance components and empirical Bayes shrinkage.

Two ways of splitting the cross-subject variance of connectivity estimates:

* ``Oracle``: two visits per subject. Within-subject (noise) variance is
  half the variance of the visit difference; between-subject variance is
  the remainder of the visit-averaged total.
* ``SingleSession``: one session per subject, cut two ways. Odd versus
  even volumes isolate sampling variance (both halves share the same true
  state); first versus second half adds state variance because the two
  halves cover different periods.

The shrinkage weight ``lambda`` is the within-subject share of the total
variance, and a shrunk estimate is ``lambda * group_mean + (1 - lambda) * raw``.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .connectivity import as_edge_stack, group_mean, n_edges, pearson_matrix, vectorize
from .exceptions import ShapeMismatch, TooFewSubjects
from .timeseries import SubsampleScheme, subsample

ADDITIVITY_ATOL = 1e-9


class ComponentMethod(enum.Enum):
    Oracle = "oracle"
    SingleSession = "single_session"


@dataclass(eq=False)
class VarianceComponents:
    """Per-edge variance decomposition.

    Attributes
    ----------
    between_var, sampling_var, state_var, total_var : ndarray of shape (E,)
        ``between + sampling + state == total`` for every edge.
    method : ComponentMethod
    group_mean : ndarray of shape (E,)
        Cross-subject mean of the estimates being shrunk.
    clamped : ndarray of bool, shape (E,)
        Edges where a negative moment estimate was set to zero. On such
        edges ``total_var`` is the reconciled sum of the parts rather than
        the observed cross-subject variance.
    """

    between_var: np.ndarray
    sampling_var: np.ndarray
    state_var: np.ndarray
    total_var: np.ndarray
    method: ComponentMethod
    group_mean: np.ndarray
    clamped: np.ndarray

    @property
    def n_clamped(self):
        return int(np.count_nonzero(self.clamped))

    def check(self, atol=ADDITIVITY_ATOL):
        parts = (self.between_var, self.sampling_var, self.state_var, self.total_var)
        if any(np.any(p < 0) for p in parts):
            raise AssertionError("negative variance component")
        resid = self.between_var + self.sampling_var + self.state_var - self.total_var
        if np.any(np.abs(resid) > atol):
            raise AssertionError(f"components do not add up (max residual {np.abs(resid).max():.3g})")
        return self


@dataclass(eq=False)
class ShrinkageWeights:
    lam: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        self.target = np.asarray(self.target, dtype=float)
        if self.lam.shape != self.target.shape:
            raise ShapeMismatch(f"lambda {self.lam.shape} vs target {self.target.shape}")


def _stacks(min_n, **named):
    out = {}
    shape = None
    for name, est in named.items():
        try:
            arr = as_edge_stack(est)
        except ValueError:
            raise ShapeMismatch(f"{name}: edge vectors have differing lengths") from None
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ShapeMismatch(f"{name} has shape {arr.shape}, expected {shape}")
        out[name] = arr
    if shape[0] < min_n:
        raise TooFewSubjects(f"need n >= {min_n} subjects, got {shape[0]}")
    return out


def _var(x):
    return np.var(x, axis=0, ddof=1)


def estimate_oracle_components(visit1, visit2):
    """Variance components from two visits per subject.

    Parameters
    ----------
    visit1, visit2 : array-like of shape (n_subjects, n_edges)
        Estimates for the same subjects, in the same order, at the same
        scan length.

    Returns
    -------
    VarianceComponents
        ``group_mean`` is the visit-1 mean, the target used when shrinking
        visit-1 estimates.
    """
    s = _stacks(3, visit1=visit1, visit2=visit2)
    v1, v2 = s["visit1"], s["visit2"]
    total = 0.5 * (_var(v1) + _var(v2))
    sampling = 0.5 * _var(v2 - v1)
    between = total - sampling
    clamped = between < 0
    between = np.maximum(between, 0.0)
    # the shortfall goes into the reconciled total so the parts still add up
    total = np.where(clamped, sampling, total)
    return VarianceComponents(
        between_var=between,
        sampling_var=sampling,
        state_var=np.zeros_like(total),
        total_var=total,
        method=ComponentMethod.Oracle,
        group_mean=group_mean(v1),
        clamped=clamped,
    )


def estimate_single_session_components(full, odd, even, first_half, second_half):
    """Variance components from a single session and its subsamples.

    All five inputs are ``(n_subjects, n_edges)`` estimates from the same
    session: the full series, its odd and even volumes, and its first and
    second halves.
    """
    # unbiased variance only needs two subjects here
    s = _stacks(
        2, full=full, odd=odd, even=even, first_half=first_half, second_half=second_half
    )
    sampling = 0.25 * _var(s["odd"] - s["even"])
    state = 0.5 * _var(s["first_half"] - s["second_half"]) - 2.0 * sampling
    clamped = state < 0
    state = np.maximum(state, 0.0)
    total = _var(s["full"])
    between = total - sampling - state
    short = between < 0
    clamped |= short
    between = np.maximum(between, 0.0)
    total = np.where(short, sampling + state, total)
    return VarianceComponents(
        between_var=between,
        sampling_var=sampling,
        state_var=state,
        total_var=total,
        method=ComponentMethod.SingleSession,
        group_mean=group_mean(s["full"]),
        clamped=clamped,
    )


def compute_lambda(vc):
    """Shrinkage weight per edge, in [0, 1].

    Zero-variance edges get ``lambda = 0``.
    """
    num = vc.sampling_var + vc.state_var
    if vc.method is ComponentMethod.SingleSession:
        den = vc.total_var
    else:
        den = vc.sampling_var + vc.between_var
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(den > 0, num / den, 0.0)
    return ShrinkageWeights(np.clip(lam, 0.0, 1.0), vc.group_mean.copy())


def apply_shrinkage(subject, weights):
    """Blend `subject` toward the target: ``lam * target + (1 - lam) * subject``.

    `subject` may be a single edge vector or an ``(n, E)`` stack.
    """
    x = np.asarray(subject, dtype=float)
    if x.shape[-1] != weights.lam.shape[0]:
        raise ShapeMismatch(f"subject has {x.shape[-1]} edges, weights have {weights.lam.shape[0]}")
    lam, t = weights.lam, weights.target
    out = lam * t + (1.0 - lam) * x
    # rounding must not push the blend outside [subject, target]
    return np.clip(out, np.minimum(x, t), np.maximum(x, t))


def subsample_estimates(series, fisher=False):
    """Odd/even and first/second-half connectivity for a list of time series.

    Returns a dict with keys ``odd``, ``even``, ``first_half`` and
    ``second_half``, each an ``(n, E)`` array.
    """
    out = {"odd": [], "even": [], "first_half": [], "second_half": []}
    for ts in series:
        odd, even = subsample(ts, SubsampleScheme.OddEven)
        first, second = subsample(ts, SubsampleScheme.FirstSecondHalf)
        out["odd"].append(vectorize(pearson_matrix(odd)))
        out["even"].append(vectorize(pearson_matrix(even)))
        out["first_half"].append(vectorize(pearson_matrix(first)))
        out["second_half"].append(vectorize(pearson_matrix(second)))
    out = {k: np.array(v) for k, v in out.items()}
    if fisher:
        out = {k: np.arctanh(np.clip(v, -1.0, 1.0)) for k, v in out.items()}
    return out


class _ShrinkageBase(BaseEstimator, TransformerMixin):
    def _finish_fit(self, vc):
        self.components_ = vc
        self.weights_ = compute_lambda(vc)
        self.lambda_ = self.weights_.lam
        self.target_ = self.weights_.target
        self.n_features_in_ = self.lambda_.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "weights_")
        return apply_shrinkage(X, self.weights_)


class OracleShrinkage(_ShrinkageBase):
    """Shrink visit-1 estimates using variance components from two visits.

    Examples
    --------
    >>> import numpy as np
    >>> rng = np.random.default_rng(0)
    >>> truth = rng.normal(0.3, 0.2, size=(50, 3))
    >>> v1 = truth + rng.normal(0, 0.2, size=truth.shape)
    >>> v2 = truth + rng.normal(0, 0.2, size=truth.shape)
    >>> est = OracleShrinkage().fit(v1, v2)
    >>> est.transform(v1).shape
    (50, 3)
    """

    def fit(self, X, X_retest):
        return self._finish_fit(estimate_oracle_components(X, X_retest))


class SingleSessionShrinkage(_ShrinkageBase):
    """Shrink single-session estimates using subsample-based components.

    ``fit(X, odd=..., even=..., first_half=..., second_half=...)`` takes the
    full-session estimates and the four subsample estimates, all
    ``(n, E)``. :meth:`fit_timeseries` computes them from raw series.
    """

    def fit(self, X, y=None, *, odd, even, first_half, second_half):
        return self._finish_fit(
            estimate_single_session_components(X, odd, even, first_half, second_half)
        )

    def fit_timeseries(self, series):
        full = np.array([vectorize(pearson_matrix(ts)) for ts in series])
        return self.fit(full, **subsample_estimates(series))


COMPONENT_COLUMNS = (
    "region_a", "region_b", "between_var", "sampling_var",
    "state_var", "total_var", "lambda", "clamped",
)


def write_components_csv(path, vc, weights, region_ids):
    q = len(region_ids)
    if vc.total_var.size != n_edges(q):
        raise ShapeMismatch(f"{vc.total_var.size} edges for {q} regions")
    rows, cols = np.triu_indices(q, k=1)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(COMPONENT_COLUMNS) + "\n")
        for k, (a, b) in enumerate(zip(rows, cols)):
            vals = (
                vc.between_var[k], vc.sampling_var[k], vc.state_var[k],
                vc.total_var[k], weights.lam[k],
            )
            fh.write(
                f"{region_ids[a]},{region_ids[b]},"
                + ",".join(format(float(v), ".17g") for v in vals)
                + f",{int(bool(vc.clamped[k]))}\n"
            )


def read_components_csv(path):
    """Columns of a components CSV as a dict of arrays (``lambda`` included)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {c: np.array([float(r[c]) for r in rows]) for c in COMPONENT_COLUMNS[2:]}
    out["clamped"] = out["clamped"].astype(bool)
    out["region_a"] = [r["region_a"] for r in rows]
    out["region_b"] = [r["region_b"] for r in rows]
    return out
