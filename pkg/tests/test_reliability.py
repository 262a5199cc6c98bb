import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from connshrink.exceptions import EmptyCell, MissingReference, ShapeMismatch
from connshrink.reliability import (
    Kind,
    Method,
    ReliabilityRecord,
    ReliabilitySummary,
    ape,
    endpoint_records,
    intersession_records,
    nan_median,
    percent_change,
    read_records_csv,
    summarize,
    write_omnibus_csv,
    write_records_csv,
    write_summary_csvs,
)


def sorted_median(values):
    """Median by sorting a Python list; NaNs dropped."""
    vals = sorted(v for v in values if not math.isnan(v))
    if not vals:
        return math.nan
    m = len(vals) // 2
    return vals[m] if len(vals) % 2 else (vals[m - 1] + vals[m]) / 2


def summary_with_edges(edge_level, omnibus=None):
    edge_level = np.asarray(edge_level, float)
    return ReliabilitySummary(
        Method.Raw, Kind.Intersession, 300, edge_level, np.zeros(0),
        float(np.median(edge_level)) if omnibus is None else omnibus, 1,
    )


def records_for(apes, method=Method.Raw, kind=Kind.Intersession, ell=300):
    return [ReliabilityRecord(f"s{i}", method, kind, ell, np.asarray(a, float)) for i, a in enumerate(apes)]


class TestApe:
    def test_identity(self):
        v = np.array([0.3, -0.2, 0.9])
        assert np.array_equal(ape(v, v), np.zeros(3))

    def test_hand(self):
        assert ape([0.6], [0.5])[0] == pytest.approx(0.2, abs=1e-15)

    def test_guard(self):
        out = ape([0.1, 0.2], [0.0, 0.4])
        assert np.isnan(out[0]) and out[1] == pytest.approx(0.5)

    def test_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ape([0.1, 0.2], [0.1])

    @settings(max_examples=100)
    @given(
        st.floats(-1, 1), st.floats(0.01, 1), st.booleans(), st.floats(0.01, 100),
    )
    def test_scale_equivariant(self, err, ref, negative, c):
        ref = -ref if negative else ref
        base = ape([ref + err], [ref])[0]
        scaled = ape([ref + c * err], [ref])[0]
        assert abs(scaled - c * base) <= 1e-12 * max(1.0, abs(c * base))


class TestRecords:
    def setup_method(self):
        self.ids = ["a", "b"]
        # one edge; L = 600
        self.v1 = {
            Method.Raw: {300: np.array([[0.4], [0.1]]), 600: np.array([[0.5], [0.2]])},
        }
        self.v2_full = np.array([[0.5], [0.25]])
        self.v1_full = np.array([[0.5], [0.2]])

    def test_intersession_fixture(self):
        recs = intersession_records(self.v1, self.v2_full, self.ids)
        assert len(recs) == 2 * 1 * 2
        got = {(r.subject_id, r.scan_length): r.ape[0] for r in recs}
        assert got[("a", 300)] == pytest.approx(0.2)
        assert got[("b", 300)] == pytest.approx(0.6)
        assert got[("a", 600)] == 0.0
        assert got[("b", 600)] == pytest.approx(0.2)
        assert all(r.kind is Kind.Intersession for r in recs)

    def test_endpoint_fixture(self):
        recs = endpoint_records(self.v1, self.v1_full, self.ids)
        got = {(r.subject_id, r.scan_length): r.ape[0] for r in recs}
        assert got[("a", 300)] == pytest.approx(0.2)
        assert got[("b", 300)] == pytest.approx(0.5)
        assert got[("a", 600)] == 0.0 and got[("b", 600)] == 0.0

    def test_cardinality(self):
        v1 = {m: {ell: np.zeros((3, 6)) + 0.1 for ell in (300, 600, 900)} for m in Method}
        recs = intersession_records(v1, np.full((3, 6), 0.2), ["x", "y", "z"])
        assert len(recs) == 3 * 3 * 3

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 20))
    def test_raw_endpoint_zero_at_full_length(self, seed, n):
        full = np.random.default_rng(seed).uniform(-1, 1, size=(n, 10))
        recs = endpoint_records({Method.Raw: {1200: full.copy()}}, full, [str(i) for i in range(n)])
        assert all(np.all(r.ape[~np.isnan(r.ape)] == 0.0) for r in recs)

    def test_shrunk_endpoint_identity(self):
        rng = np.random.default_rng(1)
        w = rng.uniform(0.1, 0.9, size=(5, 3))
        lam = np.array([0.2, 0.5, 0.8])
        wbar = w.mean(axis=0)
        shrunk = lam * wbar + (1 - lam) * w
        recs = endpoint_records({Method.OracleShrink: {2400: shrunk}}, w, list("abcde"))
        want = np.abs(lam * (wbar - w)) / np.abs(w)
        assert np.allclose(np.vstack([r.ape for r in recs]), want, rtol=0, atol=1e-14)

    def test_missing_reference(self):
        with pytest.raises(MissingReference):
            intersession_records(self.v1, None, self.ids)
        with pytest.raises(MissingReference):
            endpoint_records(self.v1, np.zeros((3, 1)), self.ids)


class TestSummarize:
    def test_one_subject(self):
        a = np.array([0.1, 0.4, 0.2])
        s = summarize(records_for([a]), (Method.Raw, Kind.Intersession, 300))
        assert np.array_equal(s.edge_level, a)

    def test_odd_count(self):
        s = summarize(records_for([[0.5], [0.1], [0.3]]), (Method.Raw, Kind.Intersession, 300))
        assert s.edge_level[0] == pytest.approx(0.3)

    def test_even_count_midpoint(self):
        s = summarize(records_for([[0.5], [0.1], [0.3], [0.2]]), (Method.Raw, Kind.Intersession, 300))
        assert s.edge_level[0] == pytest.approx(0.25)

    def test_seed_and_omnibus(self):
        s = summarize(records_for([[0.1, 0.2, 0.6]]), (Method.Raw, Kind.Intersession, 300))
        assert s.seed_level == pytest.approx([0.15, 0.35, 0.4])
        assert s.omnibus == pytest.approx(0.2)

    def test_empty_cell(self):
        with pytest.raises(EmptyCell):
            summarize(records_for([[0.1]]), (Method.Raw, Kind.EndPoint, 300))

    def test_excluded_counts(self):
        recs = records_for([[np.nan, 0.2, 0.3], [np.nan, 0.1, np.nan]])
        s = summarize(recs, (Method.Raw, Kind.Intersession, 300))
        assert s.excluded["ape"] == 3
        assert s.excluded["edge"] == 1
        assert np.isnan(s.edge_level[0]) and s.edge_level[2] == pytest.approx(0.3)
        assert s.omnibus == pytest.approx(sorted_median([0.15, 0.3]))

    def test_cell_filtering(self):
        recs = records_for([[0.1]]) + records_for([[0.9]], method=Method.OracleShrink)
        assert summarize(recs, ("raw", "intersession", 300)).omnibus == pytest.approx(0.1)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 15), st.sampled_from([3, 4, 6]))
    def test_permutation_invariant(self, seed, n, q):
        rng = np.random.default_rng(seed)
        e = q * (q - 1) // 2
        apes = rng.exponential(0.3, size=(n, e))
        apes[rng.uniform(size=apes.shape) < 0.1] = np.nan
        cell = (Method.Raw, Kind.Intersession, 300)
        base = summarize(records_for(apes), cell)
        perm = rng.permutation(n)
        shuffled = summarize(records_for(apes[perm]), cell)
        assert np.array_equal(base.edge_level, shuffled.edge_level, equal_nan=True)
        assert np.array_equal(base.seed_level, shuffled.seed_level, equal_nan=True)
        assert base.omnibus == shuffled.omnibus or (np.isnan(base.omnibus) and np.isnan(shuffled.omnibus))
        # shuffling edges leaves the omnibus unchanged
        eperm = rng.permutation(e)
        assert nan_median(base.edge_level[eperm]) == nan_median(base.edge_level) or np.isnan(base.omnibus)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 30))
    def test_omnibus_recomputes(self, seed, n):
        apes = np.random.default_rng(seed).exponential(0.3, size=(n, 10))
        s = summarize(records_for(apes), (Method.Raw, Kind.Intersession, 300))
        assert s.omnibus == float(nan_median(s.edge_level))

    def test_sort_based_oracle(self):
        rng = np.random.default_rng(2)
        cell = (Method.Raw, Kind.Intersession, 300)
        for _ in range(1000):
            n = int(rng.integers(1, 12))
            apes = rng.exponential(0.3, size=(n, 6))
            apes[rng.uniform(size=apes.shape) < 0.05] = np.nan
            s = summarize(records_for(apes), cell)
            edge = [sorted_median(apes[:, j]) for j in range(6)]
            seeds = [sorted_median([edge[k] for k in idx]) for idx in ([0, 1, 2], [0, 3, 4], [1, 3, 5], [2, 4, 5])]
            assert np.array_equal(s.edge_level, np.array(edge), equal_nan=True)
            assert np.array_equal(s.seed_level, np.array(seeds), equal_nan=True)
            om = sorted_median(edge)
            assert s.omnibus == om or (math.isnan(om) and math.isnan(s.omnibus))


class TestPercentChange:
    def test_equal(self):
        s = summary_with_edges([0.3, 0.5])
        assert percent_change(s, s)["omnibus"] == 0.0

    def test_improvement(self):
        pc = percent_change(summary_with_edges([0.4]), summary_with_edges([0.5]))
        assert pc["omnibus"] == pytest.approx(-20.0)
        assert pc["edge"][0] == pytest.approx(-20.0)

    def test_zero_raw(self):
        pc = percent_change(summary_with_edges([0.1]), summary_with_edges([0.0]))
        assert math.isnan(pc["omnibus"])

    def test_mismatch(self):
        with pytest.raises(ShapeMismatch):
            percent_change(summary_with_edges([0.1, 0.2]), summary_with_edges([0.1]))


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    apes = rng.exponential(0.3, size=(4, 3))
    apes[1, 2] = np.nan
    recs = records_for(apes)
    path = tmp_path / "r.csv"
    write_records_csv(path, recs, ["x", "y", "z"])
    back = read_records_csv(path)
    assert path.read_text().splitlines()[0] == "subject_id,method,kind,scan_length,x|y,x|z,y|z"
    assert [r.subject_id for r in back] == [r.subject_id for r in recs]
    assert np.array_equal(np.vstack([r.ape for r in back]), apes, equal_nan=True)

    s = summarize(back, (Method.Raw, Kind.Intersession, 300))
    edge_path, seed_path = write_summary_csvs(s, tmp_path / "sum", ["x", "y", "z"])
    assert edge_path.name == "edge_raw_intersession_l300.csv"
    assert edge_path.read_text().splitlines()[0] == "region_a,region_b,median_ape"
    assert seed_path.read_text().splitlines()[1].startswith("x,")
    write_omnibus_csv(tmp_path / "o.csv", [s])
    assert (tmp_path / "o.csv").read_text().splitlines() == [
        "method,kind,scan_length,median_ape",
        f"raw,intersession,300,{s.omnibus:.17g}",
    ]
