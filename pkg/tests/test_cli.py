import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from connshrink.cli import build_parser, build_run_config, cmd_report, main
from connshrink.connectivity import read_edge_csv
from connshrink.exceptions import MissingRun, MissingVisit
from connshrink.reliability import Kind, Method, read_records_csv, summarize
from connshrink.shrinkage import read_components_csv
from connshrink.simulator import GenerativeParams, simulate_parameter_level
from connshrink.sweep import estimates_from_cohort, run_sweep
from connshrink.timeseries import load_manifest, save_manifest


def tree_bytes(root):
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def write_params(path, **kw):
    doc = {"n_subjects": 6, "q": 4, "mu": 0.3, "between_var": 0.01, "state_var": 0.002,
           "scan_lengths": [100, 200], "seed": 3}
    doc.update(kw)
    path.write_text(yaml.safe_dump(doc))
    return path


@pytest.fixture(scope="module")
def cohort_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    params = write_params(root / "params.yaml")
    assert main(["simulate", str(params), "--out", str(root / "data")]) == 0
    return root / "data"


def run_sweep_cli(out, *extra):
    return main(["sweep", "--out", str(out), *extra])


class TestSimulate:
    def test_minimal(self, tmp_path):
        params = write_params(tmp_path / "p.yaml", n_subjects=4, q=3, scan_lengths=[50])
        assert main(["simulate", str(params), "--out", str(tmp_path / "out")]) == 0
        files = sorted((tmp_path / "out" / "ts").glob("*.csv"))
        assert len(files) == 8
        m = load_manifest(tmp_path / "out" / "manifest.yaml")
        assert len(m.subjects) == 4 and all(len(s.visits) == 2 for s in m.subjects)
        truth = json.loads((tmp_path / "out" / "ground_truth.json").read_text())
        assert set(truth["true_components"]) == {"between_var", "state_var", "sampling_coeff"}

    def test_same_seed_byte_identical(self, tmp_path):
        params = write_params(tmp_path / "p.yaml", n_subjects=4, q=3, scan_lengths=[50])
        main(["simulate", str(params), "--out", str(tmp_path / "a")])
        main(["simulate", str(params), "--out", str(tmp_path / "b")])
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        # manifests hold paths relative to themselves, so whole trees match
        assert a == b

    def test_negative_variance(self, tmp_path, capsys):
        params = write_params(tmp_path / "p.yaml", between_var=-0.1)
        assert main(["simulate", str(params), "--out", str(tmp_path / "o")]) != 0
        assert "between_var" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_unknown_param(self, tmp_path, capsys):
        params = write_params(tmp_path / "p.yaml", noise_level=1)
        assert main(["simulate", str(params), "--out", str(tmp_path / "o")]) == 1
        assert "noise_level" in capsys.readouterr().err


class TestConnectivityShrinkReliability:
    def test_connectivity(self, cohort_dir, tmp_path):
        assert main(["connectivity", str(cohort_dir / "manifest.yaml"), "--out", str(tmp_path / "c"),
                     "--scan-length", "100", "--full-matrix"]) == 0
        edges = sorted(p for p in (tmp_path / "c").glob("*.csv") if not p.stem.endswith("_matrix"))
        assert len(edges) == 12
        vals, ids = read_edge_csv(edges[0])
        assert ids == ["R1", "R2", "R3", "R4"] and vals.shape == (6,)
        assert edges[0].read_text().splitlines()[0] == "region_a,region_b,value"

    @pytest.mark.parametrize("method", ["oracle", "single_session"])
    def test_shrink(self, cohort_dir, tmp_path, method):
        out = tmp_path / method
        assert main(["shrink", str(cohort_dir / "manifest.yaml"), "--out", str(out),
                     "--method", method, "--scan-length", "100"]) == 0
        comp = read_components_csv(out / "components.csv")
        assert comp["lambda"].shape == (6,)
        assert np.all((comp["lambda"] >= 0) & (comp["lambda"] <= 1))
        assert len(list((out / "shrunk").glob("*.csv"))) == 6

    def test_shrink_rejects_raw(self, cohort_dir, tmp_path):
        assert main(["shrink", str(cohort_dir / "manifest.yaml"), "--out", str(tmp_path), "--method", "raw"]) == 1

    def test_reliability(self, cohort_dir, tmp_path, capsys):
        m = str(cohort_dir / "manifest.yaml")
        main(["connectivity", m, "--out", str(tmp_path / "short"), "--scan-length", "100", "--visit", "1"])
        main(["connectivity", m, "--out", str(tmp_path / "ref"), "--visit", "2"])
        capsys.readouterr()
        assert main(["reliability", "--estimates", str(tmp_path / "short"), "--reference", str(tmp_path / "ref"),
                     "--out", str(tmp_path / "rel"), "--scan-length", "100"]) == 0
        printed = float(capsys.readouterr().out.strip())
        recs = read_records_csv(tmp_path / "rel" / "records.csv")
        assert len(recs) == 6
        s = summarize(recs, (Method.Raw, Kind.Intersession, 100))
        assert printed == pytest.approx(s.omnibus, rel=1e-5)
        assert (tmp_path / "rel" / "edge_raw_intersession_l100.csv").is_file()
        assert (tmp_path / "rel" / "seed_raw_intersession_l100.csv").is_file()


class TestSweep:
    def test_one_subject_endpoint_zero(self, cohort_dir, tmp_path):
        m = load_manifest(cohort_dir / "manifest.yaml")
        m.subjects = m.subjects[:1]
        save_manifest(m, cohort_dir.parent / "one.yaml")
        out = tmp_path / "run"
        assert run_sweep_cli(out, "--manifest", str(cohort_dir.parent / "one.yaml"), "--scan-lengths", "200",
                             "--methods", "raw", "--kinds", "endpoint") == 0
        rows = list(csv.DictReader(open(out / "omnibus.csv")))
        assert rows == [{"method": "raw", "kind": "endpoint", "scan_length": "200", "median_ape": "0"}]

    def test_threads_byte_identical(self, cohort_dir, tmp_path):
        common = ["--manifest", str(cohort_dir / "manifest.yaml"), "--scan-lengths", "100,200"]
        assert run_sweep_cli(tmp_path / "t1", *common, "--threads", "1") == 0
        assert run_sweep_cli(tmp_path / "t8", *common, "--threads", "8") == 0
        assert run_sweep_cli(tmp_path / "again", *common, "--threads", "1") == 0
        t1 = tree_bytes(tmp_path / "t1")
        assert t1 == tree_bytes(tmp_path / "t8") == tree_bytes(tmp_path / "again")
        assert "omnibus.csv" in t1 and "run_summary.json" in t1

    def test_omnibus_recomputed_from_records(self, cohort_dir, tmp_path):
        out = tmp_path / "run"
        assert run_sweep_cli(out, "--manifest", str(cohort_dir / "manifest.yaml"), "--scan-lengths", "100,200") == 0
        doc = json.loads((out / "run_summary.json").read_text())
        assert len(doc["cells"]) == 3 * 2 * 2
        for cell in doc["cells"]:
            recs = read_records_csv(out / cell["records_file"])
            s = summarize(recs, (cell["method"], cell["kind"], cell["scan_length"]))
            assert s.omnibus == cell["omnibus"]
        raw_end = [c for c in doc["cells"] if c["method"] == "raw" and c["kind"] == "endpoint"]
        assert raw_end[-1]["omnibus"] == 0.0
        assert "threads" not in doc["config"] and "output_dir" not in doc["config"]

    def test_missing_visit(self, cohort_dir, tmp_path, capsys):
        m = load_manifest(cohort_dir / "manifest.yaml")
        m.subjects[2].visits = m.subjects[2].visits[:1]
        save_manifest(m, cohort_dir.parent / "partial.yaml")
        out = tmp_path / "run"
        assert run_sweep_cli(out, "--manifest", str(cohort_dir.parent / "partial.yaml"),
                             "--scan-lengths", "100") == 1
        assert "sub-0003" in capsys.readouterr().err
        assert not out.exists()
        # single-session end-point analysis needs no second visit
        assert run_sweep_cli(out, "--manifest", str(cohort_dir.parent / "partial.yaml"), "--scan-lengths", "100",
                             "--methods", "raw,single_session", "--kinds", "endpoint") == 0

    def test_run_sweep_missing_visit(self):
        est = estimates_from_cohort(simulate_parameter_level(GenerativeParams(5, 3, scan_lengths=(300,))))
        est.visit2 = None
        with pytest.raises(MissingVisit):
            run_sweep(est, [Method.OracleShrink], [Kind.EndPoint])

    def test_params_lambda_half(self, tmp_path):
        # between 0.01 and c/l = 3/300 = 0.01: true lambda 0.5
        params = write_params(tmp_path / "p.yaml", n_subjects=1000, q=4, between_var=0.01, state_var=0.0,
                              sampling_coeff=3.0, scan_lengths=[300], seed=11)
        out = tmp_path / "run"
        assert run_sweep_cli(out, "--params", str(params), "--scan-lengths", "300", "--methods", "raw,oracle") == 0
        doc = json.loads((out / "run_summary.json").read_text())
        (comp,) = doc["components"]
        assert comp["median_lambda"] == pytest.approx(0.5, abs=0.1)

    def test_params_seed_determinism(self, tmp_path):
        params = write_params(tmp_path / "p.yaml", n_subjects=50, q=3)
        args = ["--params", str(params), "--scan-lengths", "100,200"]
        run_sweep_cli(tmp_path / "a", *args)
        run_sweep_cli(tmp_path / "b", *args)
        run_sweep_cli(tmp_path / "c", *args, "--seed", "4")
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
        assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")

    def test_fisher_z(self, tmp_path):
        params = write_params(tmp_path / "p.yaml", n_subjects=40, q=3)
        assert run_sweep_cli(tmp_path / "z", "--params", str(params), "--scan-lengths", "100,200", "--fisher-z") == 0
        rows = list(csv.DictReader(open(tmp_path / "z" / "omnibus.csv")))
        raw_end = [r for r in rows if r["method"] == "raw" and r["kind"] == "endpoint"]
        assert float(raw_end[-1]["median_ape"]) == 0.0

    def test_existing_output_refused(self, tmp_path):
        params = write_params(tmp_path / "p.yaml", n_subjects=10, q=3)
        (tmp_path / "busy").mkdir()
        (tmp_path / "busy" / "keep.txt").write_text("x")
        assert run_sweep_cli(tmp_path / "busy", "--params", str(params), "--scan-lengths", "100,200") == 1
        assert [p.name for p in (tmp_path / "busy").iterdir()] == ["keep.txt"]

    def test_bad_grid(self, tmp_path, capsys):
        params = write_params(tmp_path / "p.yaml")
        assert run_sweep_cli(tmp_path / "o", "--params", str(params), "--scan-lengths", "200,100") == 1
        assert "increasing" in capsys.readouterr().err


class TestConfig:
    def test_precedence(self, tmp_path):
        cfg = tmp_path / "run.yaml"
        cfg.write_text(yaml.safe_dump({"params": "p.yaml", "scan_lengths": [100, 200], "methods": ["raw"],
                                       "guard": 1e-6, "output_dir": "cfg_out"}))
        args = build_parser().parse_args(["sweep", "--config", str(cfg), "--guard", "1e-3"])
        rc = build_run_config(args)
        assert rc.input == str(tmp_path / "p.yaml") and rc.input_kind == "params"
        assert rc.scan_lengths == [100, 200]
        assert rc.methods == [Method.Raw]
        assert rc.guard == 1e-3
        assert rc.output_dir == "cfg_out"

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "run.yaml"
        cfg.write_text(yaml.safe_dump({"colour": "blue"}))
        assert main(["sweep", "--config", str(cfg)]) == 1
        assert "colour" in capsys.readouterr().err


class TestReport:
    def test_cardinality_and_pass_through(self, tmp_path):
        params = write_params(tmp_path / "p.yaml", n_subjects=20, q=3,
                              scan_lengths=list(range(300, 2401, 300)), sampling_coeff=3.0)
        run = tmp_path / "run"
        assert run_sweep_cli(run, "--params", str(params), "--methods", "raw,oracle") == 0
        assert main(["report", str(run)]) == 0
        rows = list(csv.DictReader(open(run / "report.csv")))
        omni = [r for r in rows if r["level"] == "omnibus"]
        assert len(omni) == 2 * 2 * 8
        source = {
            (r["method"], r["kind"], r["scan_length"]): r["median_ape"]
            for r in csv.DictReader(open(run / "omnibus.csv"))
        }
        assert {(r["method"], r["kind"], r["scan_length"]): r["value"] for r in omni} == source
        doc = json.loads((run / "run_summary.json").read_text())
        cell = doc["cells"][0]
        seeds = list(csv.DictReader(open(run / cell["seed_file"])))
        got = [r["value"] for r in rows if r["level"] == "seed" and r["method"] == cell["method"]
               and r["kind"] == cell["kind"] and r["scan_length"] == str(cell["scan_length"])]
        assert got == [r["median_ape"] for r in seeds]
        assert len([r for r in rows if r["level"] == "median_lambda"]) == 8

    def test_missing_run(self, tmp_path, capsys):
        with pytest.raises(MissingRun):
            cmd_report(build_parser().parse_args(["report", str(tmp_path / "nope")]))
        assert main(["report", str(tmp_path / "nope")]) == 1
        assert "nope" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "connshrink", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "0.1.0" in out.stdout
