"""Command-line entry point: ``connshrink <subcommand> ...``.

Subcommands
-----------
simulate      write a synthetic time-series cohort (manifest + CSVs + ground truth)
connectivity  per subject-visit Pearson edge CSVs from a manifest
shrink        variance components and shrunk estimates for one scan length
reliability   APE of one set of edge CSVs against another, with summaries
sweep         full scan-length x method x reliability-kind sweep
report        flatten a finished sweep into one long-format CSV

For ``sweep`` a YAML config file (``--config``) overrides the defaults and
explicit flags override the config.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .connectivity import (
    pearson_matrix,
    read_edge_csv,
    vectorize,
    write_edge_csv,
    write_matrix_csv,
)
from .exceptions import ConnShrinkError, InvalidParams, MissingRun, MissingVisit, SchemaError
from .reliability import (
    DEFAULT_GUARD,
    Kind,
    Method,
    ape,
    ReliabilityRecord,
    summarize,
    write_omnibus_csv,
    write_records_csv,
    write_summary_csvs,
)
from .shrinkage import (
    OracleShrinkage,
    SingleSessionShrinkage,
    subsample_estimates,
    write_components_csv,
)
from .simulator import (
    DEFAULT_SCAN_LENGTHS,
    GenerativeParams,
    simulate_parameter_level,
    simulate_timeseries_level,
    write_timeseries_cohort,
)
from .sweep import (
    KIND_ORDER,
    METHOD_ORDER,
    estimates_from_cohort,
    estimates_from_manifest,
    run_sweep,
    timed,
    write_sweep,
)
from .timeseries import dual_regression_stage1, load_manifest, load_spatial_maps, load_visit, truncate

log = logging.getLogger("connshrink")

METHOD_ALIASES = {
    "raw": Method.Raw,
    "single": Method.SingleSessionShrink,
    "single_session": Method.SingleSessionShrink,
    "single-session": Method.SingleSessionShrink,
    "single_session_shrink": Method.SingleSessionShrink,
    "oracle": Method.OracleShrink,
    "oracle_shrink": Method.OracleShrink,
}
KIND_ALIASES = {
    "intersession": Kind.Intersession,
    "endpoint": Kind.EndPoint,
    "end-point": Kind.EndPoint,
    "end_point": Kind.EndPoint,
}


def _parse_list(value, aliases, what):
    items = value.split(",") if isinstance(value, str) else list(value)
    out = []
    for item in items:
        key = str(item).strip().lower()
        if key not in aliases:
            raise SchemaError(f"unknown {what} '{item}' (choose from {', '.join(sorted(aliases))})")
        if aliases[key] not in out:
            out.append(aliases[key])
    return out


def _parse_lengths(value):
    items = value.split(",") if isinstance(value, str) else list(value)
    try:
        return [int(x) for x in items]
    except ValueError:
        raise SchemaError(f"scan lengths must be integers, got {value!r}") from None


@dataclass
class RunConfig:
    input: str = None
    input_kind: str = "manifest"  # or "params"
    scan_lengths: list = field(default_factory=lambda: list(DEFAULT_SCAN_LENGTHS))
    methods: list = field(default_factory=lambda: list(METHOD_ORDER))
    reliability_kinds: list = field(default_factory=lambda: list(KIND_ORDER))
    guard: float = DEFAULT_GUARD
    fisher_z: bool = False
    output_dir: str = None
    seed: int = None
    threads: int = 1
    maps: str = None

    def validate(self):
        if not self.input:
            raise SchemaError("no input: give --manifest or --params (or 'input' in the config)")
        if not self.output_dir:
            raise SchemaError("no output directory: give --out")
        if not self.scan_lengths or any(b <= a for a, b in zip(self.scan_lengths, self.scan_lengths[1:])):
            raise SchemaError("scan lengths must be non-empty and strictly increasing")
        if any(x < 2 for x in self.scan_lengths):
            raise SchemaError("scan lengths must be >= 2")
        if not self.methods or not self.reliability_kinds:
            raise SchemaError("select at least one method and one reliability kind")
        if not self.guard > 0:
            raise SchemaError("guard must be positive")
        if self.threads is not None and self.threads < 1:
            raise SchemaError("threads must be >= 1")
        return self

    def echo(self):
        """Config as recorded in run_summary.json (no output dir or thread count)."""
        return {
            "input": str(self.input),
            "input_kind": self.input_kind,
            "scan_lengths": list(self.scan_lengths),
            "methods": [m.value for m in self.methods],
            "reliability_kinds": [k.value for k in self.reliability_kinds],
            "guard": self.guard,
            "fisher_z": self.fisher_z,
            "seed": self.seed,
            "maps": None if self.maps is None else str(self.maps),
        }


def _apply_config_doc(cfg, doc):
    if not isinstance(doc, dict):
        raise SchemaError("config file must be a mapping")
    for key, value in doc.items():
        if key == "manifest":
            cfg.input, cfg.input_kind = value, "manifest"
        elif key == "params":
            cfg.input, cfg.input_kind = value, "params"
        elif key == "input":
            cfg.input = value
        elif key == "input_kind":
            cfg.input_kind = value
        elif key == "scan_lengths":
            cfg.scan_lengths = _parse_lengths(value)
        elif key == "methods":
            cfg.methods = _parse_list(value, METHOD_ALIASES, "method")
        elif key in ("reliability_kinds", "kinds"):
            cfg.reliability_kinds = _parse_list(value, KIND_ALIASES, "reliability kind")
        elif key in ("guard", "fisher_z", "output_dir", "seed", "threads", "maps"):
            setattr(cfg, key, value)
        else:
            raise SchemaError(f"unknown config key '{key}'")


def build_run_config(args):
    cfg = RunConfig()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise SchemaError(f"config file not found: {path}")
        doc = yaml.safe_load(path.read_text()) or {}
        _apply_config_doc(cfg, doc)
        for key in ("input", "maps"):
            val = getattr(cfg, key)
            if val and not Path(val).is_absolute():
                setattr(cfg, key, str(path.parent / val))
    if args.manifest:
        cfg.input, cfg.input_kind = args.manifest, "manifest"
    if args.params:
        cfg.input, cfg.input_kind = args.params, "params"
    if args.scan_lengths:
        cfg.scan_lengths = _parse_lengths(args.scan_lengths)
    if args.methods:
        cfg.methods = _parse_list(args.methods, METHOD_ALIASES, "method")
    if args.kinds:
        cfg.reliability_kinds = _parse_list(args.kinds, KIND_ALIASES, "reliability kind")
    for key in ("guard", "seed", "threads", "maps"):
        val = getattr(args, key)
        if val is not None:
            setattr(cfg, key, val)
    if args.fisher_z:
        cfg.fisher_z = True
    if args.out:
        cfg.output_dir = args.out
    cfg.guard = float(cfg.guard)
    cfg.threads = int(cfg.threads or 1)
    if cfg.input_kind not in ("manifest", "params"):
        raise SchemaError("input_kind must be 'manifest' or 'params'")
    return cfg.validate()


def _load_params(path, seed=None):
    path = Path(path)
    if not path.is_file():
        raise InvalidParams("params", f"file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise InvalidParams("params", f"not valid YAML ({exc})") from None
    if not isinstance(doc, dict):
        raise InvalidParams("params", "must be a mapping")
    if seed is not None:
        doc = dict(doc, seed=seed)
    return GenerativeParams.from_dict(doc), doc


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    params, doc = _load_params(args.params, args.seed)
    t_total = args.t_total or doc.get("t_total") or max(params.scan_lengths)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"output directory {out} is not empty")
    with timed("simulate"):
        cohort = simulate_timeseries_level(params, t_total, tr_seconds=args.tr)
        manifest = write_timeseries_cohort(cohort, out)
    print(manifest)
    return 0


def _series_for(manifest, subject, visit_id, maps, scan_length):
    ts = load_visit(manifest, subject, visit_id)
    if ts is None:
        return None
    if maps is not None:
        ts = dual_regression_stage1(ts, maps)
    if scan_length:
        ts = truncate(ts, scan_length)
    return ts


def cmd_connectivity(args):
    manifest = load_manifest(args.manifest)
    maps = load_spatial_maps(args.maps) if args.maps else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    visits = (1, 2) if args.visit == "all" else (int(args.visit),)
    for subject in manifest.subjects:
        for v in visits:
            ts = _series_for(manifest, subject, v, maps, args.scan_length)
            if ts is None:
                continue
            cm = pearson_matrix(ts)
            vals = vectorize(cm)
            if args.fisher_z:
                vals = np.arctanh(np.clip(vals, -1, 1))
            stem = f"{subject.subject_id}_visit-{v}"
            write_edge_csv(out / f"{stem}.csv", vals, cm.region_ids)
            if args.full_matrix:
                write_matrix_csv(out / f"{stem}_matrix.csv", cm)
    return 0


def cmd_shrink(args):
    manifest = load_manifest(args.manifest)
    maps = load_spatial_maps(args.maps) if args.maps else None
    method = _parse_list(args.method, METHOD_ALIASES, "method")[0]
    if method is Method.Raw:
        raise SchemaError("shrink needs a shrinkage method (oracle or single_session)")
    v1 = [_series_for(manifest, s, 1, maps, args.scan_length) for s in manifest.subjects]
    if any(ts is None for ts in v1):
        raise MissingVisit("every subject needs visit 1")
    region_ids = v1[0].region_ids
    x1 = np.array([vectorize(pearson_matrix(ts)) for ts in v1])
    fwd = (lambda x: np.arctanh(np.clip(x, -1, 1))) if args.fisher_z else (lambda x: x)
    back = np.tanh if args.fisher_z else (lambda x: x)
    if method is Method.OracleShrink:
        v2 = [_series_for(manifest, s, 2, maps, args.scan_length) for s in manifest.subjects]
        missing = [s.subject_id for s, ts in zip(manifest.subjects, v2) if ts is None]
        if missing:
            raise MissingVisit(f"oracle shrinkage needs visit 2; missing for {', '.join(missing)}")
        x2 = np.array([vectorize(pearson_matrix(ts)) for ts in v2])
        est = OracleShrinkage().fit(fwd(x1), fwd(x2))
    else:
        subs = subsample_estimates(v1)
        est = SingleSessionShrinkage().fit(fwd(x1), **{k: fwd(v) for k, v in subs.items()})
    shrunk = back(est.transform(fwd(x1)))
    out = Path(args.out)
    (out / "shrunk").mkdir(parents=True, exist_ok=True)
    write_components_csv(out / "components.csv", est.components_, est.weights_, region_ids)
    for s, row in zip(manifest.subjects, shrunk):
        write_edge_csv(out / "shrunk" / f"{s.subject_id}_visit-1.csv", row, region_ids)
    return 0


def _subject_of(path):
    stem = Path(path).stem
    return stem.split("_visit-")[0]


def cmd_reliability(args):
    est_dir, ref_dir = Path(args.estimates), Path(args.reference)
    for d in (est_dir, ref_dir):
        if not d.is_dir():
            raise SchemaError(f"not a directory: {d}")
    refs = {}
    for p in sorted(ref_dir.glob("*.csv")):
        if p.stem.endswith("_matrix"):
            continue
        refs[_subject_of(p)] = p
    method = _parse_list(args.method, METHOD_ALIASES, "method")[0]
    kind = _parse_list(args.kind, KIND_ALIASES, "reliability kind")[0]
    records = []
    region_ids = None
    for p in sorted(est_dir.glob("*.csv")):
        if p.stem.endswith("_matrix"):
            continue
        sid = _subject_of(p)
        if sid not in refs:
            raise ConnShrinkError(f"no reference file for subject '{sid}' in {ref_dir}")
        est, ids = read_edge_csv(p)
        ref, ref_ids = read_edge_csv(refs[sid])
        if ids != ref_ids or (region_ids is not None and ids != region_ids):
            raise SchemaError(f"region ids of {p} do not match")
        region_ids = ids
        records.append(ReliabilityRecord(sid, method, kind, args.scan_length, ape(est, ref, args.guard)))
    if not records:
        raise SchemaError(f"no edge CSVs found in {est_dir}")
    summary = summarize(records, (method, kind, args.scan_length))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_records_csv(out / "records.csv", records, region_ids)
    write_summary_csvs(summary, out, region_ids)
    write_omnibus_csv(out / "omnibus.csv", [summary])
    (out / "summary.json").write_text(
        json.dumps(
            {
                "method": method.value,
                "kind": kind.value,
                "scan_length": args.scan_length,
                "omnibus": None if np.isnan(summary.omnibus) else summary.omnibus,
                "n_subjects": summary.n_subjects,
                "excluded": summary.excluded,
            },
            indent=2,
        )
        + "\n"
    )
    print(format(summary.omnibus, ".6g"))
    return 0


def cmd_sweep(args):
    cfg = build_run_config(args)
    with timed("estimates"):
        if cfg.input_kind == "params":
            params, _ = _load_params(cfg.input, cfg.seed)
            if cfg.scan_lengths != list(params.scan_lengths):
                params = GenerativeParams(**{**params.to_dict(), "scan_lengths": cfg.scan_lengths})
            est = estimates_from_cohort(simulate_parameter_level(params))
        else:
            manifest = load_manifest(cfg.input)
            maps = load_spatial_maps(cfg.maps) if cfg.maps else None
            need_v2 = Method.OracleShrink in cfg.methods or Kind.Intersession in cfg.reliability_kinds
            if need_v2:
                missing = [s.subject_id for s in manifest.subjects if s.visit(2) is None]
                if missing:
                    raise MissingVisit(
                        "oracle shrinkage / intersession reliability need visit 2; "
                        f"missing for {', '.join(missing)}"
                    )
            est = estimates_from_manifest(
                manifest,
                cfg.scan_lengths,
                maps=maps,
                threads=cfg.threads,
                visit2=need_v2,
                subsamples=Method.SingleSessionShrink in cfg.methods,
            )
    with timed("shrinkage and reliability"):
        result = run_sweep(
            est, cfg.methods, cfg.reliability_kinds, guard=cfg.guard, fisher=cfg.fisher_z
        )
    with timed("writing outputs"):
        write_sweep(result, cfg.output_dir, cfg.echo())
    for s in result.summaries:
        print(f"{s.method.value:>22} {s.kind.value:>12} l={s.scan_length:<6d} omnibus APE={s.omnibus:.4f}")
    return 0


REPORT_COLUMNS = ("method", "kind", "scan_length", "level", "key", "value")


def cmd_report(args):
    run = Path(args.run_dir)
    summary_path = run / "run_summary.json"
    if not run.is_dir() or not summary_path.is_file():
        raise MissingRun(f"no completed sweep in {run}")
    doc = json.loads(summary_path.read_text())
    out = Path(args.out) if args.out else run / "report.csv"
    rows = []
    with open(run / doc["omnibus_file"], newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append((r["method"], r["kind"], r["scan_length"], "omnibus", "all", r["median_ape"]))
    for cell in doc["cells"]:
        tag = (cell["method"], cell["kind"], str(cell["scan_length"]))
        with open(run / cell["seed_file"], newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append(tag + ("seed", r["region"], r["median_ape"]))
        with open(run / cell["edge_file"], newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append(tag + ("edge", f"{r['region_a']}|{r['region_b']}", r["median_ape"]))
    for comp in doc["components"]:
        rows.append(
            (comp["method"], "", str(comp["scan_length"]), "median_lambda", "all",
             format(comp["median_lambda"], ".17g"))
        )
    with open(out, "w", newline="") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(r) + "\n")
    print(out)
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="connshrink", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log timings to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic time-series cohort")
    s.add_argument("params", help="YAML generative parameters")
    s.add_argument("--out", required=True)
    s.add_argument("--t-total", type=int, default=None, help="volumes per visit (default: longest scan length)")
    s.add_argument("--seed", type=int, default=None, help="overrides the params seed")
    s.add_argument("--tr", type=float, default=0.72, help="sampling interval in seconds")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("connectivity", help="Pearson edge CSVs per subject-visit")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--scan-length", type=int, default=None)
    s.add_argument("--visit", choices=("1", "2", "all"), default="all")
    s.add_argument("--maps", default=None, help="spatial maps CSV; inputs are then T x V data")
    s.add_argument("--fisher-z", action="store_true")
    s.add_argument("--full-matrix", action="store_true", help="also write the Q x Q matrix")
    s.set_defaults(func=cmd_connectivity)

    s = sub.add_parser("shrink", help="variance components and shrunk visit-1 estimates")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--method", default="oracle", help="oracle or single_session")
    s.add_argument("--scan-length", type=int, default=None)
    s.add_argument("--maps", default=None)
    s.add_argument("--fisher-z", action="store_true")
    s.set_defaults(func=cmd_shrink)

    s = sub.add_parser("reliability", help="APE of edge CSVs against reference edge CSVs")
    s.add_argument("--estimates", required=True, help="directory of <subject>_visit-N.csv edge files")
    s.add_argument("--reference", required=True, help="directory of reference edge files")
    s.add_argument("--out", required=True)
    s.add_argument("--method", default="raw", help="label for the records")
    s.add_argument("--kind", default="intersession", help="label for the records")
    s.add_argument("--scan-length", type=int, default=0, help="label for the records")
    s.add_argument("--guard", type=float, default=DEFAULT_GUARD)
    s.set_defaults(func=cmd_reliability)

    s = sub.add_parser("sweep", help="scan-length sweep over methods and reliability kinds")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--manifest", default=None)
    src.add_argument("--params", default=None, help="simulate a parameter-level cohort instead")
    s.add_argument("--config", default=None, help="YAML run config")
    s.add_argument("--out", default=None)
    s.add_argument("--scan-lengths", default=None, help="comma separated, e.g. 300,600,900")
    s.add_argument("--methods", default=None, help="raw,single_session,oracle")
    s.add_argument("--kinds", default=None, help="intersession,endpoint")
    s.add_argument("--guard", type=float, default=None)
    s.add_argument("--fisher-z", action="store_true")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("--maps", default=None)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", help="long-format CSV of a finished sweep")
    s.add_argument("run_dir")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ConnShrinkError, FileNotFoundError, FileExistsError) as exc:
        print(f"connshrink {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
