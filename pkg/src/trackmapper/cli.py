"""Command-line pipeline: simulate, optimize, evaluate, export.

Every command computes its outputs in memory first and then writes each file
via temp-file-and-rename, finishing with ``manifest.json``. A failing
command leaves no outputs behind.

Exit codes: 0 success, 1 input or I/O error, 2 usage error, 3 emission
refused because continuity gaps stayed too large.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import EmissionRefusedError, MapParseError, TrackMapError
from .estimation import (
    SIGMA_HEAD,
    SIGMA_POS,
    AssignmentSet,
    LMConfig,
    Measurement,
    assign_nearest,
    load_measurements,
    measurements_to_csv,
    optimize_map,
)
from .evaluation import evaluate
from .simulation import SimConfig, build_datapoint_map, simulate_dataset
from .trackmap import (
    CompactTrackMap,
    atomic_write_text,
    initial_to_dict,
    load_initial,
    load_map,
    map_to_dict,
    map_to_table_csv,
    naive_concatenation,
    reparameterize,
)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_USAGE = 2
EXIT_EMISSION = 3


class UsageError(Exception):
    pass


def _json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=True) + "\n"


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MapParseError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise MapParseError(f"{path}: config must be a JSON object")
    unknown = sorted(set(data) - {"simulation", "lm", "continuity", "evaluation"})
    if unknown:
        raise MapParseError(f"{path}: unknown config sections {unknown}")
    return data


def _section(config: dict, name: str) -> dict:
    sec = config.get(name, {})
    if not isinstance(sec, dict):
        raise MapParseError(f"config.{name}: expected an object")
    return dict(sec)


def _override(base: dict, **flags) -> dict:
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _write_outputs(out_dir: Path, files: dict[str, str], manifest: dict, started: float) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        atomic_write_text(out_dir / name, text)
    manifest = dict(manifest)
    manifest["outputs"] = sorted(files)
    manifest["version"] = __version__
    # everything outside "timing" is a pure function of the command line and inputs
    manifest["timing"] = {
        "finished_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "wall_clock_s": round(time.perf_counter() - started, 3),
    }
    atomic_write_text(out_dir / "manifest.json", _json(manifest))


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args, config: dict) -> int:
    started = time.perf_counter()
    sim = _override(
        _section(config, "simulation"),
        rng_seed=args.seed,
        noise_sigma=args.noise_sigma,
        sample_spacing=args.sample_spacing,
        length_rel_sigma=args.length_rel_sigma,
        radius_rel_sigma=args.radius_rel_sigma,
        heading_sigma_deg=args.heading_sigma_deg,
        start_pos_sigma=args.start_pos_sigma,
    )
    if args.paper_replication:
        sim["paper_replication"] = True
    try:
        sim_config = SimConfig(**sim)
    except TypeError as exc:
        raise MapParseError(f"config.simulation: {exc}") from exc
    ds = simulate_dataset(sim_config)
    files = {
        "reference_map.json": _json(map_to_dict(ds.reference)),
        "measurements.csv": measurements_to_csv(ds.measurements),
        "initial.json": _json(initial_to_dict(ds.initial)),
    }
    manifest = {
        "command": "simulate",
        "argv": args.argv,
        "seed": sim_config.rng_seed,
        "config": {"simulation": sim_config.to_dict()},
        "inputs": {},
        "warnings": [],
    }
    _write_outputs(Path(args.out), files, manifest, started)
    print(f"wrote {len(ds.measurements)} measurements and {len(ds.initial)} initial elements to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# optimize


def _lm_log_tsv(result) -> str:
    rep = result.report
    lines = ["iteration\tF\tstep_norm\tlambda\taccepted", f"0\t{rep.initial_cost:.10g}\t0\tnan\t1"]
    for it in rep.iterations:
        lines.append(f"{it.iteration}\t{it.cost:.10g}\t{it.step_norm:.6g}\t{it.damping:.6g}\t{int(it.accepted)}")
    return "\n".join(lines) + "\n"


def cmd_optimize(args, config: dict) -> int:
    started = time.perf_counter()
    lm_dict = _override(
        _section(config, "lm"),
        max_iter=args.max_iters,
        rel_step_tol=args.rel_step_tol,
        tau=args.tau,
        scaling=args.scaling,
    )
    try:
        lm = LMConfig.from_dict(lm_dict)
    except (TypeError, ValueError) as exc:
        raise MapParseError(f"config.lm: {exc}") from exc
    cont = _override(
        {"sigma_pos": SIGMA_POS, "sigma_head": SIGMA_HEAD} | _section(config, "continuity"),
        sigma_pos=args.sigma_pos,
        sigma_head=args.sigma_head,
    )

    initial = load_initial(args.initial)
    assignments = load_measurements(args.measurements, require_track_id=not args.assign_nearest)
    start = reparameterize(initial)
    warnings = []
    if args.assign_nearest:
        ids = assign_nearest(start, np.array([m.z for m in assignments]))
        assignments = AssignmentSet(Measurement(t, m.z, m.omega, m.s_true) for t, m in zip(ids, assignments))
        warnings.append("measurements re-assigned to the nearest initial element")

    try:
        result = optimize_map(start, assignments, lm, cont["sigma_pos"], cont["sigma_head"], not args.no_extent_fit)
    except EmissionRefusedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for g in exc.gaps:
            print(
                f"  gap before element {g.element_id}: {g.position:.4f} m, {math.degrees(g.dphi):.4f} deg",
                file=sys.stderr,
            )
        return EXIT_EMISSION

    rep = result.report
    if lm.max_iter <= 0:
        warnings.append("max_iter <= 0: optimized map is the naive concatenation of the initial elements")
    elif not rep.converged:
        warnings.append(f"no convergence after {rep.n_iterations} iterations; result emitted anyway")
    files = {
        "naive_map.json": _json(map_to_dict(naive_concatenation(start))),
        "optimized_map.json": _json(map_to_dict(result.track_map)),
        "lm_log.tsv": _lm_log_tsv(result),
    }
    manifest = {
        "command": "optimize",
        "argv": args.argv,
        "seed": args.seed,
        "config": {"lm": dataclasses.asdict(lm), "continuity": cont, "extent_fit": not args.no_extent_fit},
        "inputs": {"initial": str(args.initial), "measurements": str(args.measurements)},
        "result": {
            "termination": rep.termination,
            "converged": rep.converged,
            "iterations": rep.n_iterations,
            "initial_cost": rep.initial_cost,
            "final_cost": rep.cost,
            "max_gap_m": result.max_gaps[0],
            "max_gap_rad": result.max_gaps[1],
        },
        "warnings": warnings,
    }
    _write_outputs(Path(args.out), files, manifest, started)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{rep.termination} after {rep.n_iterations} iterations, F {rep.initial_cost:.6g} -> {rep.cost:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _load_polyline_tsv(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise MapParseError(f"{path}: empty polyline file")
    header = lines[0].split("\t")
    if "xi_m" not in header or "eta_m" not in header:
        raise MapParseError(f"{path}: line 1: polyline TSV needs xi_m and eta_m columns")
    ix, iy = header.index("xi_m"), header.index("eta_m")
    pts = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        try:
            pts.append((float(cols[ix]), float(cols[iy])))
        except (IndexError, ValueError) as exc:
            raise MapParseError(f"{path}: line {lineno}: {exc}") from exc
    if not pts:
        raise MapParseError(f"{path}: polyline has no points")
    return np.array(pts)


def _load_geometry(path):
    """A compact map (.json / .csv) or a polyline (.tsv)."""
    if Path(path).suffix.lower() == ".tsv":
        return _load_polyline_tsv(path)
    track_map = load_map(path)
    if not track_map.elements:
        raise MapParseError(f"{path}: map has no elements")
    return track_map


def _comparison_table(rows: dict[str, dict]) -> str:
    keys = ["mean_abs_error_m", "max_abs_error_m", "frechet_m", "field_count"]
    names = list(rows)
    lines = ["metric\t" + "\t".join(names)]
    for k in keys:
        lines.append(k + "\t" + "\t".join(f"{rows[n][k]:.6g}" for n in names))
    return "\n".join(lines) + "\n"


def cmd_evaluate(args, config: dict) -> int:
    started = time.perf_counter()
    ev = _override({"step": 1.0, "baseline_spacing": 1.0} | _section(config, "evaluation"), step=args.step)
    if not ev["step"] > 0 or not ev["baseline_spacing"] > 0:
        raise UsageError("evaluation step and baseline spacing must be > 0")
    candidate = _load_geometry(args.candidate)
    reference = _load_geometry(args.reference)
    report = evaluate(candidate, reference, ev["step"])
    files = {"eval_report.json": _json(report.to_dict()), "error_profile.tsv": report.profile_tsv()}
    inputs = {"candidate": str(args.candidate), "reference": str(args.reference)}
    if args.compare:
        if args.measurements is None:
            raise UsageError("--compare needs --measurements to build the data-point baseline")
        baseline = build_datapoint_map(load_measurements(args.measurements), ev["baseline_spacing"])
        base_report = evaluate(baseline, reference, ev["step"])
        files["baseline_report.json"] = _json(base_report.to_dict())
        files["baseline_profile.tsv"] = base_report.profile_tsv()
        files["comparison.tsv"] = _comparison_table(
            {"optimized": report.to_dict(), "datapoint": base_report.to_dict()}
        )
        inputs["measurements"] = str(args.measurements)
    manifest = {
        "command": "evaluate",
        "argv": args.argv,
        "seed": args.seed,
        "config": {"evaluation": ev, "compare": bool(args.compare)},
        "inputs": inputs,
        "warnings": [],
    }
    _write_outputs(Path(args.out), files, manifest, started)
    if args.compare:
        sys.stdout.write(files["comparison.tsv"])
    else:
        print(
            f"mean {report.mean_abs_error:.3f} m, max {report.max_abs_error:.3f} m, "
            f"frechet {report.frechet:.3f} m, {report.field_count} fields"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# export


def polyline_tsv(track_map: CompactTrackMap, spacing: float) -> str:
    smp = track_map.sample(spacing)
    lines = ["s_m\txi_m\teta_m\tphi_rad\tkappa_per_m"]
    for row in zip(smp["s"], smp["xi"], smp["eta"], smp["phi"], smp["kappa"]):
        lines.append("\t".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def cmd_export(args, config: dict) -> int:
    started = time.perf_counter()
    if not args.spacing > 0:
        raise UsageError(f"--spacing must be > 0, got {args.spacing}")
    track_map = load_map(args.map)
    if args.table:
        files = {"table.csv": map_to_table_csv(track_map)}
    else:
        files = {"polyline.tsv": polyline_tsv(track_map, args.spacing)}
    manifest = {
        "command": "export",
        "argv": args.argv,
        "seed": args.seed,
        "config": {"spacing": args.spacing, "table": bool(args.table)},
        "inputs": {"map": str(args.map)},
        "warnings": [],
    }
    _write_outputs(Path(args.out), files, manifest, started)
    print(f"wrote {next(iter(files))} to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="random seed for simulate (default 1)")
    p.add_argument("--out", default=d, help="output directory (required)")
    p.add_argument("--config", default=d, help="JSON config with simulation/lm/continuity/evaluation sections")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trackmapper", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate reference map, GNSS fixes and filter-like initial elements")
    _add_globals(p, suppress=True)
    p.add_argument("--paper-replication", action="store_true", help="use the published initial element table")
    p.add_argument("--noise-sigma", type=float, help="per-axis GNSS noise in m (default 10)")
    p.add_argument("--sample-spacing", type=float, help="fix spacing along the track in m (default 10)")
    p.add_argument("--length-rel-sigma", type=float)
    p.add_argument("--radius-rel-sigma", type=float)
    p.add_argument("--heading-sigma-deg", type=float)
    p.add_argument("--start-pos-sigma", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("optimize", help="refine initial elements against measurements")
    _add_globals(p, suppress=True)
    p.add_argument("--initial", required=True, help="initial-element JSON")
    p.add_argument("--measurements", required=True, help="measurement CSV")
    p.add_argument("--max-iters", type=int, help="LM iteration limit (default 100)")
    p.add_argument("--rel-step-tol", type=float, help="relative step stopping limit (default 1e-6)")
    p.add_argument("--tau", type=float, help="initial damping factor (default 1e-3)")
    p.add_argument("--scaling", choices=["none", "more"], help="damping matrix (default none)")
    p.add_argument("--sigma-pos", type=float, help="continuity position sigma in m (default 0.01)")
    p.add_argument("--sigma-head", type=float, help="continuity heading sigma in rad (default 0.001)")
    p.add_argument("--assign-nearest", action="store_true", help="ignore track ids and assign fixes to the nearest element")
    p.add_argument("--no-extent-fit", action="store_true", help="keep the LM ends of the outer straights")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("evaluate", help="compare a map or polyline against a reference")
    _add_globals(p, suppress=True)
    p.add_argument("--candidate", required=True, help="map JSON/CSV or polyline TSV")
    p.add_argument("--reference", required=True, help="map JSON/CSV or polyline TSV")
    p.add_argument("--compare", action="store_true", help="also evaluate the data-point baseline")
    p.add_argument("--measurements", help="measurement CSV for --compare")
    p.add_argument("--step", type=float, help="profile spacing along the candidate in m (default 1)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export", help="write a sampled polyline or the element table")
    _add_globals(p, suppress=True)
    p.add_argument("--map", required=True, help="map JSON/CSV")
    p.add_argument("--spacing", type=float, default=1.0, help="sample spacing in m (default 1)")
    p.add_argument("--table", action="store_true", help="write the element table CSV instead")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    if args.out is None:
        parser.error("--out is required")
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except UsageError as exc:
        parser.error(str(exc))
    except (TrackMapError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
