import json
import subprocess
import sys

import numpy as np
import pytest

from trackmapper.cli import EXIT_EMISSION, EXIT_INPUT, EXIT_OK, EXIT_USAGE, main
from trackmapper.trackmap import load_map


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run("simulate", "--seed", 1, "--paper-replication", "--out", out) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def opt_dir(sim_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("opt")
    code = run("optimize", "--initial", sim_dir / "initial.json", "--measurements", sim_dir / "measurements.csv", "--out", out)
    assert code == EXIT_OK
    return out


def _snapshot(directory):
    files = {}
    for p in sorted(directory.iterdir()):
        text = p.read_text()
        if p.name == "manifest.json":
            data = json.loads(text)
            data.pop("timing")
            text = json.dumps(data, sort_keys=True)
        files[p.name] = text
    return files


def test_simulate_outputs(sim_dir):
    names = sorted(p.name for p in sim_dir.iterdir())
    assert names == ["initial.json", "manifest.json", "measurements.csv", "reference_map.json"]
    manifest = json.loads((sim_dir / "manifest.json").read_text())
    assert manifest["seed"] == 1 and manifest["config"]["simulation"]["paper_replication"] is True
    assert {"finished_utc", "wall_clock_s"} <= set(manifest["timing"])
    assert len((sim_dir / "measurements.csv").read_text().splitlines()) == 438


def test_simulate_seed_from_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"simulation": {"rng_seed": 5, "noise_sigma": 2.0}}))
    assert run("simulate", "--config", cfg, "--out", tmp_path / "a") == EXIT_OK
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 5 and manifest["config"]["simulation"]["noise_sigma"] == 2.0


def test_optimize_outputs(opt_dir):
    names = sorted(p.name for p in opt_dir.iterdir())
    assert names == ["lm_log.tsv", "manifest.json", "naive_map.json", "optimized_map.json"]
    log = (opt_dir / "lm_log.tsv").read_text().splitlines()
    assert log[0] == "iteration\tF\tstep_norm\tlambda\taccepted"
    assert log[1].startswith("0\t")
    costs = [float(r.split("\t")[1]) for r in log[1:] if r.endswith("\t1")]
    assert all(a >= b for a, b in zip(costs, costs[1:]))
    m = load_map(opt_dir / "optimized_map.json")
    assert [e.shape.value for e in m.elements] == ["st", "ta", "ca", "ta", "st", "ta", "ca", "ta", "st"]
    manifest = json.loads((opt_dir / "manifest.json").read_text())
    assert manifest["warnings"] == []


def test_optimize_deterministic(sim_dir, opt_dir, tmp_path):
    argv = ["optimize", "--initial", sim_dir / "initial.json", "--measurements", sim_dir / "measurements.csv"]
    assert run(*argv, "--out", tmp_path) == EXIT_OK
    first = _snapshot(tmp_path)
    assert run(*argv, "--out", tmp_path) == EXIT_OK
    assert _snapshot(tmp_path) == first
    # a different output directory changes only the recorded argv
    other = _snapshot(opt_dir)
    assert {k: v for k, v in other.items() if k != "manifest.json"} == {k: v for k, v in first.items() if k != "manifest.json"}


def test_optimize_zero_iterations(sim_dir, tmp_path):
    code = run("optimize", "--initial", sim_dir / "initial.json", "--measurements", sim_dir / "measurements.csv", "--max-iters", 0, "--out", tmp_path)
    assert code == EXIT_OK
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["warnings"]
    assert (tmp_path / "optimized_map.json").read_text() == (tmp_path / "naive_map.json").read_text()


def test_optimize_emission_refused(sim_dir, tmp_path, capsys):
    code = run(
        "optimize", "--initial", sim_dir / "initial.json", "--measurements", sim_dir / "measurements.csv",
        "--sigma-pos", 1000, "--sigma-head", 10, "--out", tmp_path,
    )
    assert code == EXIT_EMISSION
    assert "gap" in capsys.readouterr().err
    assert not (tmp_path / "optimized_map.json").exists()


def test_optimize_corrupt_csv(sim_dir, tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    lines = (sim_dir / "measurements.csv").read_text().splitlines()
    lines[4] = "3,oops,1.0,0.01,0,0.01,5"
    bad.write_text("\n".join(lines) + "\n")
    code = run("optimize", "--initial", sim_dir / "initial.json", "--measurements", bad, "--out", tmp_path / "o")
    assert code == EXIT_INPUT
    assert "line 5" in capsys.readouterr().err


def test_evaluate_compare(sim_dir, opt_dir, tmp_path, capsys):
    code = run(
        "evaluate", "--candidate", opt_dir / "optimized_map.json", "--reference", sim_dir / "reference_map.json",
        "--compare", "--measurements", sim_dir / "measurements.csv", "--out", tmp_path,
    )
    assert code == EXIT_OK
    table = capsys.readouterr().out
    assert table.startswith("metric\toptimized\tdatapoint")
    report = json.loads((tmp_path / "eval_report.json").read_text())
    base = json.loads((tmp_path / "baseline_report.json").read_text())
    assert report["field_count"] == 27 and base["field_count"] > 8000
    assert report["mean_abs_error_m"] < base["mean_abs_error_m"]
    assert (tmp_path / "error_profile.tsv").read_text().startswith("s_m\tabs_err_m\n")
    assert (tmp_path / "comparison.tsv").exists() and (tmp_path / "baseline_profile.tsv").exists()


def test_evaluate_compare_needs_measurements(sim_dir, tmp_path):
    with pytest.raises(SystemExit) as info:
        run("evaluate", "--candidate", sim_dir / "reference_map.json", "--reference", sim_dir / "reference_map.json", "--compare", "--out", tmp_path)
    assert info.value.code == EXIT_USAGE


def test_export_polyline_and_table(sim_dir, tmp_path):
    assert run("export", "--map", sim_dir / "reference_map.json", "--out", tmp_path / "p") == EXIT_OK
    rows = (tmp_path / "p" / "polyline.tsv").read_text().splitlines()
    assert rows[0] == "s_m\txi_m\teta_m\tphi_rad\tkappa_per_m"
    assert len(rows) - 1 == 4361
    assert run("export", "--map", sim_dir / "reference_map.json", "--table", "--out", tmp_path / "t") == EXIT_OK
    lines = (tmp_path / "t" / "table.csv").read_text().splitlines()
    assert lines[0].startswith("# anchor") and lines[1] == "id,shape,length_m,radius_m"
    assert len(lines[2:]) == 9


def test_export_polyline_evaluates_as_reference(sim_dir, tmp_path):
    run("export", "--map", sim_dir / "reference_map.json", "--out", tmp_path / "p")
    code = run("evaluate", "--candidate", sim_dir / "reference_map.json", "--reference", tmp_path / "p" / "polyline.tsv", "--out", tmp_path / "e")
    assert code == EXIT_OK
    report = json.loads((tmp_path / "e" / "eval_report.json").read_text())
    assert report["max_abs_error_m"] <= 1e-6


def test_export_bad_spacing(sim_dir, tmp_path):
    with pytest.raises(SystemExit) as info:
        run("export", "--map", sim_dir / "reference_map.json", "--spacing", -1, "--out", tmp_path)
    assert info.value.code == EXIT_USAGE


def test_missing_out_is_usage_error(sim_dir):
    with pytest.raises(SystemExit) as info:
        run("export", "--map", sim_dir / "reference_map.json")
    assert info.value.code == EXIT_USAGE


def test_missing_input_file(tmp_path):
    assert run("export", "--map", tmp_path / "nope.json", "--out", tmp_path) == EXIT_INPUT


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "trackmapper", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip().startswith("trackmapper")
