import csv
import json

import pytest

from dyadrep.cli import EXIT_CONFIG, EXIT_OK, main, resolve_config

SMALL = {"grid": {"L": 5}, "corpus": {"per_family": 1}, "trials": 20, "shifts": 3, "pi_levels": [3, 4],
         "figures": False}


def _run(tmp_path, cmd, cfg, *extra, name="out"):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / name
    return main([cmd, "--config", str(path), "--out", str(out), *extra]), out


def test_decompose_exit_and_files(tmp_path):
    code, out = _run(tmp_path, "decompose", SMALL)
    assert code == EXIT_OK
    assert (out / "decompose.csv").exists() and (out / "config.json").exists()
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["grid"]["L"] == 5 and echoed["kernel"] == "beurling-re"


def test_decompose_deterministic(tmp_path):
    _, a = _run(tmp_path, "decompose", SMALL, name="a")
    _, b = _run(tmp_path, "decompose", SMALL, name="b")
    assert (a / "decompose.csv").read_bytes() == (b / "decompose.csv").read_bytes()


def test_zero_kernel_report(tmp_path):
    code, out = _run(tmp_path, "decompose", {**SMALL, "kernel": "zero"})
    assert code == EXIT_OK
    rows = list(csv.DictReader((out / "decompose.csv").open()))
    assert rows and all(float(r["total"]) == 0.0 and float(r["reference"]) == 0.0 for r in rows)


def test_config_errors(tmp_path):
    assert _run(tmp_path, "decompose", {"kernel": "nope"})[0] == EXIT_CONFIG
    assert _run(tmp_path, "decompose", {"grid": {"L": 99}})[0] == EXIT_CONFIG
    assert _run(tmp_path, "decompose", {"unknown": 1})[0] == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["decompose", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["decompose", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_overrides_apply():
    cfg = resolve_config(None, {"eta": 0.25, "grid": {"r": 6}, "seed": 3})
    assert cfg["eta"] == 0.25 and cfg["grid"]["r"] == 6 and cfg["grid"]["L"] == 6 and cfg["seed"] == 3


def test_sparse_on_constants(tmp_path, capsys):
    cfg = {**SMALL, "corpus": {"families": ["constants"], "per_family": 1}}
    code, out = _run(tmp_path, "sparse", cfg, "--eta", "0.5")
    assert code == EXIT_OK
    assert "S = {Q0}" in capsys.readouterr().out
    rows = list(csv.DictReader((out / "sparse.csv").open()))
    assert rows[0]["cubes"] == "1"


def test_pi_good_prints_interval(tmp_path, capsys):
    code, out = _run(tmp_path, "pi-good", {**SMALL, "grid": {"L": 6, "S": -2}}, "--r", "7", "--trials", "200")
    assert code == EXIT_OK
    assert "3-sigma interval" in capsys.readouterr().out
    assert (out / "pi_good.csv").exists()


def test_coeff_bounds_and_extract(tmp_path):
    code, out = _run(tmp_path, "coeff-bounds", SMALL, name="cb")
    assert code == EXIT_OK
    assert json.loads((out / "coeff_bounds.json").read_text())["passed"]
    code, out = _run(tmp_path, "extract", SMALL, name="ex")
    assert code == EXIT_OK and (out / "extract.csv").exists()


def test_norms(tmp_path):
    code, out = _run(tmp_path, "norms", SMALL)
    assert code == EXIT_OK
    assert json.loads((out / "norms.json").read_text())["stable"]


def test_figures_written(tmp_path):
    cfg = {**SMALL, "figures": True, "corpus": {"families": ["spikes"], "per_family": 2}}
    code, out = _run(tmp_path, "sparse", cfg)
    assert code == EXIT_OK and (out / "sparse_family.png").stat().st_size > 0


@pytest.mark.slow
def test_corollary_command(tmp_path):
    cfg = {**SMALL, "corpus": {"families": ["indicators"], "per_family": 2}, "eps_ladder": [0.0625, 0.125]}
    code, out = _run(tmp_path, "corollary", cfg)
    assert code == EXIT_OK
    assert json.loads((out / "corollary.json").read_text())["max_ratio"] <= 1.0
