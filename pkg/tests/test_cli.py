import csv
import json

import pytest
from click.testing import CliRunner

from wcl_lab.cli import ConfigError, load_config, main, strictly_decreasing, validate


def invoke(*args, env=None):
    return CliRunner().invoke(main, list(args), env=env)


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# --- validation -------------------------------------------------------------------

def test_empty_sweep_rejected(tmp_path):
    res = invoke("wcl-sweep", "--config", write(tmp_path, "lambdas: []\n"),
                 "--out", str(tmp_path / "o"))
    assert res.exit_code == 2
    assert "lambdas: sweep list must be non-empty" in res.output
    assert not (tmp_path / "o").exists()


def test_negative_lambda_diagnostic():
    cfg = load_config("wcl-sweep", None)
    cfg["lambdas"] = [0.5, -0.1]
    assert any("lambdas" in d and "-0.1" in d for d in validate(cfg))


def test_missing_model_diagnostic():
    cfg = load_config("davies", None)
    cfg["model"] = "/nonexistent/thing.model"
    diags = validate(cfg)
    assert len(diags) == 1 and diags[0].startswith("model:")


def test_nonpositive_tolerance_diagnostic():
    cfg = load_config("davies", None)
    cfg["tolerances"] = {"residual": 0}
    assert validate(cfg) == ["tolerances.residual: must be positive"]


def test_recurrence_guard_suggests_modes():
    cfg = load_config("wcl-sweep", None)
    cfg.update(lambdas=[0.1], times=[1.0], modes=[8])
    diags = validate(cfg)
    assert len(diags) == 1
    # pieces are 1 wide; horizon 100 against half of 2 pi / (1 / 8) needs N >= ceil(100 / pi) + 1
    assert "N = 8" in diags[0] and "use N >= 33" in diags[0]
    cfg["modes"] = [33]
    assert validate(cfg) == []


def test_bundled_defaults_validate():
    from wcl_lab.cli import EXPERIMENTS
    for exp in EXPERIMENTS:
        assert validate(load_config(exp, None)) == [], exp


def test_yaml_error_has_line(tmp_path):
    path = write(tmp_path, "model: two_level\nlambdas: [0.5,\n  0.3\ntimes: [1]\n")
    with pytest.raises(ConfigError, match=r"cfg\.yaml:\d+"):
        load_config("wcl-sweep", path)
    res = invoke("wcl-sweep", "--config", path)
    assert res.exit_code == 2 and "YAML error" in res.output


def test_model_file_error_reaches_diagnostics(tmp_path):
    bad = write(tmp_path, "[system]\nhamiltonian = [[0, 0], [0, 1]]\n", "bad.model")
    res = invoke("davies", "--model", bad, "--out", str(tmp_path / "o"))
    assert res.exit_code == 2 and "config: model:" in res.output


def test_strictly_decreasing():
    assert strictly_decreasing([3, 2, 1]) and strictly_decreasing([1.0])
    assert not strictly_decreasing([3, 3, 1])


# --- runs ------------------------------------------------------------------------------

def test_davies_zero_coupling(tmp_path):
    out = tmp_path / "zc"
    res = invoke("davies", "--model", "zero_coupling", "--out", str(out))
    assert res.exit_code == 0, res.output
    rows = read_csv(out / "davies.csv")
    assert len(rows) == 8
    assert all(float(r["re"]) == 0 and float(r["im"]) == 0 and float(r["residual"]) == 0
               for r in rows)


def test_manifest_contents(tmp_path):
    out = tmp_path / "p"
    res = invoke("pairings", "--out", str(out), "--deterministic")
    assert res.exit_code == 0 and "PASS pairing_counts" in res.output
    man = json.loads((out / "manifest.json").read_text())
    for key in ("config_hash", "model_hash", "version", "files", "wall_clock_s", "criteria",
                "seed", "passed"):
        assert key in man
    assert man["files"] == ["pairings.csv"] and man["passed"] is True
    rows = read_csv(out / "pairings.csv")
    assert [int(r["pairings"]) for r in rows] == [1, 1, 3, 15, 105, 945]


def test_pairings_brackets(tmp_path):
    res = invoke("pairings", "--brackets", "--out", str(tmp_path))
    lines = [ln for ln in res.output.splitlines() if ln.startswith("n=2 ")]
    assert lines == ["n=2 (1,2)(3,4)", "n=2 (1,3)(2,4)", "n=2 (1,4)(2,3)"]


def test_output_root_from_environment(tmp_path):
    res = invoke("pairings", env={"WCL_LAB_OUT": str(tmp_path)})
    assert res.exit_code == 0
    assert (tmp_path / "pairings" / "pairings.csv").exists()


def test_acceptance_failure_exit_status(tmp_path):
    # an agreement tolerance below the method gap fails the criterion, not the run
    path = write(tmp_path, "tolerances: {residual: 1.0e-8, agreement: 1.0e-12}\n")
    res = invoke("davies", "--config", path, "--out", str(tmp_path / "o"))
    assert res.exit_code == 1 and "FAIL method_agreement" in res.output
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["passed"] is False and man["criteria"]["dissipativity"] is True


def test_wcl_sweep_default(tmp_path):
    res = invoke("wcl-sweep", "--out", str(tmp_path))
    assert res.exit_code == 0, res.output
    rows = read_csv(tmp_path / "wcl-sweep.csv")
    assert list(rows[0]) == ["lambda", "N", "t", "error_norm", "bound"]
    sups = [max(float(r["error_norm"]) for r in rows if float(r["lambda"]) == lam)
            for lam in (0.5, 0.35, 0.25)]
    assert strictly_decreasing(sups)
