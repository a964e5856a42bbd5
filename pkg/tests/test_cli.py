import json
import subprocess
import sys

import numpy as np
import pytest

from proxsmooth.cli import (
    DampingSettings,
    QuadratureConfig,
    compare_runs,
    config_from_dict,
    load_config,
    main,
    run_experiment,
)
from proxsmooth.errors import ParseError, ValidationError

OUTPUTS = ("trajectory.csv", "marginals.csv", "trace.jsonl", "summary.json")


def write_config(path, **cfg):
    path.write_text(json.dumps(cfg))
    return path


def run_cli(tmp_path, name, **cfg):
    cfg_path = write_config(tmp_path / f"{name}.json", **cfg)
    out = tmp_path / name
    rc = main(["run", str(cfg_path), "--output-dir", str(out), "--quiet"])
    return rc, out


# ---------------------------------------------------------------- config


def test_minimal_config_gets_defaults(tmp_path):
    cfg = load_config(write_config(tmp_path / "c.json", model="linear_gaussian", horizon=10, smoother="rts"))
    assert cfg.seed == 0 and cfg.expansion == "gslr" and cfg.max_iters == 50 and cfg.conv_tol == 1e-6
    assert cfg.quadrature == QuadratureConfig() and cfg.damping == DampingSettings()


@pytest.mark.parametrize(
    "raw, field",
    [
        ({"fooo": 1}, "fooo"),
        ({"damping": {"epsilon": -1}}, "damping.epsilon"),
        ({"damping": {"alpah_min": 1}}, "damping.alpah_min"),
        ({"quadrature": {"kind": "smolyak"}}, "quadrature.kind"),
        ({"model_params": {"nope": 1}}, "model_params.nope"),
        ({"horizon": 0}, "horizon"),
        ({"smoother": "ukf"}, "smoother"),
        ({"conv_tol": 0}, "conv_tol"),
        ({"model": "pendulum", "smoother": "rts"}, "smoother"),
        ({"model": "pendulum", "expansion": "exact"}, "expansion"),
    ],
)
def test_validation_names_the_field(raw, field):
    base = {"model": "linear_gaussian", "horizon": 10, "smoother": "fpvs"}
    with pytest.raises(ValidationError) as info:
        config_from_dict({**base, **raw})
    assert info.value.field == field


def test_missing_required_key():
    with pytest.raises(ValidationError) as info:
        config_from_dict({"model": "pendulum", "smoother": "fpvs"})
    assert info.value.field == "horizon"


def test_parse_error_has_location(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "model": "pendulum",\n  "horizon": ,\n}')
    with pytest.raises(ParseError, match=r":3:"):
        load_config(p)


def test_cli_returns_one_on_bad_config(tmp_path, capsys):
    rc, _ = run_cli(tmp_path, "bad", model="linear_gaussian", horizon=5, smoother="fpvs", fooo=1)
    assert rc == 1 and "fooo" in capsys.readouterr().err


# ---------------------------------------------------------------- run


def test_rts_run_is_its_own_reference(tmp_path):
    rc, out = run_cli(tmp_path, "rts", model="linear_gaussian", horizon=10, smoother="rts")
    assert rc == 0 and all((out / f).exists() for f in OUTPUTS)
    s = json.loads((out / "summary.json").read_text())
    assert s["final_rmse_vs_rts"] == 0.0 and s["converged"] and s["iters"] == 0


@pytest.mark.parametrize("smoother", ["fpvs", "rpvs", "hpvs"])
def test_smoothers_match_rts_with_defaults(tmp_path, smoother):
    rc, out = run_cli(tmp_path, smoother, model="linear_gaussian", horizon=20, smoother=smoother, seed=3)
    assert rc == 0
    s = json.loads((out / "summary.json").read_text())
    assert s["final_rmse_vs_rts"] <= 1e-6
    trace = [json.loads(line) for line in (out / "trace.jsonl").read_text().splitlines()]
    assert len(trace) == s["iters"]
    for rec in trace:
        assert {"iter", "beta", "kl", "epsilon", "log_Z_boundary", "dual_value", "max_mean_change", "wall_ms"} <= rec.keys()
        assert rec["kl"] <= (1 + 1e-2) * rec["epsilon"]
        assert rec["wall_ms"] is None


def test_marginals_csv_layout(tmp_path):
    rc, out = run_cli(tmp_path, "p", model="pendulum", horizon=5, smoother="fpvs", max_iters=2)
    assert rc in (0, 2)
    lines = (out / "marginals.csv").read_text().splitlines()
    assert lines[0] == "k,mean0,mean1,var0,var1" and len(lines) == 7
    assert json.loads((out / "summary.json").read_text())["final_rmse_vs_rts"] is None


def test_max_iters_exit_code(tmp_path):
    rc, out = run_cli(tmp_path, "short", model="pendulum", horizon=20, smoother="fpvs", max_iters=1)
    assert rc == 2
    assert not json.loads((out / "summary.json").read_text())["converged"]


def test_error_run_writes_diagnostic(tmp_path):
    cfg = config_from_dict(
        {
            "model": "linear_gaussian",
            "horizon": 3,
            "smoother": "fpvs",
            "model_params": {"Q": -1.0},
            "output_dir": str(tmp_path / "err"),
        }
    )
    assert run_experiment(cfg) == 1
    diag = json.loads((tmp_path / "err" / "error.json").read_text())
    assert diag["error"] == "DomainError"


@pytest.mark.parametrize(
    "cfg",
    [
        {"model": "linear_gaussian", "horizon": 10, "smoother": "fpvs"},
        {"model": "stochastic_volatility", "horizon": 10, "smoother": "hpvs", "expansion": "fourier_hermite"},
        {"model": "pendulum", "horizon": 15, "smoother": "rpvs", "max_iters": 3},
    ],
    ids=["linear", "sv", "pendulum"],
)
def test_runs_are_byte_identical(tmp_path, cfg):
    _, a = run_cli(tmp_path, "a", **cfg)
    _, b = run_cli(tmp_path, "b", **cfg)
    for f in OUTPUTS:
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_seed_flag_overrides_config(tmp_path):
    p = write_config(tmp_path / "c.json", model="linear_gaussian", horizon=5, smoother="rts", seed=0)
    main(["run", str(p), "--output-dir", str(tmp_path / "s0"), "--quiet"])
    main(["run", str(p), "--output-dir", str(tmp_path / "s9"), "--seed", "9", "--quiet"])
    assert (tmp_path / "s0" / "trajectory.csv").read_bytes() != (tmp_path / "s9" / "trajectory.csv").read_bytes()
    assert json.loads((tmp_path / "s9" / "summary.json").read_text())["config"]["seed"] == 9


# ---------------------------------------------------------------- compare


def test_compare_smoothers_agree(tmp_path):
    paths = []
    for sm in ("fpvs", "rpvs", "hpvs"):
        _, out = run_cli(tmp_path, sm, model="linear_gaussian", horizon=10, smoother=sm, seed=1)
        paths.append(out / "summary.json")
    table = compare_runs(paths).splitlines()
    header = table[0].split(",")
    assert len(table) == 4
    cols = [header.index(f"rmse_vs_run{j}") for j in range(3)]
    for row in table[1:]:
        vals = row.split(",")
        assert all(float(vals[c]) <= 1e-6 for c in cols)


def test_compare_errors(tmp_path):
    _, a = run_cli(tmp_path, "a", model="linear_gaussian", horizon=5, smoother="rts")
    _, b = run_cli(tmp_path, "b", model="linear_gaussian", horizon=6, smoother="rts")
    with pytest.raises(ValidationError):
        compare_runs([a / "summary.json"])
    with pytest.raises(ValidationError) as info:
        compare_runs([a / "summary.json", b / "summary.json"])
    assert info.value.field == "horizon"
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps({"horizon": 5}))
    with pytest.raises(ValidationError):
        compare_runs([a / "summary.json", broken])


def test_compare_cli_writes_file(tmp_path):
    _, a = run_cli(tmp_path, "a", model="linear_gaussian", horizon=5, smoother="rts")
    _, b = run_cli(tmp_path, "b", model="linear_gaussian", horizon=5, smoother="fpvs")
    dest = tmp_path / "cmp.csv"
    assert main(["compare", str(a / "summary.json"), str(b / "summary.json"), "-o", str(dest)]) == 0
    assert dest.read_text().startswith("run,smoother")
    assert main(["compare", str(a / "summary.json")]) == 1


def test_console_entry_point(tmp_path):
    p = write_config(tmp_path / "c.json", model="linear_gaussian", horizon=3, smoother="rts")
    proc = subprocess.run(
        [sys.executable, "-m", "proxsmooth.cli", "run", str(p), "--output-dir", str(tmp_path / "o")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0 and "converged" in proc.stdout
    means = np.loadtxt(tmp_path / "o" / "marginals.csv", delimiter=",", skiprows=1)
    assert means.shape == (4, 3)
