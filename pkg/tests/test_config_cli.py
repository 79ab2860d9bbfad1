"""Configuration parsing and command-line artifact checks."""

import csv

import numpy as np
import pytest

from mqshmm import cli
from mqshmm.config import (
    ConfigError,
    cell_discretization,
    load_config,
    macro_discretization,
    reference_discretization,
    window_plan,
)
from mqshmm.material import NU0

TINY = """\
[geometry]
grains = 1
cell_n = 4
ref_refine = 1

[time]
t_end_s = 1e-5
n_steps_macro = 4
n_steps_meso = 4

[run]
mode = monolithic
"""


def _write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _read_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def test_defaults_describe_the_benchmark(tmp_path):
    cfg = load_config(_write(tmp_path, ""))
    assert cfg.geometry.grains == 4
    assert cfg.geometry.L == pytest.approx(1000e-6)
    assert cfg.grain_law.alpha == 388.0
    assert cfg.insulation_law.nu == pytest.approx(NU0)
    assert cfg.sigma == 5e6
    assert cfg.source.j_s0 == 1.2e10 and cfg.source.f == 50e3
    assert cfg.t_end == 2e-5
    assert cfg.n_steps_macro == 20 and cfg.meso_ratio == 1
    assert cfg.mode == "wr"
    assert str(cfg.out_dir) == "out"


def test_rejects_unknown_and_malformed_input(tmp_path):
    with pytest.raises(ConfigError, match="unknown key material.foo"):
        load_config(_write(tmp_path, "[material]\nfoo = 1\n"))
    with pytest.raises(ConfigError, match=r"unknown section \[stuff\]"):
        load_config(_write(tmp_path, "[stuff]\nx = 1\n"))
    with pytest.raises(ConfigError, match="run.mode"):
        load_config(_write(tmp_path, "[run]\nmode = fancy\n"))
    with pytest.raises(ConfigError, match="bad value"):
        load_config(_write(tmp_path, "[source]\njs0 = fast\n"))
    with pytest.raises(ConfigError, match="no such config"):
        load_config(tmp_path / "absent.ini")


def test_grid_consistency_checks(tmp_path):
    with pytest.raises(ConfigError, match="multiple of"):
        load_config(_write(tmp_path,
                           "[time]\nn_steps_macro = 20\nn_steps_meso = 30\n"))
    with pytest.raises(ConfigError, match="not divisible"):
        load_config(_write(tmp_path,
                           "[time]\nn_steps_macro = 20\nn_windows = 3\n"))


def test_builders_produce_consistent_instances(tmp_path):
    cfg = load_config(_write(tmp_path, TINY))
    mdisc = macro_discretization(cfg)
    cdisc = cell_discretization(cfg)
    rdisc = reference_discretization(cfg)
    plan = window_plan(cfg)
    assert mdisc.n_gauss == 2                  # one grain block, two triangles
    assert cdisc.total_area == pytest.approx(1.0)
    assert rdisc.n_free > mdisc.n_free
    assert plan.n_macro == 4 and plan.meso_ratio == 1
    assert plan.t_end == pytest.approx(1e-5)


def test_cli_monolithic_artifacts(tmp_path):
    out = tmp_path / "result"
    rc = cli.main(["run", str(_write(tmp_path, TINY)), "--out", str(out)])
    assert rc == 0

    header, rows = _read_csv(out / "losses.csv")
    assert header == ["t", "P"]
    assert len(rows) == 5
    assert all(float(p) >= 0.0 for _, p in rows)

    header, rows = _read_csv(out / "energy.csv")
    assert header == ["t", "W"]
    assert float(rows[0][1]) == 0.0 and float(rows[-1][1]) > 0.0

    fields = out / "fields_1e-05.csv"
    raw = fields.read_text()
    assert raw.endswith("\n") and "," not in raw.splitlines()[0].replace(
        "node,x,y,a_z", "")
    header, rows = _read_csv(fields)
    assert header == ["node", "x", "y", "a_z"]
    mdisc = macro_discretization(load_config(_write(tmp_path, TINY)))
    assert len(rows) == mdisc.mesh.n_nodes
    assert max(abs(float(r[3])) for r in rows) > 0.0


def test_cli_wr_convergence_table(tmp_path):
    out = tmp_path / "wr_out"
    rc = cli.main(["run", str(_write(tmp_path, TINY)), "--mode", "wr",
                   "--out", str(out)])
    assert rc == 0
    header, rows = _read_csv(out / "wr_convergence.csv")
    assert header == ["window", "l", "err_losses", "err_energy",
                      "err_b", "err_dta"]
    assert rows[0][:2] == ["1", "1"]
    assert all(float(v) >= 0.0 for row in rows for v in row[2:])
    assert (out / "losses.csv").is_file() and (out / "energy.csv").is_file()


def test_cli_cost_mode(tmp_path):
    text = TINY.replace("n_steps_macro = 4", "n_steps_macro = 2") \
               .replace("n_steps_meso = 4", "n_steps_meso = 2") \
               .replace("mode = monolithic", "mode = cost")
    out = tmp_path / "cost_out"
    rc = cli.main(["run", str(_write(tmp_path, text)), "--out", str(out)])
    assert rc == 0
    header, rows = _read_csv(out / "cost.csv")
    assert header == ["name", "value"]
    table = dict(rows)
    assert table["audit_monolithic"] == "0" and table["audit_wr"] == "0"
    assert float(table["speedup_approx"]) > 0.0
    assert table["wr_preferred"] in ("True", "False")
    assert not (out / "losses.csv").exists()


def test_cli_reports_config_errors(tmp_path, capsys):
    rc = cli.main(["run", str(_write(tmp_path, "[run]\nmode = fancy\n"))])
    assert rc == 2
    assert "run.mode" in capsys.readouterr().err
