"""Command-line entry point: run a configured problem, write CSV artifacts.

All artifacts are plain comma-separated files with a header row and one
trailing newline; floats always use the dot decimal separator.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

from . import analysis
from .config import (
    MODES,
    ConfigError,
    RunConfig,
    cell_discretization,
    load_config,
    macro_discretization,
    reference_discretization,
    window_plan,
)
from .driver_monolithic import run_monolithic
from .driver_wr import run_wr
from .reference import run_reference


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x) -> str:
    return f"{float(x):.9e}"


def _write_series(out: Path, t, losses, energy) -> list[Path]:
    lpath, epath = out / "losses.csv", out / "energy.csv"
    _write_csv(lpath, ("t", "P"),
               ((_fmt(ti), _fmt(p)) for ti, p in zip(t, losses)))
    _write_csv(epath, ("t", "W"),
               ((_fmt(ti), _fmt(w)) for ti, w in zip(t, energy)))
    return [lpath, epath]


def _write_fields(out: Path, disc, alpha_free, t) -> Path:
    a_z = disc.dofs.expand(alpha_free)
    path = out / f"fields_{t:.6g}.csv"
    _write_csv(path, ("node", "x", "y", "a_z"),
               ((n, _fmt(x), _fmt(y), _fmt(a))
                for n, ((x, y), a) in enumerate(zip(disc.mesh.nodes, a_z))))
    return path


def _write_wr_convergence(out: Path, report) -> Path:
    path = out / "wr_convergence.csv"
    rows = []
    for n, window in enumerate(report.iterates, start=1):
        for l, it in enumerate(window, start=1):
            rows.append((n, l, _fmt(it.err_losses), _fmt(it.err_energy),
                         _fmt(it.err_fields_b), _fmt(it.err_fields_dta)))
    _write_csv(path, ("window", "l", "err_losses", "err_energy",
                      "err_b", "err_dta"), rows)
    return path


def _write_cost(out: Path, rows) -> Path:
    path = out / "cost.csv"
    _write_csv(path, ("name", "value"),
               ((k, v if isinstance(v, (int, bool)) else _fmt(v))
                for k, v in rows))
    return path


def _mono_run(cfg: RunConfig):
    return run_monolithic(
        macro_discretization(cfg), cell_discretization(cfg), cfg.source,
        0.0, cfg.t_end, cfg.n_steps_macro, kappa=cfg.kappa,
        newton=cfg.newton, meso_newton=cfg.newton, fd_delta=cfg.fd_delta)


def _wr_run(cfg: RunConfig):
    return run_wr(
        macro_discretization(cfg), cell_discretization(cfg), cfg.source,
        window_plan(cfg), kappa=cfg.kappa, newton=cfg.newton,
        meso_newton=cfg.newton)


def _cost_rows(cfg: RunConfig, mono, wr):
    params = analysis.measure_cost_units([mono], [wr])
    model = analysis.cost_model(params)
    rows = [
        ("n_steps", params.n_steps), ("n_windows", params.n_windows),
        ("n_gauss", params.n_gauss), ("n_dim", params.n_dim),
        ("n_newton_mean", params.n_newton), ("n_wr_mean", params.n_wr),
        ("cost_meso_solve_s", params.cost_meso_solve),
        ("cost_comm_s", params.cost_comm),
        ("cost_jacobian_s", params.cost_jacobian),
        ("cost_macro_assemble_s", params.cost_macro_assemble),
        ("cost_macro_solve_s", params.cost_macro_solve),
        ("mono_total", model.mono_total), ("mono_approx", model.mono_approx),
        ("wr_total", model.wr_total), ("wr_approx", model.wr_approx),
        ("kappa_implied", model.kappa),
        ("wr_preferred", model.wr_preferred),
        ("speedup_approx", model.speedup_approx),
        ("audit_monolithic", analysis.audit_costs(mono)),
        ("audit_wr", analysis.audit_costs(wr)),
    ]
    tm, tw = mono.timings, wr.timings
    wall_m = tm.meso_solve + tm.communication + tm.macro_assemble + tm.macro_solve
    wall_w = tw.meso_solve + tw.communication + tw.macro_assemble + tw.macro_solve
    rows.append(("speedup_measured_wall",
                 wall_m / wall_w if wall_w > 0.0 else float("inf")))
    try:
        table = analysis.convergence_errors(wr, mono)
        rows.append(("err_losses_vs_mono_final", table.err_losses[-1]))
        rows.append(("err_energy_vs_mono_final", table.err_energy[-1]))
    except analysis.UndefinedNormError:
        pass      # loss-free instance, nothing to score against
    return rows


def _dispatch(cfg: RunConfig) -> list[Path]:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    if cfg.mode == "monolithic":
        rep = _mono_run(cfg)
        written += _write_series(out, rep.waveform.t, rep.losses, rep.energy)
        written.append(_write_fields(out, macro_discretization(cfg),
                                     rep.waveform.values[-1], cfg.t_end))
    elif cfg.mode == "wr":
        rep = _wr_run(cfg)
        written += _write_series(out, rep.waveform.t, rep.losses, rep.energy)
        written.append(_write_wr_convergence(out, rep))
        written.append(_write_fields(out, macro_discretization(cfg),
                                     rep.waveform.values[-1], cfg.t_end))
    elif cfg.mode == "reference":
        disc = reference_discretization(cfg)
        rep = run_reference(disc, cfg.source, 0.0, cfg.t_end,
                            cfg.n_steps_meso, cfg.newton)
        written += _write_series(out, rep.waveform.t, rep.losses, rep.energy)
        written.append(_write_fields(out, disc, rep.waveform.values[-1],
                                     cfg.t_end))
    else:      # compare and cost both need the two driver runs
        mono = _mono_run(cfg)
        wr = _wr_run(cfg)
        if cfg.mode == "compare":
            written += _write_series(out, wr.waveform.t, wr.losses, wr.energy)
            written.append(_write_wr_convergence(out, wr))
            written.append(_write_fields(out, macro_discretization(cfg),
                                         wr.waveform.values[-1], cfg.t_end))
        written.append(_write_cost(out, _cost_rows(cfg, mono, wr)))

    return written


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mqshmm",
        description="Two-scale magnetoquasistatic solver for soft magnetic "
                    "composites")
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run the problem described by a config "
                                      "file and write CSV artifacts")
    runp.add_argument("config", help="path to the INI-style configuration")
    runp.add_argument("--mode", choices=MODES,
                      help="override the [run] mode from the file")
    runp.add_argument("--out", help="override the [output] dir from the file")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if args.mode:
            cfg = dataclasses.replace(cfg, mode=args.mode)
        if args.out:
            cfg = dataclasses.replace(cfg, out_dir=Path(args.out))
        written = _dispatch(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
