"""Run configuration: INI-style files mapped onto solver objects.

Every key has a benchmark default, so an empty file describes the full
composite problem; unknown sections or keys are rejected rather than
silently ignored.  Lengths are given in micrometres in the file and
converted here, times in seconds.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .cell import CellDiscretization, NewtonOptions
from .driver_wr import WindowPlan
from .macro import MacroDiscretization, SourceSpec
from .material import NU0, Brauer, Linear
from .mesh import (
    GeometryParams,
    Region,
    SquareInclusion,
    generate_cell_mesh,
    generate_macro_mesh,
    generate_reference_mesh,
)
from .reference import ReferenceDiscretization

MODES = ("monolithic", "wr", "reference", "compare", "cost")

_SCHEMA = {
    "geometry": ("grains", "L_um", "e_i_um", "e_gap_um", "fill",
                 "cell_n", "ref_refine"),
    "material": ("alpha", "beta", "gamma", "sigma_S_per_m", "mu_r_ins"),
    "source": ("js0", "f_hz"),
    "time": ("t_end_s", "n_steps_macro", "n_steps_meso", "n_windows"),
    "solver": ("newton_tol", "newton_max", "wr_tol", "wr_max",
               "fd_delta", "kappa"),
    "run": ("mode",),
    "output": ("dir",),
}


class ConfigError(ValueError):
    """Malformed, unknown or inconsistent configuration input."""


@dataclass(frozen=True)
class RunConfig:
    """Validated problem description, ready for the discretization builders."""

    geometry: GeometryParams
    cell_n: int
    ref_refine: int
    grain_law: Brauer
    insulation_law: Linear
    sigma: float
    source: SourceSpec
    t_end: float
    n_steps_macro: int
    n_steps_meso: int
    n_windows: int
    newton: NewtonOptions
    wr_tol: float
    wr_max: int
    fd_delta: float
    kappa: float
    mode: str
    out_dir: Path

    @property
    def meso_ratio(self) -> int:
        return self.n_steps_meso // self.n_steps_macro


def load_config(path) -> RunConfig:
    """Parse and validate one configuration file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such config file: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}] in {path}")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key} in {path}")

    def num(section, key, default, cast=float):
        try:
            raw = parser.get(section, key, fallback=None)
            return default if raw is None else cast(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}") from exc

    geometry = GeometryParams(
        grains=num("geometry", "grains", 4, int),
        L=1e-6 * num("geometry", "L_um", 1000.0),
        e_i=1e-6 * num("geometry", "e_i_um", 100.0),
        e_gap=1e-6 * num("geometry", "e_gap_um", 100.0),
        fill=num("geometry", "fill", 0.64))
    cell_n = num("geometry", "cell_n", 20, int)
    ref_refine = num("geometry", "ref_refine", 2, int)

    grain_law = Brauer(alpha=num("material", "alpha", 388.0),
                       beta=num("material", "beta", 0.3774),
                       gamma=num("material", "gamma", 2.97))
    mu_r_ins = num("material", "mu_r_ins", 1.0)
    insulation_law = Linear(NU0 / mu_r_ins)
    sigma = num("material", "sigma_S_per_m", 5.0e6)

    source = SourceSpec(num("source", "js0", 1.2e10),
                        num("source", "f_hz", 50.0e3))

    t_end = num("time", "t_end_s", 2.0e-5)
    n_macro = num("time", "n_steps_macro", 20, int)
    n_meso = num("time", "n_steps_meso", 20, int)
    n_windows = num("time", "n_windows", 1, int)
    if n_macro < 1 or n_meso < 1 or n_windows < 1:
        raise ConfigError("step and window counts must be >= 1")
    if n_macro % n_windows:
        raise ConfigError(
            f"n_steps_macro={n_macro} not divisible by n_windows={n_windows}")
    if n_meso % n_macro or n_meso < n_macro:
        raise ConfigError(
            f"n_steps_meso={n_meso} must be a multiple of "
            f"n_steps_macro={n_macro}")

    newton = NewtonOptions(tol=num("solver", "newton_tol", 1e-6),
                           max_iter=num("solver", "newton_max", 40, int))

    mode = parser.get("run", "mode", fallback="wr").strip()
    if mode not in MODES:
        raise ConfigError(f"run.mode must be one of {MODES}, got {mode!r}")

    return RunConfig(
        geometry=geometry, cell_n=cell_n, ref_refine=ref_refine,
        grain_law=grain_law, insulation_law=insulation_law, sigma=sigma,
        source=source, t_end=t_end, n_steps_macro=n_macro,
        n_steps_meso=n_meso, n_windows=n_windows, newton=newton,
        wr_tol=num("solver", "wr_tol", 1e-8),
        wr_max=num("solver", "wr_max", 20, int),
        fd_delta=num("solver", "fd_delta", 1e-6),
        kappa=num("solver", "kappa", 1.0),
        mode=mode,
        out_dir=Path(parser.get("output", "dir", fallback="out")))


def macro_discretization(cfg: RunConfig) -> MacroDiscretization:
    return MacroDiscretization(generate_macro_mesh(cfg.geometry))


def cell_discretization(cfg: RunConfig) -> CellDiscretization:
    mesh, pairing = generate_cell_mesh(SquareInclusion(cfg.geometry.fill),
                                       n_per_side=cfg.cell_n)
    return CellDiscretization(
        mesh, pairing,
        laws={Region.CONDUCTING_GRAIN: cfg.grain_law,
              Region.INSULATION: cfg.insulation_law},
        sigma={Region.CONDUCTING_GRAIN: cfg.sigma},
        pitch=cfg.geometry.pitch)


def reference_discretization(cfg: RunConfig) -> ReferenceDiscretization:
    mesh = generate_reference_mesh(cfg.geometry, refinement=cfg.ref_refine)
    return ReferenceDiscretization(
        mesh,
        laws={Region.CONDUCTING_GRAIN: cfg.grain_law,
              Region.INSULATION: cfg.insulation_law},
        sigma={Region.CONDUCTING_GRAIN: cfg.sigma})


def window_plan(cfg: RunConfig) -> WindowPlan:
    return WindowPlan(0.0, cfg.t_end, n_windows=cfg.n_windows,
                      n_macro=cfg.n_steps_macro // cfg.n_windows,
                      meso_ratio=cfg.meso_ratio,
                      n_wr_max=cfg.wr_max, tol=cfg.wr_tol)
