"""Post-processing of driver runs: loss series, error metrics, cost model.

The cost model mirrors the per-loop counting of the two drivers.  Exact
totals split into a mesoscale and a macroscale contribution; the usual
approximation drops the macroscale assembly and solve terms, which are
dwarfed by the cell solves.  ``audit_costs`` closes the loop by checking
a driver report's counters against the same formulas, using the realized
iteration counts instead of averages; any mismatch is a bookkeeping bug,
so the expected discrepancy is exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import median

import numpy as np

from .waveform import Waveform


class UndefinedNormError(ValueError):
    """A relative error was requested against a series with zero norm."""


@dataclass(frozen=True)
class LossSeries:
    """Joule loss power and magnetic energy on a shared time grid.

    ``power`` holds the per-step mean dissipation attributed to the end
    of each backward-Euler step (the first sample is zero by convention),
    in W per unit depth; ``energy`` is the magnetic coenergy snapshot in
    J per unit depth.
    """

    t: np.ndarray
    power: np.ndarray
    energy: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        power = np.asarray(self.power, dtype=float)
        energy = np.asarray(self.energy, dtype=float)
        if not (t.shape == power.shape == energy.shape) or t.ndim != 1:
            raise ValueError("time, power and energy must share one grid")
        if power.size and power.min() < 0.0:
            raise ValueError(
                f"negative loss power {power.min():g} in the series")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "power", power)
        object.__setattr__(self, "energy", energy)


def loss_series(run) -> LossSeries:
    """Extract the loss/energy series of any driver or reference report."""
    return LossSeries(run.waveform.t, run.losses, run.energy)


def eddy_losses(run, at: float) -> float:
    """Loss power of a run at time ``at``, W per unit depth.

    Linear interpolation between the stored per-step values; the series
    itself comes from backward-difference rates, so sampling inside a step
    blends the two adjacent step means.  ``at`` outside the run's grid
    raises the waveform range error.
    """
    series = run if isinstance(run, LossSeries) else loss_series(run)
    return float(Waveform(series.t, series.power).sample(at))


def magnetic_energy(run, at: float) -> float:
    """Magnetic coenergy of a run at time ``at``, J per unit depth.

    For two-scale runs the stored series already aggregates the
    cell-averaged densities over the homogenized triangles plus the
    background contribution.
    """
    series = run if isinstance(run, LossSeries) else loss_series(run)
    return float(Waveform(series.t, series.energy).sample(at))


def _common_values(series_a, series_b):
    """Both series on one grid, resampling the finer one when nested."""
    if isinstance(series_a, Waveform) != isinstance(series_b, Waveform):
        raise TypeError("compare two waveforms or two plain arrays, not one "
                        "of each")
    if not isinstance(series_a, Waveform):
        a = np.asarray(series_a, dtype=float)
        b = np.asarray(series_b, dtype=float)
        if a.shape != b.shape:
            raise ValueError(f"series shapes differ: {a.shape} vs {b.shape}")
        return a, b
    if np.array_equal(series_a.t, series_b.t):
        return series_a.values, series_b.values
    coarse, fine = series_a, series_b
    if len(fine.t) < len(coarse.t):
        coarse, fine = fine, coarse
    resampled = np.stack([fine.sample(t) for t in coarse.t])
    if coarse is series_a:
        return coarse.values, resampled
    return resampled, coarse.values


def relative_errors(series_a, series_b) -> float:
    """Relative deviation of ``series_a`` from ``series_b``.

    Max-over-time norm of the difference divided by the same norm of the
    second series, which acts as the reference.  Waveform arguments with
    nested grids are compared on the coarser grid (linear interpolation);
    plain arrays must already share a grid.
    """
    a, b = _common_values(series_a, series_b)
    den = float(np.abs(b).max()) if b.size else 0.0
    if den == 0.0:
        raise UndefinedNormError("reference series has zero norm")
    return float(np.abs(a - b).max()) / den


@dataclass(frozen=True)
class ErrorReport:
    """Per-sweep errors of a relaxation run against a monolithic run.

    One row per (window, sweep): the loss and energy series errors are
    measured against the monolithic series on the window's grid, with the
    monolithic full-interval max as the denominator; the two field columns
    are the sweep-to-sweep iteration errors copied from the relaxation
    report.  The monolithic-versus-reference errors use the same metric
    and give the discretization floor the relaxation errors should cross.
    """

    sweeps: list[tuple[int, int]]
    err_losses: np.ndarray
    err_energy: np.ndarray
    err_fields_b: np.ndarray
    err_fields_dta: np.ndarray
    mono_vs_ref_losses: float | None = None
    mono_vs_ref_energy: float | None = None


def convergence_errors(wr_report, mono_report,
                       reference_run=None) -> ErrorReport:
    """Error table of relaxation sweeps relative to a monolithic run.

    Both runs must cover the same interval with the relaxation window
    grids nested in the monolithic grid.  With a reference run given,
    the monolithic loss and energy series are also scored against it
    (resampled onto the coarser of the two grids).
    """
    mono_losses = Waveform(mono_report.waveform.t, mono_report.losses)
    mono_energy = Waveform(mono_report.waveform.t, mono_report.energy)
    den_losses = float(np.abs(mono_losses.values).max())
    den_energy = float(np.abs(mono_energy.values).max())
    if den_losses == 0.0 or den_energy == 0.0:
        raise UndefinedNormError("monolithic loss or energy series is zero")

    sweeps = []
    err_l, err_w, err_b, err_dta = [], [], [], []
    for n, window in enumerate(wr_report.iterates):
        grid = window[0].waveform.t
        ref_l = np.array([mono_losses.sample(t) for t in grid])
        ref_w = np.array([mono_energy.sample(t) for t in grid])
        for l, it in enumerate(window, start=1):
            sweeps.append((n + 1, l))
            err_l.append(float(np.abs(it.losses - ref_l).max()) / den_losses)
            err_w.append(float(np.abs(it.energy - ref_w).max()) / den_energy)
            err_b.append(it.err_fields_b)
            err_dta.append(it.err_fields_dta)

    mono_vs_ref_l = mono_vs_ref_w = None
    if reference_run is not None:
        ref_series = loss_series(reference_run)
        mono_vs_ref_l = relative_errors(
            mono_losses, Waveform(ref_series.t, ref_series.power))
        mono_vs_ref_w = relative_errors(
            mono_energy, Waveform(ref_series.t, ref_series.energy))

    return ErrorReport(sweeps, np.array(err_l), np.array(err_w),
                       np.array(err_b), np.array(err_dta),
                       mono_vs_ref_l, mono_vs_ref_w)


@dataclass(frozen=True)
class CostParams:
    """Loop counts and per-unit costs of the two driver variants.

    Counts are the realized loop sizes (iteration counts may be averages
    and therefore fractional, but never below one).  Cost units are
    abstract; ``measure_cost_units`` fills them with wall-time medians.
    ``kappa_cost``, when given, overrides the bookkeeping ratio between
    the frozen-law evaluation overhead and the per-sweep cell cost that
    the efficiency predicate divides by; by default it is derived from
    the cost units themselves.
    """

    n_steps: int
    n_windows: int = 1
    n_wr: float = 1.0
    n_newton: float = 1.0
    n_gauss: int = 1
    n_dim: int = 3
    cost_meso_solve: float = 1.0
    cost_comm: float = 0.0
    cost_jacobian: float = 0.0
    cost_macro_assemble: float = 0.0
    cost_macro_solve: float = 0.0
    kappa_cost: float | None = None

    def __post_init__(self):
        counts = (self.n_steps, self.n_windows, self.n_wr, self.n_newton,
                  self.n_gauss, self.n_dim)
        if min(counts) < 1:
            raise ValueError(f"all loop counts must be >= 1, got {counts}")
        costs = (self.cost_meso_solve, self.cost_comm, self.cost_jacobian,
                 self.cost_macro_assemble, self.cost_macro_solve)
        if min(costs) < 0.0:
            raise ValueError(f"cost units must be >= 0, got {costs}")
        if self.kappa_cost is not None \
                and not 0.0 < self.kappa_cost < 1.0:
            raise ValueError(
                f"kappa_cost must lie in (0, 1), got {self.kappa_cost}")


@dataclass(frozen=True)
class CostReport:
    """Exact and approximate totals plus the efficiency prediction."""

    mono_meso: float
    mono_macro: float
    mono_total: float
    mono_approx: float
    wr_meso: float
    wr_macro: float
    wr_total: float
    wr_approx: float
    kappa: float
    wr_preferred: bool
    speedup_approx: float


def cost_model(p: CostParams) -> CostReport:
    """Predicted totals for the monolithic and relaxation drivers.

    The monolithic mesoscale term charges ``n_dim`` cell solves plus one
    communication per Gauss point and Newton iteration; the relaxation
    mesoscale term charges one cell solve per sweep and step but only one
    communication per sweep and window.  The approximate totals drop the
    macroscale assembly/solve terms.  Relaxation is predicted cheaper
    when ``n_wr < n_dim * n_newton / (1 + kappa)``.
    """
    per_window = p.n_windows / p.n_steps

    mono_meso = p.n_steps * p.n_newton * p.n_gauss \
        * (p.n_dim * p.cost_meso_solve + p.cost_comm)
    mono_macro = p.n_steps * p.n_newton \
        * (p.cost_macro_assemble + p.cost_macro_solve)
    mono_approx = mono_meso

    wr_meso = p.n_steps * p.n_wr * p.n_gauss \
        * (p.cost_meso_solve + per_window * p.cost_comm)
    wr_macro = p.n_windows * p.n_wr * p.n_newton \
        * (p.n_gauss * p.cost_jacobian
           + p.cost_macro_assemble + p.cost_macro_solve)
    wr_approx = p.n_steps * p.n_wr * p.n_gauss \
        * (p.cost_meso_solve
           + per_window * (p.n_newton * p.cost_jacobian + p.cost_comm))

    if p.kappa_cost is not None:
        kappa = p.kappa_cost
    else:
        num = per_window * p.n_newton * p.cost_jacobian
        den = p.cost_meso_solve + per_window * p.cost_comm
        kappa = num / den if den > 0.0 else (0.0 if num == 0.0 else math.inf)

    wr_preferred = p.n_wr < p.n_dim * p.n_newton / (1.0 + kappa)
    speedup = mono_approx / wr_approx if wr_approx > 0.0 else math.inf

    return CostReport(mono_meso, mono_macro, mono_meso + mono_macro,
                      mono_approx, wr_meso, wr_macro, wr_meso + wr_macro,
                      wr_approx, kappa, wr_preferred, speedup)


def audit_costs(report, params: CostParams | None = None) -> int:
    """Check a driver report's counters against the cost-model counting.

    The expected totals are rebuilt from the report's own realized
    iteration counts, so the discrepancy must be exactly zero; when
    ``params`` is given, its Gauss-point count (and Jacobian width for
    monolithic runs) replaces the report's, which flags a model that was
    calibrated against a different instance.
    """
    if not hasattr(report, "newton_counts") and not hasattr(report, "wr_counts"):
        raise TypeError(f"not a driver report: {type(report).__name__}")
    n_gauss = params.n_gauss if params is not None else report.n_gauss
    if hasattr(report, "newton_counts"):
        n_dim = params.n_dim if params is not None else report.n_dim
        iterations = sum(report.newton_counts)
        expected_solves = iterations * n_gauss * n_dim
        expected_comms = iterations * n_gauss
    else:
        sweeps = sum(report.wr_counts)
        expected_solves = sweeps * n_gauss * report.n_meso_per_window
        expected_comms = sweeps * n_gauss
    return abs(report.meso_solves - expected_solves) \
        + abs(report.communications - expected_comms)


def measure_cost_units(mono_reports, wr_reports=()) -> CostParams:
    """Calibrate cost units from timed runs, medians across repetitions.

    Loop counts come from the first report of each kind.  The per-unit
    cell solve, communication and macroscale costs divide each phase's
    wall time by the corresponding counter of the monolithic reports.
    The frozen-law evaluation unit divides the relaxation macro phase by
    its sweeps, Newton average and Gauss points, net of the macroscale
    assembly and solve share; with no relaxation reports it stays zero.
    """
    mono_reports = list(mono_reports)
    if not mono_reports:
        raise ValueError("at least one monolithic report is needed")
    wr_reports = list(wr_reports)

    lead = mono_reports[0]
    n_steps = len(lead.newton_counts)
    n_newton = sum(lead.newton_counts) / n_steps

    def units(r):
        iters = sum(r.newton_counts)
        return (r.timings.meso_solve / r.meso_solves,
                r.timings.communication / r.communications,
                r.timings.macro_assemble / iters,
                r.timings.macro_solve / iters)

    sol, com, ass, msol = (median(col)
                           for col in zip(*(units(r) for r in mono_reports)))

    n_wr, n_windows, jac = 1.0, 1, 0.0
    if wr_reports:
        wlead = wr_reports[0]
        n_windows = wlead.plan.n_windows
        n_wr = sum(wlead.wr_counts) / len(wlead.wr_counts)

        def jac_unit(r):
            chunks = sum(r.wr_counts) * n_newton
            steps = r.plan.n_macro
            per_chunk = r.timings.macro_solve / chunks
            return max(0.0, per_chunk - steps * (ass + msol)) / r.n_gauss

        jac = median(jac_unit(r) for r in wr_reports)

    return CostParams(n_steps=n_steps, n_windows=n_windows, n_wr=max(1.0, n_wr),
                      n_newton=max(1.0, n_newton), n_gauss=lead.n_gauss,
                      n_dim=lead.n_dim, cost_meso_solve=sol, cost_comm=com,
                      cost_jacobian=jac, cost_macro_assemble=ass,
                      cost_macro_solve=msol)
