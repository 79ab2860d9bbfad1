"""Waveform-relaxation two-scale driver.

The time axis is split into windows.  Inside a window the two scales
exchange whole waveforms instead of per-step data: every Gauss-point cell
integrates the full window against the frozen macroscale waveform of the
previous sweep, then the macroscale re-integrates the window against the
frozen corrections, with the cell-averaged tangent evaluated directly (no
finite differences).  Sweeps repeat until the macro waveform stops moving.
The mesoscale grid may be an integer refinement of the macroscale grid,
which is what makes the scheme multirate.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import cell, fem
from .cell import CellDiscretization, MacroSource, NewtonOptions, UpscaledLaw
from .driver_monolithic import PhaseTimings
from .macro import MacroDiscretization, SourceSpec, backward_euler_run
from .waveform import Waveform, constant_waveform, require_nested, time_grid


@dataclass(frozen=True)
class WindowPlan:
    """Uniform partition of (t0, t_end] into relaxation windows.

    Each window carries ``n_macro`` macroscale steps and ``meso_ratio``
    mesoscale substeps per macroscale step (nested uniform grids).
    ``n_wr_max`` bounds the sweeps per window; ``tol`` gates the relative
    change of the macro waveform between sweeps, measured in the max over
    time of the spatial L2 norm.
    """

    t0: float
    t_end: float
    n_windows: int = 1
    n_macro: int = 20
    meso_ratio: int = 1
    n_wr_max: int = 20
    tol: float = 1e-8

    def __post_init__(self):
        if self.t_end <= self.t0:
            raise ValueError(f"empty time span ({self.t0}, {self.t_end})")
        if min(self.n_windows, self.n_macro, self.meso_ratio) < 1:
            raise ValueError("window, step and ratio counts must be >= 1")
        if self.n_wr_max < 1 or self.tol <= 0.0:
            raise ValueError("need n_wr_max >= 1 and tol > 0")

    @property
    def n_meso(self) -> int:
        return self.n_macro * self.meso_ratio

    def window_bounds(self, n: int) -> tuple[float, float]:
        span = (self.t_end - self.t0) / self.n_windows
        return self.t0 + n * span, self.t0 + (n + 1) * span


@dataclass
class WrIterate:
    """Macro result of one relaxation sweep over one window.

    The loss series pairs with this sweep's cell solves (driven by the
    previous macro waveform); the energy series pairs cell states at the
    coinciding meso samples with this sweep's macro potential.
    """

    waveform: Waveform
    losses: np.ndarray
    energy: np.ndarray
    err_fields_b: float
    err_fields_dta: float
    err_losses: float
    err_energy: float
    gate_value: float


@dataclass
class WrRunReport:
    """Concatenated series plus the per-window sweep history."""

    waveform: Waveform
    losses: np.ndarray
    energy: np.ndarray
    iterates: list[list[WrIterate]]
    wr_counts: list[int]
    converged: list[bool]
    meso_solves: int
    communications: int
    n_gauss: int
    n_meso_per_window: int
    timings: PhaseTimings
    plan: WindowPlan
    final_cell_states: list


def wr_error_metrics(wf_prev: Waveform, wf_cur: Waveform,
                     wf_init: Waveform) -> float:
    """Relative sweep-to-sweep change, max over time and sample components.

    The change ``wf_cur - wf_prev`` is normalized by the magnitude of the
    reference waveform ``wf_init``; two identical zero waveforms count as
    fully converged rather than undefined.
    """
    for other in (wf_cur, wf_init):
        if other.values.shape != wf_prev.values.shape \
                or not np.array_equal(other.t, wf_prev.t):
            raise ValueError("waveform grids or sample shapes differ")
    num = float(np.abs(wf_cur.values - wf_prev.values).max())
    den = float(np.abs(wf_init.values).max())
    if den == 0.0:
        if num == 0.0:
            return 0.0
        raise ValueError("reference waveform for the error metric is zero")
    return num / den


def _rates_of(disc: MacroDiscretization, macro_wf: Waveform):
    """Gauss-point values and backward-difference rates at the macro samples.

    The rate at sample 0 copies sample 1 (constant extension), so an
    affine-in-time waveform downscales with exact derivatives; window
    chaining overrides it with the previous window's final rates.
    """
    b = np.array([disc.gauss_b(row) for row in macro_wf.values])
    a = np.array([disc.gauss_a(row) for row in macro_wf.values])
    db = np.zeros_like(b)
    da = np.zeros_like(a)
    db[1:] = np.diff(b, axis=0) / macro_wf.dt
    da[1:] = np.diff(a, axis=0) / macro_wf.dt
    db[0] = db[1]
    da[0] = da[1]
    return b, a, db, da


def _downscale_all(disc: MacroDiscretization, macro_wf: Waveform,
                   meso_grid: np.ndarray, rates0=None):
    """Linear interpolation of Gauss-point sources onto the meso grid.

    Returns (b, db_dt, da_dt) arrays of shape (n_meso_samples, n_gauss, …).
    ``rates0`` optionally replaces the rates at the first macro sample.
    """
    require_nested(meso_grid, macro_wf.t)
    b, _, db, da = _rates_of(disc, macro_wf)
    if rates0 is not None:
        db[0], da[0] = rates0
    mt = macro_wf.t

    def interp(series):
        flat = series.reshape(len(mt), -1)
        out = np.stack([np.interp(meso_grid, mt, flat[:, j])
                        for j in range(flat.shape[1])], axis=1)
        return out.reshape((len(meso_grid),) + series.shape[1:])

    return interp(b), interp(db), interp(da)


def downscale_waveform(disc: MacroDiscretization, macro_wf: Waveform,
                       gauss_id: int, meso_grid: np.ndarray,
                       kappa: float = 1.0,
                       initial_rates=None) -> list[MacroSource]:
    """Source waveform of one Gauss point on a nested meso grid.

    ``initial_rates = (db0, da0)`` pins the backward-difference rates at
    the first macro sample (they are not derivable from the waveform
    itself); by default the first computed rate is extended backwards.
    """
    rates0 = None
    if initial_rates is not None:
        _, _, db, da = _rates_of(disc, macro_wf)
        db0, da0 = db[0].copy(), da[0].copy()
        db0[gauss_id] = np.asarray(initial_rates[0], dtype=float)
        da0[gauss_id] = float(initial_rates[1])
        rates0 = (db0, da0)
    b, db, da = _downscale_all(disc, macro_wf, meso_grid, rates0)
    return [MacroSource(b[i, gauss_id], db[i, gauss_id],
                        float(da[i, gauss_id]), kappa)
            for i in range(len(meso_grid))]


def _field_waveforms(disc: MacroDiscretization, wf: Waveform):
    """Per-element flux and potential-rate waveforms of a macro DOF waveform."""
    nodal = np.array([disc.dofs.expand(row) for row in wf.values])
    b = np.array([fem.curl_field(disc.geom, disc.mesh.triangles, nd).ravel()
                  for nd in nodal])
    rate = np.zeros((len(wf.t), disc.mesh.n_triangles))
    rate[1:] = np.diff(nodal, axis=0)[:, disc.mesh.triangles].mean(axis=2) / wf.dt
    return Waveform(wf.t, b), Waveform(wf.t, rate)


def _linf_l2(mass_u, values) -> float:
    """Max over time samples of the mass-weighted spatial L2 norm."""
    return max(float(np.sqrt(max(row @ (mass_u @ row), 0.0)))
               for row in values)


def _series_change(prev: np.ndarray, cur: np.ndarray, ref: np.ndarray) -> float:
    num = float(np.abs(cur - prev).max())
    den = float(np.abs(ref).max())
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / den


class _RefNorm:
    """Normalization reference of one error column within a window.

    Prefers the initialization waveform; a window starting from rest has a
    zero initialization, in which case the first sweep's values take over.
    """

    def __init__(self, init_values: np.ndarray):
        self.values = np.asarray(init_values, dtype=float)
        self._fixed = bool(np.abs(self.values).max() > 0.0)

    def settle(self, first_sweep_values: np.ndarray) -> None:
        if not self._fixed:
            self.values = np.asarray(first_sweep_values, dtype=float)
            self._fixed = True


def run_wr(disc: MacroDiscretization, cell_disc: CellDiscretization,
           source: SourceSpec, plan: WindowPlan, *, kappa: float = 1.0,
           newton: NewtonOptions = NewtonOptions(),
           meso_newton: NewtonOptions = NewtonOptions(),
           n_workers: int = 1, comm_sleep_s: float = 0.0) -> WrRunReport:
    """Windowed relaxation transient (meso sweep first, then macro).

    Within a window, sweep l integrates every cell against the macro
    waveform of sweep l-1 (the first against the constant extrapolation of
    the window's start state), then re-integrates the macroscale with the
    cell-averaged law and tangent of the stored corrections.  Windows seed
    their successors with the converged end state of both scales.
    Non-convergence within ``plan.n_wr_max`` is recorded per window, not
    raised.
    """
    n_gp = disc.n_gauss
    ones = np.ones(disc.mesh.n_triangles)
    mass_u = fem.mass_matrix(disc.mesh, disc.dofs, ones).tocsr()

    alpha_seed = np.zeros(disc.n_free)
    cell_states = [cell.zero_state(cell_disc, plan.t0) for _ in range(n_gp)]
    seed_rates = (np.zeros((n_gp, 2)), np.zeros(n_gp))

    iterates: list[list[WrIterate]] = []
    wr_counts: list[int] = []
    converged_flags: list[bool] = []
    meso_solves = 0
    communications = 0
    tm = PhaseTimings()
    pool = ThreadPoolExecutor(n_workers) if n_workers > 1 else None

    def window_energy(alpha, states_at):
        w = disc.background_coenergy(alpha)
        b = disc.gauss_b(alpha)
        for g, area in enumerate(disc.gauss_areas):
            w += area * cell.coenergy_density(states_at[g], b[g])
        return w

    full_values = [alpha_seed.copy()]
    full_losses = [0.0]
    full_energy = [window_energy(alpha_seed, cell_states)]
    full_t = [plan.t0]

    try:
        for n in range(plan.n_windows):
            t_a, t_b = plan.window_bounds(n)
            macro_grid = time_grid(t_a, t_b, plan.n_macro)
            meso_grid = time_grid(t_a, t_b, plan.n_meso)
            coarse_idx = require_nested(meso_grid, macro_grid)
            dt_m = float(meso_grid[1] - meso_grid[0])

            wf_prev = constant_waveform(macro_grid, alpha_seed)
            init_b, init_dta = _field_waveforms(disc, wf_prev)
            ref_b = _RefNorm(init_b.values)
            ref_dta = _RefNorm(init_dta.values)
            ref_losses = _RefNorm(np.zeros(plan.n_macro + 1))
            init_energy = window_energy(alpha_seed, cell_states)
            ref_energy = _RefNorm(np.full(plan.n_macro + 1, init_energy))
            gate_den = _linf_l2(mass_u, wf_prev.values)

            prev_fields = (init_b, init_dta)
            prev_losses = np.zeros(plan.n_macro + 1)
            prev_energy = np.full(plan.n_macro + 1, init_energy)
            window_iterates: list[WrIterate] = []
            win_converged = False

            for l in range(1, plan.n_wr_max + 1):
                t_mark = time.perf_counter()
                b_ms, db_ms, da_ms = _downscale_all(disc, wf_prev, meso_grid,
                                                    seed_rates)
                communications += n_gp
                if comm_sleep_s > 0.0:
                    time.sleep(comm_sleep_s * n_gp)
                tm.communication += time.perf_counter() - t_mark

                t_mark = time.perf_counter()

                def sweep(g):
                    states_g = [cell_states[g]]
                    for i in range(1, len(meso_grid)):
                        src = MacroSource(b_ms[i, g], db_ms[i, g],
                                          float(da_ms[i, g]), kappa)
                        try:
                            states_g.append(cell.meso_step(states_g[-1], src,
                                                           dt_m, meso_newton))
                        except (fem.SolverFailureError, ValueError) as exc:
                            raise fem.SolverFailureError(
                                f"window {n + 1}, sweep {l}, meso phase: "
                                f"gauss {g}, substep {i}: {exc}") from exc
                    return states_g

                if pool is not None:
                    all_states = list(pool.map(sweep, range(n_gp)))
                else:
                    all_states = [sweep(g) for g in range(n_gp)]
                meso_solves += n_gp * plan.n_meso
                tm.meso_solve += time.perf_counter() - t_mark

                t_mark = time.perf_counter()

                def provider(t_k, b, db, da):
                    k = int(round((t_k - t_a) / (macro_grid[1] - macro_grid[0])))
                    idx = coarse_idx[k]
                    return [UpscaledLaw(
                        cell.upscale_h(all_states[g][idx], b[g]),
                        cell.exact_jacobian(all_states[g][idx], b[g]),
                        "frozen-waveform") for g in range(len(b))]

                try:
                    wf_cur = backward_euler_run(disc, source, t_a, t_b,
                                                plan.n_macro, provider,
                                                newton, alpha0=alpha_seed)
                except fem.SolverFailureError as exc:
                    raise fem.SolverFailureError(
                        f"window {n + 1}, sweep {l}, macro phase: {exc}"
                    ) from exc
                tm.macro_solve += time.perf_counter() - t_mark

                t_mark = time.perf_counter()
                losses = np.zeros(plan.n_macro + 1)
                for k in range(1, plan.n_macro + 1):
                    p = 0.0
                    for g, area in enumerate(disc.gauss_areas):
                        for i in range(coarse_idx[k - 1] + 1, coarse_idx[k] + 1):
                            src = MacroSource(b_ms[i, g], db_ms[i, g],
                                              float(da_ms[i, g]), kappa)
                            p += area * cell.joule_density(
                                all_states[g][i - 1], all_states[g][i], src, dt_m)
                    losses[k] = p / plan.meso_ratio
                energy = np.array([
                    window_energy(wf_cur.values[k],
                                  [all_states[g][coarse_idx[k]]
                                   for g in range(n_gp)])
                    for k in range(plan.n_macro + 1)])

                cur_b, cur_dta = _field_waveforms(disc, wf_cur)
                ref_b.settle(cur_b.values)
                ref_dta.settle(cur_dta.values)
                ref_losses.settle(losses)
                ref_energy.settle(energy)

                err_b = wr_error_metrics(prev_fields[0], cur_b,
                                         Waveform(wf_cur.t, ref_b.values)) \
                    if np.abs(ref_b.values).max() > 0.0 else 0.0
                err_dta = wr_error_metrics(prev_fields[1], cur_dta,
                                           Waveform(wf_cur.t, ref_dta.values)) \
                    if np.abs(ref_dta.values).max() > 0.0 else 0.0
                err_losses = _series_change(prev_losses, losses,
                                            ref_losses.values)
                err_energy = _series_change(prev_energy, energy,
                                            ref_energy.values)

                gate_num = _linf_l2(mass_u, wf_cur.values - wf_prev.values)
                if gate_den == 0.0:
                    gate_den = _linf_l2(mass_u, wf_cur.values)
                gate_value = 0.0 if gate_den == 0.0 else gate_num / gate_den
                tm.macro_assemble += time.perf_counter() - t_mark

                window_iterates.append(WrIterate(wf_cur, losses, energy,
                                                 err_b, err_dta, err_losses,
                                                 err_energy, gate_value))
                prev_fields = (cur_b, cur_dta)
                prev_losses, prev_energy = losses, energy
                wf_prev = wf_cur
                if gate_value < plan.tol:
                    win_converged = True
                    break

            iterates.append(window_iterates)
            wr_counts.append(len(window_iterates))
            converged_flags.append(win_converged)

            final = window_iterates[-1]
            alpha_seed = final.waveform.values[-1].copy()
            cell_states = [all_states[g][-1] for g in range(n_gp)]
            b_end = disc.gauss_b(final.waveform.values[-1])
            b_pen = disc.gauss_b(final.waveform.values[-2])
            a_end = disc.gauss_a(final.waveform.values[-1])
            a_pen = disc.gauss_a(final.waveform.values[-2])
            dt_mac = final.waveform.dt
            seed_rates = ((b_end - b_pen) / dt_mac, (a_end - a_pen) / dt_mac)

            full_values.extend(final.waveform.values[1:])
            full_losses.extend(final.losses[1:])
            full_energy.extend(final.energy[1:])
            full_t.extend(final.waveform.t[1:])
    finally:
        if pool is not None:
            pool.shutdown()

    waveform = Waveform(np.array(full_t), np.array(full_values))
    return WrRunReport(waveform, np.array(full_losses), np.array(full_energy),
                       iterates, wr_counts, converged_flags, meso_solves,
                       communications, n_gp, plan.n_meso, tm, plan,
                       cell_states)


def write_wr_convergence(path, report: WrRunReport) -> None:
    """CSV table of the sweep-by-sweep errors, one row per (window, sweep)."""
    with open(path, "w") as f:
        f.write("window, l, err_fields_bM, err_fields_dta, "
                "err_losses, err_energy\n")
        for n, window in enumerate(report.iterates, start=1):
            for l, it in enumerate(window, start=1):
                f.write(f"{n}, {l}, {it.err_fields_b:.9e}, "
                        f"{it.err_fields_dta:.9e}, {it.err_losses:.9e}, "
                        f"{it.err_energy:.9e}\n")
