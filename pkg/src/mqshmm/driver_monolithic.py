"""Monolithic two-scale driver: cell batches inside every macro Newton pass.

Both scales share one time grid.  Within every macroscale Newton iteration
the driver downscales the current iterate's sources to each Gauss-point
cell, re-solves the three finite-difference cell problems and upscales
fresh constitutive data.  Whether a time step has converged is judged on a
residual re-evaluated with the newest corrections held frozen, which costs
no extra cell solves; the audited mesoscale solve count is therefore
exactly (Newton iterations) x (Gauss points) x 3.

``run_monolithic_fullnewton`` solves the same stepped system as one
coupled Newton iteration over macroscale and all correction DOFs, either
assembled in block form or reduced by the Schur complement; the two paths
produce the same iterates up to linear-algebra roundoff and serve as the
equivalence oracle for the reduced driver.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import cell, fem
from .cell import CellDiscretization, CellState, MacroSource, NewtonOptions, UpscaledLaw
from .macro import MacroDiscretization, SourceSpec
from .waveform import Waveform, time_grid


class MemoryBudgetError(RuntimeError):
    """The coupled system would exceed the configured DOF budget."""


@dataclass
class PhaseTimings:
    """Wall-clock seconds spent per driver phase."""

    meso_solve: float = 0.0
    communication: float = 0.0
    macro_assemble: float = 0.0
    macro_solve: float = 0.0


@dataclass
class MonolithicRunReport:
    """Waveform, counters and series of one monolithic run.

    ``meso_solves`` counts single backward-Euler cell solves;
    ``communications`` counts per-Gauss-point downscale/upscale round
    trips.  ``n_dim`` is the number of cell solves each Jacobian needs
    (3 for the finite-difference path, 1 for the coupled full-Newton
    oracle), so the audit identity is
    ``meso_solves == sum(newton_counts) * n_gauss * n_dim``.
    """

    waveform: Waveform
    newton_counts: list[int]
    meso_solves: int
    communications: int
    n_gauss: int
    n_dim: int
    timings: PhaseTimings
    losses: np.ndarray
    energy: np.ndarray
    mode: str = "finite-difference"
    update_history: list | None = None


def _downscale(disc: MacroDiscretization, alpha, alpha_prev, dt, kappa):
    """Per-Gauss-point sources of the current iterate (backward differences)."""
    b = disc.gauss_b(alpha)
    db = (b - disc.gauss_b(alpha_prev)) / dt
    da = (disc.gauss_a(alpha) - disc.gauss_a(alpha_prev)) / dt
    return [MacroSource(b[g], db[g], float(da[g]), kappa)
            for g in range(disc.n_gauss)]


def _laws_from_states(states, b_gp):
    """Upscaled laws evaluated on existing corrections (no extra solves)."""
    return [UpscaledLaw(cell.upscale_h(st, b_gp[g]),
                        cell.exact_jacobian(st, b_gp[g]), "exact")
            for g, st in enumerate(states)]


def _hom_series(disc, states_prev, states, sources, dt, alpha):
    """Loss power and total coenergy of the accepted step."""
    p = 0.0
    w = disc.background_coenergy(alpha)
    b = disc.gauss_b(alpha)
    for g, area in enumerate(disc.gauss_areas):
        p += area * cell.joule_density(states_prev[g], states[g],
                                       sources[g], dt)
        w += area * cell.coenergy_density(states[g], b[g])
    return p, w


_NO_SOURCE = MacroSource(np.zeros(2), np.zeros(2))


def run_monolithic(disc: MacroDiscretization, cell_disc: CellDiscretization,
                   source: SourceSpec, t0: float, t_end: float, n_steps: int,
                   *, kappa: float = 1.0,
                   newton: NewtonOptions = NewtonOptions(),
                   meso_newton: NewtonOptions = NewtonOptions(),
                   fd_delta: float = 1e-6, n_workers: int = 1,
                   comm_sleep_s: float = 0.0) -> MonolithicRunReport:
    """Two-scale transient with finite-difference upscaled tangents.

    Every Gauss point carries a persistent cell state evolved on the shared
    grid; ``n_workers > 1`` solves the per-iteration cell batch in a thread
    pool with index-ordered (deterministic) reduction.  ``comm_sleep_s``
    adds an artificial per-message delay so communication-bound scaling can
    be emulated on one machine.
    """
    grid = time_grid(t0, t_end, n_steps)
    dt = float(grid[1] - grid[0])
    n_gp = disc.n_gauss
    alpha = np.zeros(disc.n_free)
    values = np.zeros((n_steps + 1, disc.n_free))
    losses = np.zeros(n_steps + 1)
    energy = np.zeros(n_steps + 1)
    states = [cell.zero_state(cell_disc, t0) for _ in range(n_gp)]
    energy[0] = _hom_series(disc, states, states, [_NO_SOURCE] * n_gp,
                            1.0, alpha)[1]

    counts: list[int] = []
    meso_solves = 0
    communications = 0
    tm = PhaseTimings()
    pool = ThreadPoolExecutor(n_workers) if n_workers > 1 else None

    def batch(states_prev, sources, k, j):
        def one(g):
            try:
                return cell.fd_jacobian(states_prev[g], sources[g], dt,
                                        fd_delta, meso_newton)
            except (fem.SolverFailureError, ValueError) as exc:
                raise fem.SolverFailureError(
                    f"cell solve failed at step {k}, newton {j}, "
                    f"gauss {g}: {exc}") from exc
        if pool is not None:
            results = list(pool.map(one, range(n_gp)))
        else:
            results = [one(g) for g in range(n_gp)]
        laws = [r[0] for r in results]
        new_states = [r[1] for r in results]
        solves = sum(r[2] for r in results)
        return laws, new_states, solves

    try:
        for k in range(1, n_steps + 1):
            t_k = float(grid[k])
            js = source.current_density(t_k)
            alpha_prev = alpha
            states_prev = states
            gate = None
            n_nr = 0
            while True:
                t_mark = time.perf_counter()
                sources = _downscale(disc, alpha, alpha_prev, dt, kappa)
                communications += n_gp
                if comm_sleep_s > 0.0:
                    time.sleep(comm_sleep_s * n_gp)
                tm.communication += time.perf_counter() - t_mark

                t_mark = time.perf_counter()
                laws, new_states, solves = batch(states_prev, sources, k, n_nr)
                meso_solves += solves
                tm.meso_solve += time.perf_counter() - t_mark

                t_mark = time.perf_counter()
                resid = disc.residual(alpha, alpha_prev, dt, laws, js)
                if gate is None:
                    gate = newton.tol * (1.0 + np.linalg.norm(resid))
                jac = disc.jacobian(dt, laws)
                tm.macro_assemble += time.perf_counter() - t_mark

                t_mark = time.perf_counter()
                delta = fem.solve_linear(fem.SparseSystem(jac.tocsr(), -resid))
                tm.macro_solve += time.perf_counter() - t_mark
                alpha = alpha + delta
                n_nr += 1

                t_mark = time.perf_counter()
                frozen = _laws_from_states(new_states, disc.gauss_b(alpha))
                r_frozen = disc.residual(alpha, alpha_prev, dt, frozen, js)
                tm.macro_assemble += time.perf_counter() - t_mark
                if np.linalg.norm(r_frozen) <= gate:
                    break
                if n_nr >= newton.max_iter:
                    raise fem.SolverFailureError(
                        f"macro Newton stalled at step {k} after {n_nr} "
                        f"iterations, frozen residual "
                        f"{np.linalg.norm(r_frozen):.3e} > gate {gate:.3e}")

            states = new_states
            counts.append(n_nr)
            values[k] = alpha
            losses[k], energy[k] = _hom_series(disc, states_prev, states,
                                               sources, dt, alpha)
    finally:
        if pool is not None:
            pool.shutdown()

    return MonolithicRunReport(Waveform(grid, values), counts, meso_solves,
                               communications, n_gp, 3, tm, losses, energy)


# --------------------------------------------------------------------------
# coupled full-Newton oracle
# --------------------------------------------------------------------------

def _gauss_operators(disc: MacroDiscretization):
    """Dense maps from macro free DOFs to per-Gauss-point (b, a) values."""
    n_free = disc.n_free
    w_b = np.zeros((disc.n_gauss, 2, n_free))
    w_a = np.zeros((disc.n_gauss, n_free))
    curls = disc.geom.curls[disc.hom_tris]
    for g, nodes in enumerate(disc.mesh.triangles[disc.hom_tris]):
        for i, nid in enumerate(nodes):
            dof = disc.dofs.node_dof[nid]
            if dof >= 0:
                w_b[g, :, dof] += curls[g, i]
                w_a[g, dof] += 1.0 / 3.0
    return w_b, w_a


def _coupling_blocks(cell_disc: CellDiscretization, state: CellState,
                     source: MacroSource, area: float, dt: float,
                     w_b_g: np.ndarray, w_a_g: np.ndarray):
    """Off-diagonal Jacobian blocks of one Gauss point.

    B maps a macro update into the cell equations: the constitutive part
    through b_M plus the source part through the backward differences of
    (b_M, a_M).  C maps a correction update into the macro equations
    through the upscaled field.
    """
    d_force = cell.dforce_db_m(state, source.b_m)          # (n_c, 2)
    b_block = d_force @ w_b_g
    b_block += np.outer(cell_disc.src_const / cell_disc.pitch, w_a_g) / dt
    b_block += source.kappa / dt * (np.outer(cell_disc.src_y2, w_b_g[0])
                                    - np.outer(cell_disc.src_y1, w_b_g[1]))
    davg = cell.davg_h_dalpha(state, source.b_m)           # (2, n_c)
    c_block = area * w_b_g.T @ davg                        # (n_M, n_c)
    return b_block, c_block


def run_monolithic_fullnewton(disc: MacroDiscretization,
                              cell_disc: CellDiscretization,
                              source: SourceSpec, t0: float, t_end: float,
                              n_steps: int, *, mode: str = "schur",
                              kappa: float = 1.0,
                              newton: NewtonOptions = NewtonOptions(),
                              max_coupled_dofs: int = 20000
                              ) -> MonolithicRunReport:
    """Coupled Newton over macro and correction DOFs simultaneously.

    ``mode="coupled"`` assembles and solves the full block system;
    ``mode="schur"`` eliminates the cell blocks first.  Both use the same
    blocks at the same iterates, so their updates agree to linear-solver
    roundoff.  Per iteration each cell is linearized exactly once, and the
    only term left out of the blocks is the macro-iterate sensitivity of
    the correction tangent itself (second order near the root).
    """
    if mode not in ("coupled", "schur"):
        raise ValueError(f"unknown mode {mode!r}")
    n_gp = disc.n_gauss
    n_c = cell_disc.n_free
    n_total = disc.n_free + n_gp * n_c
    if n_total > max_coupled_dofs:
        raise MemoryBudgetError(
            f"coupled system has {n_total} DOFs, budget is {max_coupled_dofs}")

    grid = time_grid(t0, t_end, n_steps)
    dt = float(grid[1] - grid[0])
    w_b, w_a = _gauss_operators(disc)
    alpha = np.zeros(disc.n_free)
    corr = [np.zeros(n_c) for _ in range(n_gp)]
    values = np.zeros((n_steps + 1, disc.n_free))
    losses = np.zeros(n_steps + 1)
    energy = np.zeros(n_steps + 1)
    states = [cell.zero_state(cell_disc, t0) for _ in range(n_gp)]
    energy[0] = _hom_series(disc, states, states, [_NO_SOURCE] * n_gp,
                            1.0, alpha)[1]

    counts: list[int] = []
    meso_solves = 0
    communications = 0
    tm = PhaseTimings()
    history: list[list[np.ndarray]] = []

    for k in range(1, n_steps + 1):
        t_k = float(grid[k])
        js = source.current_density(t_k)
        alpha_prev = alpha
        corr_prev = [c.copy() for c in corr]
        states_prev = states
        gate = None
        step_updates: list[np.ndarray] = []

        while True:
            t_mark = time.perf_counter()
            sources = _downscale(disc, alpha, alpha_prev, dt, kappa)
            states = [CellState(cell_disc, corr[g], t_k) for g in range(n_gp)]
            b_gp = disc.gauss_b(alpha)

            laws = _laws_from_states(states, b_gp)
            r_macro = disc.residual(alpha, alpha_prev, dt, laws, js)
            j_mm = disc.jacobian(dt, laws)

            r_cells, j_cells, b_blocks, c_blocks = [], [], [], []
            for g in range(n_gp):
                r_g, j_g = cell.residual_and_tangent(
                    cell_disc, corr[g], corr_prev[g], dt, sources[g])
                b_blk, c_blk = _coupling_blocks(
                    cell_disc, states[g], sources[g],
                    float(disc.gauss_areas[g]), dt, w_b[g], w_a[g])
                r_cells.append(r_g)
                j_cells.append(j_g.tocsc())
                b_blocks.append(b_blk)
                c_blocks.append(c_blk)
            tm.macro_assemble += time.perf_counter() - t_mark

            norm = np.linalg.norm(np.concatenate([r_macro] + r_cells))
            if gate is None:
                gate = newton.tol * (1.0 + norm)
            if norm <= gate:
                break
            if len(step_updates) >= newton.max_iter:
                raise fem.SolverFailureError(
                    f"coupled Newton stalled at step {k} after "
                    f"{len(step_updates)} iterations, residual {norm:.3e} "
                    f"> gate {gate:.3e}")

            t_mark = time.perf_counter()
            if mode == "coupled":
                rows = [[j_mm] + [sp.csr_matrix(c) for c in c_blocks]]
                for g in range(n_gp):
                    row: list = [None] * (n_gp + 1)
                    row[0] = sp.csr_matrix(b_blocks[g])
                    row[g + 1] = j_cells[g]
                    rows.append(row)
                big = sp.bmat(rows, format="csr")
                rhs = -np.concatenate([r_macro] + r_cells)
                sol = fem.solve_linear(fem.SparseSystem(big, rhs))
                d_alpha = sol[:disc.n_free]
                d_corr = [sol[disc.n_free + g * n_c:disc.n_free + (g + 1) * n_c]
                          for g in range(n_gp)]
            else:
                j_bar = j_mm.toarray()
                r_bar = r_macro.copy()
                lus = [spla.splu(j_cells[g]) for g in range(n_gp)]
                for g in range(n_gp):
                    j_bar -= c_blocks[g] @ lus[g].solve(b_blocks[g])
                    r_bar -= c_blocks[g] @ lus[g].solve(r_cells[g])
                d_alpha = np.linalg.solve(j_bar, -r_bar)
                d_corr = [-lus[g].solve(r_cells[g] + b_blocks[g] @ d_alpha)
                          for g in range(n_gp)]
            meso_solves += n_gp
            communications += n_gp
            tm.macro_solve += time.perf_counter() - t_mark

            alpha = alpha + d_alpha
            for g in range(n_gp):
                corr[g] = corr[g] + d_corr[g]
            step_updates.append(d_alpha)

        counts.append(len(step_updates))
        history.append(step_updates)
        values[k] = alpha
        states = [CellState(cell_disc, corr[g], t_k) for g in range(n_gp)]
        losses[k], energy[k] = _hom_series(disc, states_prev, states,
                                           sources, dt, alpha)

    return MonolithicRunReport(Waveform(grid, values), counts, meso_solves,
                               communications, n_gp, 1, tm, losses, energy,
                               mode=mode, update_history=history)
