"""Acceptance runs for the two-scale solver, one test per gate.

These are the slow end-to-end checks: the quarter-composite benchmark is
driven by all three solvers (waveform relaxation, monolithic, resolved
reference) and the sweep/time-step/multirate trends are asserted against
pinned tolerances.  Each test finishes with a one-line verdict; run

    python3 -m pytest tests/test_acceptance.py -v -s

to see them.  Expected wall time is ten to fifteen minutes on one core,
dominated by the 800-triangle-cell benchmark and the time-step sweep.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mqshmm import analysis, driver_monolithic as dm
from mqshmm.cell import (CellDiscretization, CellState, MacroSource,
                         NewtonOptions, exact_jacobian, homogenized_sigma,
                         meso_step, upscale_h, zero_state)
from mqshmm.driver_wr import WindowPlan, run_wr
from mqshmm.macro import MacroDiscretization, SourceSpec
from mqshmm.material import NU0, Brauer, Linear
from mqshmm.mesh import (GeometryParams, Homogeneous, Laminate, Region,
                         SquareInclusion, generate_cell_mesh,
                         generate_macro_mesh, generate_reference_mesh)
from mqshmm.reference import ReferenceDiscretization, run_reference

BRAUER = Brauer(388.0, 0.3774, 2.97)
SIGMA = 5e6
F_HZ = 50e3
PERIOD = 1.0 / F_HZ
SRC = SourceSpec(1.2e10, F_HZ)

NEWTON = NewtonOptions(1e-8, 25)
MESO_NEWTON = NewtonOptions(1e-8, 40)


def _verdict(line):
    print(f"\n{line}")


def _composite_discs(grains, cell_n):
    geo = GeometryParams(grains=grains)
    mdisc = MacroDiscretization(generate_macro_mesh(geo))
    cmesh, pairing = generate_cell_mesh(SquareInclusion(geo.fill),
                                        n_per_side=cell_n)
    cdisc = CellDiscretization(cmesh, pairing,
                               laws={Region.CONDUCTING_GRAIN: BRAUER,
                                     Region.INSULATION: Linear(NU0)},
                               sigma={Region.CONDUCTING_GRAIN: SIGMA},
                               pitch=geo.pitch)
    return geo, mdisc, cdisc


def _dissipated(report):
    series = analysis.loss_series(report)
    return float(np.trapezoid(series.power, series.t))


# --------------------------------------------------------------------------
# shared expensive runs (module-scoped so each is computed once)
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def benchmark():
    """Quarter composite, 4x4 grains, 800-triangle cells, one 50 kHz period.

    The waveform-relaxation run is forced through six sweeps; the resolved
    reference supplies the homogenization-error yardstick.
    """
    geo, mdisc, cdisc = _composite_discs(grains=4, cell_n=20)
    mono = dm.run_monolithic(mdisc, cdisc, SRC, 0.0, PERIOD, 20,
                             newton=NEWTON, meso_newton=MESO_NEWTON)
    wr = run_wr(mdisc, cdisc, SRC, WindowPlan(0.0, PERIOD, 1, 20, 1, 6, 1e-14),
                newton=NEWTON, meso_newton=MESO_NEWTON)
    rdisc = ReferenceDiscretization(generate_reference_mesh(geo, refinement=2),
                                    laws={Region.CONDUCTING_GRAIN: BRAUER,
                                          Region.INSULATION: Linear(NU0)},
                                    sigma={Region.CONDUCTING_GRAIN: SIGMA})
    ref = run_reference(rdisc, SRC, 0.0, PERIOD, 100, NewtonOptions(1e-6, 40))
    errors = analysis.convergence_errors(wr, mono, reference_run=ref)
    return {"mono": mono, "wr": wr, "errors": errors}


@pytest.fixture(scope="module")
def sweep_discs():
    # same geometry as the benchmark, desk-sized cell mesh for the sweeps
    return _composite_discs(grains=4, cell_n=8)


@pytest.fixture(scope="module")
def dt_sweep(sweep_discs):
    """Converged WR runs while the macro step halves.

    The dissipation limit is Richardson-extrapolated from the finest pair,
    so the level errors are clean O(dt) measurements; an explicit control
    run would contaminate the fitted order through its own O(dt) error.
    """
    _, mdisc, cdisc = sweep_discs
    levels = [10, 20, 40, 80]
    runs = {}
    for n in levels:
        plan = WindowPlan(0.0, PERIOD, 1, n, 1, 20, 1e-8)
        runs[n] = run_wr(mdisc, cdisc, SRC, plan,
                         newton=NEWTON, meso_newton=MESO_NEWTON)
        assert all(runs[n].converged)
    q = {n: _dissipated(runs[n]) for n in levels}
    q_lim = 2.0 * q[80] - q[40]
    errs = np.array([abs(q[n] - q_lim) / abs(q_lim) for n in levels])
    return {"runs": runs, "levels": levels, "errs": errs, "q_lim": q_lim}


@pytest.fixture(scope="module")
def multirate_run(sweep_discs):
    _, mdisc, cdisc = sweep_discs
    plan = WindowPlan(0.0, PERIOD, 1, 20, 5, 20, 1e-8)
    return run_wr(mdisc, cdisc, SRC, plan,
                  newton=NEWTON, meso_newton=MESO_NEWTON)


@pytest.fixture(scope="module")
def fullnewton_pair():
    _, mdisc, cdisc = _composite_discs(grains=1, cell_n=4)
    kw = dict(newton=NewtonOptions(1e-10, 25))
    coupled = dm.run_monolithic_fullnewton(mdisc, cdisc, SRC, 0.0,
                                           0.1 * PERIOD, 2, mode="coupled",
                                           **kw)
    schur = dm.run_monolithic_fullnewton(mdisc, cdisc, SRC, 0.0,
                                         0.1 * PERIOD, 2, mode="schur", **kw)
    return coupled, schur


# --------------------------------------------------------------------------
# 1. sweep convergence towards the monolithic solution
# --------------------------------------------------------------------------

def test_wr_sweeps_converge_to_monolithic(benchmark):
    rep = benchmark["errors"]
    assert rep.sweeps == [(1, l) for l in range(1, 7)]

    for err in (rep.err_losses, rep.err_energy):
        assert np.all(err > 0.0)
        assert np.all(np.diff(err) < 0.0)          # monotone over l = 2..6
        assert (err[1:] / err[:-1]).mean() <= 0.5

    # the converged sweeps must beat the homogenization gap early
    assert rep.mono_vs_ref_losses > 0.0 and rep.mono_vs_ref_energy > 0.0
    cross_p = next(l for l, e in enumerate(rep.err_losses, start=1)
                   if e < rep.mono_vs_ref_losses)
    cross_w = next(l for l, e in enumerate(rep.err_energy, start=1)
                   if e < rep.mono_vs_ref_energy)
    assert cross_p <= 5 and cross_w <= 5

    _verdict(f"PASS sweep convergence: mean decay "
             f"{(rep.err_losses[1:] / rep.err_losses[:-1]).mean():.3f} (losses) / "
             f"{(rep.err_energy[1:] / rep.err_energy[:-1]).mean():.3f} (energy), "
             f"below reference gap at l={cross_p}/{cross_w}")


# --------------------------------------------------------------------------
# 2. coupled and Schur-reduced Newton take the same updates
# --------------------------------------------------------------------------

def test_coupled_and_schur_updates_match(fullnewton_pair):
    coupled, schur = fullnewton_pair
    assert coupled.newton_counts == schur.newton_counts

    worst = 0.0
    for step_c, step_s in zip(coupled.update_history, schur.update_history):
        assert len(step_c) == len(step_s)
        # relative to the step's update scale: trailing updates shrink to
        # machine noise, where a per-update denominator is meaningless
        denom = max(np.linalg.norm(d) for d in step_c)
        for dc, ds in zip(step_c, step_s):
            worst = max(worst, np.linalg.norm(dc - ds) / denom)
    assert worst <= 1e-9

    _verdict(f"PASS block-elimination equivalence: worst update "
             f"difference {worst:.2e} relative")


# --------------------------------------------------------------------------
# 3. analytic tangents against central finite differences
# --------------------------------------------------------------------------

def _central_fd(fn, x, step):
    out = np.empty((2, 2))
    for k in range(2):
        e = np.zeros(2)
        e[k] = step
        out[:, k] = (np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * step)
    return out


def test_analytic_tangents_match_finite_differences():
    # upscaled law with the correction frozen, 20 random cell states
    _, _, cdisc = _composite_discs(grains=1, cell_n=6)
    rng = np.random.default_rng(11)
    worst_cell = 0.0
    for _ in range(20):
        state = CellState(cdisc, 0.02 * rng.normal(size=cdisc.n_free))
        b_m = rng.uniform(-1.3, 1.3, size=2)
        jac = exact_jacobian(state, b_m)
        fd = _central_fd(lambda b: upscale_h(state, b), b_m, 1e-6)
        worst_cell = max(worst_cell,
                         np.linalg.norm(jac - fd) / np.linalg.norm(jac))
    assert worst_cell <= 1e-8

    # bare material law, 100 random states
    worst_law = 0.0
    for _ in range(100):
        b = rng.uniform(-1.3, 1.3, size=2)
        jac = BRAUER.dh_db(b)
        fd = _central_fd(BRAUER.h_of_b, b, 1e-6)
        worst_law = max(worst_law,
                        np.linalg.norm(jac - fd) / np.linalg.norm(jac))
    assert worst_law <= 1e-6

    _verdict(f"PASS analytic tangents: worst FD mismatch {worst_cell:.2e} "
             f"(upscaled law) / {worst_law:.2e} (material law)")


# --------------------------------------------------------------------------
# 4. homogenization oracles with closed-form answers
# --------------------------------------------------------------------------

def test_laminate_and_linear_homogenization_oracles():
    # a half-half laminate mixes series across the layers (harmonic mean)
    # and parallel along them (arithmetic mean)
    lmesh, lpair = generate_cell_mesh(Laminate(0.5, axis="x"), 8)
    ldisc = CellDiscretization(lmesh, lpair,
                               laws={Region.CONDUCTING_GRAIN: Linear(1.0),
                                     Region.INSULATION: Linear(1.0)},
                               sigma={Region.CONDUCTING_GRAIN: 1.0,
                                      Region.INSULATION: 3.0})
    harmonic = 2.0 / (1.0 / 1.0 + 1.0 / 3.0)
    arithmetic = 0.5 * (1.0 + 3.0)
    assert_allclose(homogenized_sigma(ldisc), np.diag([harmonic, arithmetic]),
                    rtol=1e-10, atol=1e-10)

    # a homogeneous linear cell upscales to nu * I with no correction
    hmesh, hpair = generate_cell_mesh(Homogeneous(), 6)
    hdisc = CellDiscretization(hmesh, hpair,
                               laws={Region.CONDUCTING_GRAIN: Linear(750.0)})
    b_m = np.array([0.6, -0.3])
    state = meso_step(zero_state(hdisc), MacroSource(b_m, np.zeros(2)), dt=1.0)
    assert not state.alpha_c.any()
    assert_allclose(upscale_h(state, b_m), 750.0 * b_m, rtol=1e-12)
    assert_allclose(exact_jacobian(state, b_m), 750.0 * np.eye(2),
                    rtol=1e-12, atol=1e-9)

    _verdict("PASS homogenization oracles: laminate mixing rules and the "
             "linear limit are exact")


# --------------------------------------------------------------------------
# 5. first-order convergence in the macro time step
# --------------------------------------------------------------------------

def test_dissipation_error_is_first_order_in_dt(dt_sweep):
    errs = dt_sweep["errs"]
    dts = PERIOD / np.asarray(dt_sweep["levels"], dtype=float)
    assert np.all(errs > 0.0)
    assert np.all(np.diff(errs) < 0.0)       # halving dt shrinks the error
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert 0.7 <= slope <= 1.3
    _verdict(f"PASS time-step convergence: fitted order {slope:.3f}, "
             f"errors {np.array2string(errs, precision=2)}")


# --------------------------------------------------------------------------
# 6. cost model and the solver-count bookkeeping
# --------------------------------------------------------------------------

def test_cost_model_speedup_and_counter_audits(benchmark, fullnewton_pair,
                                               dt_sweep, multirate_run):
    # vanishing communication and jacobian cost, three Newton passes per
    # step, three cell solves per finite-difference tangent, two sweeps
    p = analysis.CostParams(n_steps=10, n_windows=1, n_wr=2.0, n_newton=3.0,
                            n_gauss=5, n_dim=3, cost_meso_solve=1.0,
                            cost_comm=0.0, cost_jacobian=0.0)
    rep = analysis.cost_model(p)
    assert rep.kappa == 0.0
    assert abs(rep.speedup_approx - 4.5) <= 1e-12

    # the solver-count identities hold exactly on every run made here
    reports = [benchmark["mono"], benchmark["wr"], *fullnewton_pair,
               *dt_sweep["runs"].values(), multirate_run]
    discrepancies = [analysis.audit_costs(r) for r in reports]
    assert discrepancies == [0] * len(reports)

    _verdict(f"PASS cost model: predicted speedup {rep.speedup_approx!r}, "
             f"{len(reports)} run audits all zero")


# --------------------------------------------------------------------------
# 7. multirate meso grid agrees within the time-step error band
# --------------------------------------------------------------------------

def test_multirate_meso_grid_is_consistent(dt_sweep, multirate_run):
    assert all(multirate_run.converged)
    assert multirate_run.n_meso_per_window == 100

    q_lim = dt_sweep["q_lim"]
    q_match = _dissipated(dt_sweep["runs"][20])
    diff = abs(_dissipated(multirate_run) - q_match) / abs(q_lim)
    band = dt_sweep["errs"][dt_sweep["levels"].index(20)]
    assert diff <= band
    _verdict(f"PASS multirate consistency: loss shift {diff:.2e} within the "
             f"time-step band {band:.2e}")
