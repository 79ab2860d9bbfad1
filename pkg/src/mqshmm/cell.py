"""Periodic mesoscale cell problems and the upscaled constitutive law.

One cell represents one grain period, normalized to the unit square.  The
normalization rescales the corrector potential by the physical period p and
the conductivity by p^2; with that pair of scalings the unit-cell equations,
Joule densities and averaged fields reproduce the physical-period problem
exactly, so drivers work in physical macroscale quantities throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem
from .material import Linear, NU0
from .mesh import Mesh2D, PeriodicPairing, Region

_MASS_PATTERN = np.array([[2.0, 1.0, 1.0],
                          [1.0, 2.0, 1.0],
                          [1.0, 1.0, 2.0]]) / 12.0


@dataclass(frozen=True)
class NewtonOptions:
    tol: float = 1e-6
    max_iter: int = 15


@dataclass(frozen=True)
class MacroSource:
    """Downscaled sources of one Gauss point at one (end-of-step) time.

    ``da_m_dt`` is the physical time derivative of the macroscale potential;
    the cell discretization converts it to unit-cell units internally.
    ``kappa`` scales the rotational d_t b_M contribution to the electric
    field; 1 reproduces the full two-dimensional coupling.
    """

    b_m: np.ndarray                  # (2,)
    db_m_dt: np.ndarray              # (2,)
    da_m_dt: float = 0.0
    kappa: float = 1.0


@dataclass(frozen=True)
class UpscaledLaw:
    """Averaged field h_M and tangent dh_M/db_M handed to the macro assembly."""

    h: np.ndarray                    # (2,)
    jacobian: np.ndarray             # (2, 2)
    provenance: str                  # 'exact' | 'finite-difference' | 'frozen-waveform'


class CellDiscretization:
    """Immutable per-mesh data shared by every state of one cell problem.

    Material laws are looked up per region tag; conducting triangles carry
    sigma * pitch^2 in the mass and source terms (unit-cell normalization).
    """

    def __init__(self, mesh: Mesh2D, pairing: PeriodicPairing,
                 laws: dict[int, object] | None = None,
                 sigma: dict[int, float] | None = None,
                 pitch: float = 1.0):
        if pitch <= 0.0:
            raise ValueError(f"pitch must be positive, got {pitch}")
        self.mesh = mesh
        self.pairing = pairing
        self.pitch = pitch
        self.laws = laws or {Region.CONDUCTING_GRAIN: Linear(NU0),
                             Region.INSULATION: Linear(NU0)}
        sigma = sigma if sigma is not None else {}
        self.geom = fem.mesh_geometry(mesh)
        self.dofs = fem.apply_periodic(fem.build_dofmap(mesh.n_nodes), pairing)
        self.total_area = float(self.geom.areas.sum())

        self.sigma_eff = np.zeros(mesh.n_triangles)
        for reg, val in sigma.items():
            self.sigma_eff[mesh.region == reg] = val * pitch * pitch
        self._region_masks = {int(r): mesh.region == r
                              for r in np.unique(mesh.region)}
        for r in self._region_masks:
            if r not in self.laws:
                raise KeyError(f"no material law for region {Region(r).name}")

        self.mass = fem.mass_matrix(mesh, self.dofs, self.sigma_eff)
        # source moments: integrals of sigma_eff * {1, y1, y2} * phi_i
        tris = mesh.triangles
        coords = mesh.nodes[tris]                       # (nt, 3, 2)
        w = self.sigma_eff * self.geom.areas
        s0 = np.repeat((w / 3.0)[:, None], 3, axis=1)
        s1 = w[:, None] * np.einsum("ij,tj->ti", _MASS_PATTERN, coords[..., 0])
        s2 = w[:, None] * np.einsum("ij,tj->ti", _MASS_PATTERN, coords[..., 1])
        self.src_const = fem.scatter_vector_batch(self.dofs, tris, s0)
        self.src_y1 = fem.scatter_vector_batch(self.dofs, tris, s1)
        self.src_y2 = fem.scatter_vector_batch(self.dofs, tris, s2)

    @property
    def n_free(self) -> int:
        return self.dofs.n_free

    def eval_law(self, b_total: np.ndarray, with_tangent: bool = True):
        """Per-triangle h (and tangent) using each region's law."""
        h = np.empty_like(b_total)
        d = np.empty((b_total.shape[0], 2, 2)) if with_tangent else None
        for reg, mask in self._region_masks.items():
            law = self.laws[reg]
            h[mask] = law.h_of_b(b_total[mask])
            if with_tangent:
                d[mask] = law.dh_db(b_total[mask])
        return (h, d) if with_tangent else h

    def source_vector(self, source: MacroSource) -> np.ndarray:
        """(sigma_eff e_M, phi_i) with e_M in unit-cell units."""
        da = source.da_m_dt / self.pitch
        k = source.kappa
        dbx, dby = source.db_m_dt
        return (-da) * self.src_const - k * dbx * self.src_y2 + k * dby * self.src_y1


@dataclass
class CellState:
    """Correction potential of one cell at one time."""

    disc: CellDiscretization
    alpha_c: np.ndarray
    t: float = 0.0
    newton_trace: list = field(default_factory=list, compare=False)

    @property
    def nodal(self) -> np.ndarray:
        return self.disc.dofs.expand(self.alpha_c)

    def b_c(self) -> np.ndarray:
        """Per-triangle correction flux density (cell average is zero)."""
        return fem.curl_field(self.disc.geom, self.disc.mesh.triangles, self.nodal)


def zero_state(disc: CellDiscretization, t: float = 0.0) -> CellState:
    return CellState(disc, np.zeros(disc.n_free), t)


def mean_b_c(state: CellState) -> np.ndarray:
    """Cell average of the correction flux; periodicity makes it vanish."""
    g = state.disc.geom
    return g.areas @ state.b_c() / state.disc.total_area


def residual_and_tangent(disc: CellDiscretization, alpha, alpha_prev, dt,
                         source: MacroSource, f_src=None, with_tangent=True):
    """Backward-Euler residual (and tangent) of one cell at DOF vector alpha.

    Shared by the inner Newton solver and by the coupled-system driver,
    which assembles the same blocks into a monolithic Jacobian.  ``f_src``
    may be passed to reuse a precomputed source vector.
    """
    if f_src is None:
        f_src = disc.source_vector(source)
    nodal = disc.dofs.expand(alpha)
    b_tot = fem.curl_field(disc.geom, disc.mesh.triangles, nodal) + source.b_m
    out = disc.eval_law(b_tot, with_tangent)
    h = out[0] if with_tangent else out
    force = fem.scatter_vector_batch(
        disc.dofs, disc.mesh.triangles, fem.internal_force(disc.geom, h))
    resid = force - f_src + disc.mass @ ((alpha - alpha_prev) / dt)
    if not with_tangent:
        return resid
    jac = fem.assemble_matrix_batch(
        disc.dofs, disc.mesh.triangles, fem.tangent_blocks(disc.geom, out[1]))
    jac = jac + disc.mass / dt
    return resid, jac


def meso_step(state: CellState, source: MacroSource, dt: float,
              newton: NewtonOptions = NewtonOptions()) -> CellState:
    """One backward-Euler step of the cell problem with end-of-step sources."""
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    disc = state.disc
    f_src = disc.source_vector(source)

    def eval_fn(alpha):
        return residual_and_tangent(disc, alpha, state.alpha_c, dt, source,
                                    f_src)

    alpha, trace = fem.newton_solve(eval_fn, state.alpha_c,
                                    newton.tol, newton.max_iter)
    return CellState(disc, alpha, state.t + dt, newton_trace=trace)


def upscale_h(state: CellState, b_m: np.ndarray) -> np.ndarray:
    """Cell-averaged magnetic field <h(b_c + b_M)>."""
    disc = state.disc
    h = disc.eval_law(state.b_c() + np.asarray(b_m, dtype=float), with_tangent=False)
    return disc.geom.areas @ h / disc.total_area


def exact_jacobian(state: CellState, b_m: np.ndarray) -> np.ndarray:
    """<dh/db(b_c + b_M)> with the correction frozen (waveform-relaxation tangent)."""
    disc = state.disc
    _, d = disc.eval_law(state.b_c() + np.asarray(b_m, dtype=float))
    return np.einsum("t,tij->ij", disc.geom.areas, d) / disc.total_area


def fd_jacobian(state_prev: CellState, source: MacroSource, dt: float,
                delta: float = 1e-6,
                newton: NewtonOptions = NewtonOptions()):
    """Re-solved finite-difference tangent of the upscaled law.

    Three meso solves from the same previous state: nominal, and b_M
    perturbed along each axis.  A perturbation of b_M at the new time level
    also shifts its backward difference, so db_m_dt moves by delta/dt with
    it.  Returns the law, the nominal new state and the solve count.
    """
    b_m = np.asarray(source.b_m, dtype=float)
    step = delta * max(1.0, float(np.linalg.norm(b_m)))
    nominal = meso_step(state_prev, source, dt, newton)
    h0 = upscale_h(nominal, b_m)
    jac = np.empty((2, 2))
    for k in range(2):
        e = np.zeros(2)
        e[k] = step
        pert = MacroSource(b_m + e, np.asarray(source.db_m_dt) + e / dt,
                           source.da_m_dt, source.kappa)
        st = meso_step(state_prev, pert, dt, newton)
        jac[:, k] = (upscale_h(st, b_m + e) - h0) / step
    law = UpscaledLaw(h0, jac, provenance="finite-difference")
    return law, nominal, 3


# --------------------------------------------------------------------------
# coupling-derivative helpers for the assembled full-Newton driver
# --------------------------------------------------------------------------

def dforce_db_m(state: CellState, b_m: np.ndarray) -> np.ndarray:
    """(n_free, 2) derivative of the cell magnetic force w.r.t. b_M."""
    disc = state.disc
    _, d = disc.eval_law(state.b_c() + np.asarray(b_m, dtype=float))
    blocks = np.einsum("t,tik,tkl->til", disc.geom.areas, disc.geom.curls, d)
    out = np.zeros((disc.n_free, 2))
    g = disc.dofs.node_dof[disc.mesh.triangles].ravel()
    keep = g >= 0
    np.add.at(out, g[keep], blocks.reshape(-1, 2)[keep])
    return out


def davg_h_dalpha(state: CellState, b_m: np.ndarray) -> np.ndarray:
    """(2, n_free) derivative of the upscaled field w.r.t. the correction DOFs."""
    return dforce_db_m(state, b_m).T / state.disc.total_area


# --------------------------------------------------------------------------
# homogenized conductivity (static auxiliary cell problems)
# --------------------------------------------------------------------------

def solve_conductivity_cell(disc: CellDiscretization, direction: int,
                            sigma_reg_factor: float = 1e-6) -> np.ndarray:
    """Nodal corrector potential chi_j of the conduction cell problem.

    Insulating triangles receive sigma_reg_factor times the peak conductivity
    so the periodic problem stays coercive; this regularization exists only
    here, the transient cell problem keeps its exact zero.
    """
    if direction not in (0, 1):
        raise ValueError(f"direction must be 0 or 1, got {direction}")
    sigma = _regularized_sigma(disc, sigma_reg_factor)
    g = disc.geom
    blocks = np.einsum("t,tik,tjk->tij", sigma * g.areas, g.grads, g.grads)
    matrix = fem.assemble_matrix_batch(disc.dofs, disc.mesh.triangles, blocks)
    fe = (sigma * g.areas)[:, None] * g.grads[:, :, direction]
    rhs = fem.scatter_vector_batch(disc.dofs, disc.mesh.triangles, fe)
    chi = fem.solve_linear(fem.SparseSystem(matrix, rhs))
    return disc.dofs.expand(chi)


def _regularized_sigma(disc: CellDiscretization, factor: float) -> np.ndarray:
    sigma = disc.sigma_eff.copy()
    peak = sigma.max()
    if peak <= 0.0:
        raise ValueError("conductivity cell problem needs a conducting phase")
    sigma[sigma <= 0.0] = factor * peak
    return sigma


def homogenized_sigma(disc: CellDiscretization,
                      sigma_reg_factor: float = 1e-6) -> np.ndarray:
    """Homogenized 2x2 conductivity tensor of the cell's sigma field."""
    sigma = _regularized_sigma(disc, sigma_reg_factor)
    g = disc.geom
    tris = disc.mesh.triangles
    out = np.empty((2, 2))
    for j in range(2):
        chi = solve_conductivity_cell(disc, j, sigma_reg_factor)
        grad_chi = np.einsum("ti,tik->tk", chi[tris], g.grads)
        for i in range(2):
            ident = 1.0 if i == j else 0.0
            out[i, j] = np.sum(sigma * g.areas * (ident - grad_chi[:, i]))
    return out / disc.total_area


# --------------------------------------------------------------------------
# dissipation and stored energy of one cell
# --------------------------------------------------------------------------

def joule_density(state_prev: CellState, state: CellState,
                  source: MacroSource, dt: float) -> float:
    """Cell-averaged physical eddy-current loss density of one step.

    The local electric field is e = -d_t a_c + e_M with the potential rate
    taken as the backward difference over the step; slaves use their own
    coordinates in the (non-periodic) e_M term.
    """
    disc = state.disc
    nodes = disc.mesh.nodes
    da_c = (state.nodal - state_prev.nodal) / dt
    k = source.kappa
    dbx, dby = source.db_m_dt
    e_m = (-source.da_m_dt / disc.pitch
           - k * (dbx * nodes[:, 1] - dby * nodes[:, 0]))
    e_loc = (-da_c + e_m)[disc.mesh.triangles]          # (nt, 3)
    q = np.einsum("ti,ij,tj->t", e_loc, _MASS_PATTERN, e_loc)
    return float(np.sum(disc.sigma_eff * disc.geom.areas * q) / disc.total_area)


def coenergy_density(state: CellState, b_m: np.ndarray) -> float:
    """Cell-averaged magnetic coenergy density at total flux b_c + b_M."""
    disc = state.disc
    b_tot = state.b_c() + np.asarray(b_m, dtype=float)
    w = np.empty(disc.mesh.n_triangles)
    for reg, mask in disc._region_masks.items():
        w[mask] = disc.laws[reg].coenergy_density(b_tot[mask])
    return float(disc.geom.areas @ w / disc.total_area)


def dump_cell_waveforms(path, waveforms: dict[int, "object"]) -> None:
    """Text table `gauss_id time_index dof_index value` of cell DOF waveforms."""
    with open(path, "w") as f:
        f.write("gauss_id time_index dof_index value\n")
        for gp in sorted(waveforms):
            wf = waveforms[gp]
            for k, row in enumerate(wf.values):
                for d, v in enumerate(np.atleast_1d(row)):
                    f.write(f"{gp} {k} {d} {v!r}\n")
