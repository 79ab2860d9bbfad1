"""Macroscale transient solver with per-Gauss-point constitutive callbacks.

Two-dimensional magnetic vector potential formulation on the quarter
domain: a backward-Euler transient with Newton linearization.  Triangles
outside the homogenized region carry a fixed linear background law; every
homogenized triangle owns one quadrature point (its barycenter) whose
h(b) relation is supplied fresh on each Newton pass by a caller-provided
law table.  That callback is the seam through which upscaled cell data
enters the macroscale equations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .cell import NewtonOptions, UpscaledLaw
from .material import NU0, Linear
from .mesh import Boundary, Mesh2D, Region
from .waveform import Waveform, time_grid


class LawCoverageError(LookupError):
    """The law table does not cover every homogenized Gauss point."""


@dataclass(frozen=True)
class SourceSpec:
    """Out-of-plane source current density j_s0 * sin(2*pi*f*t) [A/m^2]."""

    j_s0: float
    f: float

    def __post_init__(self):
        if self.f <= 0.0:
            raise ValueError(f"source frequency must be positive, got {self.f}")

    def current_density(self, t: float) -> float:
        return self.j_s0 * math.sin(2.0 * math.pi * self.f * t)


def _subset(geom: fem.MeshGeometry, idx: np.ndarray) -> fem.MeshGeometry:
    return fem.MeshGeometry(geom.areas[idx], geom.grads[idx],
                            geom.curls[idx], geom.centroids[idx])


class MacroDiscretization:
    """Frozen FE data of one macroscale mesh.

    The potential is pinned to zero on the outer truncation boundary and on
    the horizontal symmetry line; the vertical symmetry line keeps the
    natural flux-parallel condition, so no boundary term is assembled.
    ``sigma`` maps region tags to a macroscale conductivity for the mass
    term; by default every region is non-conducting (the mesoscale carries
    all eddy currents).
    """

    def __init__(self, mesh: Mesh2D, sigma: dict[int, float] | None = None,
                 nu_background: float = NU0):
        self.mesh = mesh
        self.geom = fem.mesh_geometry(mesh)
        essential = np.isin(mesh.boundary_tag,
                            (int(Boundary.GAMMA_INF), int(Boundary.GAMMA_H)))
        fixed = np.unique(mesh.boundary_edges[essential])
        self.dofs = fem.build_dofmap(mesh.n_nodes, {int(n): 0.0 for n in fixed})

        self.hom_tris = np.flatnonzero(mesh.region == Region.HOMOGENIZED)
        self.n_gauss = int(self.hom_tris.size)
        self.gauss_areas = self.geom.areas[self.hom_tris]
        self._hom_geom = _subset(self.geom, self.hom_tris)
        self._hom_nodes = mesh.triangles[self.hom_tris]

        self.background_law = Linear(nu_background)
        bg = np.flatnonzero(mesh.region != Region.HOMOGENIZED)
        self._bg_tris = bg
        self._bg_geom = _subset(self.geom, bg)
        blocks = fem.tangent_blocks(
            self._bg_geom, np.broadcast_to(nu_background * np.eye(2),
                                           (bg.size, 2, 2)))
        self.stiff_bg = fem.assemble_matrix_batch(
            self.dofs, mesh.triangles[bg], blocks)

        sigma = sigma if sigma is not None else {}
        sigma_tri = np.zeros(mesh.n_triangles)
        for reg, val in sigma.items():
            sigma_tri[mesh.region == reg] = val
        self.mass = fem.mass_matrix(mesh, self.dofs, sigma_tri)

        ind = np.flatnonzero(mesh.region == Region.INDUCTOR)
        w = np.repeat((self.geom.areas[ind] / 3.0)[:, None], 3, axis=1)
        self.src_unit = fem.scatter_vector_batch(self.dofs,
                                                 mesh.triangles[ind], w)

    @property
    def n_free(self) -> int:
        return self.dofs.n_free

    def gauss_b(self, alpha: np.ndarray) -> np.ndarray:
        """Flux density at every homogenized Gauss point, shape (n_gauss, 2)."""
        nodal = self.dofs.expand(alpha)
        return fem.curl_field(self._hom_geom, self._hom_nodes, nodal)

    def gauss_a(self, alpha: np.ndarray) -> np.ndarray:
        """Potential at the homogenized barycenters, shape (n_gauss,)."""
        nodal = self.dofs.expand(alpha)
        return nodal[self._hom_nodes].mean(axis=1)

    def _check_laws(self, laws) -> None:
        if len(laws) != self.n_gauss:
            raise LawCoverageError(
                f"law table covers {len(laws)} Gauss points, "
                f"mesh has {self.n_gauss}")

    def hom_force(self, laws) -> np.ndarray:
        """Internal magnetic force of the homogenized triangles."""
        self._check_laws(laws)
        if self.n_gauss == 0:
            return np.zeros(self.n_free)
        h = np.array([law.h for law in laws])
        forces = fem.internal_force(self._hom_geom, h)
        return fem.scatter_vector_batch(self.dofs, self._hom_nodes, forces)

    def hom_tangent(self, laws):
        """Tangent stiffness of the homogenized triangles (sparse)."""
        self._check_laws(laws)
        if self.n_gauss == 0:
            return 0.0 * self.stiff_bg
        d = np.array([law.jacobian for law in laws])
        blocks = fem.tangent_blocks(self._hom_geom, d)
        return fem.assemble_matrix_batch(self.dofs, self._hom_nodes, blocks)

    def residual(self, alpha: np.ndarray, alpha_prev: np.ndarray, dt: float,
                 laws, js_value: float) -> np.ndarray:
        """Backward-Euler residual at the new time level."""
        if dt <= 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        return (self.stiff_bg @ alpha + self.hom_force(laws)
                + self.mass @ ((alpha - alpha_prev) / dt)
                - js_value * self.src_unit)

    def jacobian(self, dt: float, laws):
        return self.stiff_bg + self.hom_tangent(laws) + self.mass / dt

    def background_coenergy(self, alpha: np.ndarray) -> float:
        """Magnetic coenergy stored outside the homogenized region."""
        nodal = self.dofs.expand(alpha)
        b = fem.curl_field(self._bg_geom, self.mesh.triangles[self._bg_tris],
                           nodal)
        dens = self.background_law.coenergy_density(b)
        return float(self._bg_geom.areas @ dens)


@dataclass
class MacroState:
    """Macroscale free-DOF vector at one time."""

    disc: MacroDiscretization
    alpha: np.ndarray
    t: float = 0.0
    newton_trace: list = field(default_factory=list, compare=False)

    @property
    def nodal(self) -> np.ndarray:
        return self.disc.dofs.expand(self.alpha)


def zero_macro_state(disc: MacroDiscretization, t: float = 0.0) -> MacroState:
    return MacroState(disc, np.zeros(disc.n_free), t)


def macro_residual(state_prev: MacroState, state: MacroState, laws,
                   dt: float, source: SourceSpec) -> np.ndarray:
    """Residual of the discrete macroscale equation at ``state``."""
    disc = state.disc
    return disc.residual(state.alpha, state_prev.alpha, dt, laws,
                         source.current_density(state.t))


def macro_newton_step(state_prev: MacroState, state: MacroState, laws,
                      dt: float, source: SourceSpec,
                      jacobian_laws=None) -> MacroState:
    """One unconditionally accepted Newton update of the macroscale state.

    ``jacobian_laws`` lets the tangent come from a different law table than
    the residual (frozen or approximate Jacobians); by default both share
    ``laws``.
    """
    disc = state.disc
    resid = macro_residual(state_prev, state, laws, dt, source)
    jac = disc.jacobian(dt, laws if jacobian_laws is None else jacobian_laws)
    delta = fem.solve_linear(fem.SparseSystem(jac.tocsr(), -resid))
    return MacroState(disc, state.alpha + delta, state.t,
                      newton_trace=state.newton_trace + [float(np.linalg.norm(resid))])


def backward_euler_run(disc: MacroDiscretization, source: SourceSpec,
                       t0: float, t_end: float, n_steps: int,
                       material_provider,
                       newton: NewtonOptions = NewtonOptions(),
                       alpha0: np.ndarray | None = None) -> Waveform:
    """Backward-Euler transient, by default from a zero initial state.

    ``material_provider(t, b_gp, db_gp_dt, da_gp_dt) -> sequence of laws``
    is invoked once per Newton pass with the Gauss-point data of the
    current iterate; for meshes without homogenized triangles it is never
    consulted.  Returns the waveform of the free DOF vector on the uniform
    grid (n_steps + 1 samples), the first row being the initial state.
    """
    grid = time_grid(t0, t_end, n_steps)
    dt = float(grid[1] - grid[0])
    alpha = np.zeros(disc.n_free) if alpha0 is None else np.asarray(alpha0, dtype=float)
    values = np.zeros((n_steps + 1, disc.n_free))
    values[0] = alpha

    no_laws: tuple = ()
    for k in range(1, n_steps + 1):
        t_k = float(grid[k])
        js = source.current_density(t_k)
        alpha_prev = alpha

        def eval_fn(x):
            if disc.n_gauss:
                b = disc.gauss_b(x)
                db = (b - disc.gauss_b(alpha_prev)) / dt
                da = (disc.gauss_a(x) - disc.gauss_a(alpha_prev)) / dt
                laws = material_provider(t_k, b, db, da)
            else:
                laws = no_laws
            resid = disc.residual(x, alpha_prev, dt, laws, js)
            return resid, disc.jacobian(dt, laws)

        try:
            alpha, _ = fem.newton_solve(eval_fn, alpha, newton.tol,
                                        newton.max_iter)
        except fem.SolverFailureError as exc:
            raise fem.SolverFailureError(
                f"macro step {k} (t={t_k:.6e}) failed: {exc}") from exc
        values[k] = alpha
    return Waveform(grid, values)
