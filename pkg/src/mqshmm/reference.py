"""Finescale reference solver on the fully resolved quarter geometry.

Every grain is meshed explicitly, so no homogenized region and no cell
problems appear: one backward-Euler Newton transient with per-region
material laws and conductivities.  Losses and magnetic coenergy are
accumulated per step; these are the curves the two-scale drivers are
compared against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fem
from .cell import NewtonOptions
from .macro import SourceSpec
from .material import NU0, Linear
from .mesh import Boundary, Mesh2D, Region
from .waveform import Waveform, time_grid


class ResolvedMeshError(ValueError):
    """The mesh still contains a homogenized region."""


class ReferenceDiscretization:
    """FE data of the resolved mesh with region-wise laws and conductivity.

    ``laws`` maps region tags to material objects; regions not listed fall
    back to the linear vacuum law.  ``sigma`` maps region tags to physical
    conductivities [S/m] and defaults to none.
    """

    def __init__(self, mesh: Mesh2D, laws: dict[int, object] | None = None,
                 sigma: dict[int, float] | None = None):
        if np.any(mesh.region == Region.HOMOGENIZED):
            raise ResolvedMeshError(
                "reference solver needs a fully resolved mesh")
        self.mesh = mesh
        self.geom = fem.mesh_geometry(mesh)
        essential = np.isin(mesh.boundary_tag,
                            (int(Boundary.GAMMA_INF), int(Boundary.GAMMA_H)))
        fixed = np.unique(mesh.boundary_edges[essential])
        self.dofs = fem.build_dofmap(mesh.n_nodes, {int(n): 0.0 for n in fixed})

        self._region_masks = {int(r): mesh.region == r
                              for r in np.unique(mesh.region)}
        laws = laws or {}
        self.laws = {r: laws.get(r, Linear(NU0)) for r in self._region_masks}

        sigma = sigma if sigma is not None else {}
        self.sigma_tri = np.zeros(mesh.n_triangles)
        for reg, val in sigma.items():
            self.sigma_tri[mesh.region == reg] = val
        self.mass = fem.mass_matrix(mesh, self.dofs, self.sigma_tri)

        ind = np.flatnonzero(mesh.region == Region.INDUCTOR)
        w = np.repeat((self.geom.areas[ind] / 3.0)[:, None], 3, axis=1)
        self.src_unit = fem.scatter_vector_batch(self.dofs,
                                                 mesh.triangles[ind], w)

    @property
    def n_free(self) -> int:
        return self.dofs.n_free

    def eval_law(self, b: np.ndarray, with_tangent: bool = True):
        h = np.empty_like(b)
        d = np.empty((b.shape[0], 2, 2)) if with_tangent else None
        for reg, mask in self._region_masks.items():
            law = self.laws[reg]
            h[mask] = law.h_of_b(b[mask])
            if with_tangent:
                d[mask] = law.dh_db(b[mask])
        return (h, d) if with_tangent else h

    def residual_and_tangent(self, alpha, alpha_prev, dt, js_value,
                             with_tangent=True):
        nodal = self.dofs.expand(alpha)
        b = fem.curl_field(self.geom, self.mesh.triangles, nodal)
        out = self.eval_law(b, with_tangent)
        h = out[0] if with_tangent else out
        force = fem.scatter_vector_batch(
            self.dofs, self.mesh.triangles, fem.internal_force(self.geom, h))
        resid = (force + self.mass @ ((alpha - alpha_prev) / dt)
                 - js_value * self.src_unit)
        if not with_tangent:
            return resid
        jac = fem.assemble_matrix_batch(
            self.dofs, self.mesh.triangles,
            fem.tangent_blocks(self.geom, out[1]))
        return resid, jac + self.mass / dt

    def loss_power(self, alpha_prev: np.ndarray, alpha: np.ndarray,
                   dt: float) -> float:
        """Joule power integral over the conducting regions [W per depth]."""
        rate = (alpha - alpha_prev) / dt
        return float(rate @ (self.mass @ rate))

    def coenergy(self, alpha: np.ndarray) -> float:
        """Magnetic coenergy over the whole domain [J per depth]."""
        nodal = self.dofs.expand(alpha)
        b = fem.curl_field(self.geom, self.mesh.triangles, nodal)
        dens = np.empty(self.mesh.n_triangles)
        for reg, mask in self._region_masks.items():
            dens[mask] = self.laws[reg].coenergy_density(b[mask])
        return float(self.geom.areas @ dens)


@dataclass
class ReferenceRun:
    """Transient result of the resolved problem."""

    disc: ReferenceDiscretization
    waveform: Waveform
    losses: np.ndarray        # (n_steps + 1,), losses[0] = 0
    energy: np.ndarray        # (n_steps + 1,)


def run_reference(disc: ReferenceDiscretization, source: SourceSpec,
                  t0: float, t_end: float, n_steps: int,
                  newton: NewtonOptions = NewtonOptions()) -> ReferenceRun:
    """Backward-Euler transient from rest with per-step loss bookkeeping."""
    grid = time_grid(t0, t_end, n_steps)
    dt = float(grid[1] - grid[0])
    alpha = np.zeros(disc.n_free)
    values = np.zeros((n_steps + 1, disc.n_free))
    losses = np.zeros(n_steps + 1)
    energy = np.zeros(n_steps + 1)
    energy[0] = disc.coenergy(alpha)

    for k in range(1, n_steps + 1):
        t_k = float(grid[k])
        js = source.current_density(t_k)
        alpha_prev = alpha

        def eval_fn(x):
            return disc.residual_and_tangent(x, alpha_prev, dt, js)

        try:
            alpha, _ = fem.newton_solve(eval_fn, alpha, newton.tol,
                                        newton.max_iter)
        except fem.SolverFailureError as exc:
            raise fem.SolverFailureError(
                f"reference step {k} (t={t_k:.6e}) failed: {exc}") from exc
        values[k] = alpha
        losses[k] = disc.loss_power(alpha_prev, alpha, dt)
        energy[k] = disc.coenergy(alpha)
    return ReferenceRun(disc, Waveform(grid, values), losses, energy)
