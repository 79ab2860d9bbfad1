"""P1 triangular finite-element kernels, constraints and sparse solves.

The scalar unknown is the z-component of the magnetic vector potential, so
the in-plane flux density on each triangle is the rotated gradient
b = (d a/dy, -d a/dx).  Dirichlet nodes are eliminated, periodic slaves are
folded onto their masters at the degree-of-freedom level.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh2D, PeriodicPairing, triangle_areas

#: rotation taking gradients to curls: curl phi = ROT @ grad phi
ROT = np.array([[0.0, 1.0], [-1.0, 0.0]])

_MASS_PATTERN = np.array([[2.0, 1.0, 1.0],
                          [1.0, 2.0, 1.0],
                          [1.0, 1.0, 2.0]]) / 12.0


class SingularElementError(ValueError):
    """Triangle with non-positive or numerically vanishing area."""


class SolverFailureError(RuntimeError):
    """Linear or Newton solve did not reach its tolerance."""


class InvalidPairingError(ValueError):
    """Periodic pairing conflicts with the Dirichlet set or itself."""


def _tri_geometry(coords):
    """Area and constant P1 gradients of one triangle (CCW nodes)."""
    x, y = coords[:, 0], coords[:, 1]
    area = 0.5 * ((x[1] - x[0]) * (y[2] - y[0]) - (x[2] - x[0]) * (y[1] - y[0]))
    if area <= 0.0 or not np.isfinite(area):
        raise SingularElementError(f"triangle area {area!r} is not positive")
    grads = np.array([
        [y[1] - y[2], x[2] - x[1]],
        [y[2] - y[0], x[0] - x[2]],
        [y[0] - y[1], x[1] - x[0]],
    ]) / (2.0 * area)
    return area, grads


def element_stiffness(coords: np.ndarray, coeff: np.ndarray) -> np.ndarray:
    """Exact P1 stiffness block K_ij = int_T (coeff grad phi_i) . grad phi_j."""
    area, grads = _tri_geometry(np.asarray(coords, dtype=float))
    coeff = np.asarray(coeff, dtype=float)
    return area * grads @ coeff.T @ grads.T


def element_mass(coords: np.ndarray, coeff: float) -> np.ndarray:
    """Exact P1 mass block coeff * area/12 * [[2,1,1],[1,2,1],[1,1,2]]."""
    area, _ = _tri_geometry(np.asarray(coords, dtype=float))
    return coeff * area * _MASS_PATTERN


@dataclass
class DofMap:
    """Node-to-DOF map with Dirichlet values; slaves share their master's DOF."""

    node_dof: np.ndarray          # (n_nodes,) int, -1 marks Dirichlet
    dirichlet_values: np.ndarray  # (n_nodes,) float, 0 where free
    n_free: int

    @property
    def n_nodes(self) -> int:
        return self.node_dof.shape[0]

    def expand(self, u_free: np.ndarray) -> np.ndarray:
        """Full nodal field from the free vector (slaves and Dirichlet filled)."""
        out = self.dirichlet_values.copy()
        free = self.node_dof >= 0
        out[free] = u_free[self.node_dof[free]]
        return out


def build_dofmap(n_nodes: int, dirichlet: dict[int, float] | None = None) -> DofMap:
    values = np.zeros(n_nodes)
    node_dof = np.full(n_nodes, -2, dtype=np.int64)
    if dirichlet:
        for node, val in dirichlet.items():
            node_dof[node] = -1
            values[node] = val
    free_nodes = np.flatnonzero(node_dof == -2)
    node_dof[free_nodes] = np.arange(len(free_nodes))
    return DofMap(node_dof, values, len(free_nodes))


def apply_periodic(dofs: DofMap, pairing: PeriodicPairing) -> DofMap:
    """Alias slave nodes onto masters and pin one anchor DOF to zero.

    The periodic space of the cell problem fixes fields only up to a
    constant, so the master of the corner group (or the lowest-index free
    node if the pairing is empty) is pinned.
    """
    n = dofs.n_nodes
    root = pairing.slave_to_master(n)
    if pairing.pairs.size and np.any(dofs.node_dof[pairing.pairs.ravel()] == -1):
        raise InvalidPairingError("periodic pairing touches a Dirichlet node")

    dirichlet_nodes = set(np.flatnonzero(dofs.node_dof == -1))
    if pairing.corner_group.size:
        anchor = int(pairing.corner_group[0])
    else:
        candidates = [i for i in range(n) if root[i] == i and i not in dirichlet_nodes]
        anchor = candidates[0]
    values = dofs.dirichlet_values.copy()
    values[root == root[anchor]] = 0.0
    dirichlet_nodes.add(anchor)

    node_dof = np.full(n, -2, dtype=np.int64)
    next_dof = 0
    for i in range(n):
        r = root[i]
        if r in dirichlet_nodes or dofs.node_dof[r] == -1:
            node_dof[i] = -1
            values[i] = values[r]
            continue
        if node_dof[r] == -2:
            node_dof[r] = next_dof
            next_dof += 1
        node_dof[i] = node_dof[r]
    return DofMap(node_dof, values, next_dof)


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray

    @property
    def n(self) -> int:
        return self.rhs.shape[0]


def assemble(mesh: Mesh2D, dofs: DofMap, element_cb) -> SparseSystem:
    """Assemble a sparse system from a per-triangle callback.

    ``element_cb(t, coords, node_ids) -> (Ke, fe)``.  Slave DOFs fold onto
    masters through the DofMap; Dirichlet columns are moved to the right-hand
    side with their prescribed values.
    """
    rows, cols, data = [], [], []
    rhs = np.zeros(dofs.n_free)
    for t in range(mesh.n_triangles):
        ids = mesh.triangles[t]
        ke, fe = element_cb(t, mesh.nodes[ids], ids)
        g = dofs.node_dof[ids]
        for i in range(3):
            if g[i] < 0:
                continue
            rhs[g[i]] += fe[i]
            for j in range(3):
                if g[j] < 0:
                    rhs[g[i]] -= ke[i, j] * dofs.dirichlet_values[ids[j]]
                else:
                    rows.append(g[i])
                    cols.append(g[j])
                    data.append(ke[i, j])
    matrix = sp.coo_matrix((data, (rows, cols)),
                           shape=(dofs.n_free, dofs.n_free)).tocsr()
    return SparseSystem(matrix, rhs)


def assemble_matrix_batch(dofs: DofMap, tri_nodes: np.ndarray,
                          ke_all: np.ndarray) -> sp.csr_matrix:
    """Vectorized matrix assembly from per-triangle 3x3 blocks.

    Only homogeneous Dirichlet data is supported on this fast path; the
    generic :func:`assemble` covers inhomogeneous values.
    """
    g = dofs.node_dof[tri_nodes]                      # (nt, 3)
    rows = np.repeat(g, 3, axis=1).ravel()
    cols = np.tile(g, (1, 3)).ravel()
    data = ke_all.reshape(-1)
    keep = (rows >= 0) & (cols >= 0)
    return sp.coo_matrix((data[keep], (rows[keep], cols[keep])),
                         shape=(dofs.n_free, dofs.n_free)).tocsr()


def scatter_vector_batch(dofs: DofMap, tri_nodes: np.ndarray,
                         fe_all: np.ndarray) -> np.ndarray:
    """Vectorized accumulation of per-triangle 3-vectors into free DOFs."""
    g = dofs.node_dof[tri_nodes].ravel()
    vals = fe_all.reshape(-1)
    keep = g >= 0
    out = np.zeros(dofs.n_free)
    np.add.at(out, g[keep], vals[keep])
    return out


def is_symmetric(matrix: sp.spmatrix, rtol: float = 1e-12) -> bool:
    d = (matrix - matrix.T).tocoo()
    if d.nnz == 0:
        return True
    scale = np.abs(matrix.data).max() if matrix.nnz else 1.0
    return np.abs(d.data).max() <= rtol * scale


def solve_linear(system: SparseSystem) -> np.ndarray:
    """Direct sparse solve with an a-posteriori residual check."""
    if system.n == 0:
        return np.zeros(0)
    with warnings.catch_warnings():
        # a singular factor shows up in the residual check below
        warnings.simplefilter("ignore", spla.MatrixRankWarning)
        x = spla.spsolve(system.matrix.tocsc(), system.rhs)
    resid = np.linalg.norm(system.matrix @ x - system.rhs)
    bound = 1e-10 * (np.linalg.norm(system.rhs) + 1.0)
    if not np.all(np.isfinite(x)) or resid > bound:
        cond = ""
        if system.n <= 2000:
            cond = f", cond~{np.linalg.cond(system.matrix.toarray()):.3e}"
        raise SolverFailureError(
            f"linear solve residual {resid:.3e} exceeds {bound:.3e}{cond}")
    return x


@dataclass
class MeshGeometry:
    """Per-triangle quantities shared by every assembly over one mesh."""

    areas: np.ndarray    # (nt,)
    grads: np.ndarray    # (nt, 3, 2)
    curls: np.ndarray    # (nt, 3, 2), curl phi_i = ROT grad phi_i
    centroids: np.ndarray  # (nt, 2)


def mesh_geometry(mesh: Mesh2D) -> MeshGeometry:
    areas = triangle_areas(mesh)
    if np.any(areas <= 0.0):
        raise SingularElementError("mesh contains non-positive triangle areas")
    p = mesh.nodes[mesh.triangles]                    # (nt, 3, 2)
    x, y = p[..., 0], p[..., 1]
    grads = np.empty((mesh.n_triangles, 3, 2))
    grads[:, 0, 0] = y[:, 1] - y[:, 2]
    grads[:, 0, 1] = x[:, 2] - x[:, 1]
    grads[:, 1, 0] = y[:, 2] - y[:, 0]
    grads[:, 1, 1] = x[:, 0] - x[:, 2]
    grads[:, 2, 0] = y[:, 0] - y[:, 1]
    grads[:, 2, 1] = x[:, 1] - x[:, 0]
    grads /= (2.0 * areas)[:, None, None]
    curls = grads @ ROT.T
    return MeshGeometry(areas, grads, curls, p.mean(axis=1))


def curl_field(geom: MeshGeometry, tri_nodes: np.ndarray,
               nodal: np.ndarray) -> np.ndarray:
    """Per-triangle flux density b = sum_i a_i curl phi_i from nodal values."""
    return np.einsum("ti,tik->tk", nodal[tri_nodes], geom.curls)


def tangent_blocks(geom: MeshGeometry, dh_db: np.ndarray) -> np.ndarray:
    """Per-triangle 3x3 tangent blocks area * curl_i . dh_db . curl_j."""
    return np.einsum("t,tik,tkl,tjl->tij", geom.areas, geom.curls, dh_db,
                     geom.curls, optimize=True)


def internal_force(geom: MeshGeometry, h: np.ndarray) -> np.ndarray:
    """Per-triangle 3-vectors area * h . curl phi_i."""
    return np.einsum("t,tk,tik->ti", geom.areas, h, geom.curls)


def mass_matrix(mesh: Mesh2D, dofs: DofMap, coeff: np.ndarray) -> sp.csr_matrix:
    """Assembled mass matrix with a per-triangle coefficient array."""
    areas = triangle_areas(mesh)
    ke = (coeff * areas)[:, None, None] * _MASS_PATTERN[None, :, :]
    return assemble_matrix_batch(dofs, mesh.triangles, ke)


def newton_solve(eval_fn, x0: np.ndarray, tol: float, max_iter: int):
    """Damped Newton iteration with a combined relative/absolute gate.

    ``eval_fn(x) -> (residual, jacobian)``; convergence when
    ||R|| <= tol * (1 + ||R0||).  A step is halved until it reduces the
    residual norm (or meets the gate outright), so hard source jolts damp
    instead of overshooting into the saturated range; trial points that
    raise ValueError (such as a law's overflow guard) are likewise
    retried with a shorter step.  Returns ``(x, trace)`` where trace
    holds the residual norms of every accepted pass including the
    accepting one.
    """
    x = x0.copy()
    resid, jac = eval_fn(x)
    rnorm = float(np.linalg.norm(resid))
    trace = [rnorm]
    gate = tol * (1.0 + rnorm)
    for _ in range(max_iter):
        if rnorm <= gate:
            return x, trace
        dx = spla.spsolve(jac.tocsc(), -resid)
        if not np.all(np.isfinite(dx)):
            raise SolverFailureError(f"Newton step produced non-finite update, trace={trace}")
        step, last_exc = 1.0, None
        while True:
            try:
                resid_t, jac_t = eval_fn(x + step * dx)
                rnorm_t = float(np.linalg.norm(resid_t))
                if np.isfinite(rnorm_t) and (
                        rnorm_t <= gate
                        or rnorm_t <= (1.0 - 1e-4 * step) * rnorm):
                    break
            except ValueError as exc:
                last_exc = exc
            step *= 0.5
            if step < 2.0 ** -30:
                raise SolverFailureError(
                    f"Newton line search stalled, trace={trace}") from last_exc
        x = x + step * dx
        resid, jac, rnorm = resid_t, jac_t, rnorm_t
        trace.append(rnorm)
    if rnorm <= gate:
        return x, trace
    raise SolverFailureError(
        f"Newton did not converge in {max_iter} iterations, residual trace={trace}")
