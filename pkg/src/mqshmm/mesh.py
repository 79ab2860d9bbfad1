"""Structured triangle meshes for the macro, reference and periodic cell domains.

All meshes are built from tensor-product rectilinear grids whose lines are
snapped to the material interfaces, so region tags are exact and no external
mesh generator is needed.  Rectangles are split along the bottom-left to
top-right diagonal, giving counter-clockwise triangles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

GEO_RTOL = 1e-12


class InvalidGeometryError(ValueError):
    """Geometry parameters are inconsistent (non-positive lengths, grains < 1, ...)."""


class InvalidLayoutError(ValueError):
    """Cell layout parameters are out of range (fill outside (0, 1), bad axis, ...)."""


class Region(IntEnum):
    CONDUCTING_GRAIN = 0
    INSULATION = 1
    AIR = 2
    INDUCTOR = 3
    HOMOGENIZED = 4


class Boundary(IntEnum):
    GAMMA_INF = 0
    GAMMA_H = 1
    GAMMA_V = 2
    CELL_BOUNDARY = 3


@dataclass
class Mesh2D:
    """Nodes, CCW triangles, per-triangle region tags and tagged boundary edges."""

    nodes: np.ndarray          # (n_nodes, 2) float, metres
    triangles: np.ndarray      # (n_tri, 3) int, counter-clockwise
    region: np.ndarray         # (n_tri,) int, Region values
    boundary_edges: np.ndarray  # (n_edges, 2) int node pairs
    boundary_tag: np.ndarray   # (n_edges,) int, Boundary values

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]


@dataclass
class PeriodicPairing:
    """Master/slave node identification for a periodic cell mesh.

    ``pairs`` holds one (master, slave) row per aliased edge node; the four
    cell corners are identified together through ``corner_group`` whose first
    entry is the master.
    """

    pairs: np.ndarray                      # (n_pairs, 2) int
    corner_group: np.ndarray               # (k,) int, may be empty
    tolerance: float = GEO_RTOL

    @property
    def n_pairs(self) -> int:
        return self.pairs.shape[0]

    def slave_to_master(self, n_nodes: int) -> np.ndarray:
        """Return the master-resolution map (identity except slaves)."""
        root = np.arange(n_nodes, dtype=np.int64)
        if self.pairs.size:
            root[self.pairs[:, 1]] = self.pairs[:, 0]
        if self.corner_group.size:
            root[self.corner_group[1:]] = self.corner_group[0]
        # slaves alias masters directly, never chains
        if self.pairs.size and np.any(root[root[self.pairs[:, 1]]] != root[self.pairs[:, 1]]):
            raise InvalidLayoutError("periodic pairing contains master/slave chains")
        return root


# --------------------------------------------------------------------------
# cell layouts
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Homogeneous:
    """Whole cell is one conducting region."""


@dataclass(frozen=True)
class SquareInclusion:
    """Centered conducting square of area ``fill`` in an insulating matrix."""

    fill: float

    def __post_init__(self):
        if not 0.0 < self.fill < 1.0:
            raise InvalidLayoutError(f"fill fraction must be in (0, 1), got {self.fill}")


@dataclass(frozen=True)
class Laminate:
    """Two-phase laminate; the conducting slab sits on the high side of ``axis``."""

    fraction: float
    axis: str = "x"

    def __post_init__(self):
        if not 0.0 < self.fraction < 1.0:
            raise InvalidLayoutError(f"laminate fraction must be in (0, 1), got {self.fraction}")
        if self.axis not in ("x", "y"):
            raise InvalidLayoutError(f"laminate axis must be 'x' or 'y', got {self.axis!r}")


@dataclass(frozen=True)
class GeometryParams:
    """Quarter-domain geometry of the composite benchmark, lengths in metres.

    The quarter SMC block occupies [0, L/2]^2, the inductor bar sits above it
    across the air gap, and the truncation box adds ``air_margin_factor`` times
    the half-width of air on the outside.
    """

    grains: int = 4            # grains per side of the quarter block
    L: float = 1000e-6         # full SMC side length
    e_i: float = 100e-6        # inductor thickness
    e_gap: float = 100e-6      # SMC-to-inductor air gap
    fill: float = 0.64         # conducting area fraction of one grain period
    air_margin_factor: float = 2.0

    def __post_init__(self):
        if self.grains < 1:
            raise InvalidGeometryError(f"grains must be >= 1, got {self.grains}")
        for name in ("L", "e_i", "e_gap"):
            if getattr(self, name) <= 0.0:
                raise InvalidGeometryError(f"{name} must be positive")
        if not 0.0 < self.fill < 1.0:
            raise InvalidGeometryError(f"fill must be in (0, 1), got {self.fill}")

    @property
    def pitch(self) -> float:
        """Physical period of the grain lattice."""
        return 0.5 * self.L / self.grains

    @property
    def box_side(self) -> float:
        return 0.5 * self.L + self.e_gap + self.e_i + self.air_margin_factor * 0.5 * self.L


# --------------------------------------------------------------------------
# structured grid machinery
# --------------------------------------------------------------------------

def _subdivide(breaks, counts):
    """Refine interval breakpoints; endpoint coordinates stay bit-exact."""
    pieces = []
    for k in range(len(breaks) - 1):
        seg = np.linspace(breaks[k], breaks[k + 1], counts[k] + 1)
        pieces.append(seg[:-1])
    pieces.append(np.array([breaks[-1]]))
    return np.concatenate(pieces)


def _proportional_counts(breaks, n_target):
    """Distribute ~n_target subdivisions over intervals, at least one each."""
    lengths = np.diff(np.asarray(breaks, dtype=float))
    total = lengths.sum()
    return [max(1, int(round(n_target * ln / total))) for ln in lengths]


def _grid_mesh(xs, ys, classify) -> Mesh2D:
    """Triangulate the tensor grid xs × ys; region from triangle centroids."""
    nx, ny = len(xs), len(ys)
    X, Y = np.meshgrid(xs, ys)            # row j = y level
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    i = np.arange(nx - 1)
    j = np.arange(ny - 1)
    I, J = np.meshgrid(i, j)
    n00 = (J * nx + I).ravel()
    n10 = n00 + 1
    n01 = n00 + nx
    n11 = n01 + 1
    lower = np.column_stack([n00, n10, n11])
    upper = np.column_stack([n00, n11, n01])
    triangles = np.vstack([lower, upper]).astype(np.int64)

    cent = nodes[triangles].mean(axis=1)
    region = np.fromiter((classify(cx, cy) for cx, cy in cent), dtype=np.int64,
                         count=len(triangles))

    edges, tags = _boundary_edges(nodes, triangles, xs[0], xs[-1], ys[0], ys[-1])
    mesh = Mesh2D(nodes, triangles, region, edges, tags)
    validate_mesh(mesh)
    return mesh


def _boundary_edges(nodes, triangles, x_min, x_max, y_min, y_max):
    """Edges adjacent to exactly one triangle, tagged later by the caller."""
    count: dict[tuple[int, int], int] = {}
    for tri in triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            count[key] = count.get(key, 0) + 1
    edges = np.array([k for k, c in count.items() if c == 1], dtype=np.int64)
    span = max(x_max - x_min, y_max - y_min)
    tol = GEO_RTOL * span + 1e-300
    mids = 0.5 * (nodes[edges[:, 0]] + nodes[edges[:, 1]])
    # placeholder tags by side; generators remap to physical boundary names
    tags = np.full(len(edges), -1, dtype=np.int64)
    tags[np.abs(mids[:, 0] - x_min) <= tol] = 0   # left
    tags[np.abs(mids[:, 0] - x_max) <= tol] = 1   # right
    tags[np.abs(mids[:, 1] - y_min) <= tol] = 2   # bottom
    tags[np.abs(mids[:, 1] - y_max) <= tol] = 3   # top
    if np.any(tags < 0):
        raise InvalidGeometryError("boundary edge off the bounding box")
    return edges, tags


def _retag_quarter_boundary(mesh: Mesh2D) -> None:
    """left -> Gamma_v (natural), bottom -> Gamma_h, right/top -> Gamma_inf."""
    side = mesh.boundary_tag.copy()
    mesh.boundary_tag[side == 0] = Boundary.GAMMA_V
    mesh.boundary_tag[side == 2] = Boundary.GAMMA_H
    mesh.boundary_tag[(side == 1) | (side == 3)] = Boundary.GAMMA_INF


def triangle_areas(mesh: Mesh2D) -> np.ndarray:
    p = mesh.nodes[mesh.triangles]
    v1 = p[:, 1] - p[:, 0]
    v2 = p[:, 2] - p[:, 0]
    return 0.5 * (v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0])


def validate_mesh(mesh: Mesh2D) -> None:
    """Orientation, region-tag and analytic-area consistency checks."""
    areas = triangle_areas(mesh)
    if np.any(areas <= 0.0):
        raise InvalidGeometryError("mesh contains non-CCW or degenerate triangles")
    xs, ys = mesh.nodes[:, 0], mesh.nodes[:, 1]
    analytic = (xs.max() - xs.min()) * (ys.max() - ys.min())
    if not math.isclose(areas.sum(), analytic, rel_tol=1e-12):
        raise InvalidGeometryError(
            f"triangle areas sum to {areas.sum():.17g}, expected {analytic:.17g}")
    valid = {int(r) for r in Region}
    if not set(np.unique(mesh.region)).issubset(valid):
        raise InvalidGeometryError("unknown region tag")


# --------------------------------------------------------------------------
# generators
# --------------------------------------------------------------------------

def generate_cell_mesh(layout, n_per_side: int = 20) -> tuple[Mesh2D, PeriodicPairing]:
    """Mesh the unit cell [-1/2, 1/2]^2 for one grain period.

    Grid lines are snapped to the layout's material interfaces, so the tagged
    conducting area matches the layout fraction exactly.  Returns the mesh and
    the periodic master/slave pairing of its boundary nodes.
    """
    if n_per_side < 1:
        raise InvalidLayoutError(f"n_per_side must be >= 1, got {n_per_side}")
    if isinstance(layout, Homogeneous):
        xb = yb = [-0.5, 0.5]

        def classify(cx, cy):
            return Region.CONDUCTING_GRAIN
    elif isinstance(layout, SquareInclusion):
        h = 0.5 * math.sqrt(layout.fill)
        xb = yb = [-0.5, -h, h, 0.5]

        def classify(cx, cy, h=h):
            inside = abs(cx) < h and abs(cy) < h
            return Region.CONDUCTING_GRAIN if inside else Region.INSULATION
    elif isinstance(layout, Laminate):
        cut = 0.5 - layout.fraction
        if layout.axis == "x":
            xb, yb = [-0.5, cut, 0.5], [-0.5, 0.5]
        else:
            xb, yb = [-0.5, 0.5], [-0.5, cut, 0.5]

        def classify(cx, cy, cut=cut, axis=layout.axis):
            coord = cx if axis == "x" else cy
            return Region.CONDUCTING_GRAIN if coord > cut else Region.INSULATION
    else:
        raise InvalidLayoutError(f"unknown cell layout {layout!r}")

    xs = _subdivide(xb, _proportional_counts(xb, n_per_side))
    ys = _subdivide(yb, _proportional_counts(yb, n_per_side))
    mesh = _grid_mesh(xs, ys, classify)
    mesh.boundary_tag[:] = Boundary.CELL_BOUNDARY
    pairing = _periodic_pairing(mesh.nodes, 1.0)
    return mesh, pairing


def _periodic_pairing(nodes, period) -> PeriodicPairing:
    tol = GEO_RTOL * period
    x, y = nodes[:, 0], nodes[:, 1]
    lo, hi = x.min(), x.max()
    on = {
        "l": np.abs(x - lo) <= tol, "r": np.abs(x - hi) <= tol,
        "b": np.abs(y - lo) <= tol, "t": np.abs(y - hi) <= tol,
    }
    corner = (on["l"] | on["r"]) & (on["b"] | on["t"])
    corner_ids = np.flatnonzero(corner)
    if len(corner_ids) != 4:
        raise InvalidLayoutError(f"expected 4 cell corners, found {len(corner_ids)}")
    # master corner = bottom-left (lowest y then x)
    order = np.lexsort((nodes[corner_ids, 0], nodes[corner_ids, 1]))
    corner_group = corner_ids[order]

    def match(slaves, masters, axis):
        """Pair each slave with the master at the same off-axis coordinate."""
        other = 1 - axis
        sl = np.flatnonzero(slaves & ~corner)
        ms = np.flatnonzero(masters & ~corner)
        ms_sorted = ms[np.argsort(nodes[ms, other])]
        sl_sorted = sl[np.argsort(nodes[sl, other])]
        if len(ms_sorted) != len(sl_sorted):
            raise InvalidLayoutError("periodic faces have mismatched node counts")
        if len(sl_sorted) and np.max(np.abs(
                nodes[sl_sorted, other] - nodes[ms_sorted, other])) > tol:
            raise InvalidLayoutError("periodic faces are not coordinate-matched")
        return np.column_stack([ms_sorted, sl_sorted])

    pairs = np.vstack([
        match(on["r"], on["l"], axis=0),
        match(on["t"], on["b"], axis=1),
    ]) if nodes.shape[0] > 4 else np.empty((0, 2), dtype=np.int64)
    return PeriodicPairing(pairs.astype(np.int64), corner_group, tolerance=tol)


def _quarter_breaks(geo: GeometryParams, smc_breaks, outer_subdiv):
    """Shared x/y breakpoints of the quarter domain: SMC, gap, bar, air."""
    half = 0.5 * geo.L
    breaks = list(smc_breaks)
    counts = [1] * (len(smc_breaks) - 1)
    breaks += [half + geo.e_gap, half + geo.e_gap + geo.e_i, geo.box_side]
    counts += [outer_subdiv, outer_subdiv, 2 * outer_subdiv]
    return breaks, counts


def generate_macro_mesh(geo: GeometryParams) -> Mesh2D:
    """Quarter-domain mesh with the SMC block replaced by one homogenized region.

    The homogenized block is subdivided at the grain pitch (one Gauss point
    per triangle downstream), the inductor bar and air gap get one layer each
    and the outer air margin two.
    """
    half = 0.5 * geo.L
    smc = list(np.linspace(0.0, half, geo.grains + 1))
    breaks, counts = _quarter_breaks(geo, smc, outer_subdiv=1)
    xs = _subdivide(breaks, counts)
    ys = xs.copy()
    bar_lo, bar_hi = half + geo.e_gap, half + geo.e_gap + geo.e_i

    def classify(cx, cy):
        if cx < half and cy < half:
            return Region.HOMOGENIZED
        if cx < half and bar_lo < cy < bar_hi:
            return Region.INDUCTOR
        return Region.AIR

    mesh = _grid_mesh(xs, ys, classify)
    _retag_quarter_boundary(mesh)
    return mesh


def generate_reference_mesh(geo: GeometryParams, refinement: int = 1) -> Mesh2D:
    """Quarter-domain mesh resolving every conducting grain.

    Each grain period contributes breakpoints at the grain faces;
    ``refinement`` multiplies the subdivision of every interval.
    """
    if refinement < 1:
        raise InvalidGeometryError(f"refinement must be >= 1, got {refinement}")
    half = 0.5 * geo.L
    p = geo.pitch
    s = math.sqrt(geo.fill) * p          # grain side
    m = 0.5 * (p - s)                    # insulation margin per side
    smc = [0.0]
    for g in range(geo.grains):
        x0 = g * p
        smc += [x0 + m, x0 + m + s, x0 + p]
    breaks, counts = _quarter_breaks(geo, smc, outer_subdiv=1)
    counts = [c * refinement for c in counts]
    xs = _subdivide(breaks, counts)
    ys = xs.copy()
    bar_lo, bar_hi = half + geo.e_gap, half + geo.e_gap + geo.e_i

    def classify(cx, cy):
        if cx < half and cy < half:
            ix, iy = int(cx // p), int(cy // p)
            in_grain = (m < cx - ix * p < m + s) and (m < cy - iy * p < m + s)
            return Region.CONDUCTING_GRAIN if in_grain else Region.INSULATION
        if cx < half and bar_lo < cy < bar_hi:
            return Region.INDUCTOR
        return Region.AIR

    mesh = _grid_mesh(xs, ys, classify)
    _retag_quarter_boundary(mesh)
    return mesh


def write_mesh(mesh: Mesh2D, pairing: PeriodicPairing | None, path) -> None:
    """Plain-text dump: `n id x y`, `t id n1 n2 n3 region`, `p master slave`."""
    with open(path, "w") as f:
        for i, (x, y) in enumerate(mesh.nodes):
            f.write(f"n {i} {float(x)!r} {float(y)!r}\n")
        for i, (tri, reg) in enumerate(zip(mesh.triangles, mesh.region)):
            f.write(f"t {i} {tri[0]} {tri[1]} {tri[2]} {Region(reg).name}\n")
        if pairing is not None:
            for ms, sl in pairing.pairs:
                f.write(f"p {ms} {sl}\n")
            cg = pairing.corner_group
            for sl in cg[1:]:
                f.write(f"p {cg[0]} {sl}\n")
