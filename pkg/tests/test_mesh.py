"""Mesh generator checks: tagged areas, periodic pairing, boundary tags."""

import numpy as np
import pytest

from mqshmm.mesh import (
    Boundary,
    GeometryParams,
    Homogeneous,
    InvalidGeometryError,
    InvalidLayoutError,
    Laminate,
    Region,
    SquareInclusion,
    generate_cell_mesh,
    generate_macro_mesh,
    generate_reference_mesh,
    triangle_areas,
    write_mesh,
)


def region_area(mesh, region):
    return triangle_areas(mesh)[mesh.region == region].sum()


def test_homogeneous_cell_minimal_counts():
    mesh, pairing = generate_cell_mesh(Homogeneous(), n_per_side=2)
    assert mesh.n_triangles == 8
    assert mesh.n_nodes == 9
    assert set(mesh.region) == {Region.CONDUCTING_GRAIN}
    # one non-corner node per side: one pair per paired direction
    assert pairing.n_pairs == 2
    assert len(pairing.corner_group) == 4
    np.testing.assert_allclose(triangle_areas(mesh).sum(), 1.0, rtol=1e-15)


def test_square_inclusion_area_fraction_exact():
    mesh, _ = generate_cell_mesh(SquareInclusion(0.64), n_per_side=10)
    np.testing.assert_allclose(region_area(mesh, Region.CONDUCTING_GRAIN),
                               0.64, rtol=1e-12)
    np.testing.assert_allclose(region_area(mesh, Region.INSULATION),
                               0.36, rtol=1e-12)


def test_square_inclusion_benchmark_resolution():
    mesh, _ = generate_cell_mesh(SquareInclusion(0.64), n_per_side=20)
    assert mesh.n_triangles == 800
    np.testing.assert_allclose(region_area(mesh, Region.CONDUCTING_GRAIN),
                               0.64, rtol=1e-12)


def test_laminate_layout_and_sides():
    mesh, _ = generate_cell_mesh(Laminate(0.5, "x"), n_per_side=4)
    cent = mesh.nodes[mesh.triangles].mean(axis=1)
    grain = mesh.region == Region.CONDUCTING_GRAIN
    assert np.all(cent[grain, 0] > 0.0)
    assert np.all(cent[~grain, 0] < 0.0)
    np.testing.assert_allclose(region_area(mesh, Region.CONDUCTING_GRAIN),
                               0.5, rtol=1e-12)


def test_pairing_geometry_consistency():
    mesh, pairing = generate_cell_mesh(SquareInclusion(0.64), n_per_side=10)
    masters, slaves = pairing.pairs[:, 0], pairing.pairs[:, 1]
    # involution-free: no master is a slave anywhere
    assert not set(masters) & set(slaves)
    offsets = mesh.nodes[slaves] - mesh.nodes[masters]
    # paired nodes differ by exactly one period along exactly one axis
    one_axis = np.isclose(np.abs(offsets), 1.0, atol=1e-12).sum(axis=1)
    zero_axis = np.isclose(offsets, 0.0, atol=1e-12).sum(axis=1)
    assert np.all(one_axis == 1)
    assert np.all(zero_axis == 1)
    corners = mesh.nodes[pairing.corner_group]
    np.testing.assert_allclose(np.sort(np.abs(corners).ravel()), 0.5, atol=1e-12)


def test_macro_mesh_regions_and_boundary():
    geo = GeometryParams(grains=4)
    mesh = generate_macro_mesh(geo)
    # homogenized block: grains x grains rectangles, two triangles each
    assert np.sum(mesh.region == Region.HOMOGENIZED) == 2 * geo.grains**2
    np.testing.assert_allclose(region_area(mesh, Region.HOMOGENIZED),
                               (0.5 * geo.L) ** 2, rtol=1e-12)
    np.testing.assert_allclose(region_area(mesh, Region.INDUCTOR),
                               0.5 * geo.L * geo.e_i, rtol=1e-12)
    np.testing.assert_allclose(triangle_areas(mesh).sum(),
                               geo.box_side**2, rtol=1e-12)

    for tag, axis, value in ((Boundary.GAMMA_V, 0, 0.0),
                             (Boundary.GAMMA_H, 1, 0.0)):
        edges = mesh.boundary_edges[mesh.boundary_tag == tag]
        assert len(edges)
        np.testing.assert_allclose(mesh.nodes[edges.ravel(), axis], value,
                                   atol=1e-12 * geo.box_side)
    inf_edges = mesh.boundary_edges[mesh.boundary_tag == Boundary.GAMMA_INF]
    mids = mesh.nodes[inf_edges].mean(axis=1)
    assert np.all(np.isclose(mids, geo.box_side, rtol=1e-12).any(axis=1))


def test_reference_mesh_grain_islands_and_area():
    geo = GeometryParams(grains=2)
    mesh = generate_reference_mesh(geo, refinement=1)
    grain_side = np.sqrt(geo.fill) * geo.pitch
    np.testing.assert_allclose(region_area(mesh, Region.CONDUCTING_GRAIN),
                               geo.grains**2 * grain_side**2, rtol=1e-12)

    # conducting triangles form grains^2 islands with no conducting bridge
    grain_tris = np.flatnonzero(mesh.region == Region.CONDUCTING_GRAIN)
    edge_owner = {}
    adj = {t: set() for t in grain_tris}
    for t in grain_tris:
        tri = mesh.triangles[t]
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            if key in edge_owner:
                adj[t].add(edge_owner[key])
                adj[edge_owner[key]].add(t)
            edge_owner[key] = t
    seen, islands = set(), 0
    for t in grain_tris:
        if t in seen:
            continue
        islands += 1
        stack = [t]
        while stack:
            u = stack.pop()
            if u in seen:
                continue
            seen.add(u)
            stack.extend(adj[u] - seen)
    assert islands == geo.grains**2


def test_reference_refinement_scales_triangle_count():
    geo = GeometryParams(grains=2)
    n1 = generate_reference_mesh(geo, refinement=1).n_triangles
    n2 = generate_reference_mesh(geo, refinement=2).n_triangles
    assert n2 == 4 * n1


def test_mesh_writer_round_trip(tmp_path):
    mesh, pairing = generate_cell_mesh(Homogeneous(), n_per_side=2)
    path = tmp_path / "cell.txt"
    write_mesh(mesh, pairing, path)
    lines = path.read_text().strip().splitlines()
    n = [ln for ln in lines if ln.startswith("n ")]
    t = [ln for ln in lines if ln.startswith("t ")]
    p = [ln for ln in lines if ln.startswith("p ")]
    assert len(n) == mesh.n_nodes
    assert len(t) == mesh.n_triangles
    assert len(p) == pairing.n_pairs + len(pairing.corner_group) - 1
    x = float(n[0].split()[2])
    np.testing.assert_allclose(x, mesh.nodes[0, 0], rtol=0.0, atol=0.0)


@pytest.mark.parametrize("bad", [
    lambda: SquareInclusion(1.2),
    lambda: Laminate(0.5, "z"),
    lambda: GeometryParams(grains=0),
    lambda: GeometryParams(L=-1.0),
])
def test_invalid_inputs_raise(bad):
    with pytest.raises((InvalidGeometryError, InvalidLayoutError)):
        bad()
