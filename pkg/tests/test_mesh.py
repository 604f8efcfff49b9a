import numpy as np
import pytest
import shapely
from shapely.geometry import Polygon

from psjoint.exceptions import MeshConstructionError, ParameterError
from psjoint.mesh import DomainPolygon, build_mesh, projector


def test_build_mesh_unit_square(coarse_mesh):
    assert coarse_mesh.n_vertices > 4
    assert np.all(coarse_mesh.signed_areas() > 0)
    assert coarse_mesh.domain_triangles.all()
    # without an exterior band the triangles tile the domain exactly
    assert coarse_mesh.signed_areas().sum() == pytest.approx(1.0, abs=1e-9)
    assert coarse_mesh.edge_lengths().max() <= 0.3 * (1 + 1e-9)


def test_build_mesh_angles(coarse_mesh):
    # all corners of the unit square are right angles, so no input vertex forces a small angle
    assert coarse_mesh.angles().min() >= 25.0 - 1e-6


def test_build_mesh_extension(unit_square):
    mesh = build_mesh(unit_square, 0.15, 0.3, extension=True)
    assert mesh.vertices.min() < -0.1
    assert mesh.vertices.max() > 1.1
    assert not mesh.domain_triangles.all()
    inside_area = mesh.signed_areas()[mesh.domain_triangles].sum()
    assert inside_area == pytest.approx(1.0, abs=1e-9)
    assert mesh.domain_vertices.sum() < mesh.n_vertices


def test_build_mesh_hole():
    hole = np.array([[0.4, 0.4], [0.6, 0.4], [0.6, 0.6], [0.4, 0.6]])
    domain = DomainPolygon(np.array([[0, 0], [1, 0], [1, 1], [0, 1]]), (hole,))
    mesh = build_mesh(domain, 0.08, 0.2, extension=False)
    centroids = mesh.vertices[mesh.triangles].mean(axis=1)
    assert not shapely.contains_xy(Polygon(hole), centroids[:, 0], centroids[:, 1]).any()
    assert mesh.signed_areas().sum() == pytest.approx(0.96, abs=1e-9)


def test_invalid_domain():
    bowtie = DomainPolygon(np.array([[0, 0], [1, 1], [1, 0], [0, 1]]))
    with pytest.raises(MeshConstructionError, match="invalid domain boundary"):
        build_mesh(bowtie, 0.1, 0.2)


def test_hole_outside_boundary():
    hole = np.array([[2, 2], [3, 2], [3, 3]])
    domain = DomainPolygon(np.array([[0, 0], [1, 0], [1, 1], [0, 1]]), (hole,))
    with pytest.raises(MeshConstructionError, match="hole 0"):
        domain.validate()


@pytest.mark.parametrize("min_edge, max_edge", [(0.3, 0.2), (0.0, 0.2), (0.2, 0.2)])
def test_bad_edge_lengths(unit_square, min_edge, max_edge):
    with pytest.raises(ParameterError):
        build_mesh(unit_square, min_edge, max_edge)


def test_projector_reproduces_linear_functions(coarse_mesh):
    rng = np.random.default_rng(3)
    points = rng.uniform(0.0, 1.0, size=(50, 2))
    proj = projector(coarse_mesh, points)
    assert proj.inside.all()
    np.testing.assert_allclose(np.asarray(proj.A.sum(axis=1)).ravel(), 1.0, atol=1e-12)
    np.testing.assert_allclose(proj.A @ coarse_mesh.vertices, points, atol=1e-10)
    assert proj.A.getnnz(axis=1).max() <= 3


def test_projector_at_vertex(coarse_mesh):
    k = 5
    proj = projector(coarse_mesh, coarse_mesh.vertices[k])
    row = proj.A.toarray()[0]
    assert row[k] == pytest.approx(1.0)
    assert row.sum() == pytest.approx(1.0)


def test_projector_outside(coarse_mesh):
    proj = projector(coarse_mesh, [[0.5, 0.5], [5.0, 5.0]])
    assert proj.inside.tolist() == [True, False]
    assert proj.n_outside == 1
    assert proj.A[1].nnz == 0
    assert proj.triangle[1] == -1
    with pytest.raises(MeshConstructionError, match="first at index 1"):
        proj.require_inside()


@pytest.mark.parametrize(
    "ring, message",
    [
        ([[0, 0], [1, 0], [1, 0], [1, 1], [0, 1]], "repeats vertex 1"),
        ([[0, 0], [1, 0], [2, 0], [1, 0]], "repeats vertex|folds back"),
        ([[0, 0], [2, 0], [1, 0], [1, 1], [0, 1]], "folds back on itself at vertex 1"),
        ([[0, 0], [1, 0], [2, 0]], "folds back|invalid domain boundary"),
    ],
)
def test_degenerate_boundary(ring, message):
    with pytest.raises(MeshConstructionError, match=message):
        build_mesh(DomainPolygon(np.array(ring, dtype=float)), 0.1, 0.2)


def test_degenerate_hole():
    hole = np.array([[0.4, 0.4], [0.6, 0.4], [0.6, 0.4], [0.5, 0.6]])
    domain = DomainPolygon(np.array([[0, 0], [1, 0], [1, 1], [0, 1]]), (hole,))
    with pytest.raises(MeshConstructionError, match="hole 0 repeats vertex 1"):
        domain.validate()


def test_straight_boundary_vertex_is_kept():
    # a vertex in the middle of a straight side is not degenerate
    domain = DomainPolygon(np.array([[0, 0], [0.5, 0], [1, 0], [1, 1], [0, 1]]))
    mesh = build_mesh(domain, 0.15, 0.3, extension=False)
    assert mesh.signed_areas().sum() == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("extension", [False, True])
def test_refinement_adds_vertices(unit_square, extension):
    counts = [build_mesh(unit_square, min_edge, 2 * min_edge, extension=extension).n_vertices for min_edge in (0.4, 0.2, 0.1)]
    assert counts[0] < counts[1] < counts[2]


def test_projector_at_centroid(coarse_mesh):
    for t in (0, coarse_mesh.n_triangles // 2, coarse_mesh.n_triangles - 1):
        corners = coarse_mesh.triangles[t]
        centroid = coarse_mesh.vertices[corners].mean(axis=0)
        row = projector(coarse_mesh, centroid).A.toarray()[0]
        np.testing.assert_allclose(row[corners], 1.0 / 3.0, atol=1e-12)
        assert np.count_nonzero(row) == 3
