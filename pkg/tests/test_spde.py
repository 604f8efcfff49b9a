import math

import numpy as np
import pytest
from scipy import integrate

from psjoint.exceptions import FemAssemblyError, ParameterError
from psjoint.linalg import Factor
from psjoint.mesh import DomainPolygon, Mesh, build_mesh, projector
from psjoint.spde import (
    MaternParams,
    fem_matrices,
    matern_correlation,
    matern_precision,
    pc_prior_logdensity,
    pc_rates,
)


def test_fem_matrices(coarse_fem):
    C, G = coarse_fem.C, coarse_fem.G
    assert coarse_fem.area == pytest.approx(1.0, abs=1e-12)
    assert np.all(coarse_fem.c_diag > 0)
    np.testing.assert_allclose((G - G.T).toarray(), 0.0, atol=1e-12)
    # constants lie in the kernel of the stiffness matrix
    np.testing.assert_allclose(G @ np.ones(coarse_fem.n), 0.0, atol=1e-10)
    np.testing.assert_array_equal(C.toarray(), np.diag(coarse_fem.c_diag))


def test_fem_gradient_energy(coarse_fem, coarse_mesh):
    # x' G x is the Dirichlet energy, exactly 1 for the linear function f(x, y) = x on the unit square
    f = coarse_mesh.vertices[:, 0]
    assert f @ (coarse_fem.G @ f) == pytest.approx(1.0, rel=1e-10)


def test_degenerate_triangle():
    mesh = Mesh(
        vertices=np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0]]),
        triangles=np.array([[0, 1, 2], [0, 1, 3]]),
        boundary_flags=np.ones(4, dtype=bool),
        domain_triangles=np.ones(2, dtype=bool),
        domain=DomainPolygon.rectangle(0, 0, 2, 1),
        min_edge=0.1,
        max_edge=1.0,
        min_angle=20.0,
    )
    with pytest.raises(FemAssemblyError, match="degenerate triangle 0"):
        fem_matrices(mesh)


def test_matern_params():
    params = MaternParams(range=2.0, sd=0.5)
    assert params.kappa == pytest.approx(math.sqrt(8.0) / 2.0)
    back = MaternParams.from_kappa_tau(params.kappa, params.tau)
    assert back.range == pytest.approx(2.0)
    assert back.sd == pytest.approx(0.5)
    for bad in ({"range": 0.0, "sd": 1.0}, {"range": 1.0, "sd": -1.0}, {"range": np.inf, "sd": 1.0}):
        with pytest.raises(ParameterError):
            MaternParams(**bad)


def test_matern_precision(coarse_fem):
    Q1 = matern_precision(coarse_fem, MaternParams(0.5, 1.0))
    Q2 = matern_precision(coarse_fem, MaternParams(0.5, 2.0))
    np.testing.assert_allclose((Q1 - Q1.T).toarray(), 0.0, atol=1e-10)
    np.testing.assert_allclose(Q2.toarray(), Q1.toarray() / 4.0, rtol=1e-12)
    # positive definite
    Factor(Q1)
    with pytest.raises(ParameterError):
        matern_precision(coarse_fem, MaternParams(0.5, 1.0), tau=0.0)


def test_matern_correlation():
    assert matern_correlation(0.0, 1.0) == 1.0
    # the correlation at the practical range is about 0.14
    assert 0.1 < matern_correlation(1.0, 1.0) < 0.15
    h = np.linspace(0.0, 3.0, 31)
    assert np.all(np.diff(matern_correlation(h, 1.0)) < 0)


def test_pc_prior_tail_probabilities():
    range0, alpha_r, sd0, alpha_s = 2.0, 0.05, 1.5, 0.01
    lam_r, lam_s = pc_rates(range0, alpha_r, sd0, alpha_s)
    sd = 0.7

    def range_density(r):
        logp = pc_prior_logdensity(MaternParams(r, sd), range0, alpha_r, sd0, alpha_s)
        return math.exp(logp - math.log(lam_s) + lam_s * sd)

    below, _ = integrate.quad(range_density, 1e-8, range0)
    assert below == pytest.approx(alpha_r, rel=1e-6)

    def sd_density(s):
        logp = pc_prior_logdensity(MaternParams(1.0, s), range0, alpha_r, sd0, alpha_s)
        return math.exp(logp - math.log(lam_r) + lam_r)

    above, _ = integrate.quad(sd_density, sd0, np.inf)
    assert above == pytest.approx(alpha_s, rel=1e-6)


def test_pc_rates_validation():
    with pytest.raises(ParameterError):
        pc_rates(1.0, 1.5, 1.0, 0.01)
    with pytest.raises(ParameterError):
        pc_rates(-1.0, 0.05, 1.0, 0.01)


def test_spde_matches_closed_form_matern():
    range_, sd = 2.0, 1.0
    domain = DomainPolygon.rectangle(0.0, 0.0, 10.0, 10.0)
    mesh = build_mesh(domain, 0.2, 0.3, extension=True)
    fem = fem_matrices(mesh)
    Q = matern_precision(fem, MaternParams(range_, sd)).toarray()
    cov = np.linalg.inv(Q)

    center = np.array([5.0, 5.0])
    direction = np.array([1.0, 1.0]) / math.sqrt(2.0)
    lags = np.array([1.0, 1.5, 2.0, 3.0, 4.0])
    points = np.vstack([center, center + lags[:, None] * direction, center - lags[:, None] * direction])
    A = projector(mesh, points).require_inside().A.toarray()
    C = A @ cov @ A.T
    sds = np.sqrt(np.diag(C))
    corr = C / np.outer(sds, sds)

    assert sds[0] == pytest.approx(sd, rel=0.1)
    expected = matern_correlation(lags, range_)
    n = len(lags)
    np.testing.assert_allclose(corr[0, 1 : n + 1], expected, atol=0.05)
    np.testing.assert_allclose(corr[0, n + 1 :], expected, atol=0.05)


def _hand_mesh(vertices, triangles):
    vertices = np.asarray(vertices, dtype=float)
    return Mesh(
        vertices=vertices,
        triangles=np.asarray(triangles),
        boundary_flags=np.ones(len(vertices), dtype=bool),
        domain_triangles=np.ones(len(triangles), dtype=bool),
        domain=DomainPolygon(vertices),
        min_edge=0.5,
        max_edge=1.5,
        min_angle=20.0,
    )


def test_fem_single_right_triangle():
    fem = fem_matrices(_hand_mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]]))
    np.testing.assert_allclose(fem.c_diag, [1 / 6, 1 / 6, 1 / 6], rtol=1e-15)
    assert fem.area == pytest.approx(0.5, abs=1e-15)
    expected = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]]
    np.testing.assert_allclose(fem.G.toarray(), expected, atol=1e-15)


def test_fem_two_triangle_square():
    # diagonal from (0, 0) to (1, 1), right angles at vertices 1 and 3
    fem = fem_matrices(_hand_mesh([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2], [0, 2, 3]]))
    G = [
        [1.0, -0.5, 0.0, -0.5],
        [-0.5, 1.0, -0.5, 0.0],
        [0.0, -0.5, 1.0, -0.5],
        [-0.5, 0.0, -0.5, 1.0],
    ]
    np.testing.assert_allclose(fem.G.toarray(), G, atol=1e-15)
    np.testing.assert_allclose(fem.c_diag, [1 / 3, 1 / 6, 1 / 3, 1 / 6], rtol=1e-15)
    # kappa^4 C + 2 kappa^2 G + G C^-1 G, assembled by hand
    params = MaternParams(range=2.0, sd=1.0)
    C = np.diag([1 / 3, 1 / 6, 1 / 3, 1 / 6])
    G = np.array(G)
    K = params.kappa**4 * C + 2 * params.kappa**2 * G + G @ np.linalg.inv(C) @ G
    np.testing.assert_allclose(matern_precision(fem, params).toarray(), params.tau**2 * K, rtol=1e-12)


def test_tau_leaves_correlation_unchanged(coarse_fem):
    params = MaternParams(0.5, 1.0)
    cov = np.linalg.inv(matern_precision(coarse_fem, params).toarray())
    scaled = np.linalg.inv(matern_precision(coarse_fem, params, tau=3.7 * params.tau).toarray())
    sd, sd_scaled = np.sqrt(np.diag(cov)), np.sqrt(np.diag(scaled))
    np.testing.assert_allclose(sd_scaled, sd / 3.7, rtol=1e-10)
    np.testing.assert_allclose(scaled / np.outer(sd_scaled, sd_scaled), cov / np.outer(sd, sd), atol=1e-8)


def test_short_range_is_nearly_white_noise(coarse_fem):
    cov = np.linalg.inv(matern_precision(coarse_fem, MaternParams(0.01, 1.0)).toarray())
    sd = np.sqrt(np.diag(cov))
    corr = cov / np.outer(sd, sd)
    assert np.abs(corr - np.eye(coarse_fem.n)).max() < 0.05
