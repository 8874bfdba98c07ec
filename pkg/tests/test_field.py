import math

import mpmath
import numpy as np
import pytest
import scipy.sparse as sp

from prefield.field import (
    DegenerateTriangleError,
    FieldParams,
    FieldRealization,
    Mesh,
    assemble_fem,
    build_field_mesh,
    build_lattice_mesh,
    build_precision,
    dense_gp_draw,
    interp_weights,
    interpolate_field,
    lattice_points,
    matern_cov,
    read_field_csv,
    recursive_precision,
    sample_field,
    unit_precision,
    write_field_csv,
)

FP = FieldParams(mu=5.0, tau2=0.1, phi=25.0, sigma2=1.5)


# ---------------------------------------------------------------- covariance


def test_matern_zero_lag_is_variance():
    assert matern_cov(0.0, FP) == 1.5


def test_matern_high_precision_fixture():
    # sigma2 * 2^(1-k)/Gamma(k) * u^k K_k(u) at u = 1, k = 2, in 50-digit arithmetic
    mpmath.mp.dps = 50
    ref = 1.5 * mpmath.mpf(2) ** (-1) / mpmath.gamma(2) * mpmath.besselk(2, 1)
    assert matern_cov(25.0, FP) == pytest.approx(float(ref), rel=1e-14)


def test_matern_decreasing_and_continuous():
    r = np.linspace(0, 400, 2001)
    c = matern_cov(r, FP)
    assert np.all(np.diff(c) < 0)
    assert matern_cov(1e-9, FP) == pytest.approx(1.5, rel=1e-12)
    assert matern_cov(1e4, FP) < 1e-100


def test_matern_rejects_bad_distance():
    with pytest.raises(ValueError):
        matern_cov(float("nan"), FP)
    with pytest.raises(ValueError):
        matern_cov(-1.0, FP)


def test_field_params_validation():
    with pytest.raises(ValueError):
        FieldParams(phi=0.0)
    with pytest.raises(ValueError):
        FieldParams(sigma2=-1.0)
    with pytest.raises(ValueError):
        FieldParams(tau2=-0.1)


# ---------------------------------------------------------------------- mesh


def test_lattice_mesh_counts():
    m = build_lattice_mesh((-150, 150, -150, 150), 51, 51)
    assert m.n_vertices == 2601
    assert len(m.triangles) == 5000
    assert build_lattice_mesh((0, 1, 0, 1), 2, 2).triangles.shape == (2, 3)
    assert len(lattice_points((-150, 150, -150, 150), 26, 26)) == 676


def test_lattice_mesh_row_major():
    m = build_lattice_mesh((0, 2, 0, 1), 2, 3)
    np.testing.assert_allclose(m.vertices[:3], [[0, 0], [1, 0], [2, 0]])
    np.testing.assert_allclose(m.vertices[3:], [[0, 1], [1, 1], [2, 1]])


def test_lattice_mesh_rejects_degenerate_domain():
    with pytest.raises(ValueError):
        build_lattice_mesh((0, 0, 0, 1), 3, 3)
    with pytest.raises(ValueError):
        build_lattice_mesh((0, 1, 0, 1), 1, 3)


def test_field_mesh_margin_contains_domain():
    m = build_field_mesh((-150, 150, -150, 150), 12.0, 50.0)
    x0, x1, y0, y1 = m.domain
    assert x0 <= -200 and x1 >= 200 and y0 <= -200 and y1 >= 200
    assert m.inner_domain == (-150, 150, -150, 150)
    # lattice targets coincide with vertices
    T = lattice_points((-150, 150, -150, 150), 26, 26)
    idx, w = interp_weights(m, T)
    assert np.allclose(np.max(w, axis=1), 1.0)


# --------------------------------------------------------------- interpolation


def test_interpolation_at_vertices_and_centroids():
    mesh = build_lattice_mesh((0, 4, 0, 4), 5, 5)
    vals = np.random.default_rng(0).normal(size=mesh.n_vertices)
    real = FieldRealization(vals, mesh)
    np.testing.assert_allclose(real(mesh.vertices), vals, atol=1e-14)
    tri = mesh.triangles
    cent = mesh.vertices[tri].mean(axis=1)
    np.testing.assert_allclose(real(cent), vals[tri].mean(axis=1), atol=1e-12)


def test_interpolation_exact_on_affine():
    mesh = build_lattice_mesh((-10, 10, -5, 5), 7, 9)
    f = lambda p: 2.0 * p[:, 0] - 3.0 * p[:, 1] + 0.5
    real = FieldRealization(f(mesh.vertices), mesh)
    pts = np.random.default_rng(1).uniform([-10, -5], [10, 5], size=(200, 2))
    np.testing.assert_allclose(real(pts), f(pts), atol=1e-12)


def test_interpolation_outside_hull_raises():
    mesh = build_lattice_mesh((0, 1, 0, 1), 3, 3)
    real = FieldRealization(np.zeros(9), mesh)
    with pytest.raises(ValueError):
        interpolate_field(real, [[1.5, 0.5]])


def test_realization_length_checked():
    mesh = build_lattice_mesh((0, 1, 0, 1), 3, 3)
    with pytest.raises(ValueError):
        FieldRealization(np.zeros(8), mesh)


# ---------------------------------------------------------------------- FEM


def test_fem_partition_of_unity_and_null_space():
    mesh = build_lattice_mesh((-3, 5, 0, 2), 6, 9)
    fem = assemble_fem(mesh)
    assert fem.C_lumped.diagonal().sum() == pytest.approx(16.0, rel=1e-13)
    assert np.all(fem.C_lumped.diagonal() > 0)
    np.testing.assert_allclose(fem.G @ np.ones(mesh.n_vertices), 0.0, atol=1e-12)
    for M in (fem.G, fem.M2, fem.M3 + fem.M3.T):
        assert abs(M - M.T).max() < 1e-12


def test_fem_stiffness_hand_assembled():
    # 3x3 lattice on the unit square: 4 cells, 8 right triangles with legs 1/2.
    # For a right triangle the P1 stiffness is 1/2 * [[1,-1,0],[-1,2,-1],[0,-1,1]]
    # with the right-angle vertex in the middle; summing over elements gives:
    mesh = build_lattice_mesh((0, 1, 0, 1), 3, 3)
    G = assemble_fem(mesh).G.toarray()
    # centre vertex: degree 4 in the stiffness stencil (5-point Laplacian)
    assert G[4, 4] == pytest.approx(4.0)
    for nb in (1, 3, 5, 7):
        assert G[4, nb] == pytest.approx(-1.0)
    for diag in (0, 2, 6, 8):
        assert G[4, diag] == pytest.approx(0.0, abs=1e-14)
    # corner vertices (0,0) and (1,1) touch two triangles, the others one
    assert G[0, 0] == pytest.approx(1.0)
    assert G[2, 2] == pytest.approx(1.0)
    assert G[1, 1] == pytest.approx(2.0)
    # lumped mass: cell area 1/4, each triangle 1/8 split in thirds
    C = assemble_fem(mesh).C_lumped.diagonal()
    assert C[4] == pytest.approx(6 * (1 / 8) / 3)
    assert C[0] == pytest.approx(2 * (1 / 8) / 3)


def test_fem_degenerate_triangle_named():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    tris = np.array([[0, 1, 3], [0, 1, 2]])
    mesh = Mesh(verts, tris, (2, 2), (0.0, 2.0, 0.0, 1.0))
    with pytest.raises(DegenerateTriangleError, match="1"):
        assemble_fem(mesh)


# ---------------------------------------------------------------- precision


@pytest.mark.parametrize("rows", [4, 9, 15])
@pytest.mark.parametrize("phi", [0.7, 25.0, 300.0])
def test_four_term_equals_recursion(rows, phi):
    mesh = build_lattice_mesh((-150, 150, -150, 150), rows, rows)
    fem = assemble_fem(mesh)
    Q4 = unit_precision(fem, phi).toarray()
    Qr = recursive_precision(fem, phi)
    assert np.linalg.norm(Q4 - Qr) / np.linalg.norm(Qr) < 1e-10


def test_precision_symmetric_and_spd_over_range():
    mesh = build_lattice_mesh((-150, 150, -150, 150), 21, 21)
    fem = assemble_fem(mesh)
    for phi in (1.0, 25.0, 1000.0):
        for s2 in (1e-2, 1.5, 1e2):
            b = build_precision(fem, FieldParams(phi=phi, sigma2=s2))
            assert abs(b.Q - b.Q.T).max() <= 1e-12 * abs(b.Q).max()
            assert np.isfinite(b.logdet())


def test_precision_logdet_matches_dense():
    mesh = build_lattice_mesh((0, 100, 0, 100), 10, 10)
    b = build_precision(assemble_fem(mesh), FieldParams(phi=20.0, sigma2=2.0))
    sign, ld = np.linalg.slogdet(b.Q.toarray())
    assert sign > 0
    assert b.logdet() == pytest.approx(ld, rel=1e-10)


def test_precision_requires_kappa_two():
    fem = assemble_fem(build_lattice_mesh((0, 1, 0, 1), 3, 3))
    with pytest.raises(ValueError):
        build_precision(fem, FieldParams(kappa=1.0))


def test_gmrf_matches_matern_on_interior():
    phi, s2 = 25.0, 1.5
    mesh = build_field_mesh((-150, 150, -150, 150), 15.0, 2 * phi)
    b = build_precision(assemble_fem(mesh), FieldParams(phi=phi, sigma2=s2))
    Sigma = np.linalg.inv(b.Q.toarray())
    x0, x1, y0, y1 = mesh.inner_domain
    V = mesh.vertices
    inner = np.flatnonzero((V[:, 0] >= x0) & (V[:, 0] <= x1) & (V[:, 1] >= y0) & (V[:, 1] <= y1))
    var = np.diag(Sigma)[inner]
    assert abs(var.mean() - s2) / s2 < 0.10
    sd = np.sqrt(np.diag(Sigma))
    R = Sigma[np.ix_(inner, inner)] / np.outer(sd[inner], sd[inner])
    D = np.linalg.norm(V[inner][:, None] - V[inner][None], axis=-1)
    near = D <= 2 * phi
    err = np.abs(R[near] - matern_cov(D[near], FieldParams(phi=phi, sigma2=1.0)))
    assert err.max() < 0.05


# ----------------------------------------------------------------- sampling


def test_sample_field_deterministic_and_covariance():
    mesh = build_lattice_mesh((0, 40, 0, 40), 5, 5)
    b = build_precision(assemble_fem(mesh), FieldParams(phi=15.0, sigma2=1.5))
    np.testing.assert_array_equal(sample_field(b, 3), sample_field(b, 3))
    rng = np.random.default_rng(0)
    n = 10000
    Z = rng.standard_normal((25, n))
    draws = b.factor.sample(Z).T
    C = np.linalg.inv(b.Q.toarray())
    emp = np.cov(draws, rowvar=False)
    # standard error of a sample covariance entry: sqrt((C_ij^2 + C_ii C_jj)/n)
    se = np.sqrt((C**2 + np.outer(np.diag(C), np.diag(C))) / n)
    assert np.all(np.abs(emp - C) < 4 * se)
    assert np.all(np.abs(draws.mean(axis=0)) < 4 * np.sqrt(np.diag(C) / n))


def test_dense_draw_basic_cases():
    v = dense_gp_draw(np.array([[0.0, 0.0]]), FP, 1)
    assert v.shape == (1,)
    v = dense_gp_draw(np.array([[1.0, 2.0], [1.0, 2.0], [5.0, 5.0]]), FP, 1)
    assert v[0] == v[1]
    a = dense_gp_draw(np.array([[0.0, 0.0], [10.0, 0.0]]), FP, 7)
    np.testing.assert_array_equal(a, dense_gp_draw(np.array([[0.0, 0.0], [10.0, 0.0]]), FP, 7))


def test_dense_draw_variogram():
    mesh = build_lattice_mesh((-150, 150, -150, 150), 51, 51)
    V = mesh.vertices.reshape(51, 51, 2)
    fp = FieldParams(phi=25.0, sigma2=1.5)
    gam = {6: [], 24: [], 48: []}
    for seed in range(50):
        S = dense_gp_draw(mesh.vertices, fp, seed).reshape(51, 51)
        for lag in gam:
            k = lag // 6
            gam[lag].append(0.5 * np.mean((S[:, k:] - S[:, :-k]) ** 2))
    for lag, g in gam.items():
        expect = 1.5 - matern_cov(float(lag), fp)
        g = np.asarray(g)
        # per-draw semivariances are strongly correlated in space; use their spread
        assert abs(g.mean() - expect) < 3 * g.std(ddof=1) / math.sqrt(len(g)) + 0.05 * expect


def test_field_csv_round_trip(tmp_path):
    mesh = build_field_mesh((0, 30, 0, 30), 10.0, 10.0)
    real = FieldRealization(np.random.default_rng(0).normal(size=mesh.n_vertices), mesh)
    p = tmp_path / "f.csv"
    write_field_csv(real, p)
    back = read_field_csv(p)
    np.testing.assert_array_equal(back.values, real.values)
    np.testing.assert_allclose(back.mesh.vertices, mesh.vertices)
    assert back.mesh.inner_domain == mesh.inner_domain


def test_precision_is_sparse():
    mesh = build_lattice_mesh((0, 100, 0, 100), 20, 20)
    b = build_precision(assemble_fem(mesh), FieldParams())
    assert sp.issparse(b.Q)
    assert b.Q.nnz < 0.1 * mesh.n_vertices**2
