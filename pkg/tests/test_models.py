import numpy as np
import pytest
import scipy.sparse as sp

from ecmp.errors import EventOutsideMesh, NotStable, ValidationError
from ecmp.mesh import Mesh, lgcp_discretise, make_disc_mesh, make_disc_mesh_n
from ecmp.models import (ModelSpec, build_1d_model, build_2d_rotation, inference_prior, rng_stream,
                         sample_lgcp_events, simulate, simulate_path, stationary_moments)
from ecmp.sparse import SparseSym


def test_1d_interior_rows_and_row_sums():
    A, Q = build_1d_model(16, 1, 0.025, 0.25, 0.0)
    Ad = A.toarray()
    assert np.allclose(Ad[5, 4:7], 0.975 / 3)
    assert np.count_nonzero(Ad[5]) == 3
    assert np.allclose(Ad.sum(1), 0.975, atol=1e-15)
    A4, _ = build_1d_model(16, 4, 0.025, 0.25, 0.0)
    assert np.allclose(A4.toarray().sum(1), 0.975, atol=1e-15)
    assert (abs(A4) != 0).toarray().sum(1)[8] == 9


@pytest.mark.parametrize("s", [-1.0, 0.0, 1.0])
def test_1d_noise_marginal_variance(s):
    _, Q = build_1d_model(16, 1, 0.025, 0.3, s)
    assert np.allclose(np.diag(np.linalg.inv(Q.to_dense())), 0.3, atol=1e-10)


def test_1d_paper_configuration_simulates():
    for nb in (1, 2, 4, 8):
        for s in (-1.0, 0.0, 1.0):
            A, Q = build_1d_model(64, nb, 0.025, 0.25, s)
            spec = ModelSpec(A, Q, observation="gaussian", v_obs=0.0625, p_obs=0.75)
            sim = simulate(spec, 5, seed=1)
            assert sim.X.shape == (5, 64) and np.isfinite(sim.X).all()
            assert 0.5 < sim.obs.mask.mean() < 0.95


def test_stationary_moments_examples():
    Q = SparseSym.from_dense(np.diag([2.0, 4.0]))
    _, V = stationary_moments(np.zeros((2, 2)), Q)
    assert np.allclose(V, np.diag([0.5, 0.25]))
    _, v = stationary_moments(np.array([[0.5]]), SparseSym.from_dense(np.array([[1.0]])))
    assert np.isclose(v[0, 0], 4 / 3, atol=1e-12)
    with pytest.raises(NotStable):
        stationary_moments(np.array([[1.01]]), SparseSym.from_dense(np.array([[1.0]])))


def test_stationary_residual_rotation():
    mesh = make_disc_mesh_n(10.0, 55)
    spec = build_2d_rotation(mesh, 0.4)
    _, V = stationary_moments(spec.A, spec.Q)
    A = spec.A.toarray()
    assert np.max(np.abs(V - A @ V @ A.T - np.eye(55))) <= 1e-10


def test_rotation_rows_and_orientation():
    mesh = make_disc_mesh_n(10.0, 91)
    spec = build_2d_rotation(mesh, 0.4, 0.05, 1.0)
    A = spec.A.toarray()
    deg = (A != 0).sum(1) - 1
    has = deg > 0
    assert np.allclose(A.sum(1)[has], 0.95)
    assert np.allclose(np.diag(A), 0.4)
    V = mesh.vertices
    # no pair survives in both directions unless the cross products vanish
    off = (A != 0) & ~np.eye(91, dtype=bool)
    for i, j in zip(*np.nonzero(off & off.T)):
        d = V[j] - V[i]
        ci = d[0] * V[i][1] - d[1] * V[i][0]
        cj = -d[0] * V[j][1] + d[1] * V[j][0]
        assert abs(ci) < 1e-9 or abs(cj) < 1e-9
    eye = build_2d_rotation(mesh, 0.95, 0.05).A.toarray()
    assert np.allclose(eye, 0.95 * np.eye(91))


def test_hexagon_rotation_is_consistent():
    ang = np.arange(6) * np.pi / 3
    V = np.vstack([[0, 0], np.column_stack([np.cos(ang), np.sin(ang)])])
    T = np.array([[0, k + 1, (k + 1) % 6 + 1] for k in range(6)])
    spec = build_2d_rotation(Mesh(V, T), 0.4)
    A = spec.A.toarray()
    for k in range(1, 7):
        nxt = k % 6 + 1
        # exactly one of the two ring directions survives
        assert (A[k, nxt] != 0) != (A[nxt, k] != 0)


def test_disc_mesh_invariants():
    small = make_disc_mesh(1.0, 5.0)
    small.check()
    assert small.n_triangles <= 8
    m = make_disc_mesh(10.0, 1.0)
    m.check()
    assert abs(m.n - 362) <= 36
    adj = m.adjacency().to_dense()
    assert np.array_equal(adj, adj.T)
    for n in (362, 562, 1008):
        assert make_disc_mesh_n(10.0, n).n == n
    a = make_disc_mesh(10.0, 1.0)
    assert np.array_equal(a.triangles, m.triangles)


def test_lgcp_single_triangle():
    mesh = Mesh(np.array([[0.0, 0.0], [np.sqrt(2), 0.0], [0.0, np.sqrt(2)]]), np.array([[0, 1, 2]]))
    eta, c2 = lgcp_discretise(mesh, 1.0)
    assert np.allclose(eta, 1 / 3)
    assert np.allclose(c2([[0.0, 0.0]]).toarray(), [[1, 0, 0]])
    cen = mesh.vertices.mean(0)
    assert np.allclose(c2([cen]).toarray(), [[1 / 3, 1 / 3, 1 / 3]])
    with pytest.raises(EventOutsideMesh):
        c2([[5.0, 5.0]])


def test_lgcp_partition_of_unity():
    mesh = make_disc_mesh_n(10.0, 200)
    eta, c2 = lgcp_discretise(mesh, 0.7)
    assert np.isclose(eta.sum(), 0.7 * mesh.area)
    pts = np.random.default_rng(0).uniform(-5, 5, (100, 2))
    assert np.allclose(np.asarray(c2(pts).sum(1)).ravel(), 1.0)


def test_noiseless_path_is_constant():
    A = sp.identity(3, format="csr")
    spec = ModelSpec(A, SparseSym.from_dense(np.eye(3) * 1e8))
    X = simulate_path(spec, 20, seed=3, x0=np.array([1.0, -2.0, 0.5]))
    assert np.max(np.abs(X - X[0])) < 1e-3


def test_poisson_counts_law_of_large_numbers():
    A = sp.csr_matrix(np.eye(4) * 0.5)
    spec = ModelSpec(A, SparseSym.from_dense(np.eye(4) * 4.0), observation="poisson")
    sim = simulate(spec, 10000, seed=7)
    y = sim.obs.y
    rate = np.exp(sim.X)
    diff = (y - rate).mean(0)
    se = np.sqrt(rate.mean(0) / 10000)
    assert np.all(np.abs(diff) < 3 * se)


def test_thinning_homogeneous_count():
    mesh = make_disc_mesh_n(10.0, 91)
    T, dt, c = 200, 0.5, -1.0
    total = sum(len(sample_lgcp_events(mesh, np.full(91, c), dt, rng_stream(11, "events", t))) for t in range(T))
    mu = np.exp(c) * mesh.area * T * dt
    assert abs(total - mu) < 4 * np.sqrt(mu)


def test_stationary_sample_covariance():
    A = sp.csr_matrix(np.array([[0.6, 0.2], [0.0, 0.5]]))
    spec = ModelSpec(A, SparseSym.from_dense(np.array([[2.0, 0.5], [0.5, 1.0]])))
    _, V = stationary_moments(spec.A, spec.Q)
    X = simulate_path(spec, 40000, seed=5)
    S = np.cov(X.T)
    # lag-correlated samples: allow for an effective sample size of a few thousand
    assert np.allclose(S, V, atol=4 * np.max(np.abs(V)) / np.sqrt(4000))


def test_simulation_is_deterministic():
    mesh = make_disc_mesh_n(10.0, 55)
    spec = build_2d_rotation(mesh, 0.4)
    a = simulate(spec, 5, seed=9)
    b = simulate(spec, 5, seed=9)
    assert np.array_equal(a.X, b.X)
    assert all(np.array_equal(x, y) for x, y in zip(a.obs.events, b.obs.events))
    assert np.array_equal(a.obs.lin, b.obs.lin)


def test_inference_prior_is_diagonal():
    V = np.array([[2.0, 0.3], [0.3, 0.5]])
    m, Q = inference_prior(V)
    assert np.allclose(Q.to_dense(), np.diag([0.5, 2.0])) and np.all(m == 0)


def test_invalid_parameters():
    with pytest.raises(ValidationError):
        build_1d_model(1, 1, 0.0, 1.0, 0.0)
    with pytest.raises(ValidationError):
        build_2d_rotation(make_disc_mesh_n(10.0, 55), 0.99)
