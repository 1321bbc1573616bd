import csv

import numpy as np
import pytest
import scipy.linalg as sla
from scipy.integrate import quad_vec

from conftest import random_spd
from ekrmle import mmio
from ekrmle.balanced_truncation import (
    balance,
    check_euler_stable,
    export,
    lyapunov_residual,
    observability_gramian,
    prior_from_lyapunov,
    reduce,
    reduced_forward_operator,
    reduced_posterior,
    semidefinite_factor,
    solve_lyapunov,
)
from ekrmle.errors import InstabilityError, RankError, ValidationError
from ekrmle.linear_forward import GaussianPrior, InverseProblem, augment_rls, exact_posterior
from ekrmle.lti import LTISystem, forward_operator, heat_model
from ekrmle.mean_field import mean_field_limits


def _small_system(g, d=4, F=None):
    A = -np.diag(np.arange(1.0, d + 1)) + 0.1 * g.standard_normal((d, d))
    F = np.eye(d) if F is None else F
    return LTISystem(A, F, 0.01, [0.1, 0.2, 0.3], 0.01 * np.eye(F.shape[0]))


# Lyapunov

def test_lyapunov_examples():
    np.testing.assert_allclose(solve_lyapunov(-0.5 * np.eye(3), np.eye(3)), np.eye(3), rtol=1e-14)
    np.testing.assert_allclose(solve_lyapunov(-np.diag([1.0, 2.0]), np.eye(2)),
                               np.diag([0.5, 0.25]), rtol=1e-14, atol=1e-16)


def test_lyapunov_nonsymmetric(rng):
    A = -2 * np.eye(5) + 0.5 * rng.standard_normal((5, 5))
    C = random_spd(rng, 5)
    X = solve_lyapunov(A, C)
    assert lyapunov_residual(A, C, X) <= 1e-8
    np.testing.assert_array_equal(X, X.T)


def test_lyapunov_rejects_unstable():
    with pytest.raises(ValidationError):
        solve_lyapunov(np.diag([-1.0, 0.0]), np.eye(2))
    with pytest.raises(ValidationError):
        solve_lyapunov(np.array([[0.1, 1.0], [0.0, -1.0]]), np.eye(2))


def test_lyapunov_matches_quadrature_on_heat():
    h = heat_model(50)
    A, C = h.A, h.F.T @ h.F
    X = solve_lyapunov(A, C)
    w, V = np.linalg.eigh(A)
    # slowest mode decays like exp(2 w_max t); stop once the tail is below 1e-10
    T = np.log(1e10 / (-2 * w.max())) / (-2 * w.max())

    def integrand(t):
        E = sla.expm(A * t)
        return E.T @ C @ E

    total = np.zeros_like(X)
    for a, b in ((0, 0.05), (0.05, 1), (1, 10), (10, T)):
        total += quad_vec(integrand, a, b, epsabs=1e-13, epsrel=1e-10)[0]
    assert np.linalg.norm(total - X) <= 1e-6 * np.linalg.norm(X)


def test_gramian_examples():
    s = LTISystem(-0.5 * np.eye(2), np.eye(2), 0.1, [0.1], np.eye(2))
    np.testing.assert_allclose(observability_gramian(s), np.eye(2), rtol=1e-14)
    s0 = LTISystem(-np.eye(2), np.zeros((1, 2)), 0.1, [0.1], [[1.0]])
    np.testing.assert_array_equal(observability_gramian(s0), np.zeros((2, 2)))
    s1 = LTISystem([[-1.0]], [[1.0]], 0.1, [0.1], [[1.0]])
    assert observability_gramian(s1)[0, 0] == pytest.approx(0.5, rel=1e-15)


def test_prior_examples():
    np.testing.assert_allclose(prior_from_lyapunov(-0.5 * np.eye(2)), np.eye(2), rtol=1e-14)
    np.testing.assert_allclose(prior_from_lyapunov(-np.diag([1.0, 2.0])), np.diag([0.5, 0.25]),
                               rtol=1e-14, atol=1e-16)
    A = heat_model(200).A
    G = prior_from_lyapunov(A)
    assert np.linalg.norm(A @ G + G @ A.T + np.eye(200), 2) <= 1e-8


def test_prior_compatibility(rng):
    A = -2 * np.eye(4) + 0.5 * rng.standard_normal((4, 4))
    G = prior_from_lyapunov(A)
    assert np.linalg.eigvalsh(A @ G + G @ A.T).max() <= 1e-10


# balancing

def test_semidefinite_factor(rng):
    B = rng.standard_normal((6, 2))
    Q = B @ B.T
    L = semidefinite_factor(Q)
    assert L.shape == (6, 2)
    np.testing.assert_allclose(L @ L.T, Q, atol=1e-12)
    np.testing.assert_array_equal(semidefinite_factor(np.zeros((3, 3))), np.zeros((3, 1)))


def test_balance_identity():
    f = balance(np.eye(3), np.eye(3))
    np.testing.assert_allclose(f.Xi, 1.0)
    np.testing.assert_allclose(f.Phi.T @ f.Phi, np.eye(3), atol=1e-14)
    np.testing.assert_allclose(f.Psi.T @ f.Psi, np.eye(3), atol=1e-14)


def test_balance_zero_gramian():
    f = balance(np.zeros((3, 3)), np.eye(3))
    np.testing.assert_array_equal(f.Xi, [0.0])
    assert f.rank == 0


def test_balance_svd_and_generalized_eigenpairs(rng):
    Q = random_spd(rng, 6, shift=0.1)
    Gpr = random_spd(rng, 6)
    f = balance(Q, Gpr)
    M = f.L.T @ f.R
    assert np.linalg.norm(M - f.Phi * f.Xi @ f.Psi.T) <= 1e-10 * np.linalg.norm(M)
    assert np.all(np.diff(f.Xi) <= 0)
    Z = f.R @ f.Psi
    res = Q @ Z - np.linalg.solve(Gpr, Z) * f.delta
    assert np.linalg.norm(res) <= 1e-8 * np.linalg.norm(Q @ Z)


def test_balance_rejects_indefinite_prior():
    with pytest.raises(ValidationError):
        balance(np.eye(2), np.diag([1.0, -1.0]))


# reduce

def test_full_order_forward_is_exact(rng):
    s = _small_system(rng)
    gpr = prior_from_lyapunov(s.A)
    model = reduce(s, gpr, 4)
    np.testing.assert_allclose(model.V.T @ model.U, np.eye(4), atol=1e-10)
    v = rng.standard_normal((4, 5))
    full = forward_operator(s).apply_batch(v)
    red = reduced_forward_operator(model).apply_batch(v)
    assert np.linalg.norm(red - full) <= 1e-8 * np.linalg.norm(full)


def test_rank_error_names_maximum():
    h = heat_model(60)
    with pytest.raises(RankError) as exc:
        reduce(h, prior_from_lyapunov(h.A), 60)
    top = exc.value.max_rank
    assert 0 < top < 60
    assert f"1..{top}" in str(exc.value)
    with pytest.raises(RankError):
        reduce(h, prior_from_lyapunov(h.A), 0)


def test_reduced_model_invariants(rng):
    h = heat_model(60)
    gpr = prior_from_lyapunov(h.A)
    f = balance(observability_gramian(h), gpr)
    m5, m10 = reduce(h, gpr, 5, f), reduce(h, gpr, 10, f)
    assert np.all(m10.xi[:10] > 0)
    np.testing.assert_allclose(m10.V.T @ m10.U, np.eye(10), atol=1e-10)
    Pi = m10.U @ m10.V.T
    np.testing.assert_allclose(Pi @ Pi, Pi, atol=1e-10 * max(1.0, np.abs(Pi).max()))
    np.testing.assert_array_equal(m10.V[:, :5], m5.V)
    np.testing.assert_array_equal(m10.U[:, :5], m5.U)


def test_kernel_of_V_gives_zero_output(rng):
    h = heat_model(30)
    model = reduce(h, prior_from_lyapunov(h.A), 3)
    K = sla.null_space(model.V.T)
    out = reduced_forward_operator(model).apply(K @ rng.standard_normal(K.shape[1]))
    assert np.linalg.norm(out) <= 1e-12


def test_one_state_system_tracks_observed_coordinate(rng):
    A = -np.diag([1.0, 5.0, 9.0])
    s = LTISystem(A, [[1.0, 0.0, 0.0]], 0.01, np.arange(1, 31) * 0.1, [[1e-4]])
    model = reduce(s, prior_from_lyapunov(A), 1)
    u = model.U[:, 0] / np.linalg.norm(model.U[:, 0])
    assert abs(u[0]) > 0.99
    v = rng.standard_normal(3)
    full = forward_operator(s).apply(v)
    err = np.linalg.norm(reduced_forward_operator(model).apply(v) - full)
    assert err < 1e-8 * np.linalg.norm(full)


def test_heat_reduced_output_error():
    h = heat_model(200)
    gpr = prior_from_lyapunov(h.A)
    model = reduce(h, gpr, 20)
    g = np.random.default_rng(0)
    V = np.linalg.cholesky(gpr) @ g.standard_normal((200, 20))
    full = forward_operator(h).apply_batch(V)
    red = reduced_forward_operator(model).apply_batch(V)
    rel = np.linalg.norm(red - full, axis=0) / np.linalg.norm(full, axis=0)
    assert rel.max() < 1e-3


def test_euler_check_suggests_step():
    check_euler_stable(-np.eye(2), 0.5)
    with pytest.raises(InstabilityError, match="dt <= 0.02"):
        check_euler_stable(np.array([[-100.0]]), 0.1)
    with pytest.raises(InstabilityError):
        check_euler_stable(np.array([[1.0]]), 0.1)


# reduced posterior

def test_full_order_posterior_is_exact(rng):
    s = _small_system(rng)
    gpr = prior_from_lyapunov(s.A)
    y = rng.standard_normal(s.n)
    gamma = s.noise_cov()
    full = exact_posterior(InverseProblem(forward_operator(s), gamma, y,
                                          GaussianPrior(np.zeros(4), gpr)))
    red = reduced_posterior(reduce(s, gpr, 4), gpr, gamma, y)
    d = red.mean - full.mean
    assert np.sqrt(d @ full.precision @ d) <= 1e-8 * np.sqrt(full.mean @ full.precision @ full.mean)
    assert np.linalg.norm(red.cov - full.cov, 2) <= 1e-8 * np.linalg.norm(full.cov, 2)


def test_zero_data_zero_mean():
    h = heat_model(30)
    gpr = prior_from_lyapunov(h.A)
    post = reduced_posterior(reduce(h, gpr, 5), gpr, h.noise_cov(), np.zeros(h.n))
    np.testing.assert_array_equal(post.mean, np.zeros(30))


def test_reduced_limits_match_reduced_posterior(rng):
    h = heat_model(30)
    gpr = prior_from_lyapunov(h.A)
    model = reduce(h, gpr, 5)
    y = rng.standard_normal(h.n) * 0.01
    post = reduced_posterior(model, gpr, h.noise_cov(), y)
    prob = InverseProblem(reduced_forward_operator(model), h.noise_cov(), y,
                          GaussianPrior(np.zeros(30), gpr))
    lim = mean_field_limits(augment_rls(prob), gpr, np.zeros(30))
    P = lim.state.P
    np.testing.assert_allclose(P @ lim.mean, P @ post.mean, rtol=1e-10,
                               atol=1e-10 * np.abs(post.mean).max())
    np.testing.assert_allclose(P @ lim.cov @ P.T, P @ post.cov @ P.T, rtol=1e-10,
                               atol=1e-10 * np.abs(post.cov).max())


def test_export(tmp_path):
    h = heat_model(30)
    model = reduce(h, prior_from_lyapunov(h.A), 4)
    export(model, tmp_path / "bt")
    np.testing.assert_array_equal(mmio.read_matrix(tmp_path / "bt" / "Ahat.mtx"), model.A_hat)
    np.testing.assert_array_equal(mmio.read_matrix(tmp_path / "bt" / "Vrho.mtx"), model.V)
    assert mmio.read_matrix(tmp_path / "bt" / "Urho.mtx").shape == (30, 4)
    assert mmio.read_matrix(tmp_path / "bt" / "Fhat.mtx").shape == (1, 4)
    rows = list(csv.reader(open(tmp_path / "bt" / "xi.csv")))
    assert rows[0] == ["index", "singular_value"]
    assert float(rows[1][1]) == model.xi[0]
