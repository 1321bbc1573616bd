"""Quick invariant checks runnable from the command line.

Each check returns a scalar (an error, residual or count) compared with a
tolerance.  Results go to ``selftest.csv``; the file is byte-identical across
runs with the same seed.
"""
from __future__ import annotations

import csv
import os

import numpy as np

from .balanced_truncation import (
    lyapunov_residual,
    prior_from_lyapunov,
    reduce,
    reduced_posterior,
    solve_lyapunov,
)
from .ensemble_kalman import Ensemble, eki_step
from .linear_forward import (
    GaussianPrior,
    InverseProblem,
    augment_rls,
    exact_posterior,
    minimum_norm_solution,
)
from .lti import LTISystem, forward_operator, heat_model
from .mean_field import (
    eigenvalue_gap,
    eigenvalue_recurrence,
    mean_field_cov_iterate,
    mean_field_limits,
    obs_eigenproblem,
    rate_bound,
    state_eigenproblem,
)
from .streams import Streams


def _spd(g, k, shift=0.5):
    A = g.standard_normal((k, k))
    return A @ A.T / k + shift * np.eye(k)


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _recurrence_anchor(g):
    lam = eigenvalue_recurrence(1.0, 2)
    return max(abs(lam[1] - 0.5), abs(lam[2] - 5.0 / 9.0))


def _rate_bound(g):
    lam0 = g.uniform(0, 10, 100)
    lam0 = lam0[lam0 > 0]
    gap = eigenvalue_gap(lam0, 201)
    i = np.arange(1, 201)[:, None]
    return float(np.count_nonzero(gap[2:] > rate_bound(lam0[None, :], i)))


def _mean_field_vs_recurrence(g):
    d = 6
    H = g.standard_normal((d, d))
    gamma = _spd(g, d)
    B = g.standard_normal((d, d))
    C0 = B @ B.T
    st = state_eigenproblem(C0, H, gamma)
    ref = eigenvalue_recurrence(st.eigenvalues, 20)
    G = H.T @ np.linalg.solve(gamma, H)
    err = 0.0
    for s in mean_field_cov_iterate(C0, H, gamma, 20):
        ev = np.sort(np.linalg.eigvals(s.C @ G).real)[::-1]
        err = max(err, float(np.max(np.abs(ev - ref[s.iteration]))))
    return err


def _projectors(g):
    n, d = 5, 8
    H = g.standard_normal((n, d))
    gamma = _spd(g, n)
    B = g.standard_normal((d, 3))
    C0 = B @ B.T
    st = state_eigenproblem(C0, H, gamma)
    ob = obs_eigenproblem(C0, H, gamma)
    M = mean_field_cov_iterate(C0, H, gamma, 5)[-1]
    errs = []
    for P, S, Mp in ((st.P, st.S, M.M_prod), (ob.P, ob.S, M.Mobs_prod)):
        I = np.eye(P.shape[0])
        errs += [np.linalg.norm(P @ P - P, 2), np.linalg.norm(S @ S - S, 2),
                 np.linalg.norm(P @ S, 2), np.linalg.norm(S @ P, 2),
                 np.linalg.norm(P + S - I, 2), np.linalg.norm(P @ Mp - Mp @ P, 2)]
    return float(max(errs))


def _rls_equivalence(g):
    n, d = 5, 8
    H = g.standard_normal((n, d))
    prior = GaussianPrior(g.standard_normal(d), _spd(g, d))
    prob = InverseProblem(H, _spd(g, n), g.standard_normal(n), prior)
    post = exact_posterior(prob)
    rls = augment_rls(prob)
    v = minimum_norm_solution(rls.operator.to_dense(), rls.gamma, rls.data)
    return _rel(v, post.mean)


def _normal_equations(g):
    n, d, r = 7, 9, 4
    H = g.standard_normal((n, r)) @ g.standard_normal((r, d))
    gamma = _spd(g, n)
    y = g.standard_normal(n)
    v = minimum_norm_solution(H, gamma, y)
    res = H.T @ np.linalg.solve(gamma, H @ v - y)
    return float(np.linalg.norm(res) / np.linalg.norm(H.T @ np.linalg.solve(gamma, y)))


def _bayesian_limit(g):
    n, d = 4, 6
    H = g.standard_normal((n, d))
    prior = GaussianPrior(g.standard_normal(d), _spd(g, d))
    prob = InverseProblem(H, _spd(g, n), g.standard_normal(n), prior)
    post = exact_posterior(prob)
    rls = augment_rls(prob)
    lim = mean_field_limits(rls, prior.cov, prior.mean)
    return max(_rel(lim.mean, post.mean), _rel(lim.cov, post.cov))


def _lyapunov(g):
    h = heat_model(50)
    X = prior_from_lyapunov(h.A)
    C = h.F.T @ h.F
    Q = solve_lyapunov(h.A, C)
    return max(lyapunov_residual(h.A.T, np.eye(50), X), lyapunov_residual(h.A, C, Q))


def _bt_full_order(g):
    d = 4
    A = -np.diag([1.0, 2.0, 3.0, 4.0]) + 0.1 * g.standard_normal((d, d))
    sys = LTISystem(A, np.eye(d), 0.01, [0.1, 0.2, 0.3], 0.01 * np.eye(d))
    gpr = prior_from_lyapunov(A)
    y = g.standard_normal(sys.n)
    gamma = sys.noise_cov()
    full = exact_posterior(InverseProblem(forward_operator(sys), gamma, y,
                                          GaussianPrior(np.zeros(d), gpr)))
    red = reduced_posterior(reduce(sys, gpr, d), gpr, gamma, y)
    return max(_rel(red.mean, full.mean), _rel(red.cov, full.cov))


def _eki_hand_step(g):
    p = InverseProblem(np.eye(1), np.eye(1), [1.0])
    out = eki_step(Ensemble(np.array([[0.0, 2.0]])), p, np.ones((1, 2)))
    return float(np.max(np.abs(out.particles - np.array([[2 / 3, 4 / 3]]))))


def _stream_slices(g):
    s = Streams(int(g.integers(1 << 30)), 3)
    full = s.normals("perturb", 7, 40)
    part = s.normals("perturb", 7, 15, start=20)
    return float(np.max(np.abs(full[:, 20:35] - part)))


CHECKS = [
    ("recurrence_anchor", _recurrence_anchor, 1e-14),
    ("rate_bound_violations", _rate_bound, 0.0),
    ("mean_field_vs_recurrence", _mean_field_vs_recurrence, 1e-8),
    ("projector_algebra", _projectors, 1e-8),
    ("rls_equivalence", _rls_equivalence, 1e-10),
    ("normal_equations", _normal_equations, 1e-10),
    ("bayesian_limit", _bayesian_limit, 1e-10),
    ("lyapunov_residual", _lyapunov, 1e-8),
    ("bt_full_order", _bt_full_order, 1e-8),
    ("eki_hand_step", _eki_hand_step, 1e-15),
    ("stream_slices", _stream_slices, 0.0),
]


def selftest(seed: int = 0, out=None):
    """Run every check; returns ``[(name, value, tol, passed), ...]``."""
    results = []
    for k, (name, fn, tol) in enumerate(CHECKS):
        g = Streams(seed, k).generator("selftest")
        value = float(fn(g))
        results.append((name, value, tol, bool(value <= tol)))
    if out is not None:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "selftest.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["check", "value", "tolerance", "status"])
            for name, value, tol, ok in results:
                w.writerow([name, repr(value), repr(tol), "pass" if ok else "FAIL"])
    return results
