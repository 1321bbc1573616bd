"""Acceptance criteria, one test per criterion.

Every test prints a single ``PASS``/``FAIL`` line (bypassing output capture)
before asserting, so ``pytest tests/test_acceptance.py`` doubles as a report.
"""
import filecmp
import time

import numpy as np
import pytest

from conftest import random_psd, random_spd
from ekrmle.balanced_truncation import (
    lyapunov_residual,
    observability_gramian,
    prior_from_lyapunov,
    reduce,
    reduced_posterior,
)
from ekrmle.experiments import (
    ExperimentConfig,
    convergence_experiment,
    moment_error_metrics,
    random_problem,
    smoothing_experiment,
    smoothing_setup,
)
from ekrmle.linear_forward import GaussianPrior, InverseProblem, augment_rls, exact_posterior
from ekrmle.lti import LTISystem, forward_operator
from ekrmle.mean_field import (
    eigenvalue_gap,
    eigenvalue_recurrence,
    mean_field_cov_iterate,
    mean_field_limits,
    mean_field_particles,
    obs_eigenproblem,
    rate_bound,
    state_eigenproblem,
)
from ekrmle.selftest import selftest


@pytest.fixture
def report(capsys):
    def emit(k, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {k}: {detail}")
        assert ok, detail
    return emit


def _gram(H, gamma):
    return H.T @ np.linalg.solve(gamma, H)


def test_criterion_1_eigenvalue_recurrence(report):
    t0 = time.perf_counter()
    g = np.random.default_rng(101)
    worst = 0.0
    cases = [(np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1)))]
    for _ in range(50):
        d, n = int(g.integers(1, 11)), int(g.integers(1, 11))
        cases.append((g.standard_normal((n, d)), random_spd(g, n),
                      random_psd(g, d, int(g.integers(1, d + 1)))))
    for H, gamma, C0 in cases:
        G = _gram(H, gamma)
        ref = eigenvalue_recurrence(state_eigenproblem(C0, H, gamma).eigenvalues, 50)
        for s in mean_field_cov_iterate(C0, H, gamma, 50):
            ev = np.sort(np.linalg.eigvals(s.C @ G).real)[::-1]
            worst = max(worst, float(np.max(np.abs(ev - ref[s.iteration]))))
    lam1 = eigenvalue_recurrence(1.0, 1)[1]
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and lam1 == 0.5 and elapsed < 10
    report(1, ok, f"max |eig(C_i H^T G^-1 H) - recurrence| = {worst:.2e} (tol 1e-10) over 51 "
                  f"problems, i <= 50; lambda_1(lambda_0=1) = {float(lam1)!r}; {elapsed:.2f} s (< 10 s)")


def test_criterion_2_rate_bound(report):
    g = np.random.default_rng(202)
    lam0 = g.uniform(0, 10, 100)
    assert np.all(lam0 > 0)
    gap = eigenvalue_gap(lam0, 201)            # gap[i] = 1 - lambda_i
    i = np.arange(1, 201)[:, None]
    bound = rate_bound(lam0[None, :], i)
    violations = int(np.count_nonzero(gap[2:] > bound))
    report(2, violations == 0, f"{violations} violations of 1 - lambda_(i+1) <= bound "
                               f"(exact comparison) for 100 lambda_0 in (0, 10), i = 1..200")


def test_criterion_3_projector_algebra(report):
    g = np.random.default_rng(303)
    worst = 0.0
    for _ in range(50):
        n, d = int(g.integers(2, 9)), int(g.integers(2, 11))
        H = g.standard_normal((n, d))
        gamma = random_spd(g, n)
        C0 = random_psd(g, d, int(g.integers(1, d + 1)))
        states = mean_field_cov_iterate(C0, H, gamma, 10)
        for spec, attr in ((state_eigenproblem(C0, H, gamma), "M_prod"),
                           (obs_eigenproblem(C0, H, gamma), "Mobs_prod")):
            P, S = spec.P, spec.S
            I = np.eye(P.shape[0])
            errs = [P @ P - P, S @ S - S, P @ S, S @ P, P + S - I]
            errs += [P @ getattr(s, attr) - getattr(s, attr) @ P for s in states]
            worst = max(worst, max(np.linalg.norm(E, 2) for E in errs))
    report(3, worst <= 1e-8, f"max spectral-norm defect of P^2=P, S^2=S, PS=SP=0, P+S=I, "
                             f"PM=MP (state and observation) = {worst:.2e} (tol 1e-8), 50 instances")


def test_criterion_4_subspace_dichotomy(report):
    rp = random_problem(50, 100, 25, 404)
    prob, H, gamma = rp.problem, rp.H, rp.problem.gamma
    g = np.random.default_rng(404)
    J = 20
    V0 = np.linalg.cholesky(rp.C0 + 1e-12 * np.eye(100)) @ g.standard_normal((100, J))
    Y = prob.data[:, None] + np.linalg.cholesky(gamma) @ g.standard_normal((50, J))
    lim = mean_field_limits(prob, rp.C0, rp.mu0, Y, V0)
    st, ob = lim.state, lim.obs
    gam = float(np.min(st.gammas))
    states = mean_field_cov_iterate(rp.C0, H, gamma, 100)
    parts = mean_field_particles(states, V0, lim.vstar_particles)
    Lg = np.linalg.cholesky(gamma)

    def wnorm(X):
        # H^T gamma^-1 H seminorm on state vectors, gamma^-1 norm on misfits
        return np.linalg.norm(np.linalg.solve(Lg, X), axis=0)

    omega0 = parts[0] - lim.vstar_particles
    theta0 = H @ parts[0] - Y
    S0, calS0 = st.S @ omega0, ob.S @ theta0
    P0, calP0 = wnorm(H @ st.P @ omega0), wnorm(ob.P @ theta0)
    s_dev = p_ratio = 0.0
    for i, (s, V) in enumerate(zip(states, parts)):
        omega, theta = V - lim.vstar_particles, H @ V - Y
        s_dev = max(s_dev, np.linalg.norm(st.S @ omega - S0) / np.linalg.norm(S0),
                    np.linalg.norm(ob.S @ theta - calS0) / np.linalg.norm(calS0))
        # P parts through the compound maps, which is how the iteration defines them
        Pw = wnorm(H @ st.P @ s.M_prod @ omega0)
        Pt = wnorm(ob.P @ s.Mobs_prod @ theta0)
        b = np.exp(-(i - 1) * gam)
        p_ratio = max(p_ratio, np.max(Pw / (b * P0)), np.max(Pt / (b * calP0)))
    ok = s_dev <= 1e-8 and p_ratio <= 1.0
    report(4, ok, f"n=50, d=100, rank 25, r={st.rank}: S/calS drift {s_dev:.2e} (tol 1e-8); "
                  f"max ||P part|| / (e^-(i-1)gamma ||P part_0||) = {p_ratio:.3f} (must be <= 1), "
                  f"i = 0..100, gamma = {gam:.3e}")


def test_criterion_5_bayesian_limit(report):
    g = np.random.default_rng(505)
    worst = 0.0
    full_p = True
    for _ in range(20):
        n, d = int(g.integers(1, 9)), int(g.integers(1, 9))
        prior = GaussianPrior(g.standard_normal(d), random_spd(g, d))
        prob = InverseProblem(g.standard_normal((n, d)), random_spd(g, n),
                              g.standard_normal(n), prior)
        post = exact_posterior(prob)
        lim = mean_field_limits(augment_rls(prob), prior.cov, prior.mean)
        P = lim.state.P
        full_p &= bool(np.array_equal(P, np.eye(d)))
        worst = max(worst,
                    np.linalg.norm(P @ lim.mean - P @ post.mean) / np.linalg.norm(post.mean),
                    np.linalg.norm(P @ lim.cov @ P.T - P @ post.cov @ P.T) / np.linalg.norm(post.cov))
    ok = worst <= 1e-10 and full_p
    report(5, ok, f"limit mean/cov vs exact posterior: max relative error {worst:.2e} "
                  f"(tol 1e-10) over 20 problems; P = I for every full-rank prior: {full_p}")


@pytest.mark.slow
def test_criterion_6_finite_ensemble_sampling(report, tmp_path):
    t0 = time.perf_counter()
    Js = (1000, 10000, 100000)
    cfg = ExperimentConfig(experiment="heat-smoothing", seed=606, heat_d=20,
                           reduced_orders=(), include_full=True, ensemble_sizes=Js,
                           i_max=200, replicates=30, out=str(tmp_path), plots=False)
    res = smoothing_experiment(cfg, write=False)
    med = {J: np.nanmedian(res.cells[(0, J)], axis=0) for J in Js}
    slope = float(np.polyfit(np.log10(Js), np.log10([med[J][1] for J in Js]), 1)[0])
    elapsed = time.perf_counter() - t0
    ok = (med[10000][0] <= 5e-2 and med[100000][1] <= 1.5e-1 and abs(slope + 0.5) <= 0.15
          and not res.failures and elapsed < 300)
    report(6, ok, f"d=20 heat, full model, i=200, 30 replicates: median e_mean(J=1e4) = "
                  f"{med[10000][0]:.2e} (<= 5e-2), median e_cov(J=1e5) = {med[100000][1]:.2e} "
                  f"(<= 1.5e-1), e_cov slope {slope:.3f} (-0.5 +- 0.15), {elapsed:.0f} s (< 300 s)")


def test_criterion_7_balanced_truncation(report):
    # order-d exactness needs a full-rank Gramian, which the heat model lacks numerically
    g = np.random.default_rng(707)
    full_err = 0.0
    for d in (3, 4, 6):
        A = -np.diag(np.arange(1.0, d + 1)) + 0.1 * g.standard_normal((d, d))
        s = LTISystem(A, np.eye(d), 0.01, [0.1, 0.2, 0.3], 0.01 * np.eye(d))
        gpr = prior_from_lyapunov(A)
        y = g.standard_normal(s.n)
        full = exact_posterior(InverseProblem(forward_operator(s), s.noise_cov(), y,
                                              GaussianPrior(np.zeros(d), gpr)))
        red = reduced_posterior(reduce(s, gpr, d), gpr, s.noise_cov(), y)
        full_err = max(full_err, *moment_error_metrics(red.mean, red.cov, full))

    cfg = ExperimentConfig(experiment="heat-smoothing", seed=707)
    st = smoothing_setup(cfg)
    A, gpr = st.system.A, st.prior.cov
    C = st.system.F.T @ np.linalg.solve(st.system.eta_cov, st.system.F)
    Q = observability_gramian(st.system)
    res_lyap = max(lyapunov_residual(A, C, Q), lyapunov_residual(A.T, np.eye(A.shape[0]), gpr))
    errs = []
    for rho in (3, 5, 10, 20):
        post = reduced_posterior(reduce(st.system, gpr, rho), gpr, st.gamma, st.y)
        errs.append(moment_error_metrics(post.mean, post.cov, st.posterior)[0])
    decreasing = bool(np.all(np.diff(errs) < 0))
    ok = full_err <= 1e-8 and decreasing and res_lyap <= 1e-8
    report(7, ok, f"rho=d posterior error {full_err:.2e} (tol 1e-8); heat d=200 exact reduced "
                  f"e_mean for rho=3,5,10,20: {', '.join(f'{e:.2e}' for e in errs)} "
                  f"(strictly decreasing: {decreasing}); Lyapunov residual {res_lyap:.2e} (<= 1e-8)")


@pytest.mark.slow
def test_criterion_8_small_ensemble_failure(report, tmp_path):
    cfg = ExperimentConfig(seed=808, n=50, d=100, rank=25, ensemble_sizes=(10, 5000),
                           i_max=100, replicates=30, mean_field=False, out=str(tmp_path),
                           plots=False)
    res = convergence_experiment(cfg, write=False, subspaces=("P",), stats=("mean",))
    small = res.series[("J=10", "P", "mean")][:, -1]
    large = res.series[("J=5000", "P", "mean")][:, -1]
    n_small, n_large = int(np.sum(small > 1e-2)), int(np.sum(large < 1e-2))
    ok = n_small >= 25 and n_large >= 25
    report(8, ok, f"P-subspace mean error at i=100: J=10 above 1e-2 in {n_small}/30 "
                  f"(median {np.median(small):.2e}); J=5000 below 1e-2 in {n_large}/30 "
                  f"(median {np.median(large):.2e}); both need >= 25/30")


def test_criterion_9_determinism(report, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    selftest(909, str(a))
    selftest(909, str(b))
    for out in (a, b):
        cfg = ExperimentConfig(seed=909, n=10, d=20, rank=4, ensemble_sizes=(5, 100), i_max=15,
                               replicates=2, out=str(out), plots=False)
        convergence_experiment(cfg)
    names = ["selftest.csv", "means.csv", "covs.csv", "final_errors.csv"]
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    ok = match == names
    report(9, ok, f"byte-identical across repeated runs: {', '.join(match)}"
                  + (f"; differ: {mismatch + errors}" if not ok else ""))
