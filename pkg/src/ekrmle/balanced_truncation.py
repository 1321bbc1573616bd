"""Balanced truncation of an LTI smoothing problem for Bayesian inference.

The observability Gramian ``Q`` and the prior covariance are balanced by an
SVD of ``L^T R`` (``Q = L L^T``, ``Gamma_pr = R R^T``); truncating to the
leading ``rho`` singular directions gives a Petrov-Galerkin reduced system
whose forward map approximates the full one on the directions the data can
inform.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.linalg.lapack import dpstrf

from . import mmio
from .errors import InstabilityError, RankError, ValidationError
from .linear_forward import (
    ForwardOperator,
    GaussianPosterior,
    GaussianPrior,
    InverseProblem,
    check_symmetric,
    cholesky_lower,
    exact_posterior,
)
from .lti import LTISystem, stacked_matrix

#: Singular values of ``L^T R`` above this fraction of the largest are usable.
XI_RTOL = 1e-10


def solve_lyapunov(A, C):
    """Solve ``A^T X + X A + C = 0`` for a stable ``A``.

    Symmetric ``A`` is handled by diagonalization; anything else goes through
    :func:`scipy.linalg.solve_continuous_lyapunov` (Bartels-Stewart).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = check_symmetric(C, "C", rtol=1e-10)
    if A.shape != C.shape or A.shape[0] != A.shape[1]:
        raise ValidationError(f"A {A.shape} and C {C.shape} must be square and equal in size")
    if np.array_equal(A, A.T):
        lam, V = np.linalg.eigh(A)
        if lam.max() >= 0:
            raise ValidationError("A is not stable (eigenvalue with non-negative real part)")
        Ct = V.T @ C @ V
        X = V @ (Ct / -(lam[:, None] + lam[None, :])) @ V.T
    else:
        if np.max(np.linalg.eigvals(A).real) >= 0:
            raise ValidationError("A is not stable (eigenvalue with non-negative real part)")
        X = sla.solve_continuous_lyapunov(A.T, -C)
    return 0.5 * (X + X.T)


def lyapunov_residual(A, C, X):
    """``||A^T X + X A + C||_2 / ||C||_2`` (absolute when ``C = 0``)."""
    r = np.linalg.norm(A.T @ X + X @ A + C, 2)
    c = np.linalg.norm(C, 2)
    return r / c if c > 0 else r


def observability_gramian(system: LTISystem):
    """``Q`` solving ``A^T Q + Q A + F^T Gamma_eta^{-1} F = 0``."""
    Le = cholesky_lower(system.eta_cov, "eta_cov")
    Fw = sla.solve_triangular(Le, system.F, lower=True)
    return solve_lyapunov(system.A, Fw.T @ Fw)


def prior_from_lyapunov(A):
    """Prior covariance solving ``A Gamma + Gamma A^T + I = 0``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return solve_lyapunov(A.T, np.eye(A.shape[0]))


def semidefinite_factor(Q, rtol=1e-12):
    """Rectangular ``L`` with ``Q = L L^T`` from a pivoted Cholesky.

    The pivot tolerance is ``rtol * trace(Q) / d``.  A zero ``Q`` gives a
    single zero column.
    """
    Q = check_symmetric(Q, "Q", rtol=1e-10)
    d = Q.shape[0]
    tr = np.trace(Q)
    if tr <= 0:
        return np.zeros((d, 1))
    c, piv, rank, info = dpstrf(Q, lower=1, tol=rtol * tr / d)
    if info < 0:
        raise ValidationError(f"pivoted Cholesky failed (info={info})")
    Lp = np.tril(c)[:, :rank]
    L = np.empty_like(Lp)
    L[piv - 1] = Lp
    return L


@dataclass
class BalancingFactors:
    R: np.ndarray    # Gamma_pr = R R^T
    L: np.ndarray    # Q = L L^T, d x rank
    Phi: np.ndarray
    Xi: np.ndarray   # non-increasing
    Psi: np.ndarray

    @property
    def rank(self):
        top = self.Xi[0] if self.Xi.size else 0.0
        return int(np.count_nonzero(self.Xi > XI_RTOL * top)) if top > 0 else 0

    @property
    def delta(self):
        """Generalized eigenvalues of the pencil ``(Q, Gamma_pr^{-1})``."""
        return self.Xi ** 2


def balance(Q, gamma_pr) -> BalancingFactors:
    R = cholesky_lower(gamma_pr, "prior covariance")
    L = semidefinite_factor(Q)
    Phi, Xi, PsiT = np.linalg.svd(L.T @ R, full_matrices=False)
    return BalancingFactors(R, L, Phi, Xi, PsiT.T)


@dataclass
class ReducedModel:
    """Order-``rho`` balanced model.

    ``V`` and ``U`` are ``d x rho`` with ``V^T U = I``; the reduced system is
    ``A_hat = V^T A U``, ``F_hat = F U``.
    """

    rho: int
    V: np.ndarray
    U: np.ndarray
    A_hat: np.ndarray
    F_hat: np.ndarray
    parent: LTISystem
    xi: np.ndarray

    def system(self) -> LTISystem:
        p = self.parent
        return LTISystem(self.A_hat, self.F_hat, p.dt, p.obs_times, p.eta_cov)


def reduce(system: LTISystem, gamma_pr, rho: int, factors: BalancingFactors = None) -> ReducedModel:
    """Balanced truncation of ``system`` to order ``rho``.

    Raises
    ------
    RankError
        If ``rho`` exceeds the number of usable singular values.
    """
    if factors is None:
        factors = balance(observability_gramian(system), gamma_pr)
    rho = int(rho)
    top = factors.rank
    if rho < 1 or rho > top:
        raise RankError(f"rho={rho} is outside 1..{top} (numerical rank of the balancing SVD)",
                        max_rank=top)
    s = factors.Xi[:rho] ** -0.5
    V = factors.L @ factors.Phi[:, :rho] * s
    U = factors.R @ factors.Psi[:, :rho] * s
    A_hat = V.T @ system.A @ U
    F_hat = system.F @ U
    return ReducedModel(rho, V, U, A_hat, F_hat, system, factors.Xi.copy())


def check_euler_stable(A, dt, what="reduced system"):
    """Raise if ``I + dt A`` has spectral radius above one."""
    mu = np.linalg.eigvals(np.atleast_2d(A))
    if np.max(np.abs(1 + dt * mu)) <= 1 + 1e-12:
        return
    if np.any(mu.real >= 0):
        raise InstabilityError(f"{what} has eigenvalues with non-negative real part; "
                               "no Euler step is stable")
    limit = float(np.min(-2 * mu.real / np.abs(mu) ** 2))
    raise InstabilityError(f"{what} is not forward-Euler stable at dt={dt:g}; "
                           f"use dt <= {limit:.3g}")


def reduced_forward_operator(model: ReducedModel) -> ForwardOperator:
    """Reduced smoothing map ``v -> stacked F_hat Phi_hat^k V^T v``.

    The ``n x rho`` core and ``V^T`` are kept on the operator as ``core`` and
    ``Vt``; the dense product is also stored for fast batched application.
    """
    red = model.system()
    check_euler_stable(red.A, red.dt)
    core = stacked_matrix(red)
    Vt = model.V.T
    op = ForwardOperator(lambda X: core @ (Vt @ X), red.n, model.parent.d,
                         kind="lti-induced", matrix=core @ Vt)
    op.core, op.Vt = core, Vt
    return op


def reduced_posterior(model: ReducedModel, gamma_pr, gamma, y, prior_mean=None) -> GaussianPosterior:
    """Posterior of the reduced problem with the full prior.

    ``Gamma_pos = (H_BT^T gamma^{-1} H_BT + Gamma_pr^{-1})^{-1}`` and
    ``mu_pos = Gamma_pos (H_BT^T gamma^{-1} y + Gamma_pr^{-1} mu_pr)``.
    """
    d = model.parent.d
    mu = np.zeros(d) if prior_mean is None else prior_mean
    op = reduced_forward_operator(model)
    return exact_posterior(InverseProblem(op, gamma, y, GaussianPrior(mu, gamma_pr)))


def export(model: ReducedModel, directory):
    """Write ``Ahat.mtx``, ``Fhat.mtx``, ``Vrho.mtx``, ``Urho.mtx`` and ``xi.csv``."""
    os.makedirs(directory, exist_ok=True)
    mmio.write_matrix(os.path.join(directory, "Ahat.mtx"), model.A_hat)
    mmio.write_matrix(os.path.join(directory, "Fhat.mtx"), model.F_hat)
    mmio.write_matrix(os.path.join(directory, "Vrho.mtx"), model.V)
    mmio.write_matrix(os.path.join(directory, "Urho.mtx"), model.U)
    with open(os.path.join(directory, "xi.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "singular_value"])
        for k, x in enumerate(model.xi):
            w.writerow([k + 1, repr(float(x))])
