"""Mean-field (infinite ensemble) analysis of EK-RMLE for linear forward maps.

In the mean-field limit the ensemble covariance obeys a deterministic
recursion, the misfit/residual maps share a fixed eigenbasis, and every
particle converges to ``P v_star^{(j)} + S v_0^{(j)}``.  The routines here
compute those objects directly so finite-ensemble runs can be compared with
them.

Eigenproblems are never solved on the non-symmetric product
``C H^T gamma^{-1} H``.  Instead the symmetric matrix
``L^{-1} H C H^T L^{-T}`` (``gamma = L L^T``) is diagonalized and its
eigenvectors are mapped to observation space (``w = L^{-T} q``) and then to
state space (``u = C H^T w / lambda``).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import scipy.linalg as sla

from .ensemble_kalman import PerturbedData, sample_cov
from .errors import ValidationError
from .linear_forward import (
    InverseProblem,
    check_symmetric,
    cholesky_lower,
    normal_pinv,
    weighted_pinv,
)

#: Eigenvalues above this fraction of the largest count toward the rank.
RANK_RTOL = 1e-10


@dataclass
class ObsSpectral:
    eigenvalues: np.ndarray  # length n, non-increasing
    W: np.ndarray            # n x r, W^T gamma W = I
    rank: int
    P: np.ndarray            # gamma W W^T
    S: np.ndarray


@dataclass
class StateSpectral:
    eigenvalues: np.ndarray  # length d, non-increasing
    U: np.ndarray            # d x r, U^T H^T gamma^{-1} H U = I
    rank: int
    P: np.ndarray            # U U^T H^T gamma^{-1} H
    S: np.ndarray

    @property
    def gammas(self):
        """Per-direction rates ``lambda / (1 + 2 lambda)`` for the positive eigenvalues."""
        lam = self.eigenvalues[:self.rank]
        return lam / (1.0 + 2.0 * lam)


def _symmetric_core(C0, H, gamma):
    C0 = check_symmetric(C0, "C0", rtol=1e-10)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if C0.shape[0] != H.shape[1]:
        raise ValidationError(f"C0 is {C0.shape}, H has {H.shape[1]} columns")
    L = cholesky_lower(gamma, "noise covariance")
    Hw = sla.solve_triangular(L, H, lower=True)
    B = Hw @ C0 @ Hw.T
    lam, Q = np.linalg.eigh(0.5 * (B + B.T))
    order = np.argsort(lam)[::-1]
    lam, Q = lam[order], Q[:, order]
    lam = np.where(lam > 0, lam, 0.0)
    top = lam[0] if lam.size else 0.0
    r = int(np.count_nonzero(lam > RANK_RTOL * top)) if top > 0 else 0
    return C0, H, L, Hw, lam, Q, r


def obs_eigenproblem(C0, H, gamma) -> ObsSpectral:
    """Solve ``H C0 H^T w = lambda gamma w`` with ``W^T gamma W = I``."""
    C0, H, L, Hw, lam, Q, r = _symmetric_core(C0, H, gamma)
    n = H.shape[0]
    W = sla.solve_triangular(L.T, Q[:, :r], lower=False)
    if r == n:
        P = np.eye(n)  # exact rather than rounded
    else:
        P = L @ Q[:, :r] @ Q[:, :r].T @ sla.solve_triangular(L, np.eye(n), lower=True)
    return ObsSpectral(lam, W, r, P, np.eye(n) - P)


def state_eigenproblem(C0, H, gamma) -> StateSpectral:
    """Solve ``C0 H^T gamma^{-1} H u = lambda u`` with ``U^T H^T gamma^{-1} H U = I``."""
    C0, H, L, Hw, lam, Q, r = _symmetric_core(C0, H, gamma)
    d = H.shape[1]
    W = sla.solve_triangular(L.T, Q[:, :r], lower=False)
    U = (C0 @ H.T @ W) / lam[:r] if r else np.zeros((d, 0))
    P = np.eye(d) if r == d else U @ (Hw @ U).T @ Hw
    eig = np.zeros(d)
    k = min(d, lam.size)
    eig[:k] = lam[:k]
    return StateSpectral(eig, U, r, P, np.eye(d) - P)


def _log_products(lambda0, imax):
    """Cumulative ``sum_{k<=i} log(1 + lambda_k)`` and the sequence itself."""
    lam0 = np.asarray(lambda0, dtype=float)
    if np.any(lam0 < 0) or not np.all(np.isfinite(lam0)):
        raise ValidationError("lambda0 must be finite and non-negative")
    lam = np.empty((imax + 1,) + lam0.shape)
    lam[0] = lam0
    s = np.zeros_like(lam0)
    logs = np.empty_like(lam)
    for i in range(imax):
        s = s + np.log1p(lam[i])
        logs[i] = s
        p = np.exp(-s)
        q = -np.expm1(-s)
        # 1 - 2p + (1 + lam0) p^2 rearranged to avoid cancellation
        lam[i + 1] = q * q + lam0 * p * p
    if imax >= 0:
        logs[imax] = s + np.log1p(lam[imax])
    return lam, logs


def eigenvalue_recurrence(lambda0, imax: int):
    """Eigenvalues ``lambda_0 .. lambda_imax`` of the mean-field iteration.

    Works elementwise on an array of starting eigenvalues; the result has a
    leading axis of length ``imax + 1``.
    """
    lam, _ = _log_products(lambda0, int(imax))
    return lam


def eigenvalue_gap(lambda0, imax: int):
    """``1 - lambda_i`` for ``i = 0 .. imax``, accurate when ``lambda_i`` is near 1."""
    lam0 = np.asarray(lambda0, dtype=float)
    lam, logs = _log_products(lam0, int(imax))
    gap = np.empty_like(lam)
    gap[0] = 1.0 - lam0
    p = np.exp(-logs[:-1])
    # 1 - lambda_{i+1} = p (2 - (1 + lambda0) p)
    gap[1:] = p * (2.0 - (1.0 + lam0) * p)
    return gap


def convergence_rate(lambda0):
    lam0 = np.asarray(lambda0, dtype=float)
    return lam0 / (1.0 + 2.0 * lam0)


def rate_bound(lambda0, i):
    """Upper bound ``2 (1 + 2 lambda0)^{-1} exp(-(i - 1) gamma)`` on ``1 - lambda_{i+1}``.

    This is the sharper constant that the product argument actually yields;
    it implies the looser ``2 (1 + lambda0)^{-1}`` form.
    """
    lam0 = np.asarray(lambda0, dtype=float)
    i = np.asarray(i)
    if np.any(lam0 <= 0):
        raise ValidationError("rate_bound needs lambda0 > 0")
    if np.any(i < 1):
        raise ValidationError("rate_bound needs i >= 1")
    return 2.0 / (1.0 + 2.0 * lam0) * np.exp(-(i - 1) * convergence_rate(lam0))


@dataclass
class MeanFieldState:
    """Mean-field covariance at iteration ``i`` with the compound maps that
    produced it (``M_{i-1:0}`` in state space, its observation-space twin)."""

    C: np.ndarray
    iteration: int
    M_prod: np.ndarray
    Mobs_prod: np.ndarray
    warnings: List[str] = field(default_factory=list)


def mean_field_cov_iterate(C0, H, gamma, imax: int, cond_warn: float = 1e12):
    """Run the mean-field covariance recursion for ``imax`` iterations.

    Returns ``imax + 1`` states, the first holding ``C0`` and identity maps.
    """
    C0 = check_symmetric(C0, "C0", rtol=1e-10)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    gamma = np.asarray(gamma, dtype=float)
    n, d = H.shape
    L = cholesky_lower(gamma, "noise covariance")
    Hw = sla.solve_triangular(L, H, lower=True)
    G = Hw.T @ Hw
    Gdag = normal_pinv(H, gamma)
    I_d, I_n = np.eye(d), np.eye(n)
    M = I_d.copy()
    Mobs = I_n.copy()
    C = C0
    states = [MeanFieldState(C0, 0, M.copy(), Mobs.copy())]
    for i in range(imax):
        A = I_d + C @ G
        Mi = np.linalg.solve(A, I_d)
        notes = []
        kappa = np.linalg.norm(A, 1) * np.linalg.norm(Mi, 1)
        if kappa > cond_warn:
            notes.append(f"I + C H^T gamma^-1 H has condition ~{kappa:.2e} at iteration {i}")
        HCHt = H @ C @ H.T
        Mobs_i = np.linalg.solve(HCHt + gamma, gamma).T
        M = Mi @ M
        Mobs = Mobs_i @ Mobs
        R = I_d - M
        C = M @ C0 @ M.T + R @ Gdag @ R.T
        C = 0.5 * (C + C.T)
        states.append(MeanFieldState(C, i + 1, M.copy(), Mobs.copy(), notes))
    return states


@dataclass
class MeanFieldLimits:
    """Infinite-iteration limits in state and observation space."""

    state: StateSpectral
    obs: ObsSpectral
    vstar: np.ndarray                 # minimum-norm solution for the unperturbed data
    vstar_particles: Optional[np.ndarray]
    particles: Optional[np.ndarray]
    mean: np.ndarray
    cov: np.ndarray
    obs_particles: Optional[np.ndarray]
    obs_mean: np.ndarray
    obs_cov: np.ndarray
    Y: Optional[np.ndarray] = None
    H: Optional[np.ndarray] = None
    gamma_chol: Optional[np.ndarray] = None


def mean_field_limits(problem: InverseProblem, C0, mu0, Y=None, V0=None) -> MeanFieldLimits:
    """Limits of the mean-field EK-RMLE particles, mean and covariance.

    Parameters
    ----------
    problem : InverseProblem
        Linear problem; the forward map is materialized.
    C0, mu0
        Covariance and mean the initial ensemble is drawn from.
    Y : PerturbedData or ndarray, optional
        Frozen perturbed observations; needed for per-particle limits.
    V0 : ndarray, optional
        Initial particles, ``d x J``.
    """
    if isinstance(Y, PerturbedData):
        if Y.iteration is not None:
            raise ValidationError("limits are only defined for perturbations held fixed across iterations")
        Y = Y.Y
    H = problem.operator.to_dense()
    gamma = problem.gamma
    C0 = check_symmetric(C0, "C0", rtol=1e-10)
    mu0 = np.asarray(mu0, dtype=float)
    st = state_eigenproblem(C0, H, gamma)
    ob = obs_eigenproblem(C0, H, gamma)
    Hp = weighted_pinv(H, gamma)
    vstar = Hp @ problem.data
    mean = st.P @ vstar + st.S @ mu0
    Gdag = normal_pinv(H, gamma)
    cov = st.P @ Gdag @ st.P.T + st.S @ C0 @ st.S.T
    obs_mean = ob.P @ problem.data + ob.S @ (H @ mu0)
    obs_cov = ob.P @ gamma @ ob.P.T + ob.S @ (H @ C0 @ H.T) @ ob.S.T

    vstar_j = particles = obs_particles = None
    if Y is not None:
        Y = np.asarray(Y, dtype=float)
        vstar_j = Hp @ Y
        if V0 is not None:
            V0 = np.asarray(V0, dtype=float)
            if V0.shape[1] != Y.shape[1]:
                raise ValidationError("V0 and Y have different ensemble sizes")
            particles = st.P @ vstar_j + st.S @ V0
            obs_particles = ob.P @ Y + ob.S @ (H @ V0)
    return MeanFieldLimits(st, ob, vstar, vstar_j, particles, mean, cov,
                           obs_particles, obs_mean, obs_cov, Y, H, problem.gamma_chol)


def mean_field_particles(states, V0, vstar_particles):
    """Mean-field particles ``M_{i-1:0} v0 + (I - M_{i-1:0}) v_star`` for every state."""
    out = []
    for s in states:
        out.append(s.M_prod @ V0 + (vstar_particles - s.M_prod @ vstar_particles))
    return out


SERIES = ("P", "S", "calP", "calS")


class ProjectionMonitor:
    """Projected errors of an ensemble against its mean-field limits.

    Call it with ``(iteration, particles, forward_outputs, Y)`` (the signature
    of the ``run`` callback) and it appends one value per series.  Four
    subspaces are tracked: state ``P``/``S`` and observation ``calP``/``calS``.

    Recorded per iteration:

    * ``<sub>/mean`` -- average over particles of ``||Pi (x_j - x_inf_j)|| / ||Pi x_inf_j||``
    * ``<sub>/cov``  -- ``||Cov[Pi (x - x_inf)]||_2 / ||Cov[Pi x_inf]||_2``
    * ``<sub>/norms`` (optional) -- per-particle Euclidean norms of the
      projected residual ``Pi (v - v_star_j)`` or misfit ``Pi (H v - y_j)``
    * ``P/norms_weighted`` and ``calP/norms_weighted`` (optional) -- the same in
      the ``H^T gamma^{-1} H`` seminorm and the ``gamma^{-1}`` norm.
    """

    def __init__(self, limits: MeanFieldLimits, keep_norms: bool = False,
                 subspaces=SERIES, stats=("mean", "cov")):
        if limits.particles is None:
            raise ValidationError("per-particle limits (Y and V0) are required")
        bad = set(subspaces) - set(SERIES) or set(stats) - {"mean", "cov"}
        if bad:
            raise ValidationError(f"unknown series {sorted(bad)}")
        self.limits = limits
        self.keep_norms = keep_norms
        self.subspaces = tuple(subspaces)
        self.stats = tuple(stats)
        self.iterations: List[int] = []
        self.series: Dict[str, list] = {}
        lim = limits
        self._den = {}
        for name, E in self._split(lim.particles, lim.obs_particles).items():
            self._den[name] = (_colnorms(E), _spectral_cov(E) if "cov" in self.stats else 0.0)

    def _split(self, dv, dh):
        """Projected pieces of state (``dv``) and observation (``dh``) arrays."""
        lim = self.limits
        want = set(self.subspaces)
        out = {}
        if want & {"P", "S"}:
            Pv = lim.state.P @ dv
            out["P"], out["S"] = Pv, dv - Pv
        if want & {"calP", "calS"}:
            Ph = lim.obs.P @ dh
            out["calP"], out["calS"] = Ph, dh - Ph
        return {k: out[k] for k in self.subspaces}

    def _push(self, key, value):
        self.series.setdefault(key, []).append(value)

    def __call__(self, iteration, V, h=None, Y=None):
        lim = self.limits
        if V.shape[1] != lim.particles.shape[1]:
            raise ValidationError("ensemble size differs from the limits")
        if h is None and (self.keep_norms or {"calP", "calS"} & set(self.subspaces)):
            h = lim.H @ V
        if Y is None:
            Y = lim.Y
        self.iterations.append(int(iteration))
        dh = None if h is None else h - lim.obs_particles
        for name, E in self._split(V - lim.particles, dh).items():
            den_norm, den_cov = self._den[name]
            if "mean" in self.stats:
                num = _colnorms(E)
                with np.errstate(divide="ignore", invalid="ignore"):
                    rel = np.where(den_norm > 0, num / den_norm, np.where(num > 0, np.inf, 0.0))
                self._push(f"{name}/mean", float(np.mean(rel)))
            if "cov" in self.stats:
                cnum = _spectral_cov(E)
                self._push(f"{name}/cov",
                           cnum / den_cov if den_cov > 0 else (np.inf if cnum > 0 else 0.0))
        if self.keep_norms:
            omega = V - lim.vstar_particles
            theta = h - Y
            Pw = lim.state.P @ omega
            Pt = lim.obs.P @ theta
            self._push("P/norms", _colnorms(Pw))
            self._push("S/norms", _colnorms(omega - Pw))
            self._push("calP/norms", _colnorms(Pt))
            self._push("calS/norms", _colnorms(theta - Pt))
            Lc = lim.gamma_chol
            self._push("P/norms_weighted",
                       _colnorms(sla.solve_triangular(Lc, lim.H @ Pw, lower=True)))
            self._push("calP/norms_weighted",
                       _colnorms(sla.solve_triangular(Lc, Pt, lower=True)))

    def as_arrays(self):
        return {k: np.asarray(v) for k, v in self.series.items()}


def _colnorms(E):
    return np.sqrt(np.einsum("ij,ij->j", E, E))


def _spectral_cov(E):
    """``||Cov[E]||_2`` from the smaller of the two Gram matrices."""
    if E.size == 0:
        return 0.0
    A = E - E.mean(axis=1, keepdims=True)
    G = A @ A.T if A.shape[0] <= A.shape[1] else A.T @ A
    return float(max(np.linalg.eigvalsh(G)[-1], 0.0)) / (E.shape[1] - 1)


def projected_residual_series(trace, limits: MeanFieldLimits, keep_norms: bool = True):
    """Projected error series for a run whose trace kept every snapshot."""
    if limits.particles is None:
        raise ValidationError("per-particle limits are required")
    its = [r.iteration for r in trace.records]
    missing = [i for i in its if i not in trace.snapshots]
    if missing:
        raise ValidationError("trace lacks particle snapshots; run with snapshots='all'")
    J = limits.particles.shape[1]
    mon = ProjectionMonitor(limits, keep_norms=keep_norms)
    for i in its:
        V = trace.snapshots[i]
        if V.shape[1] != J:
            raise ValidationError("ensemble size differs from the limits")
        mon(i, V)
    return mon


def spectral_report_csv(path, lambda0, imax: int):
    """Write ``l, lambda_0, lambda_1 .. lambda_imax, gamma_l`` for each direction."""
    lam0 = np.atleast_1d(np.asarray(lambda0, dtype=float))
    seq = eigenvalue_recurrence(lam0, imax)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["l"] + [f"lambda_{i}" for i in range(imax + 1)] + ["gamma"])
        for l, lam in enumerate(lam0):
            w.writerow([l + 1] + [repr(float(x)) for x in seq[:, l]]
                       + [repr(float(convergence_rate(lam)))])
