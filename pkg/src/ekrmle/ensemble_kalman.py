"""Ensemble Kalman iterations: basic EKI (deterministic and stochastic) and
ensemble Kalman randomized maximum likelihood estimation (EK-RMLE).

The three methods share one particle update,

    v_{i+1}^{(j)} = v_i^{(j)} + K_i (y_i^{(j)} - H(v_i^{(j)})),
    K_i = Cov[v_i, h_i] (Cov[h_i] + gamma)^{-1},

and differ only in how the per-particle data ``y_i^{(j)}`` are produced (see
:class:`PerturbationScheme`).  For EK-RMLE each particle's perturbation is
drawn once and then frozen, so particle ``j`` ends up minimizing its own
randomly perturbed least-squares objective.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import scipy.linalg as sla

from .errors import DivergenceError, NumericalError, ValidationError
from .linear_forward import (
    GaussianPrior,
    InverseProblem,
    StackedOperator,
    chunked_matmul,
    psd_sqrt,
)
from .streams import Streams, as_streams

VARIANTS = ("deterministic", "per-iteration", "fixed-rmle")


@dataclass
class Ensemble:
    """``d x J`` particle array plus the iteration it belongs to."""

    particles: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=float)
        if self.particles.ndim != 2:
            raise ValidationError("particles must be a d x J array")
        if self.particles.shape[1] < 2:
            raise ValidationError("an ensemble needs at least two particles")
        if not np.all(np.isfinite(self.particles)):
            raise ValidationError("ensemble contains non-finite entries")
        if self.iteration < 0:
            raise ValidationError("iteration must be non-negative")

    @property
    def d(self):
        return self.particles.shape[0]

    @property
    def J(self):
        return self.particles.shape[1]

    def mean(self):
        return sample_mean(self.particles)

    def cov(self):
        return sample_cov(self.particles)


def sample_mean(A):
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[None, :]
    if A.shape[1] < 1:
        raise ValidationError("sample_mean needs at least one column")
    return A.mean(axis=1)


def sample_cov(A, B=None):
    """Unbiased cross-covariance ``(J-1)^{-1} sum_j (a_j - abar)(b_j - bbar)^T``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = A if B is None else np.atleast_2d(np.asarray(B, dtype=float))
    J = A.shape[1]
    if B.shape[1] != J:
        raise ValidationError("sample_cov inputs must have the same number of columns")
    if J < 2:
        raise ValidationError("sample_cov needs at least two columns")
    Aa = A - A.mean(axis=1, keepdims=True)
    if B is A:
        return (Aa @ Aa.T) / (J - 1)
    Ba = B - B.mean(axis=1, keepdims=True)
    return (Aa @ Ba.T) / (J - 1)


def kalman_gain(Cvh, Chh, gamma):
    """``Cvh (Chh + gamma)^{-1}`` via a Cholesky factorization of the sum."""
    Cvh = np.atleast_2d(np.asarray(Cvh, dtype=float))
    S = np.atleast_2d(np.asarray(Chh, dtype=float)) + np.atleast_2d(np.asarray(gamma, dtype=float))
    try:
        fac = sla.cho_factor(0.5 * (S + S.T), lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("Cov[h] + gamma is not positive definite") from exc
    return sla.cho_solve(fac, Cvh.T).T


@dataclass
class PerturbationScheme:
    """How per-particle observations are formed.

    ``deterministic``
        every particle sees the unperturbed data;
    ``per-iteration``
        fresh ``N(0, sigma)`` perturbations at every iteration (stochastic EKI);
    ``fixed-rmle``
        one ``N(0, sigma)`` draw per particle, held for the whole run (EK-RMLE).
    """

    variant: str
    sigma: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown perturbation variant {self.variant!r}")
        if self.variant == "deterministic" or self.sigma is None:
            self.sigma = None
        else:
            self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))

    @classmethod
    def deterministic(cls):
        return cls("deterministic")

    @classmethod
    def stochastic(cls, sigma):
        return cls("per-iteration", sigma)

    @classmethod
    def rmle(cls, gamma):
        return cls("fixed-rmle", gamma)

    @property
    def is_zero(self):
        return self.sigma is None or not np.any(self.sigma)


@dataclass
class PerturbedData:
    """Per-particle observations ``Y[:, j] = y + draws[:, j]``."""

    Y: np.ndarray
    draws: np.ndarray
    iteration: Optional[int] = None


def perturb_observations(y, scheme: PerturbationScheme, J: int, rng,
                         iteration: int = 0) -> PerturbedData:
    """Draw the ``n x J`` matrix of perturbed observations.

    ``iteration`` only matters for the per-iteration scheme; the fixed scheme
    always reads the iteration-0 stream so repeated calls return the same
    draws.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    n = y.size
    if scheme.is_zero:
        return PerturbedData(np.repeat(y[:, None], J, axis=1), np.zeros((n, J)), None)
    if scheme.sigma.shape != (n, n):
        raise ValidationError(f"perturbation covariance must be {n} x {n}")
    root = psd_sqrt(scheme.sigma, "perturbation covariance")
    it = iteration if scheme.variant == "per-iteration" else 0
    zeta = as_streams(rng).normals("perturb", n, J, iteration=it)
    draws = chunked_matmul(root, zeta)
    return PerturbedData(y[:, None] + draws, draws,
                         iteration if scheme.variant == "per-iteration" else None)


def initial_ensemble(source, J: int, rng=None) -> Ensemble:
    """Draw ``J`` particles from a Gaussian, or wrap an explicit ``d x J`` array.

    ``source`` is a :class:`GaussianPrior`, a ``(mean, cov)`` pair (``cov`` may
    be singular), or a particle array.
    """
    if isinstance(source, np.ndarray) and source.ndim == 2:
        return Ensemble(source.copy())
    if J < 2:
        raise ValidationError("an ensemble needs at least two particles")
    if isinstance(source, GaussianPrior):
        mean, cov = source.mean, source.cov
    else:
        mean, cov = source
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    root = psd_sqrt(cov, "initial covariance")
    zeta = as_streams(rng).normals("init", mean.size, J)
    return Ensemble(mean[:, None] + chunked_matmul(root, zeta))


def _dense_or_none(op):
    if isinstance(op, StackedOperator):
        base = _dense_or_none(op.base)
        if base is None or op.n + op.d > op.densify_threshold:
            return None
        return np.vstack([base, np.eye(op.d)])
    return op._matrix


def _check_finite(h, iteration, what="forward output"):
    bad = ~np.all(np.isfinite(h), axis=0)
    if np.any(bad):
        j = int(np.argmax(bad))
        raise DivergenceError(f"non-finite {what} at iteration {iteration}, particle {j}",
                              iteration=iteration, particle=j)


def _increment(V, h, Y, problem: InverseProblem, Hmat=None):
    """``K (Y - h)`` for the current ensemble."""
    d, J = V.shape
    n = h.shape[0]
    Va = V - V.mean(axis=1, keepdims=True)
    D = Y - h
    if Hmat is not None and d <= n:
        # linear map: Cov[h] = H C H^T and Cov[v, h] = C H^T exactly
        C = (Va @ Va.T) / (J - 1)
        CHt = C @ Hmat.T
        return chunked_matmul(kalman_gain(CHt, Hmat @ CHt, problem.gamma), D)
    Ha = h - h.mean(axis=1, keepdims=True)
    Chh = (Ha @ Ha.T) / (J - 1)
    if J * (n + d) < 2 * d * n:
        # small ensemble: never form the d x n cross-covariance
        S = Chh + problem.gamma
        try:
            fac = sla.cho_factor(0.5 * (S + S.T), lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("Cov[h] + gamma is not positive definite") from exc
        Z = sla.cho_solve(fac, D)
        return Va @ ((Ha.T @ Z) / (J - 1))
    Cvh = (Va @ Ha.T) / (J - 1)
    return chunked_matmul(kalman_gain(Cvh, Chh, problem.gamma), D)


def _gram_increment(V, G, B):
    """``K (Y - H V)`` rewritten as ``C (I + G C)^{-1} (B - G V)``.

    ``G = H^T gamma^{-1} H`` and ``B = H^T gamma^{-1} Y``; only ``d x d``
    products with the particles are needed.
    """
    d, J = V.shape
    Va = V - V.mean(axis=1, keepdims=True)
    C = (Va @ Va.T) / (J - 1)
    X = np.linalg.solve(np.eye(d) + C @ G, C).T
    return X @ (B - G @ V)


def _colnorm(A):
    return np.sqrt(np.einsum("ij,ij->j", A, A))


def eki_step(ensemble: Ensemble, problem: InverseProblem, Y) -> Ensemble:
    """One ensemble Kalman update with per-particle observations ``Y``."""
    Y = Y.Y if isinstance(Y, PerturbedData) else np.asarray(Y, dtype=float)
    V = ensemble.particles
    if V.shape[0] != problem.d:
        raise ValidationError(f"particles have dimension {V.shape[0]}, problem expects {problem.d}")
    if Y.shape != (problem.n, V.shape[1]):
        raise ValidationError(f"perturbed data must be {problem.n} x {V.shape[1]}")
    h = problem.operator.apply_batch(V)
    _check_finite(h, ensemble.iteration)
    V_new = V + _increment(V, h, Y, problem, _dense_or_none(problem.operator))
    return Ensemble(V_new, ensemble.iteration + 1)


@dataclass
class StoppingRule:
    """Stop after ``max_iterations`` or once the largest relative particle
    change drops below ``rel_tol`` (``None`` disables the second test)."""

    max_iterations: int = 100
    rel_tol: Optional[float] = 1e-10


@dataclass
class TraceRecord:
    iteration: int
    mean: np.ndarray
    cov: Optional[np.ndarray] = None
    misfit: Optional[np.ndarray] = None


@dataclass
class RunTrace:
    records: List[TraceRecord] = field(default_factory=list)
    snapshots: Dict[int, np.ndarray] = field(default_factory=dict)
    final: Optional[Ensemble] = None
    perturbed: Optional[PerturbedData] = None
    converged: bool = False

    @property
    def iterations(self):
        return len(self.records) - 1

    @property
    def mean(self):
        return self.final.mean()

    @property
    def cov(self):
        return self.final.cov()

    def to_csv(self, path):
        """Long-format export: ``iteration, stat_name, index, value``.

        Matrices are flattened row-major.
        """
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "stat_name", "index", "value"])
            for rec in self.records:
                for name in ("mean", "cov", "misfit"):
                    arr = getattr(rec, name)
                    if arr is None:
                        continue
                    for k, x in enumerate(np.ravel(arr)):
                        w.writerow([rec.iteration, name, k, repr(float(x))])

    def write_snapshots(self, directory):
        from .mmio import write_matrix

        os.makedirs(directory, exist_ok=True)
        paths = []
        for it in sorted(self.snapshots):
            p = os.path.join(directory, f"particles_i{it}.mtx")
            write_matrix(p, self.snapshots[it])
            paths.append(p)
        return paths


def run(problem: InverseProblem, init: Ensemble, scheme: PerturbationScheme,
        stop: Optional[StoppingRule] = None, rng=0, *, record_cov=None,
        record_misfit=True, snapshots=(), callback: Optional[Callable] = None) -> RunTrace:
    """Iterate :func:`eki_step` until ``stop`` fires.

    Parameters
    ----------
    problem, init, scheme
        Problem, starting ensemble and data-perturbation scheme.  Use
        ``PerturbationScheme.rmle(problem.gamma)`` for EK-RMLE.
    stop : StoppingRule, optional
        Defaults to 100 iterations or a relative change below 1e-10.
    rng : int or Streams
        Seed for the perturbation draws.
    record_cov : bool, optional
        Store the ``d x d`` sample covariance at every iteration.  Defaults to
        ``d <= 500``.
    record_misfit : bool
        Store the ``n x J`` misfit matrix ``H v - y^{(j)}`` at every iteration.
    snapshots : iterable of int, or "all"
        Iterations whose full particle arrays are kept.
    callback : callable, optional
        ``callback(iteration, particles, forward_outputs, Y)`` after every
        recorded state.

    Returns
    -------
    RunTrace
        Records for the initial state and every completed iteration.
    """
    stop = stop or StoppingRule()
    streams = as_streams(rng)
    if init.d != problem.d:
        raise ValidationError(f"initial particles have dimension {init.d}, problem expects {problem.d}")
    if record_cov is None:
        record_cov = problem.d <= 500
    keep_all = snapshots == "all"
    snap = set() if keep_all else set(snapshots)
    op = problem.operator
    Hmat = _dense_or_none(op)
    J = init.J
    trace = RunTrace()

    fixed = None
    if scheme.variant != "per-iteration":
        fixed = perturb_observations(problem.data, scheme, J, streams)
        trace.perturbed = fixed

    def record(i, V, h, Y):
        rec = TraceRecord(i, V.mean(axis=1))
        if record_cov:
            rec.cov = sample_cov(V)
        if record_misfit and h is not None:
            rec.misfit = h - Y
        trace.records.append(rec)
        if keep_all or i in snap:
            trace.snapshots[i] = V.copy()
        if callback is not None:
            callback(i, V, h, Y)

    V = init.particles
    i = init.iteration
    # linear map with d <= n: iterate in state space on whitened normal-equation data
    gram = Hmat is not None and problem.d <= problem.n
    need_h = record_misfit or callback is not None or not gram
    if gram:
        Hw = problem.whiten(Hmat)
        G = Hw.T @ Hw
    h = None
    try:
        if need_h:
            h = op.apply_batch(V)
            _check_finite(h, i)
        data = fixed if fixed is not None else perturb_observations(problem.data, scheme, J, streams, i)
        B = Hw.T @ problem.whiten(data.Y) if gram else None
        record(i, V, h, data.Y)
        for _ in range(stop.max_iterations):
            if gram:
                V_new = V + _gram_increment(V, G, B)
            else:
                V_new = V + _increment(V, h, data.Y, problem, Hmat)
            change = np.max(_colnorm(V_new - V) / (_colnorm(V) + 1e-30))
            V, i = V_new, i + 1
            if need_h:
                h = op.apply_batch(V)
                _check_finite(h, i)
            else:
                _check_finite(V, i, "particle")
            if fixed is None:
                data = perturb_observations(problem.data, scheme, J, streams, i)
                trace.perturbed = data
                if gram:
                    B = Hw.T @ problem.whiten(data.Y)
            record(i, V, h, data.Y)
            if stop.rel_tol is not None and change < stop.rel_tol:
                trace.converged = True
                break
    except DivergenceError as exc:
        trace.final = Ensemble(V, i) if np.all(np.isfinite(V)) else None
        exc.trace = trace
        raise
    trace.final = Ensemble(V, i)
    return trace
