"""Forward operators, regularized least-squares augmentation and exact
linear-Gaussian posteriors.

Everything downstream (ensemble iterations, mean-field analysis, model
reduction) is checked against the closed forms in this module, so the
numerics here stay deliberately conservative: covariances are only ever
touched through Cholesky factors and pseudoinverses use an explicit
relative cutoff.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from .errors import NumericalError, UnsupportedOperatorError, ValidationError

#: Relative singular-value cutoff for every pseudoinverse in the package.
PINV_RTOL = 1e-12

#: Column chunk width for batched dense products (see ``chunked_matmul``).
CHUNK = 256

#: Structural block operators are only densified below this size.
DENSIFY_THRESHOLD = 5000

KINDS = ("dense-matrix", "lti-induced", "black-box")


def chunked_matmul(M, X, chunk=CHUNK):
    """Compute ``M @ X`` in fixed-width column blocks.

    BLAS picks different kernels for one column than for many, so ``(M @ X)[:, j]``
    and ``M @ X[:, j]`` can disagree in the last bit.  Evaluating every block
    with the same ``(rows, inner, chunk)`` shape, zero-padding the tail, makes
    each output column independent of how many columns were batched with it.
    """
    M = np.asarray(M, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        return chunked_matmul(M, X[:, None], chunk)[:, 0]
    k, J = X.shape
    out = np.empty((M.shape[0], J))
    for start in range(0, J, chunk):
        block = X[:, start:start + chunk]
        width = block.shape[1]
        if width < chunk:
            padded = np.zeros((k, chunk))
            padded[:, :width] = block
            out[:, start:start + width] = (M @ padded)[:, :width]
        else:
            out[:, start:start + chunk] = M @ block
    return out


def cholesky_lower(S, name="matrix"):
    """Lower Cholesky factor of a symmetric positive-definite matrix."""
    S = np.asarray(S, dtype=float)
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise ValidationError(f"{name} is not positive definite") from exc


def check_symmetric(S, name="matrix", rtol=1e-12):
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1]:
        raise ValidationError(f"{name} must be square, got {S.shape}")
    scale = max(np.abs(S).max(initial=0.0), 1e-300)
    if np.abs(S - S.T).max(initial=0.0) > rtol * scale:
        raise ValidationError(f"{name} is not symmetric")
    return S


def psd_sqrt(S, name="covariance", rtol=1e-10):
    """Symmetric square root of a positive semidefinite matrix.

    Small negative eigenvalues (above ``-rtol * max|eig|``) are clipped; anything
    more negative is rejected.
    """
    S = check_symmetric(S, name, rtol=1e-10)
    w, Q = np.linalg.eigh(0.5 * (S + S.T))
    scale = max(np.abs(w).max(initial=0.0), 1e-300)
    if w.min(initial=0.0) < -rtol * scale:
        raise NumericalError(f"{name} is not positive semidefinite (min eig {w.min():.3e})")
    return (Q * np.sqrt(np.clip(w, 0.0, None))) @ Q.T


class ForwardOperator:
    """A map from state space (dimension ``d``) to observation space (``n``).

    Parameters
    ----------
    batch_fn : callable
        Maps a ``d x J`` array to an ``n x J`` array, one column per particle.
    n, d : int
        Observation and state dimensions.
    kind : {"dense-matrix", "lti-induced", "black-box"}
        Only the first two are treated as linear.
    matrix : ndarray, optional
        Dense representation.  When present, batched application uses it.
    """

    def __init__(self, batch_fn: Callable, n: int, d: int, kind: str = "black-box",
                 matrix=None):
        if kind not in KINDS:
            raise ValidationError(f"unknown operator kind {kind!r}")
        self._batch_fn = batch_fn
        self.n = int(n)
        self.d = int(d)
        self.kind = kind
        self._matrix = None if matrix is None else np.asarray(matrix, dtype=float)

    @classmethod
    def from_matrix(cls, H) -> "ForwardOperator":
        H = np.atleast_2d(np.asarray(H, dtype=float))
        return cls(lambda V: chunked_matmul(H, V), H.shape[0], H.shape[1],
                   kind="dense-matrix", matrix=H)

    @property
    def linear(self) -> bool:
        return self.kind != "black-box"

    @property
    def shape(self):
        return (self.n, self.d)

    def apply_batch(self, V):
        V = np.asarray(V, dtype=float)
        if V.ndim != 2 or V.shape[0] != self.d:
            raise ValidationError(f"expected a {self.d} x J array, got shape {V.shape}")
        if self._matrix is not None:
            out = chunked_matmul(self._matrix, V)
        else:
            out = np.asarray(self._batch_fn(V), dtype=float)
        if out.shape != (self.n, V.shape[1]):
            raise ValidationError(f"forward map returned shape {out.shape}, "
                                  f"expected {(self.n, V.shape[1])}")
        return out

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        if v.ndim != 1 or v.shape[0] != self.d:
            raise ValidationError(f"expected a vector of length {self.d}, got {v.shape}")
        return self.apply_batch(v[:, None])[:, 0]

    def to_dense(self):
        """Dense ``n x d`` matrix, probing unit vectors if not already stored."""
        if not self.linear:
            raise UnsupportedOperatorError("black-box operators have no matrix")
        if self._matrix is not None:
            return self._matrix
        return self.apply_batch(np.eye(self.d))

    def materialize(self) -> "ForwardOperator":
        """Cache the dense matrix so later batched calls use it."""
        self._matrix = self.to_dense()
        return self

    def __repr__(self):
        return f"ForwardOperator(kind={self.kind!r}, n={self.n}, d={self.d})"


class StackedOperator(ForwardOperator):
    """``v -> (H(v), v)``; the regularized least-squares forward map.

    The identity block is kept implicit.  ``to_dense`` refuses to build the
    full matrix above ``densify_threshold`` rows plus columns.
    """

    def __init__(self, base: ForwardOperator, densify_threshold: int = DENSIFY_THRESHOLD):
        self.base = base
        self.densify_threshold = densify_threshold
        super().__init__(self._stack, base.n + base.d, base.d,
                         kind=base.kind if base.linear else "black-box")

    def _stack(self, V):
        return np.vstack([self.base.apply_batch(V), V])

    def apply_batch(self, V):
        V = np.asarray(V, dtype=float)
        if V.ndim != 2 or V.shape[0] != self.d:
            raise ValidationError(f"expected a {self.d} x J array, got shape {V.shape}")
        return self._stack(V)

    def to_dense(self):
        if not self.linear:
            raise UnsupportedOperatorError("black-box operators have no matrix")
        if self.n + self.d > self.densify_threshold:
            raise UnsupportedOperatorError(
                f"refusing to densify a {self.n} x {self.d} block operator "
                f"(threshold {self.densify_threshold})")
        return np.vstack([self.base.to_dense(), np.eye(self.d)])

    def materialize(self):
        self.base.materialize()
        return self


@dataclass
class GaussianPrior:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = check_symmetric(self.cov, "prior covariance")
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValidationError("prior mean and covariance sizes differ")
        self.chol = cholesky_lower(self.cov, "prior covariance")

    @property
    def dim(self):
        return self.mean.size

    def precision(self):
        return sla.cho_solve((self.chol, True), np.eye(self.dim))


@dataclass
class GaussianPosterior:
    """Mean and covariance of a Gaussian posterior.

    ``precision`` is kept alongside the covariance when it is available in
    closed form; weighted error metrics use it instead of inverting ``cov``.
    """

    mean: np.ndarray
    cov: np.ndarray
    precision: Optional[np.ndarray] = None


@dataclass
class InverseProblem:
    """Data ``y = H(v) + eps`` with ``eps ~ N(0, gamma)`` and an optional prior."""

    operator: ForwardOperator
    gamma: np.ndarray
    data: np.ndarray
    prior: Optional[GaussianPrior] = None
    gamma_chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not isinstance(self.operator, ForwardOperator):
            self.operator = ForwardOperator.from_matrix(self.operator)
        self.gamma = check_symmetric(self.gamma, "noise covariance")
        self.data = np.atleast_1d(np.asarray(self.data, dtype=float))
        n = self.operator.n
        if self.gamma.shape != (n, n):
            raise ValidationError(f"noise covariance must be {n} x {n}, got {self.gamma.shape}")
        if self.data.shape != (n,):
            raise ValidationError(f"data must have length {n}, got {self.data.shape}")
        if self.prior is not None and self.prior.dim != self.operator.d:
            raise ValidationError("prior dimension does not match the operator")
        self.gamma_chol = cholesky_lower(self.gamma, "noise covariance")

    @property
    def n(self):
        return self.operator.n

    @property
    def d(self):
        return self.operator.d

    def whiten(self, X):
        """Apply ``L^{-1}`` where ``gamma = L L^T``."""
        return sla.solve_triangular(self.gamma_chol, X, lower=True)


def apply_forward(op: ForwardOperator, V):
    """Evaluate the forward map on every column of ``V``."""
    return op.apply_batch(V)


def augment_rls(problem: InverseProblem, densify_threshold: int = DENSIFY_THRESHOLD):
    """Fold the Gaussian prior into the data as pseudo-observations.

    Returns a prior-free problem with data ``(y, mu_pr)``, forward map
    ``v -> (H(v), v)`` and block-diagonal noise covariance ``diag(gamma, cov_pr)``.
    """
    if problem.prior is None:
        raise ValidationError("augment_rls requires a prior")
    prior = problem.prior
    return InverseProblem(
        operator=StackedOperator(problem.operator, densify_threshold),
        gamma=sla.block_diag(problem.gamma, prior.cov),
        data=np.concatenate([problem.data, prior.mean]),
    )


def _whitened_pinv(Hw):
    U, s, Vt = np.linalg.svd(Hw, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((Hw.shape[1], Hw.shape[0]))
    keep = s > PINV_RTOL * s[0]
    return (Vt[keep].T / s[keep]) @ U[:, keep].T


def weighted_pinv(H, gamma):
    """``H^+ = (H^T gamma^{-1} H)^dagger H^T gamma^{-1}`` as a ``d x n`` array.

    Computed as ``pinv(L^{-1} H) L^{-1}`` with ``gamma = L L^T``.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    L = cholesky_lower(gamma, "noise covariance")
    Hw = sla.solve_triangular(L, H, lower=True)
    Linv = sla.solve_triangular(L, np.eye(L.shape[0]), lower=True)
    return _whitened_pinv(Hw) @ Linv


def normal_pinv(H, gamma):
    """``(H^T gamma^{-1} H)^dagger``, symmetric ``d x d``."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    L = cholesky_lower(gamma, "noise covariance")
    P = _whitened_pinv(sla.solve_triangular(L, H, lower=True))
    return P @ P.T


def minimum_norm_solution(H, gamma, y):
    """Minimum-norm minimizer of ``||y - H v||^2_{gamma^{-1}}``.

    ``y`` may be a single vector or an ``n x J`` array of right-hand sides.
    Singular values below ``PINV_RTOL`` times the largest are dropped.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    y = np.asarray(y, dtype=float)
    if y.shape[0] != H.shape[0]:
        raise ValidationError(f"data length {y.shape[0]} does not match H with {H.shape[0]} rows")
    L = cholesky_lower(gamma, "noise covariance")
    Hw = sla.solve_triangular(L, H, lower=True)
    yw = sla.solve_triangular(L, y, lower=True)
    return _whitened_pinv(Hw) @ yw


def exact_posterior(problem: InverseProblem) -> GaussianPosterior:
    """Closed-form posterior of a linear-Gaussian problem.

    Raises
    ------
    ValidationError
        If the problem has no prior.
    UnsupportedOperatorError
        If the forward map is a black box.
    """
    if problem.prior is None:
        raise ValidationError("exact_posterior requires a prior")
    if not problem.operator.linear:
        raise UnsupportedOperatorError("exact_posterior needs a linear operator")
    prior = problem.prior
    Hw = problem.whiten(problem.operator.to_dense())
    yw = problem.whiten(problem.data)
    pr = (prior.chol, True)
    precision = Hw.T @ Hw + sla.cho_solve(pr, np.eye(prior.dim))
    precision = 0.5 * (precision + precision.T)
    try:
        fac = sla.cho_factor(precision, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("posterior precision is not positive definite") from exc
    cov = sla.cho_solve(fac, np.eye(prior.dim))
    cov = 0.5 * (cov + cov.T)
    mean = sla.cho_solve(fac, Hw.T @ yw + sla.cho_solve(pr, prior.mean))
    return GaussianPosterior(mean=mean, cov=cov, precision=precision)
