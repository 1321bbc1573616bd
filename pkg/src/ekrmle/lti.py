"""Linear time-invariant systems and the stacked smoothing forward map.

The state obeys ``x' = A x`` and is observed through ``F`` at a finite set of
times.  Time integration is forward Euler with a fixed step, so the forward
map of the smoothing problem is ``v -> (F Phi^{k_1} v, ..., F Phi^{k_m} v)``
with ``Phi = I + dt A``.
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import mmio
from .errors import InstabilityError, ValidationError
from .linear_forward import ForwardOperator, check_symmetric, psd_sqrt
from .streams import as_streams

#: Observation times must sit on the step grid to this relative precision.
ALIGN_RTOL = 1e-9


class StabilityWarning(RuntimeWarning):
    """Forward Euler amplification factor exceeds one."""


@dataclass
class LTISystem:
    """``x' = A x`` observed as ``F x(t_k) + eta_k`` with ``eta_k ~ N(0, eta_cov)``.

    Parameters
    ----------
    A : (d, d) ndarray
    F : (d_out, d) ndarray
    dt : float
        Forward Euler step.
    obs_times : sequence of float
        Strictly increasing, positive, each an integer multiple of ``dt``.
    eta_cov : (d_out, d_out) ndarray
        Measurement noise covariance.
    """

    A: np.ndarray
    F: np.ndarray
    dt: float
    obs_times: np.ndarray
    eta_cov: np.ndarray
    steps: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.F = np.atleast_2d(np.asarray(self.F, dtype=float))
        d = self.A.shape[0]
        if self.A.shape != (d, d):
            raise ValidationError(f"A must be square, got {self.A.shape}")
        if self.F.shape[1] != d:
            raise ValidationError(f"F has {self.F.shape[1]} columns, A is {d} x {d}")
        self.dt = float(self.dt)
        if not self.dt > 0:
            raise ValidationError("dt must be positive")
        t = np.atleast_1d(np.asarray(self.obs_times, dtype=float))
        if t.size == 0 or np.any(t <= 0) or np.any(np.diff(t) <= 0):
            raise ValidationError("obs_times must be positive and strictly increasing")
        self.obs_times = t
        k = t / self.dt
        steps = np.rint(k)
        bad = np.abs(k - steps) > ALIGN_RTOL * np.maximum(steps, 1.0)
        if np.any(bad):
            raise ValidationError(f"observation time {t[bad][0]!r} is not a multiple of dt={self.dt!r}")
        self.steps = steps.astype(np.int64)
        self.eta_cov = np.atleast_2d(np.asarray(self.eta_cov, dtype=float))
        if self.eta_cov.shape != (self.d_out, self.d_out):
            raise ValidationError(f"eta_cov must be {self.d_out} x {self.d_out}")
        check_symmetric(self.eta_cov, "eta_cov")
        self._stability_checked = False

    @property
    def d(self):
        return self.A.shape[0]

    @property
    def d_out(self):
        return self.F.shape[0]

    @property
    def m(self):
        return self.obs_times.size

    @property
    def n(self):
        return self.m * self.d_out

    def noise_cov(self):
        """Block-diagonal covariance of the stacked measurement noise."""
        return np.kron(np.eye(self.m), self.eta_cov)

    def amplification(self):
        """``||I + dt A||_2`` for symmetric ``A``, else the spectral radius of ``I + dt A``."""
        return euler_amplification(self.A, self.dt)

    def check_stability(self):
        if not self._stability_checked:
            g = self.amplification()
            if g > 1 + 1e-12:
                warnings.warn(f"forward Euler amplification ||I + dt A|| = {g:.6g} > 1 "
                              f"at dt={self.dt:g}; the scheme is unstable", StabilityWarning,
                              stacklevel=3)
            self._stability_checked = True


def euler_amplification(A, dt):
    A = np.atleast_2d(A)
    if np.array_equal(A, A.T):
        lo, hi = sla.eigh(A, eigvals_only=True, subset_by_index=[0, 0])[0], \
            sla.eigh(A, eigvals_only=True, subset_by_index=[A.shape[0] - 1, A.shape[0] - 1])[0]
        return float(max(abs(1 + dt * lo), abs(1 + dt * hi)))
    # non-normal A: the spectral radius decides long-run stability
    return float(np.max(np.abs(1 + dt * np.linalg.eigvals(A))))


def _segments(system):
    return np.diff(np.concatenate([[0], system.steps]))


def simulate(system: LTISystem, x0, method: str = "propagator"):
    """States at the observation times, ``d x m`` (or ``d x m x J`` for a batch).

    ``method="euler"`` steps one ``dt`` at a time and reports the first step at
    which the state stops being finite; ``"propagator"`` jumps between
    observation times with powers of ``I + dt A`` and reports the observation
    segment instead.
    """
    system.check_stability()
    x = np.asarray(x0, dtype=float)
    batch = x.ndim == 2
    if x.shape[0] != system.d:
        raise ValidationError(f"initial state has {x.shape[0]} rows, system has d={system.d}")
    X = x if batch else x[:, None]
    out = np.empty((system.d, system.m, X.shape[1]))
    Phi = np.eye(system.d) + system.dt * system.A
    # overflow is reported as InstabilityError below
    with np.errstate(over="ignore", invalid="ignore"):
        return _step_states(system, X, Phi, out, method, batch)


def _step_states(system, X, Phi, out, method, batch):
    step = 0
    if method == "euler":
        k = 0
        for target in system.steps:
            while step < target:
                X = Phi @ X
                step += 1
                if not np.all(np.isfinite(X)):
                    raise InstabilityError(f"non-finite state at step {step}", step=step)
            out[:, k] = X
            k += 1
    elif method == "propagator":
        cache = {}
        for k, gap in enumerate(_segments(system)):
            if gap not in cache:
                cache[gap] = np.linalg.matrix_power(Phi, int(gap))
            X = cache[gap] @ X
            step += int(gap)
            if not np.all(np.isfinite(X)):
                raise InstabilityError(f"non-finite state by step {step}", step=step)
            out[:, k] = X
    else:
        raise ValidationError(f"unknown method {method!r}")
    return out if batch else out[:, :, 0]


def observe(system: LTISystem, trajectory):
    """Stack ``F x(t_k)`` in time order; accepts ``d x m`` or ``d x m x J``."""
    T = np.asarray(trajectory, dtype=float)
    if T.shape[:2] != (system.d, system.m):
        raise ValidationError(f"trajectory must be {system.d} x {system.m}[, J]")
    Y = np.einsum("od,dm...->mo...", system.F, T)
    return Y.reshape((system.n,) + T.shape[2:])


def stacked_matrix(system: LTISystem):
    """Dense ``n x d`` smoothing matrix with block rows ``F Phi^{k}``."""
    system.check_stability()
    Phi = np.eye(system.d) + system.dt * system.A
    rows = np.empty((system.m, system.d_out, system.d))
    B = system.F.copy()
    cache = {}
    for k, gap in enumerate(_segments(system)):
        if gap not in cache:
            cache[gap] = np.linalg.matrix_power(Phi, int(gap))
        B = B @ cache[gap]
        if not np.all(np.isfinite(B)):
            raise InstabilityError(f"non-finite propagator by step {system.steps[k]}",
                                   step=int(system.steps[k]))
        rows[k] = B
    return rows.reshape(system.n, system.d)


def forward_operator(system: LTISystem, materialize: bool = True) -> ForwardOperator:
    """Smoothing forward map ``v -> observe(simulate(system, v))``.

    With ``materialize`` the ``n x d`` matrix is assembled once (``m`` matrix
    powers) and used for every application; otherwise each call time-steps.
    """
    if materialize:
        H = stacked_matrix(system)
        op = ForwardOperator(lambda V: H @ V, system.n, system.d, kind="lti-induced", matrix=H)
        return op
    return ForwardOperator(lambda V: observe(system, simulate(system, V)),
                           system.n, system.d, kind="lti-induced")


def heat_matrix(d: int, alpha: float):
    if d < 3:
        raise ValidationError("heat model needs d >= 3")
    h = 1.0 / (d + 1)
    return alpha / h ** 2 * (np.diag(-2.0 * np.ones(d)) + np.diag(np.ones(d - 1), 1)
                             + np.diag(np.ones(d - 1), -1))


def alpha_for_decay(d: int, rate: float):
    """Diffusivity giving the slowest Dirichlet mode the decay ``rate``."""
    h = 1.0 / (d + 1)
    return rate * h ** 2 / (4.0 * np.sin(np.pi * h / 2) ** 2)


def heat_model(d: int = 200, alpha: float = 0.01, sensor_frac: float = 2.0 / 3.0,
               dt: float = 1e-3, obs_times=None, sigma_obs: float = 0.008) -> LTISystem:
    """Finite-difference heat equation on the unit rod with one point sensor.

    The default ``alpha`` keeps forward Euler stable at ``dt=1e-3`` for
    ``d=200``; observation times default to ``0.1, 0.2, ..., 10``.
    """
    if not 0 < sensor_frac < 1:
        raise ValidationError("sensor_frac must lie in (0, 1)")
    A = heat_matrix(int(d), float(alpha))
    x = np.arange(1, d + 1) / (d + 1)
    F = np.zeros((1, d))
    F[0, int(np.argmin(np.abs(x - sensor_frac)))] = 1.0
    if obs_times is None:
        obs_times = np.arange(1, 101) * 0.1
    return LTISystem(A, F, dt, obs_times, np.array([[sigma_obs ** 2]]))


def synthesize_data(system: LTISystem, v_true, rng, H=None):
    """Noisy observations ``H v_true + eta`` with ``eta`` drawn on the ``"data"`` stream."""
    streams = as_streams(rng)
    clean = (forward_operator(system) if H is None else ForwardOperator.from_matrix(H)).apply(v_true)
    z = streams.normals("data", system.n, 1)[:, 0].reshape(system.m, system.d_out)
    root = psd_sqrt(system.eta_cov, "eta_cov")
    return clean + (z @ root.T).ravel()


def load_system(directory, dt, obs_times, eta_cov) -> LTISystem:
    """Read ``A.mtx`` and ``F.mtx`` from ``directory``."""
    A = mmio.read_matrix(os.path.join(directory, "A.mtx"))
    F = mmio.read_matrix(os.path.join(directory, "F.mtx"))
    return LTISystem(A, F, dt, obs_times, eta_cov)
