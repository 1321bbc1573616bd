"""Experiment drivers: random-problem convergence study and heat smoothing.

Both drivers take an :class:`ExperimentConfig`, write CSV tables (and
optionally plots) under ``config.out``, and return the computed numbers.
Output is deterministic for a fixed configuration and seed.
"""
from __future__ import annotations

import csv
import dataclasses
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg as sla

from .balanced_truncation import (
    balance,
    observability_gramian,
    prior_from_lyapunov,
    reduce,
    reduced_forward_operator,
    reduced_posterior,
)
from .ensemble_kalman import (
    Ensemble,
    PerturbationScheme,
    StoppingRule,
    initial_ensemble,
    perturb_observations,
    run,
    sample_cov,
)
from .errors import NumericalError, ValidationError
from .linear_forward import (
    GaussianPosterior,
    GaussianPrior,
    InverseProblem,
    augment_rls,
    exact_posterior,
)
from .lti import forward_operator, heat_model, load_system, synthesize_data
from .mean_field import (
    ProjectionMonitor,
    mean_field_cov_iterate,
    mean_field_limits,
    mean_field_particles,
)
from .streams import Streams

EXPERIMENTS = ("random-convergence", "heat-smoothing")

_DOC = {
    "experiment": "random-convergence or heat-smoothing",
    "seed": "integer seed (required)",
    "n": "observations of the random problem",
    "d": "states of the random problem",
    "rank": "rank of the random H (0 means min(n, d) // 2)",
    "ensemble_sizes": "comma-separated ensemble sizes",
    "reduced_orders": "comma-separated balanced-truncation orders",
    "include_full": "also run the full (unreduced) smoothing model",
    "i_max": "iterations per run",
    "rel_tol": "early-stopping tolerance for smoothing runs (0 disables)",
    "replicates": "Monte Carlo replicates",
    "scheme": "deterministic, per-iteration or fixed-rmle",
    "mean_field": "add the mean-field (J = infinity) series to convergence output",
    "heat_d": "grid size of the heat model",
    "alpha": "heat diffusivity",
    "sensor_frac": "sensor position as a fraction of the rod",
    "dt": "forward Euler step",
    "obs_dt": "spacing of observation times",
    "n_obs": "number of observation times",
    "sigma_obs": "measurement noise standard deviation",
    "system_dir": "directory with A.mtx and F.mtx replacing the heat model",
    "out": "output directory",
    "plots": "write PNG plots",
}


@dataclass
class ExperimentConfig:
    """Settings for :func:`convergence_experiment` and :func:`smoothing_experiment`.

    Stored on disk as flat ``key = value`` lines; lists are comma separated
    and ``#`` starts a comment.
    """

    experiment: str = "random-convergence"
    seed: Optional[int] = None
    n: int = 50
    d: int = 100
    rank: int = 0
    ensemble_sizes: Tuple[int, ...] = (10, 5000)
    reduced_orders: Tuple[int, ...] = (3, 5, 10, 20)
    include_full: bool = False
    i_max: int = 100
    rel_tol: float = 1e-10
    replicates: int = 1
    scheme: str = "fixed-rmle"
    mean_field: bool = True
    heat_d: int = 200
    alpha: float = 0.01
    sensor_frac: float = 2.0 / 3.0
    dt: float = 1e-3
    obs_dt: float = 0.1
    n_obs: int = 100
    sigma_obs: float = 0.008
    system_dir: str = ""
    out: str = "out"
    plots: bool = True

    def __post_init__(self):
        self.ensemble_sizes = tuple(int(x) for x in self.ensemble_sizes)
        self.reduced_orders = tuple(int(x) for x in self.reduced_orders)

    @property
    def effective_rank(self):
        return self.rank if self.rank > 0 else min(self.n, self.d) // 2

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ValidationError(f"experiment must be one of {EXPERIMENTS}")
        if self.seed is None:
            raise ValidationError("a seed is required (config key 'seed' or --seed)")
        for k in ("n", "d", "i_max", "replicates", "heat_d", "n_obs"):
            if getattr(self, k) <= 0:
                raise ValidationError(f"{k} must be positive")
        if not 0 < self.effective_rank < min(self.n, self.d):
            raise ValidationError("rank must satisfy 0 < rank < min(n, d)")
        if not self.ensemble_sizes or min(self.ensemble_sizes) < 2:
            raise ValidationError("ensemble sizes must be at least 2")
        if any(r < 1 for r in self.reduced_orders):
            raise ValidationError("reduced orders must be positive")
        if self.scheme not in ("deterministic", "per-iteration", "fixed-rmle"):
            raise ValidationError(f"unknown scheme {self.scheme!r}")
        if self.dt <= 0 or self.obs_dt <= 0 or self.sigma_obs < 0:
            raise ValidationError("dt and obs_dt must be positive, sigma_obs non-negative")
        return self

    def serialize(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            lines.append(f"# {_DOC[f.name]}")
            lines.append(f"{f.name} = {_format(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for num, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"config line {num}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValidationError(f"config line {num}: unknown key {key!r}")
            kw[key] = _convert(key, types[key], val, num)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.parse(fh.read())

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.serialize())


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def _convert(key, typ, val, num):
    try:
        if "Tuple" in str(typ):
            return tuple(int(float(x)) for x in val.split(",") if x.strip())
        if typ in ("bool", bool):
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        if typ in ("int", "Optional[int]", int):
            f = float(val)
            if f != int(f):
                raise ValueError(val)
            return int(f)
        if typ in ("float", float):
            return float(val)
        return val
    except ValueError:
        raise ValidationError(f"config line {num}: bad value {val!r} for {key}") from None


# ---------------------------------------------------------------------------
# problems and metrics


@dataclass
class RandomProblem:
    problem: InverseProblem
    C0: np.ndarray
    mu0: np.ndarray
    H: np.ndarray
    v_true: np.ndarray


def random_problem(n: int, d: int, rank: int, rng) -> RandomProblem:
    """Random rank-deficient linear problem with a low-rank initial covariance.

    ``H = U_r D V_r^T`` with ``D`` log-uniform on ``[0.1, 10]``, so both
    kernels are non-trivial.  ``gamma = G G^T + 0.1 I`` with ``G`` having
    ``N(0, 1/n)`` entries.  The initial ensemble covariance ``C0 = B B^T`` has
    rank ``min(d - 1, rank + ceil(rank / 2))`` and random column space, so it
    neither contains nor avoids ``range(H^T)``.
    """
    n, d, rank = int(n), int(d), int(rank)
    if not 0 < rank < min(n, d):
        raise ValidationError("random_problem needs 0 < rank < min(n, d)")
    g = (rng if isinstance(rng, Streams) else Streams(int(rng))).generator("problem")
    Ur = np.linalg.qr(g.standard_normal((n, rank)))[0]
    Vr = np.linalg.qr(g.standard_normal((d, rank)))[0]
    D = np.exp(g.uniform(np.log(0.1), np.log(10.0), rank))
    H = (Ur * D) @ Vr.T
    G = g.standard_normal((n, n)) / np.sqrt(n)
    gamma = G @ G.T + 0.1 * np.eye(n)
    gamma = 0.5 * (gamma + gamma.T)
    v_true = g.standard_normal(d)
    noise = np.linalg.cholesky(gamma) @ g.standard_normal(n)
    y = H @ v_true + noise
    k = min(d - 1, rank + math.ceil(rank / 2))
    B = g.standard_normal((d, k))
    C0 = B @ B.T
    C0 = 0.5 * (C0 + C0.T)
    return RandomProblem(InverseProblem(H, gamma, y), C0, np.zeros(d), H, v_true)


def posterior_error_metrics(ensemble, posterior: GaussianPosterior):
    """Relative mean and covariance errors of an ensemble against a posterior.

    ``e_mean = ||mu - mean||_{P} / ||mu||_{P}`` with ``P`` the posterior
    precision, and ``e_cov = ||Gamma - Cov||_2 / ||Gamma||_2``.
    """
    V = ensemble.particles if isinstance(ensemble, Ensemble) else np.asarray(ensemble, dtype=float)
    mean = V.mean(axis=1)
    cov = sample_cov(V)
    return moment_error_metrics(mean, cov, posterior)


def moment_error_metrics(mean, cov, posterior: GaussianPosterior):
    """:func:`posterior_error_metrics` for given moments instead of particles."""
    try:
        if posterior.precision is not None:
            # ||x||_P = ||R x|| with P = R^T R
            Rp = sla.cholesky(posterior.precision, lower=False)
            wnorm = lambda x: np.linalg.norm(Rp @ x)
        else:
            Lc = sla.cholesky(posterior.cov, lower=True)
            wnorm = lambda x: np.linalg.norm(sla.solve_triangular(Lc, x, lower=True))
    except np.linalg.LinAlgError:
        raise ValidationError("posterior covariance is not positive definite") from None
    den = wnorm(posterior.mean)
    num = wnorm(posterior.mean - mean)
    e_mean = num / den if den > 0 else (0.0 if num == 0 else np.inf)
    e_cov = np.linalg.norm(posterior.cov - cov, 2) / np.linalg.norm(posterior.cov, 2)
    return float(e_mean), float(e_cov)


def _scheme(name, gamma):
    if name == "deterministic":
        return PerturbationScheme.deterministic()
    if name == "per-iteration":
        return PerturbationScheme.stochastic(gamma)
    return PerturbationScheme.rmle(gamma)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


# ---------------------------------------------------------------------------
# convergence study


SUBSPACES = ("P", "S", "calP", "calS")


@dataclass
class ConvergenceResult:
    """``series[(label, stat)]`` is a ``replicates x (i_max + 1)`` array per subspace."""

    labels: List[str]
    series: Dict[Tuple[str, str, str], np.ndarray]
    config: ExperimentConfig
    subspaces: Tuple[str, ...] = SUBSPACES
    stats: Tuple[str, ...] = ("mean", "cov")
    files: List[str] = field(default_factory=list)

    def mean_over_replicates(self, label, subspace, stat):
        return self.series[(label, subspace, stat)].mean(axis=0)


def convergence_experiment(config: ExperimentConfig, write: bool = True,
                           subspaces=SUBSPACES, stats=("mean", "cov")) -> ConvergenceResult:
    """EK-RMLE on random problems compared with the mean-field limits.

    For each replicate a fresh random problem is drawn, and for each ensemble
    size ``J`` the relative projected errors against the mean-field particle
    limits are tracked for ``i_max`` iterations.  With ``mean_field`` set, the
    analytic mean-field particles (from the largest ensemble's initial
    particles) are tracked as the series ``J=inf``.

    Writes ``means.csv`` and ``covs.csv`` (replicate-averaged, long format with
    ``i_max + 1`` rows per (label, subspace) series), ``final_errors.csv``
    (per replicate, at ``i_max``), and plots.  ``subspaces`` and ``stats``
    restrict the tracked series (for quick studies).
    """
    config.validate()
    if config.scheme != "fixed-rmle":
        raise ValidationError("the convergence study compares against fixed-perturbation limits; "
                              "use scheme = fixed-rmle")
    labels = [f"J={J}" for J in config.ensemble_sizes]
    if config.mean_field:
        labels.append("J=inf")
    acc: Dict[Tuple[str, str, str], list] = {}
    stop = StoppingRule(config.i_max, None)
    for rep in range(config.replicates):
        streams = Streams(config.seed, rep)
        rp = random_problem(config.n, config.d, config.effective_rank, streams)
        prob = rp.problem
        scheme = PerturbationScheme.rmle(prob.gamma)
        V0_big = Y_big = None
        for J in config.ensemble_sizes:
            js = Streams(config.seed * 1_000_003 + J, rep)
            init = initial_ensemble((rp.mu0, rp.C0), J, js)
            Y = perturb_observations(prob.data, scheme, J, js)
            lim = mean_field_limits(prob, rp.C0, rp.mu0, Y, init.particles)
            mon = ProjectionMonitor(lim, subspaces=subspaces, stats=stats)
            run(prob, init, scheme, stop, js, record_cov=False, record_misfit=False, callback=mon)
            _collect(acc, f"J={J}", mon)
            if J == max(config.ensemble_sizes):
                V0_big, Y_big, lim_big = init.particles, Y.Y, lim
        if config.mean_field:
            states = mean_field_cov_iterate(rp.C0, rp.H, prob.gamma, config.i_max)
            mon = ProjectionMonitor(lim_big, subspaces=subspaces, stats=stats)
            for s, V in zip(states, mean_field_particles(states, V0_big, lim_big.vstar_particles)):
                mon(s.iteration, V)
            _collect(acc, "J=inf", mon)
    series = {k: np.asarray(v) for k, v in acc.items()}
    res = ConvergenceResult(labels, series, config, tuple(subspaces), tuple(stats))
    if write:
        res.files = _write_convergence(res)
    return res


def _collect(acc, label, mon):
    for key, vals in mon.as_arrays().items():
        sub, stat = key.split("/")
        acc.setdefault((label, sub, stat), []).append(vals)


def _write_convergence(res: ConvergenceResult):
    cfg = res.config
    os.makedirs(cfg.out, exist_ok=True)
    files = []
    for stat, name in (("mean", "means.csv"), ("cov", "covs.csv")):
        if stat not in res.stats:
            continue
        rows = []
        for label in res.labels:
            for sub in res.subspaces:
                avg = res.mean_over_replicates(label, sub, stat)
                rows += [(label, sub, i, float(v)) for i, v in enumerate(avg)]
        path = os.path.join(cfg.out, name)
        _write_rows(path, ["series", "subspace", "iteration", "value"], rows)
        files.append(path)
    rows = []
    for label in res.labels:
        for sub in res.subspaces:
            for stat in res.stats:
                arr = res.series[(label, sub, stat)]
                rows += [(label, r, sub, stat, float(arr[r, -1])) for r in range(arr.shape[0])]
    path = os.path.join(cfg.out, "final_errors.csv")
    _write_rows(path, ["series", "replicate", "subspace", "stat", "value"], rows)
    files.append(path)
    if cfg.plots and res.subspaces == SUBSPACES:
        files += _plots("convergence_plots", res, cfg.out)
    return files


# ---------------------------------------------------------------------------
# smoothing study


@dataclass
class SmoothingSetup:
    system: object
    prior: GaussianPrior
    v_true: np.ndarray
    y: np.ndarray
    gamma: np.ndarray
    H: np.ndarray
    posterior: GaussianPosterior


def smoothing_setup(config: ExperimentConfig) -> SmoothingSetup:
    """Heat (or user) system, Lyapunov prior, synthetic data and exact posterior.

    The true initial state is a prior draw; truth and data use replicate 0 of
    the seed so every replicate sees the same data.
    """
    times = np.arange(1, config.n_obs + 1) * config.obs_dt
    if config.system_dir:
        system = load_system(config.system_dir, config.dt, times,
                             config.sigma_obs ** 2 * np.eye(1))
    else:
        system = heat_model(config.heat_d, config.alpha, config.sensor_frac, config.dt,
                            times, config.sigma_obs)
    gpr = prior_from_lyapunov(system.A)
    prior = GaussianPrior(np.zeros(system.d), gpr)
    base = Streams(config.seed, 0)
    v_true = prior.chol @ base.normals("truth", system.d, 1)[:, 0]
    H = forward_operator(system).to_dense()
    y = synthesize_data(system, v_true, base, H=H)
    gamma = system.noise_cov()
    post = exact_posterior(InverseProblem(H, gamma, y, prior))
    return SmoothingSetup(system, prior, v_true, y, gamma, H, post)


@dataclass
class SmoothingResult:
    """Per-cell errors.  ``cells[(rho, J)]`` holds ``(e_mean, e_cov)`` per replicate
    (``nan`` where the cell failed); ``rho = 0`` denotes the full model."""

    cells: Dict[Tuple[int, int], np.ndarray]
    exact: Dict[int, Tuple[float, float]]
    failures: List[Tuple[int, int, int, str]]
    config: ExperimentConfig
    files: List[str] = field(default_factory=list)


def smoothing_experiment(config: ExperimentConfig, write: bool = True) -> SmoothingResult:
    """EK-RMLE on the (reduced) smoothing problem versus the full posterior.

    For every reduced order ``rho`` (and the full model with ``include_full``)
    and every ensemble size ``J``, each replicate draws a prior ensemble, runs
    EK-RMLE on the RLS-augmented problem and scores the final ensemble against
    the exact full-order posterior.  The exact reduced posterior is scored the
    same way.  Failures (rank, instability, divergence) are recorded per cell
    and the sweep continues.

    Writes ``errs_vs_J.csv``, ``errs_vs_rho.csv``, ``cells.csv`` and plots.
    """
    config.validate()
    st = smoothing_setup(config)
    prior, gamma, y = st.prior, st.gamma, st.y
    orders = ([0] if config.include_full else []) + list(config.reduced_orders)
    factors = None
    if config.reduced_orders:
        factors = balance(observability_gramian(st.system), prior.cov)
    cells: Dict[Tuple[int, int], np.ndarray] = {}
    exact: Dict[int, Tuple[float, float]] = {}
    failures = []
    stop = StoppingRule(config.i_max, config.rel_tol if config.rel_tol > 0 else None)
    for rho in orders:
        try:
            if rho == 0:
                op = forward_operator(st.system)
                post = st.posterior
            else:
                model = reduce(st.system, prior.cov, rho, factors)
                op = reduced_forward_operator(model)
                post = reduced_posterior(model, prior.cov, gamma, y)
            exact[rho] = moment_error_metrics(post.mean, post.cov, st.posterior)
        except (ValidationError, NumericalError) as exc:
            exact[rho] = (np.nan, np.nan)
            for J in config.ensemble_sizes:
                cells[(rho, J)] = np.full((config.replicates, 2), np.nan)
                failures.append((rho, J, -1, f"{type(exc).__name__}: {exc}"))
            continue
        rls = augment_rls(InverseProblem(op, gamma, y, prior))
        scheme = _scheme(config.scheme, rls.gamma)
        for J in config.ensemble_sizes:
            out = np.full((config.replicates, 2), np.nan)
            for rep in range(config.replicates):
                streams = Streams(config.seed * 1_000_003 + J, rep + 1)
                try:
                    init = initial_ensemble(prior, J, streams)
                    tr = run(rls, init, scheme, stop, streams, record_cov=False,
                             record_misfit=False)
                    out[rep] = posterior_error_metrics(tr.final, st.posterior)
                except (ValidationError, NumericalError) as exc:
                    failures.append((rho, J, rep, f"{type(exc).__name__}: {exc}"))
            cells[(rho, J)] = out
    res = SmoothingResult(cells, exact, failures, config)
    if write:
        res.files = _write_smoothing(res)
    return res


def _plots(name, res, out):
    try:
        from . import plotting

        return getattr(plotting, name)(res, out)
    except ImportError:
        warnings.warn("matplotlib is not installed; plots skipped")
        return []


def _rho_label(rho):
    return "full" if rho == 0 else rho


def _write_smoothing(res: SmoothingResult):
    cfg = res.config
    os.makedirs(cfg.out, exist_ok=True)
    files = []
    rows = []
    for (rho, J), arr in res.cells.items():
        ok = ~np.isnan(arr[:, 0])
        m = arr[ok].mean(axis=0) if ok.any() else (np.nan, np.nan)
        rows.append((_rho_label(rho), J, float(m[0]), float(m[1]), int(ok.sum())))
    path = os.path.join(cfg.out, "errs_vs_J.csv")
    _write_rows(path, ["rho", "J", "e_mean", "e_cov", "replicates_ok"], rows)
    files.append(path)
    rows = [(_rho_label(rho), float(e[0]), float(e[1])) for rho, e in res.exact.items()]
    path = os.path.join(cfg.out, "errs_vs_rho.csv")
    _write_rows(path, ["rho", "exact_e_mean", "exact_e_cov"], rows)
    files.append(path)
    rows = []
    for (rho, J), arr in res.cells.items():
        for rep in range(arr.shape[0]):
            rows.append((_rho_label(rho), J, rep, float(arr[rep, 0]), float(arr[rep, 1])))
    path = os.path.join(cfg.out, "cells.csv")
    _write_rows(path, ["rho", "J", "replicate", "e_mean", "e_cov"], rows)
    files.append(path)
    if res.failures:
        path = os.path.join(cfg.out, "failures.csv")
        _write_rows(path, ["rho", "J", "replicate", "error"],
                    [(_rho_label(r), J, rep, msg) for r, J, rep, msg in res.failures])
        files.append(path)
    if cfg.plots:
        files += _plots("smoothing_plots", res, cfg.out)
    return files
