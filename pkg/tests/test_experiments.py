import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ekrmle.errors import ValidationError
from ekrmle.experiments import (
    ExperimentConfig,
    convergence_experiment,
    moment_error_metrics,
    posterior_error_metrics,
    random_problem,
    smoothing_experiment,
    smoothing_setup,
)
from ekrmle.linear_forward import GaussianPosterior
from ekrmle.mean_field import mean_field_limits, state_eigenproblem


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# config

@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["random-convergence", "heat-smoothing"]),
       st.one_of(st.none(), st.integers(0, 2**31)),
       st.integers(1, 500), st.lists(st.integers(2, 10**6), min_size=1, max_size=4),
       st.lists(st.integers(1, 50), max_size=4), st.booleans(),
       st.floats(1e-12, 1.0), st.floats(0.0, 1.0, exclude_min=True),
       st.sampled_from(["deterministic", "per-iteration", "fixed-rmle"]))
def test_config_round_trip(exp, seed, i_max, Js, rhos, full, tol, frac, scheme):
    cfg = ExperimentConfig(experiment=exp, seed=seed, i_max=i_max, ensemble_sizes=tuple(Js),
                           reduced_orders=tuple(rhos), include_full=full, rel_tol=tol,
                           sensor_frac=frac, scheme=scheme, out="some dir/x")
    assert ExperimentConfig.parse(cfg.serialize()) == cfg


def test_config_file_round_trip(tmp_path):
    cfg = ExperimentConfig(seed=3, ensemble_sizes=(10, 20))
    cfg.save(tmp_path / "c.cfg")
    assert ExperimentConfig.load(tmp_path / "c.cfg") == cfg
    assert "# " in (tmp_path / "c.cfg").read_text()


@pytest.mark.parametrize("text", ["seed 3", "bogus = 1", "i_max = 2.5", "plots = maybe",
                                  "ensemble_sizes = a, b"])
def test_config_parse_errors(text):
    with pytest.raises(ValidationError):
        ExperimentConfig.parse(text)


@pytest.mark.parametrize("kw", [dict(seed=None), dict(seed=1, n=0), dict(seed=1, rank=60),
                                dict(seed=1, ensemble_sizes=(1,)), dict(seed=1, scheme="x"),
                                dict(seed=1, experiment="x"), dict(seed=1, reduced_orders=(0,)),
                                dict(seed=1, dt=0.0)])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        ExperimentConfig(**kw).validate()


def test_config_default_rank():
    assert ExperimentConfig(seed=1).effective_rank == 25


# random problems

def test_random_problem_rank_and_c0(rng):
    rp = random_problem(20, 30, 6, 7)
    s = np.linalg.svd(rp.H, compute_uv=False)
    assert np.all(s[6:] < 1e-12 * s[0]) and s[5] > 1e-3 * s[0]
    assert np.linalg.matrix_rank(rp.C0) == 9
    np.testing.assert_array_equal(rp.problem.gamma, rp.problem.gamma.T)
    assert np.linalg.eigvalsh(rp.problem.gamma).min() >= 0.1 - 1e-12


def test_random_problem_spectral_sanity():
    for seed in range(10):
        rp = random_problem(12, 16, 4, seed)
        r = state_eigenproblem(rp.C0, rp.H, rp.problem.gamma).rank
        assert r <= min(np.linalg.matrix_rank(rp.C0), 4)


def test_random_problem_is_deterministic():
    a, b = random_problem(8, 10, 3, 5), random_problem(8, 10, 3, 5)
    assert np.array_equal(a.H, b.H) and np.array_equal(a.problem.data, b.problem.data)
    with pytest.raises(ValidationError):
        random_problem(8, 10, 8, 5)


def test_random_problem_full_scale_accepted():
    rp = random_problem(500, 1000, 250, 0)
    assert rp.H.shape == (500, 1000)


# metrics

def test_metrics_zero_on_exact_moments(rng):
    B = rng.standard_normal((4, 4))
    post = GaussianPosterior(rng.standard_normal(4), B @ B.T + np.eye(4))
    assert moment_error_metrics(post.mean, post.cov, post) == (0.0, 0.0)
    V = post.mean[:, None] + rng.standard_normal((4, 50))
    V -= V.mean(axis=1, keepdims=True) - post.mean[:, None]
    assert posterior_error_metrics(V, post)[0] == pytest.approx(0.0, abs=1e-14)


def test_metrics_values():
    post = GaussianPosterior(np.array([2.0, 0.0]), np.diag([4.0, 1.0]))
    e_mean, e_cov = moment_error_metrics(np.array([1.0, 0.0]), np.diag([2.0, 1.0]), post)
    assert e_mean == pytest.approx(0.5)
    assert e_cov == pytest.approx(0.5)


def test_metrics_reject_singular_posterior():
    post = GaussianPosterior(np.zeros(2), np.diag([1.0, 0.0]))
    with pytest.raises(ValidationError):
        moment_error_metrics(np.zeros(2), np.eye(2), post)


def test_metric_identity_on_mean_field_limits():
    rp = random_problem(6, 9, 3, 2)
    lim = mean_field_limits(rp.problem, rp.C0, rp.mu0)
    post = GaussianPosterior(lim.mean, lim.cov + 1e-6 * np.eye(9))
    assert moment_error_metrics(lim.mean, lim.cov + 1e-6 * np.eye(9), post) == (0.0, 0.0)


# convergence experiment

@pytest.fixture(scope="module")
def small_convergence(tmp_path_factory):
    out = tmp_path_factory.mktemp("conv")
    cfg = ExperimentConfig(seed=11, n=10, d=20, rank=4, ensemble_sizes=(4, 400), i_max=25,
                           replicates=2, out=str(out), plots=False)
    return convergence_experiment(cfg), out


def test_convergence_outputs(small_convergence):
    res, out = small_convergence
    assert res.labels == ["J=4", "J=400", "J=inf"]
    rows = _rows(out / "means.csv")
    assert len(rows) == 3 * 4 * 26
    for label in res.labels:
        for sub in ("P", "S", "calP", "calS"):
            its = [int(r["iteration"]) for r in rows
                   if r["series"] == label and r["subspace"] == sub]
            assert its == list(range(26))
    assert (out / "covs.csv").exists() and (out / "final_errors.csv").exists()


def test_convergence_mean_field_s_series_constant(small_convergence):
    res, _ = small_convergence
    # the S error against the limit is zero in exact arithmetic; only roundoff moves
    S = res.series[("J=inf", "S", "mean")]
    assert np.abs(S - S[:, :1]).max() <= 1e-8


def test_convergence_large_ensemble_converges(small_convergence):
    res, _ = small_convergence
    P_big = res.series[("J=400", "P", "mean")]
    P_small = res.series[("J=4", "P", "mean")]
    assert np.all(P_big[:, -1] < 1e-2)
    assert np.all(P_small[:, -1] > 1e-2)
    assert np.all(np.diff(P_big[:, 2:], axis=1) <= 1e-12)


def test_convergence_rejects_other_schemes(tmp_path):
    cfg = ExperimentConfig(seed=1, n=6, d=8, rank=2, scheme="deterministic", out=str(tmp_path))
    with pytest.raises(ValidationError):
        convergence_experiment(cfg, write=False)


# smoothing experiment

def test_smoothing_setup_shares_data():
    cfg = ExperimentConfig(experiment="heat-smoothing", seed=4, heat_d=12, n_obs=20, replicates=3)
    a, b = smoothing_setup(cfg), smoothing_setup(cfg)
    assert np.array_equal(a.y, b.y)
    assert a.H.shape == (20, 12)


def test_smoothing_small_run_with_failure_cell(tmp_path):
    cfg = ExperimentConfig(experiment="heat-smoothing", seed=4, heat_d=12, n_obs=20,
                           reduced_orders=(3, 5, 300), include_full=True,
                           ensemble_sizes=(50, 500), i_max=40, replicates=2,
                           out=str(tmp_path), plots=False)
    res = smoothing_experiment(cfg)
    assert set(res.cells) == {(rho, J) for rho in (0, 3, 5, 300) for J in (50, 500)}
    assert np.all(np.isnan(res.cells[(300, 50)]))
    assert any(f[0] == 300 and "RankError" in f[3] for f in res.failures)
    assert res.exact[0][0] <= 1e-8 and res.exact[0][1] <= 1e-8
    assert res.exact[5][0] < res.exact[3][0]
    full = res.cells[(0, 500)]
    assert np.all(np.isfinite(full))
    assert full[:, 1].mean() < res.cells[(0, 50)][:, 1].mean()
    rows = _rows(tmp_path / "errs_vs_J.csv")
    assert [r["rho"] for r in rows[:2]] == ["full", "full"]
    assert {r["rho"] for r in _rows(tmp_path / "failures.csv")} == {"300"}
    assert len(_rows(tmp_path / "cells.csv")) == 4 * 2 * 2
    assert len(_rows(tmp_path / "errs_vs_rho.csv")) == 4
