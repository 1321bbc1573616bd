"""Command-line entry point: ``ekrmle <subcommand> [options]``.

Exit status is 0 on success, 1 for invalid input or usage, 2 for numerical
failures.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import mmio
from .errors import NumericalError, ValidationError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--no-plots", action="store_true", help="skip plot images")


def build_parser():
    parser = _Parser(prog="ekrmle", description="EK-RMLE experiments and tools")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    p = sub.add_parser("convergence", help="random-problem convergence study")
    _common(p)
    p = sub.add_parser("smoothing", help="heat smoothing study with balanced truncation")
    _common(p)
    p = sub.add_parser("reduce", help="balanced truncation of the smoothing system")
    _common(p)
    p.add_argument("--rho", type=int, required=True, help="reduced order")
    p = sub.add_parser("posterior", help="exact posterior of a problem directory")
    _common(p)
    p.add_argument("problem", help="directory with H.mtx, gamma.mtx, y.mtx, "
                                   "prior_mean.mtx and prior_cov.mtx")
    p = sub.add_parser("selftest", help="run the invariant checks")
    _common(p)
    return parser


def _config(args, experiment):
    from .experiments import ExperimentConfig

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.config is None:
        cfg.experiment = experiment
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.no_plots:
        cfg.plots = False
    if cfg.experiment != experiment:
        raise ValidationError(f"config is for {cfg.experiment!r}, command expects {experiment!r}")
    return cfg.validate()


def _cmd_convergence(args):
    from .experiments import convergence_experiment

    cfg = _config(args, "random-convergence")
    res = convergence_experiment(cfg)
    for label in res.labels:
        final = res.mean_over_replicates(label, "P", "mean")[-1]
        print(f"{label}: P-subspace mean error at i={cfg.i_max}: {final:.3e}")
    print(f"wrote {len(res.files)} files to {cfg.out}")


def _cmd_smoothing(args):
    from .experiments import smoothing_experiment

    cfg = _config(args, "heat-smoothing")
    res = smoothing_experiment(cfg)
    for (rho, J), arr in res.cells.items():
        m = np.nanmean(arr, axis=0) if np.any(~np.isnan(arr)) else (np.nan, np.nan)
        print(f"rho={'full' if rho == 0 else rho} J={J}: e_mean={m[0]:.3e} e_cov={m[1]:.3e}")
    for rho, J, rep, msg in res.failures:
        print(f"failed: rho={rho} J={J} replicate={rep}: {msg}", file=sys.stderr)
    print(f"wrote {len(res.files)} files to {cfg.out}")


def _cmd_reduce(args):
    from .balanced_truncation import export, reduce
    from .experiments import smoothing_setup

    cfg = _config(args, "heat-smoothing")
    st = smoothing_setup(cfg)
    model = reduce(st.system, st.prior.cov, args.rho)
    export(model, cfg.out)
    print(f"rho={model.rho}: xi[rho-1]={model.xi[model.rho - 1]:.3e}; wrote reduced model to {cfg.out}")


def _cmd_posterior(args):
    from .linear_forward import GaussianPrior, InverseProblem, exact_posterior

    d = args.problem
    H = mmio.read_matrix(os.path.join(d, "H.mtx"))
    gamma = mmio.read_covariance(os.path.join(d, "gamma.mtx"))
    y = mmio.read_vector(os.path.join(d, "y.mtx"))
    prior = GaussianPrior(mmio.read_vector(os.path.join(d, "prior_mean.mtx")),
                          mmio.read_covariance(os.path.join(d, "prior_cov.mtx")))
    post = exact_posterior(InverseProblem(H, gamma, y, prior))
    out = args.out or "out"
    os.makedirs(out, exist_ok=True)
    mmio.write_vector(os.path.join(out, "posterior_mean.mtx"), post.mean)
    mmio.write_covariance(os.path.join(out, "posterior_cov.mtx"), post.cov)
    print(f"wrote posterior_mean.mtx and posterior_cov.mtx to {out}")


def _cmd_selftest(args):
    from .experiments import ExperimentConfig
    from .selftest import selftest

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig(seed=0)
    seed = args.seed if args.seed is not None else (cfg.seed if cfg.seed is not None else 0)
    out = args.out or cfg.out
    results = selftest(seed, out)
    failed = 0
    for name, value, tol, ok in results:
        print(f"{'pass' if ok else 'FAIL'}  {name}: {value:.3e} (tol {tol:.0e})")
        failed += not ok
    if failed:
        raise NumericalError(f"{failed} self-test check(s) failed")


COMMANDS = {
    "convergence": _cmd_convergence,
    "smoothing": _cmd_smoothing,
    "reduce": _cmd_reduce,
    "posterior": _cmd_posterior,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise ValidationError("a subcommand is required: " + ", ".join(COMMANDS))
        COMMANDS[args.command](args)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
