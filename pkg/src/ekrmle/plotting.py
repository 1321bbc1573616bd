"""Line plots for the experiment drivers (matplotlib, headless backend)."""
from __future__ import annotations

import os

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


_SUB_LABEL = {"P": "P", "S": "S", "calP": r"$\mathcal{P}$", "calS": r"$\mathcal{S}$"}


def convergence_plots(res, out):
    """``means.png`` and ``covs.png``: replicate-averaged errors against iteration."""
    plt = _pyplot()
    files = []
    for stat, name, title in (("mean", "means.png", "mean relative error"),
                              ("cov", "covs.png", "relative covariance error")):
        if stat not in res.stats:
            continue
        fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
        for ax, subs in zip(axes, (("P", "S"), ("calP", "calS"))):
            for label in res.labels:
                for sub in subs:
                    y = res.mean_over_replicates(label, sub, stat)
                    ax.semilogy(np.arange(y.size), np.maximum(y, 1e-300),
                                ls="-" if sub in ("P", "calP") else "--",
                                label=f"{_SUB_LABEL[sub]}, {label}")
            ax.set_xlabel("iteration")
            ax.legend(fontsize=7)
        axes[0].set_ylabel(title)
        path = os.path.join(out, name)
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)
        files.append(path)
    return files


def smoothing_plots(res, out):
    """Four plots: mean and covariance error against ``J`` and against ``rho``."""
    plt = _pyplot()
    files = []
    Js = sorted({J for _, J in res.cells})
    rhos = sorted({r for r, _ in res.cells})
    for k, stat in enumerate(("mean", "cov")):
        fig, ax = plt.subplots(figsize=(5, 4))
        for rho in rhos:
            vals = [np.nanmean(res.cells[(rho, J)][:, k]) for J in Js]
            ax.loglog(Js, vals, "o-", label="full" if rho == 0 else f"rho={rho}")
        ax.set_xlabel("ensemble size J")
        ax.set_ylabel(f"relative {stat} error")
        ax.legend(fontsize=7)
        path = os.path.join(out, f"err_{stat}_vs_J.png")
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)
        files.append(path)

        fig, ax = plt.subplots(figsize=(5, 4))
        reduced = [r for r in rhos if r > 0]
        for J in Js:
            vals = [np.nanmean(res.cells[(r, J)][:, k]) for r in reduced]
            ax.semilogy(reduced, vals, "o-", label=f"J={J}")
        ex = [res.exact[r][k] for r in reduced]
        ax.semilogy(reduced, ex, "k--", label="exact reduced")
        ax.set_xlabel("reduced order rho")
        ax.set_ylabel(f"relative {stat} error")
        ax.legend(fontsize=7)
        path = os.path.join(out, f"err_{stat}_vs_rho.png")
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)
        files.append(path)
    return files
