"""Figure rendering for the experiment runners.

Each runner's in-memory result is turned into PNG files next to the CSV
output. Figures are a reporting convenience; the CSVs remain the canonical
artifact (figures are not byte-reproducible, CSV bodies are).
"""

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def _mean_std_curves(traces, column):
    its = traces[0].column("iteration")
    vals = np.stack([t.column(column) for t in traces])
    finite = np.where(np.isfinite(vals), vals, np.nan)
    return its, np.nanmean(finite, axis=0), np.nanstd(finite, axis=0)


def render_train(cfg, out_dir, result):
    outputs = []
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for cell in result["cells"]:
        traces = [t for _, t in result["by_cell"][cell.label]]
        its, norm_mean, norm_std = _mean_std_curves(traces, "norm_m")
        axes[0].plot(its, norm_mean, label=cell.label)
        axes[0].fill_between(its, norm_mean - norm_std, norm_mean + norm_std, alpha=0.2)
        its, err_mean, err_std = _mean_std_curves(traces, "test_error")
        axes[1].plot(its, err_mean, label=cell.label)
        axes[1].fill_between(its, err_mean - err_std, err_mean + err_std, alpha=0.2)
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("spectral norm of M")
    axes[1].set_xlabel("iteration")
    axes[1].set_ylabel("test in-context error")
    axes[1].set_yscale("log")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    outputs.append(_save(fig, Path(out_dir) / "figures" / "training_curves.png"))
    return outputs


def render_sweep(cfg, out_dir, result):
    outputs = []
    seed0 = cfg.seeds[0]
    sweeps = result["per_seed"][seed0]
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for n, sweep in sweeps.items():
        axes[0].errorbar(sweep.w_grid, sweep.loss_mean, yerr=sweep.loss_stderr,
                         label=f"n={n}", lw=1)
        axes[0].axvline(sweep.w_star, color=axes[0].lines[-1].get_color(),
                        ls=":", alpha=0.6)
    axes[0].set_xscale("log")
    axes[0].set_yscale("log")
    axes[0].set_xlabel("w (key-query scale)")
    axes[0].set_ylabel("Monte Carlo loss")
    axes[0].legend(fontsize=8)
    lams = [s.snr_scale for s in sweeps.values()]
    stars = [s.w_star for s in sweeps.values()]
    axes[1].loglog(lams, stars, "o-")
    axes[1].set_xlabel("n L^2 / sigma^2")
    axes[1].set_ylabel("argmin w*")
    for seed, slope in result.get("slopes", []):
        if seed == seed0:
            axes[1].set_title(f"fitted exponent {slope:.3f}")
    fig.tight_layout()
    outputs.append(_save(fig, Path(out_dir) / "figures" / "bandwidth_sweep.png"))

    fig, ax = plt.subplots(figsize=(6, 4))
    n_show = max(sweeps)
    sweep = sweeps[n_show]
    ax.loglog(sweep.w_grid, sweep.bias, label="bias part")
    ax.loglog(sweep.w_grid, sweep.noise, label="noise part")
    ax.loglog(sweep.w_grid, sweep.loss_mean, "k--", label="total")
    ax.set_xlabel("w")
    ax.set_ylabel("loss components")
    ax.set_title(f"n={n_show}")
    ax.legend(fontsize=8)
    outputs.append(_save(fig, Path(out_dir) / "figures" / "bias_noise_tradeoff.png"))
    return outputs


def render_lowrank(cfg, out_dir, result):
    outputs = []
    kinds = cfg.lowrank_kinds
    fig, axes = plt.subplots(2, len(kinds), figsize=(4 * len(kinds), 7), squeeze=False)
    for col, kind in enumerate(kinds):
        for est in cfg.estimators:
            traces = [t for _, t in result["traces"].get((kind, est), [])]
            if not traces:
                continue
            its, rho_mean, rho_std = _mean_std_curves(traces, "rho")
            axes[0][col].plot(its, rho_mean, label=est)
            axes[0][col].fill_between(its, rho_mean - rho_std, rho_mean + rho_std, alpha=0.2)
            its, err_mean, err_std = _mean_std_curves(traces, "test_error")
            axes[1][col].plot(its, err_mean, label=est)
            axes[1][col].fill_between(its, err_mean - err_std, err_mean + err_std, alpha=0.2)
        axes[0][col].set_title(kind)
        axes[0][col].set_yscale("log")
        axes[1][col].set_yscale("log")
        axes[0][col].set_ylabel("subspace error rho(M, B)")
        axes[1][col].set_ylabel("test in-context error")
        axes[1][col].set_xlabel("iteration")
        axes[0][col].legend(fontsize=8)
    fig.tight_layout()
    outputs.append(_save(fig, Path(out_dir) / "figures" / "lowrank_recovery.png"))
    return outputs


def render_transfer(cfg, out_dir, result):
    outputs = []
    rows = result["rows"]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    labels = [r[0] for r in rows]
    means = [r[2] for r in rows]
    stds = [r[3] for r in rows]
    ax.bar(range(len(rows)), means, yerr=stds, color="tab:blue", alpha=0.8)
    ax.set_xticks(range(len(rows)), labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(f"error on {rows[0][1]}")
    ax.set_yscale("log")
    fig.tight_layout()
    outputs.append(_save(fig, Path(out_dir) / "figures" / "transfer_errors.png"))
    return outputs


def render_theory(cfg, out_dir, result):
    outputs = []
    checks = result["checks"]
    fig, ax = plt.subplots(figsize=(8, 0.3 * len(checks) + 1.5))
    names = [c.quantity for c in checks]
    ypos = np.arange(len(checks))
    for i, c in enumerate(checks):
        lo = c.lower if math.isfinite(c.lower) else None
        hi = c.upper if math.isfinite(c.upper) else None
        if lo is not None and hi is not None and lo > 0 and hi > 0:
            ax.plot([lo, hi], [i, i], color="lightgray", lw=5, solid_capstyle="butt")
        color = "tab:green" if c.passed else "tab:red"
        ax.plot([max(c.measured, 1e-300)], [i], "o", color=color, ms=4)
    ax.set_yticks(ypos, names, fontsize=6)
    ax.set_xscale("log")
    ax.set_xlabel("measured value inside its bracket")
    ax.invert_yaxis()
    fig.tight_layout()
    outputs.append(_save(fig, Path(out_dir) / "figures" / "bound_checks.png"))
    return outputs


def render_gradcheck(cfg, out_dir, result):
    outputs = []
    rows = result["rows"]
    fig, ax = plt.subplots(figsize=(6, 4))
    errs = [r[4] for r in rows]
    ax.hist(np.log10(np.maximum(errs, 1e-300)), bins=30, color="tab:blue", alpha=0.85)
    ax.axvline(math.log10(1e-5), color="tab:red", ls="--", label="tolerance")
    ax.set_xlabel("log10 relative error vs finite differences")
    ax.set_ylabel("instances")
    ax.legend()
    fig.tight_layout()
    outputs.append(_save(fig, Path(out_dir) / "figures" / "gradcheck_errors.png"))
    return outputs


RENDERERS = {
    "train": render_train,
    "sweep": render_sweep,
    "lowrank": render_lowrank,
    "transfer": render_transfer,
    "theory": render_theory,
    "gradcheck": render_gradcheck,
}


def render(cfg, out_dir, result):
    renderer = RENDERERS.get(cfg.experiment)
    if renderer is None:
        return []
    return renderer(cfg, out_dir, result)
