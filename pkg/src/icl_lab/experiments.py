"""Experiment runners behind the CLI: expansion of a config into runs,
CSV/manifest emission, and the pass/fail checks each subcommand reports."""

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, attention, sampling, tasks, theory, training
from .errors import NonFiniteLoss
from .sampling import RngStream

TRACE_HEADER = ("iteration", "norm_M", "test_error", "rho")
SWEEP_HEADER = ("w", "loss_mean", "loss_stderr", "bias", "noise")
BOUNDS_HEADER = ("quantity", "measured", "lower", "upper", "pass")
TRANSFER_HEADER = ("pretrain_class", "eval_class", "error_mean", "error_std")
GRADCHECK_HEADER = ("instance", "mode", "d", "n", "rel_err", "pass")

GRADCHECK_TOL = 1e-5
GRADCHECK_STEP = 1e-5


def fmt(value):
    """Shortest round-trip representation for CSV cells."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def config_hash(cfg):
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def stable_id(*parts):
    """Process-independent 64-bit id for a tuple of primitives (built-in
    hash() is salted per process and would break replay determinism)."""
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def label_stream(seed, label):
    """Stable per-(seed, label) stream: the label hashes to the stream id."""
    return RngStream(seed, stable_id(label))


def make_task_class(kind, L=1.0, nu=1.5, basis=None):
    if kind in ("affine", "relu", "cosine"):
        return tasks.TaskClass(kind, L=L)
    if kind == "hills":
        return tasks.TaskClass(tasks.HILLS, nu=nu)
    if kind in tasks.LOWRANK_KINDS:
        return tasks.TaskClass(kind, basis=basis)
    raise ValueError(f"unknown task kind {kind!r}")


def make_covariate_dist(kind, d, rng):
    if kind == "uniform":
        return sampling.uniform_sphere(d)
    if kind == "anisotropic":
        return sampling.default_anisotropic(d)
    if kind == "shaped":
        return sampling.random_shaped_sphere(d, rng)
    raise ValueError(f"unknown covariate kind {kind!r}")


@dataclass(frozen=True)
class TrainCell:
    """One (task class x covariates x varied knob x estimator) training run.

    ``stream_label`` deliberately excludes the varied knob: cells that differ
    only in L, sigma, or n share their underlying task/covariate/noise draws
    (common random numbers), so per-seed comparisons across the ablation are
    paired rather than blurred by independent sampling noise.
    """

    label: str
    task_kind: str
    covariates: str
    L: float
    sigma: float
    n: int
    num_queries: int | None
    estimator: str

    @property
    def stream_label(self):
        return f"{self.task_kind}-{self.covariates}-{self.estimator}"


def expand_train_cells(cfg):
    """Union-style expansion: each ablation list varies one knob with the
    others at their base values (one knob per plot, as in the figures)."""
    cells = []

    def add(kind, cov, est, L, sigma, n, num_queries, tag):
        suffix = "" if est == "softmax" else f"-{est}"
        label = f"{kind}-{cov}{suffix}-{tag}"
        cells.append(TrainCell(label, kind, cov, L, sigma, n, num_queries, est))

    varied = [name for name in ("L_values", "sigma_values", "n_values")
              if getattr(cfg, name) is not None]
    for kind in cfg.task_kinds:
        for cov in cfg.covariates:
            for est in cfg.estimators:
                if not varied:
                    add(kind, cov, est, cfg.L, cfg.sigma, cfg.n, cfg.num_queries,
                        f"L{cfg.L:g}")
                if cfg.L_values is not None:
                    for L in cfg.L_values:
                        add(kind, cov, est, L, cfg.sigma, cfg.n, cfg.num_queries, f"L{L:g}")
                if cfg.sigma_values is not None:
                    for sig in cfg.sigma_values:
                        add(kind, cov, est, cfg.L, sig, cfg.n, cfg.num_queries, f"sigma{sig:g}")
                if cfg.n_values is not None:
                    for n in cfg.n_values:
                        # a single query per context when ablating n, so the
                        # gradient signal per round is comparable across n
                        nq = 1 if cfg.num_queries is None else cfg.num_queries
                        add(kind, cov, est, cfg.L, cfg.sigma, int(n), nq, f"n{n}")
    return cells


def training_config_for(cfg, cell, rng):
    dist = make_covariate_dist(cell.covariates, cfg.d, rng.derive(0xD157))
    task_class = make_task_class(cell.task_kind, L=cell.L, nu=cfg.nu)
    lr = cfg.lr
    if cell.estimator == "linear" and cfg.lr_linear is not None:
        lr = cfg.lr_linear
    return training.TrainingConfig(
        task_class=task_class, dist=dist, n=cell.n, sigma=cell.sigma,
        iterations=cfg.iterations, num_queries=cell.num_queries,
        estimator=cell.estimator, mode=cfg.mode, lr=lr, decay=cfg.decay,
        eval_every=cfg.eval_every, eval_tasks=cfg.eval_tasks)


def run_train_cell(cfg, cell, seed):
    rng = label_stream(seed, cell.stream_label)
    tcfg = training_config_for(cfg, cell, rng)
    return training.pretrain(tcfg, rng.derive(1))


def trace_rows(trace):
    return [(c.iteration, c.norm_m, c.test_error, c.rho) for c in trace.checkpoints]


def _run_pairs(worker, pairs, jobs):
    if jobs <= 1:
        return [worker(*p) for p in pairs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_POOL_WORKER_WRAPPER, [(worker, p) for p in pairs]))


def _POOL_WORKER_WRAPPER(item):
    worker, args = item
    return worker(*args)


def aggregate_traces(traces):
    """Per-checkpoint mean/std across seeds (all traces share the schedule)."""
    its = [c.iteration for c in traces[0].checkpoints]
    rows = []
    for idx, it in enumerate(its):
        norms = [t.checkpoints[idx].norm_m for t in traces]
        errs = [t.checkpoints[idx].test_error for t in traces]
        rows.append((it, float(np.mean(norms)), float(np.std(norms)),
                     float(np.mean(errs)), float(np.std(errs))))
    return rows


# ---------------------------------------------------------------- train --


def run_train(cfg, out_dir, jobs=1):
    cells = expand_train_cells(cfg)
    pairs = [(cfg, cell, seed) for cell in cells for seed in cfg.seeds]
    results = _run_pairs(run_train_cell, pairs, jobs)
    by_cell = {}
    for (cfg_, cell, seed), trace in zip(pairs, results):
        by_cell.setdefault(cell.label, []).append((seed, trace))

    outputs = []
    summary_rows = []
    for cell in cells:
        seeded = by_cell[cell.label]
        for seed, trace in seeded:
            outputs.append(write_csv(Path(out_dir) / "cells" / cell.label / f"seed{seed}" / "trace.csv",
                                     TRACE_HEADER, trace_rows(trace)))
        traces = [t for _, t in seeded]
        outputs.append(write_csv(Path(out_dir) / "cells" / cell.label / "aggregate.csv",
                                 ("iteration", "norm_M_mean", "norm_M_std",
                                  "test_error_mean", "test_error_std"),
                                 aggregate_traces(traces)))
        finals_norm = [t.final.norm_m for t in traces]
        finals_err = [t.final.test_error for t in traces]
        summary_rows.append((cell.label, cell.task_kind, cell.covariates, cell.estimator,
                             cell.L, cell.sigma, cell.n, len(traces),
                             float(np.mean(finals_norm)), float(np.std(finals_norm)),
                             float(np.mean(finals_err)), float(np.std(finals_err))))
    outputs.append(write_csv(Path(out_dir) / "summary.csv",
                             ("cell", "task", "covariates", "estimator", "L", "sigma", "n",
                              "seeds", "final_norm_M_mean", "final_norm_M_std",
                              "final_test_error_mean", "final_test_error_std"),
                             summary_rows))
    checks = all(math.isfinite(row[8]) and math.isfinite(row[10]) for row in summary_rows)
    return {"outputs": outputs, "by_cell": by_cell, "cells": cells,
            "summary": summary_rows, "checks_passed": checks}


# ---------------------------------------------------------------- sweep --


def run_sweep_for_seed(cfg, seed):
    grid = np.geomspace(cfg.w_min, cfg.w_max, cfg.w_points)
    n_values = cfg.n_values or [cfg.n]
    task_class = make_task_class(cfg.task_kinds[0], L=cfg.L, nu=cfg.nu)
    sweeps = {}
    for n in n_values:
        rng = label_stream(seed, f"sweep-n{n}")
        dist = make_covariate_dist(cfg.covariates[0], cfg.d, rng.derive(0xD157))
        sweeps[int(n)] = theory.bandwidth_sweep(task_class, dist, int(n), cfg.sigma, grid,
                                                cfg.contexts_per_point, rng.derive(1))
    return sweeps


def run_sweep(cfg, out_dir, jobs=1):
    results = _run_pairs(run_sweep_for_seed, [(cfg, s) for s in cfg.seeds], jobs)
    outputs = []
    summary_rows = []
    slopes = []
    per_seed = dict(zip(cfg.seeds, results))
    for seed, sweeps in per_seed.items():
        lams, stars = [], []
        for n, sweep in sweeps.items():
            rows = list(zip(sweep.w_grid, sweep.loss_mean, sweep.loss_stderr,
                            sweep.bias, sweep.noise))
            outputs.append(write_csv(Path(out_dir) / f"n{n}" / f"seed{seed}" / "sweep.csv",
                                     SWEEP_HEADER, rows))
            summary_rows.append((seed, n, sweep.snr_scale, sweep.w_star, sweep.boundary))
            lams.append(sweep.snr_scale)
            stars.append(sweep.w_star)
        if len(lams) >= 3:
            slopes.append((seed, theory.exponent_fit(lams, stars)))
    outputs.append(write_csv(Path(out_dir) / "summary.csv",
                             ("seed", "n", "snr_scale", "w_star", "boundary"), summary_rows))
    if slopes:
        outputs.append(write_csv(Path(out_dir) / "exponent_fit.csv",
                                 ("seed", "slope"), slopes))
    checks = all(not row[4] for row in summary_rows)
    return {"outputs": outputs, "per_seed": per_seed, "summary": summary_rows,
            "slopes": slopes, "checks_passed": checks}


# -------------------------------------------------------------- lowrank --


def run_lowrank_cell(cfg, kind, estimator, seed):
    setup = label_stream(seed, "lowrank-setup")
    basis, basis_perp = sampling.make_random_subspace(cfg.d, cfg.k, setup.derive(1))
    if cfg.covariates[0] == "shaped":
        dist = sampling.random_shaped_sphere(cfg.d, setup.derive(2))
    elif cfg.covariates[0] == "uniform":
        dist = sampling.uniform_sphere(cfg.d)
    else:
        dist = sampling.lowrank_latent(basis, basis_perp, cfg.c_u, cfg.c_v)
    lr = cfg.lr_linear if (estimator == "linear" and cfg.lr_linear is not None) else cfg.lr
    tcfg = training.TrainingConfig(
        task_class=tasks.TaskClass(kind, basis=basis), dist=dist, n=cfg.n,
        sigma=cfg.sigma, iterations=cfg.iterations, num_queries=cfg.num_queries,
        estimator=estimator, mode=cfg.mode, lr=lr, decay=cfg.decay,
        eval_every=cfg.eval_every, eval_tasks=cfg.eval_tasks, subspace_basis=basis)
    return training.pretrain(tcfg, label_stream(seed, f"lowrank-{kind}-{estimator}"))


def run_lowrank(cfg, out_dir, jobs=1):
    combos = [(kind, est) for kind in cfg.lowrank_kinds for est in cfg.estimators]
    pairs = [(cfg, kind, est, seed) for kind, est in combos for seed in cfg.seeds]
    results = _run_pairs(run_lowrank_cell, pairs, jobs)
    outputs = []
    summary_rows = []
    traces = {}
    for (cfg_, kind, est, seed), trace in zip(pairs, results):
        traces.setdefault((kind, est), []).append((seed, trace))
        outputs.append(write_csv(Path(out_dir) / "cells" / f"{kind}-{est}" / f"seed{seed}" / "trace.csv",
                                 TRACE_HEADER, trace_rows(trace)))
    for (kind, est), seeded in traces.items():
        rhos = [t.final.rho for _, t in seeded]
        errs = [t.final.test_error for _, t in seeded]
        finite = [r for r in rhos if math.isfinite(r)]
        recovered = sum(1 for r in rhos if r < 0.2)
        summary_rows.append((kind, est, len(seeded), recovered,
                             float(np.mean(finite)) if finite else math.inf,
                             float(np.mean(errs)), float(np.std(errs))))
    outputs.append(write_csv(Path(out_dir) / "summary.csv",
                             ("task", "estimator", "seeds", "seeds_rho_below_0.2",
                              "final_rho_mean_finite", "final_test_error_mean",
                              "final_test_error_std"),
                             summary_rows))
    checks = True
    for kind, est, nseeds, recovered, *_ in summary_rows:
        if est == "softmax" and recovered < math.ceil(0.8 * nseeds):
            checks = False
    return {"outputs": outputs, "traces": traces, "summary": summary_rows,
            "checks_passed": checks}


# ------------------------------------------------------------- transfer --


def run_transfer_model(cfg, spec, seed):
    label = f"{spec['kind']}-L{spec.get('L', cfg.L):g}"
    rng = label_stream(seed, f"transfer-{label}")
    dist = make_covariate_dist(cfg.covariates[0], cfg.d, rng.derive(0xD157))
    tcfg = training.TrainingConfig(
        task_class=make_task_class(spec["kind"], L=spec.get("L", cfg.L), nu=cfg.nu),
        dist=dist, n=cfg.n, sigma=cfg.sigma, iterations=cfg.iterations,
        num_queries=cfg.num_queries, estimator="softmax", mode=cfg.mode,
        lr=cfg.lr, decay=cfg.decay, eval_every=cfg.eval_every, eval_tasks=cfg.eval_tasks)
    trace = training.pretrain(tcfg, rng.derive(1))
    eval_spec = cfg.eval_class
    eval_class = make_task_class(eval_spec["kind"], L=eval_spec.get("L", cfg.L), nu=cfg.nu)
    err = training.evaluate_icl(trace.final_params, eval_class, dist, cfg.n, cfg.sigma,
                                cfg.final_eval_tasks, rng.derive(2))
    return label, trace, err


def run_transfer(cfg, out_dir, jobs=1):
    if not cfg.pretrain_classes or cfg.eval_class is None:
        raise ValueError("transfer experiment needs pretrain_classes and eval_class")
    pairs = [(cfg, spec, seed) for spec in cfg.pretrain_classes for seed in cfg.seeds]
    results = _run_pairs(run_transfer_model, pairs, jobs)
    outputs = []
    errors = {}
    for (cfg_, spec, seed), (label, trace, err) in zip(pairs, results):
        errors.setdefault(label, []).append(err)
        outputs.append(write_csv(Path(out_dir) / "models" / label / f"seed{seed}" / "trace.csv",
                                 TRACE_HEADER, trace_rows(trace)))
    eval_label = f"{cfg.eval_class['kind']}-L{cfg.eval_class.get('L', cfg.L):g}"
    rows = [(label, eval_label, float(np.mean(errs)), float(np.std(errs)))
            for label, errs in errors.items()]
    outputs.append(write_csv(Path(out_dir) / "transfer.csv", TRANSFER_HEADER, rows))
    checks = all(math.isfinite(r[2]) for r in rows)
    return {"outputs": outputs, "errors": errors, "rows": rows, "checks_passed": checks}


# --------------------------------------------------------------- theory --

CAP_DIMS = (3, 5, 8)
CAP_EPS = (0.1, 0.3, 0.5, 1.0)
GAMMA_DIMS = (6, 8, 10)
GAMMA_ALPHAS = (1.0, 1.5, 2.0)
G0_RADII = (4.0, 8.0, 16.0)


def theory_bound_checks(seed=0, cap_samples=20000, g0_n=4096, g0_trials=30,
                        rearrangement_instances=100):
    """The full bound suite as a list of BoundChecks."""
    rng = RngStream(seed)
    checks = []
    for d in CAP_DIMS:
        for eps in CAP_EPS:
            checks.append(theory.cap_measure_check(d, eps, cap_samples,
                                                   rng.derive(stable_id("cap", d, eps))))
    # exact hat-box values on S^2: measure = eps/2
    for eps in CAP_EPS:
        frac = theory.cap_measure_mc(3, eps, cap_samples, rng.derive(stable_id("hatbox", eps)))
        se = math.sqrt(max(frac * (1 - frac), 1.0 / cap_samples) / cap_samples)
        checks.append(theory.BoundCheck(f"cap_exact_s2(eps={eps:g})", frac,
                                        eps / 2 - 4 * se, eps / 2 + 4 * se,
                                        eps / 2 - 4 * se <= frac <= eps / 2 + 4 * se))
    for d in GAMMA_DIMS:
        for alpha in GAMMA_ALPHAS:
            thr = theory.discrete_gamma_regime_threshold(d, alpha)
            for m in (2, max(2, int(thr) - 1), int(thr) + 1, 50):
                checks.append(theory.discrete_gamma_bounds(d, alpha, m))
    for r in G0_RADII:
        checks.append(theory.check_kernel_moment_concentration(3, g0_n, r, g0_trials,
                                                               rng.derive(stable_id("g0", r))))
    gaps = []
    for i in range(rearrangement_instances):
        sub = rng.derive(0xAAAA + i)
        size = int(sub.integers(2, 21))
        a = np.sort(sub.uniform(0.05, 4.0, size))
        b = np.sort(sub.uniform(0.05, 4.0, size))
        gaps.append(theory.rearrangement_check(a, b).measured)
    checks.append(theory.BoundCheck(f"rearrangement_min_gap({rearrangement_instances})",
                                    float(min(gaps)), 0.0, math.inf,
                                    bool(min(gaps) > 0.0), strict=True))
    return checks


def run_theory(cfg, out_dir, jobs=1):
    checks = theory_bound_checks(seed=cfg.seeds[0])
    rows = [(c.quantity, c.measured, c.lower, c.upper, c.passed) for c in checks]
    outputs = [write_csv(Path(out_dir) / "bounds.csv", BOUNDS_HEADER, rows)]
    return {"outputs": outputs, "checks": checks, "rows": rows,
            "checks_passed": all(c.passed for c in checks)}


# ------------------------------------------------------------ gradcheck --


def gradient_check_rows(num_instances=100, modes=("direct", "tied"), seed=0,
                        step=GRADCHECK_STEP, tol=GRADCHECK_TOL):
    """Analytic gradients vs the central finite-difference oracle on random
    small instances (d <= 5, n <= 8); one row per instance."""
    rng = RngStream(seed, 0x6AD)
    rows = []
    for mode in modes:
        builder = attention.direct_params if mode == "direct" else attention.tied_params
        for i in range(num_instances):
            sub = rng.derive(stable_id(mode, i))
            d = int(sub.integers(2, 6))
            n = int(sub.integers(2, 9))
            m = int(sub.integers(1, 4))
            task = tasks.draw_task(tasks.TaskClass(tasks.RELU, L=2.0), d, sub)
            batch = tasks.make_context(task, sampling.uniform_sphere(d), n, m, 0.1, sub)
            mat = sub.standard_normal((d, d))
            analytic = attention.grad_context(builder(mat), batch)
            fd = attention.finite_diff_grad(
                lambda p: attention.context_sq_loss(builder(p), batch), mat, step)
            rel = float(np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-12))
            rows.append((i, mode, d, n, rel, bool(rel < tol)))
    return rows


def gradient_check(num_instances=100, modes=("direct", "tied"), seed=0,
                   step=GRADCHECK_STEP, tol=GRADCHECK_TOL):
    """Failures from gradient_check_rows (empty list = all instances pass)."""
    return [r for r in gradient_check_rows(num_instances, modes, seed, step, tol) if not r[-1]]


def run_gradcheck(cfg, out_dir, jobs=1):
    # 50 instances per parameterization = 100 comparisons total
    rows = gradient_check_rows(50, ("direct", "tied"), cfg.seeds[0])
    outputs = [write_csv(Path(out_dir) / "gradcheck.csv", GRADCHECK_HEADER, rows)]
    return {"outputs": outputs, "rows": rows,
            "checks_passed": all(r[-1] for r in rows)}


# ------------------------------------------------------------- … runner --

RUNNERS = {
    "train": run_train,
    "sweep": run_sweep,
    "lowrank": run_lowrank,
    "transfer": run_transfer,
    "theory": run_theory,
    "gradcheck": run_gradcheck,
}


def resolve_out_dir(cfg, cli_out=None):
    if cli_out:
        return Path(cli_out)
    if cfg.out_dir:
        return Path(cfg.out_dir)
    env = os.environ.get("ICL_LAB_OUT")
    base = Path(env) if env else Path("runs")
    name = cfg.preset or f"{cfg.experiment}-{config_hash(cfg)[:12]}"
    return base / name


def write_manifest(cfg, out_dir, outputs, status, checks_passed):
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "seeds": list(cfg.seeds),
        "build": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "status": status,
        "checks_passed": checks_passed,
        "outputs": sorted(str(Path(p).relative_to(out_dir)) for p in outputs),
    }
    path = Path(out_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest


def run_experiment(cfg, out_dir=None, jobs=1, render_figures=True):
    """Run one experiment end to end; returns (exit_code, result dict)."""
    out = resolve_out_dir(cfg, out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runner = RUNNERS[cfg.experiment]
    try:
        result = runner(cfg, out, jobs=jobs)
    except NonFiniteLoss as exc:
        write_manifest(cfg, out, [], status="partial", checks_passed=False)
        return 1, {"error": str(exc)}
    if render_figures:
        from . import figures
        try:
            result.setdefault("outputs", []).extend(figures.render(cfg, out, result))
        except Exception as exc:  # figures are best-effort reporting
            result["figure_error"] = str(exc)
    write_manifest(cfg, out, result.get("outputs", []), status="complete",
                   checks_passed=result.get("checks_passed", True))
    return (0 if result.get("checks_passed", True) else 1), result
