"""Ground-truth labelling functions and context construction.

A TaskClass describes a distribution over functions (its kind plus scale
parameters); draw_task samples a concrete TaskSpec from it. Full-rank kinds
depend on x through a random unit direction w; low-rank kinds depend on x
only through B^T x for a shared column-orthonormal basis B.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, DimensionMismatch
from . import linalg, sampling

AFFINE = "affine"
RELU = "relu"
COSINE = "cosine"
HILLS = "hills"
LOWRANK_AFFINE = "lowrank_affine"
LOWRANK_QUAD = "lowrank_quad"
LOWRANK_COS = "lowrank_cos"
LOWRANK_LIN = "lowrank_lin"

FULL_RANK_KINDS = (AFFINE, RELU, COSINE, HILLS)
LOWRANK_KINDS = (LOWRANK_AFFINE, LOWRANK_QUAD, LOWRANK_COS, LOWRANK_LIN)
LOWRANK_COS_FREQ = 4.0  # fixed frequency of the low-rank cosine class


@dataclass(frozen=True)
class TaskClass:
    """Distribution over tasks: a kind plus its scale parameter or basis."""

    kind: str
    L: float = 1.0            # scale bound for affine/relu, frequency for cosine
    nu: float = 0.0           # amplitude of the planar hills class
    basis: np.ndarray | None = None  # B for low-rank kinds

    def label(self):
        if self.kind == HILLS:
            return f"{self.kind}-nu{self.nu:g}"
        if self.kind in LOWRANK_KINDS:
            return self.kind
        return f"{self.kind}-L{self.L:g}"


@dataclass(frozen=True)
class TaskSpec:
    """A single sampled labelling function."""

    kind: str
    w: np.ndarray | None = None      # unit direction
    slope: float = 0.0               # affine slope l
    slope_pos: float = 0.0           # relu slope on w^T x > 0
    slope_neg: float = 0.0           # relu slope on w^T x < 0
    offset: float = 0.0              # additive b
    freq: float = 0.0                # cosine frequency
    amplitude: float = 0.0           # hills amplitude
    phase: float = 0.0               # hills phase
    a: np.ndarray | None = None      # low-rank coefficient (unit k-vector)
    basis: np.ndarray | None = None  # shared low-rank basis B


@dataclass(frozen=True)
class ContextBatch:
    """One in-context instance: n noisy labelled tokens plus m clean queries."""

    X: np.ndarray        # (n, d) covariates
    y: np.ndarray        # (n,) noisy labels f(x_i) + eps_i
    Q: np.ndarray        # (m, d) query covariates
    targets: np.ndarray  # (m,) clean labels f(q_j)
    task: TaskSpec
    noise: np.ndarray    # (n,) the realized eps_i

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def m(self):
        return self.Q.shape[0]


def draw_task(task_class, d, rng):
    """Sample a TaskSpec from ``task_class`` in ambient dimension d."""
    kind = task_class.kind
    if kind in (AFFINE, RELU, COSINE):
        w = sampling.sample_uniform_sphere(1, d, rng)[0]
        L = task_class.L
        if kind == AFFINE:
            l, b = rng.uniform(-L, L, 2)
            return TaskSpec(AFFINE, w=w, slope=l, offset=b)
        if kind == RELU:
            l1, l2, b = rng.uniform(-L, L, 3)
            return TaskSpec(RELU, w=w, slope_pos=l1, slope_neg=l2, offset=b)
        return TaskSpec(COSINE, w=w, freq=L)
    if kind == HILLS:
        if d != 2:
            raise DegenerateInput("hills tasks live on the circle (d = 2)")
        b = rng.uniform(-math.pi, math.pi)
        return TaskSpec(HILLS, amplitude=task_class.nu, phase=b)
    if kind in LOWRANK_KINDS:
        basis = task_class.basis
        if basis is None:
            raise DegenerateInput("low-rank task class needs a basis")
        if basis.shape[0] != d:
            raise DimensionMismatch(f"basis is {basis.shape[0]}-dimensional, ambient d={d}")
        a = sampling.sample_uniform_sphere(1, basis.shape[1], rng)[0]
        return TaskSpec(kind, a=a, basis=basis)
    raise DegenerateInput(f"unknown task kind {kind!r}")


def evaluate_task(task, x):
    """Evaluate ``task`` at a point (1-d) or batch of points (2-d rows)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    kind = task.kind
    if kind in (AFFINE, RELU, COSINE):
        if pts.shape[1] != task.w.size:
            raise DimensionMismatch(f"point dim {pts.shape[1]} != task dim {task.w.size}")
        t = pts @ task.w
        if kind == AFFINE:
            out = task.slope * t + task.offset
        elif kind == RELU:
            out = task.slope_pos * np.maximum(t, 0.0) + task.slope_neg * np.maximum(-t, 0.0) + task.offset
        else:
            out = np.cos(task.freq * t)
    elif kind == HILLS:
        if pts.shape[1] != 2:
            raise DegenerateInput("hills tasks live on the circle (d = 2)")
        theta = np.arctan2(pts[:, 1], pts[:, 0])
        out = task.amplitude * np.cos(theta - task.phase)
    elif kind in LOWRANK_KINDS:
        if pts.shape[1] != task.basis.shape[0]:
            raise DimensionMismatch(f"point dim {pts.shape[1]} != basis dim {task.basis.shape[0]}")
        t = pts @ (task.basis @ task.a)
        if kind == LOWRANK_AFFINE:
            out = t + 2.0
        elif kind == LOWRANK_QUAD:
            out = t**2
        elif kind == LOWRANK_COS:
            out = np.cos(LOWRANK_COS_FREQ * t)
        else:
            out = t
    else:
        raise DegenerateInput(f"unknown task kind {kind!r}")
    return float(out[0]) if single else out


def task_lipschitz(task):
    """Documented upper bound on the task's Lipschitz constant over the unit
    ball (exact for the smooth kinds, a bound for the quadratic)."""
    kind = task.kind
    if kind == AFFINE:
        return abs(task.slope)
    if kind == RELU:
        return max(abs(task.slope_pos), abs(task.slope_neg))
    if kind == COSINE:
        return abs(task.freq)
    if kind == HILLS:
        return abs(task.amplitude)
    norm_a = float(np.linalg.norm(task.a))
    if kind in (LOWRANK_AFFINE, LOWRANK_LIN):
        return norm_a
    if kind == LOWRANK_QUAD:
        return 2.0 * norm_a**2  # gradient 2(a^T B^T x) B a over the unit ball
    if kind == LOWRANK_COS:
        return LOWRANK_COS_FREQ * norm_a
    raise DegenerateInput(f"unknown task kind {kind!r}")


def default_num_queries(n):
    """floor(sqrt(n)) query tokens per context."""
    return max(1, math.isqrt(n))


def make_context(task, dist, n, m, sigma, rng):
    """Draw one ContextBatch: n noisy tokens and m clean-target queries,
    all covariates iid from ``dist``."""
    if n < 1 or m < 1:
        raise DegenerateInput("need n >= 1 and m >= 1")
    pts = sampling.sample_covariates(dist, n + m, rng)
    X, Q = pts[:n], pts[n:]
    noise = np.asarray(sampling.sample_noise(sigma, rng, size=n), dtype=float)
    y = evaluate_task(task, X) + noise
    targets = evaluate_task(task, Q)
    return ContextBatch(X=X, y=y, Q=Q, targets=targets, task=task, noise=noise)
