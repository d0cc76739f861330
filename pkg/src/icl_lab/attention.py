"""Attention estimators, the per-context squared loss, and its gradients.

Three estimators over a context (X, y) at a query q:

  softmax  sum_i y_i softmax_i(x_i^T M q)   -- a kernel-weighted average
  linear   sum_i y_i (x_i^T M q)
  window   uniform average of y_i over ||x_i - q|| < 1/sqrt(w)

The key-query matrix is either held directly (mode "direct") or as a tied
factor A with M = A^T A, which keeps M symmetric PSD throughout training.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateInput, DimensionMismatch, PreconditionViolated
from .tasks import ContextBatch, default_num_queries, draw_task, make_context

DIRECT = "direct"
TIED = "tied"
SOFTMAX = "softmax"
LINEAR = "linear"
WINDOW = "window"

LOGIT_CLIP = 700.0


class ClipCounter:
    """Counts logit-clip events so the overflow guard is never silent."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


clip_events = ClipCounter()


@dataclass(frozen=True)
class AttentionParams:
    """Estimator kind plus its key-query parameterization.

    ``matrix`` is M itself in direct mode, or the tied factor A (M = A^T A).
    The window estimator ignores ``matrix`` and uses the scalar ``w`` > 0.
    """

    mode: str = DIRECT
    matrix: np.ndarray | None = None
    estimator: str = SOFTMAX
    w: float | None = None

    def M(self):
        if self.estimator == WINDOW:
            raise PreconditionViolated("window estimator has no key-query matrix")
        if self.mode == TIED:
            return self.matrix.T @ self.matrix
        return self.matrix

    def with_matrix(self, matrix):
        return replace(self, matrix=matrix)


def direct_params(M, estimator=SOFTMAX):
    return AttentionParams(mode=DIRECT, matrix=np.asarray(M, dtype=float), estimator=estimator)


def tied_params(A, estimator=SOFTMAX):
    return AttentionParams(mode=TIED, matrix=np.asarray(A, dtype=float), estimator=estimator)


def window_params(w):
    if w <= 0:
        raise PreconditionViolated("window estimator needs w > 0")
    return AttentionParams(mode=DIRECT, matrix=None, estimator=WINDOW, w=float(w))


@dataclass(frozen=True)
class LossEstimate:
    """Monte Carlo loss with its standard error and optional split into the
    clean-label (bias) part and the sigma^2 * sum s_i^2 noise part."""

    mean: float
    stderr: float
    num_contexts: int
    bias_part: float | None = None
    noise_part: float | None = None


@dataclass(frozen=True)
class WindowPrediction:
    value: float
    fallback: bool  # True when the window was empty and the nearest token was used


def _softmax_rows(logits):
    """Row-wise softmax with max-logit subtraction; clips |logit| > LOGIT_CLIP
    as a last-resort overflow guard and counts any clip event."""
    logits = np.asarray(logits, dtype=float)
    if np.any(np.abs(logits) > LOGIT_CLIP):
        clip_events.count += 1
        logits = np.clip(logits, -LOGIT_CLIP, LOGIT_CLIP)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_weights(M, X, q):
    """Softmax attention weights of query q over the rows of X: nonnegative,
    summing to one."""
    logits = X @ (M @ q)
    return _softmax_rows(logits)


def predict_softmax(M, X, y, q):
    """Convex combination of the labels with softmax weights."""
    return float(softmax_weights(M, X, q) @ y)


def predict_linear(M, X, y, q):
    """Linear-attention estimate: sum_i y_i x_i^T M q. Linear in both M and y."""
    return float(y @ (X @ (M @ q)))


def predict_window(w, X, y, q):
    """Uniform average of labels within distance 1/sqrt(w) of the query.

    An empty window falls back to the single nearest token's label (the
    narrow-window limit of softmax attention) with the fallback flag set.
    """
    if w <= 0:
        raise PreconditionViolated("window estimator needs w > 0")
    d2 = np.sum((X - q) ** 2, axis=1)
    inside = d2 < 1.0 / w
    if not np.any(inside):
        return WindowPrediction(float(y[np.argmin(d2)]), True)
    return WindowPrediction(float(np.mean(y[inside])), False)


def _predictions(params, X, y, Q):
    """Predictions for every query row of Q, shape (m,)."""
    if params.estimator == WINDOW:
        return np.array([predict_window(params.w, X, y, q).value for q in Q])
    M = params.M()
    logits = X @ M @ Q.T  # (n, m)
    if params.estimator == SOFTMAX:
        return _softmax_rows(logits.T) @ y
    if params.estimator == LINEAR:
        return logits.T @ y
    raise DegenerateInput(f"unknown estimator {params.estimator!r}")


def context_sq_loss(params, batch):
    """Mean over the queries of (prediction - clean target)^2."""
    preds = _predictions(params, batch.X, batch.y, batch.Q)
    return float(np.mean((preds - batch.targets) ** 2))


def grad_context_softmax(M, batch):
    """Gradient of context_sq_loss w.r.t. M for the softmax estimator.

    Per query with weights s, prediction p and target t this is
    2 (p - t) sum_i s_i (y_i - p) x_i q^T, averaged over the queries so
    learning rates do not depend on the query count.
    """
    X, y, Q, t = batch.X, batch.y, batch.Q, batch.targets
    logits = Q @ M.T @ X.T  # (m, n): row j holds x_i^T M q_j
    s = _softmax_rows(logits)
    p = s @ y
    coeff = s * (y[None, :] - p[:, None]) * (2.0 * (p - t))[:, None]  # (m, n)
    return (X.T @ coeff.T @ Q) / Q.shape[0]


def grad_context_linear(M, batch):
    """Gradient of context_sq_loss w.r.t. M for the linear estimator:
    per query 2 (p - t) sum_i y_i x_i q^T, averaged over queries."""
    X, y, Q, t = batch.X, batch.y, batch.Q, batch.targets
    p = (X @ M @ Q.T).T @ y
    yx = X.T @ y  # sum_i y_i x_i
    coeff = 2.0 * (p - t)
    return np.outer(yx, coeff @ Q) / Q.shape[0]


def grad_context(params, batch):
    """Gradient of context_sq_loss w.r.t. the trained matrix (M directly, or
    the tied factor A via the chain rule through M = A^T A)."""
    if params.estimator == SOFTMAX:
        grad_m = grad_context_softmax
    elif params.estimator == LINEAR:
        grad_m = grad_context_linear
    else:
        raise PreconditionViolated("window estimator is not trainable")
    if params.mode == DIRECT:
        return grad_m(params.matrix, batch)
    a = params.matrix
    g = grad_m(a.T @ a, batch)
    return a @ (g + g.T)


def grad_context_tied(A, batch):
    """Tied-factor softmax gradient: A (G + G^T) with G the gradient in M."""
    g = grad_context_softmax(A.T @ A, batch)
    return A @ (g + g.T)


def finite_diff_grad(loss_fn, P, step=1e-5):
    """Entrywise central-difference gradient of ``loss_fn`` at matrix P.

    Test oracle only; O(P.size) evaluations.
    """
    if step <= 0:
        raise PreconditionViolated("step must be positive")
    P = np.asarray(P, dtype=float)
    grad = np.zeros_like(P)
    it = np.nditer(P, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = P.copy()
        plus[idx] += step
        minus = P.copy()
        minus[idx] -= step
        grad[idx] = (loss_fn(plus) - loss_fn(minus)) / (2.0 * step)
    return grad


def _context_parts(params, batch, sigma):
    """(noisy loss, clean-label loss, noise factor term) for one context."""
    full = context_sq_loss(params, batch)
    clean = batch.y - batch.noise
    if params.estimator != SOFTMAX:
        raise PreconditionViolated("loss decomposition is defined for the softmax estimator")
    M = params.M()
    s = _softmax_rows((batch.Q @ M.T @ batch.X.T))  # (m, n)
    bias = float(np.mean((s @ clean - batch.targets) ** 2))
    noise = float(sigma**2 * np.mean(np.sum(s**2, axis=1)))
    return full, bias, noise


def noise_factor(M, X, q):
    """sum_i s_i^2 for softmax weights; the per-context noise multiplier."""
    s = softmax_weights(M, X, q)
    return float(np.sum(s**2))


def _mc_mean_stderr(values):
    values = np.asarray(values, dtype=float)
    mean = float(values.mean())
    if values.size < 2:
        return mean, 0.0
    stderr = float(values.std(ddof=1) / np.sqrt(values.size))
    return mean, stderr


def mc_loss(params, task_class, dist, n, m, sigma, num_contexts, rng, decompose=False):
    """Monte Carlo estimate of the population in-context loss.

    Fresh task and context per trial, each on its own derived substream so
    the estimate is independent of evaluation order. With ``decompose`` the
    softmax loss is also split into bias and noise parts measured on the
    same contexts.
    """
    if num_contexts < 2:
        raise PreconditionViolated("need num_contexts >= 2")
    losses = np.empty(num_contexts)
    biases = np.empty(num_contexts) if decompose else None
    noises = np.empty(num_contexts) if decompose else None
    for i in range(num_contexts):
        sub = rng.derive(i)
        task = draw_task(task_class, dist.d, sub)
        batch = make_context(task, dist, n, m, sigma, sub)
        if decompose:
            losses[i], biases[i], noises[i] = _context_parts(params, batch, sigma)
        else:
            losses[i] = context_sq_loss(params, batch)
    mean, stderr = _mc_mean_stderr(losses)
    if not decompose:
        return LossEstimate(mean, stderr, num_contexts)
    return LossEstimate(mean, stderr, num_contexts,
                        bias_part=float(biases.mean()), noise_part=float(noises.mean()))


def mc_loss_decomposed(params, task_class, dist, n, m, sigma, num_contexts, rng):
    """(bias, noise) Monte Carlo means: bias uses clean labels, noise is the
    exact per-context sigma^2 sum s_i^2. Their sum estimates the full loss."""
    est = mc_loss(params, task_class, dist, n, m, sigma, num_contexts, rng, decompose=True)
    return est.bias_part, est.noise_part
