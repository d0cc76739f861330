"""Adam, the one-task-per-round pretraining loop, and evaluation metrics."""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonFiniteLoss, PreconditionViolated
from . import attention, linalg
from .tasks import default_num_queries, draw_task, make_context


@dataclass(frozen=True)
class AdamState:
    """Adam with bias correction and optional per-step exponential lr decay."""

    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 1.0

    @property
    def lr_t(self):
        return self.lr * self.decay**self.t


def adam_init(params, lr=1e-2, decay=1.0, beta1=0.9, beta2=0.999, eps=1e-8):
    params = np.asarray(params, dtype=float)
    return AdamState(params=params, m=np.zeros_like(params), v=np.zeros_like(params),
                     lr=lr, beta1=beta1, beta2=beta2, eps=eps, decay=decay)


def adam_step(state, grad):
    """One Adam update; returns the new state."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.params.shape:
        raise PreconditionViolated("gradient shape does not match parameters")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad**2
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    lr_t = state.lr * state.decay**t
    params = state.params - lr_t * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, params=params, m=m, v=v, t=t)


@dataclass(frozen=True)
class TrainingConfig:
    """Everything pretrain() needs for one run."""

    task_class: object
    dist: object
    n: int
    sigma: float
    iterations: int
    num_queries: int | None = None     # None -> floor(sqrt(n))
    estimator: str = attention.SOFTMAX
    mode: str = attention.TIED
    lr: float = 0.1
    decay: float = 0.999
    init_scale: float = 1e-3
    eval_every: int = 100
    eval_tasks: int = 100
    subspace_basis: np.ndarray | None = None  # when set, track rho(M, B)


@dataclass(frozen=True)
class Checkpoint:
    iteration: int
    norm_m: float
    test_error: float
    rho: float | None
    train_loss: float  # running mean since the previous checkpoint


@dataclass
class TrainTrace:
    """Append-only per-checkpoint history of one pretraining run."""

    checkpoints: list = field(default_factory=list)
    final_params: attention.AttentionParams | None = None

    def append(self, ckpt):
        if self.checkpoints and ckpt.iteration <= self.checkpoints[-1].iteration:
            raise PreconditionViolated("checkpoint iterations must strictly increase")
        self.checkpoints.append(ckpt)

    @property
    def final(self):
        return self.checkpoints[-1]

    def column(self, name):
        return np.array([getattr(c, name) if getattr(c, name) is not None else np.nan
                         for c in self.checkpoints])


def subspace_error(M, B):
    """rho(M, B) = ||Bperp^T M Bperp||_2 / sigma_min(B^T M B).

    Zero exactly when M acts only on col(B); returns +inf when the B-block
    is numerically singular (early training, M ~ 0) so traces stay plottable.
    """
    B = linalg.as_matrix(B, "B")
    M = linalg.as_matrix(M, "M")
    b_perp = linalg.orthonormal_complement(B)
    top = linalg.spectral_norm(b_perp.T @ M @ b_perp) if b_perp.shape[1] else 0.0
    smin = linalg.min_singular_value(B.T @ M @ B)
    if smin <= 1e-12:
        return math.inf
    return top / smin


def evaluate_icl(params, task_class, dist, n, sigma, num_tasks, rng, num_queries=None):
    """Mean context squared loss over fresh tasks and contexts."""
    if num_tasks < 1:
        raise PreconditionViolated("need num_tasks >= 1")
    m = default_num_queries(n) if num_queries is None else num_queries
    total = 0.0
    for i in range(num_tasks):
        sub = rng.derive(i)
        task = draw_task(task_class, dist.d, sub)
        batch = make_context(task, dist, n, m, sigma, sub)
        total += attention.context_sq_loss(params, batch)
    return total / num_tasks


def init_params(config, d):
    scale = config.init_scale
    if config.mode == attention.TIED:
        return attention.tied_params(scale * np.eye(d), estimator=config.estimator)
    return attention.direct_params(scale * np.eye(d), estimator=config.estimator)


def pretrain(config, rng):
    """Run the pretraining loop: one fresh task and context per iteration,
    a gradient step with Adam, and a metrics checkpoint every ``eval_every``
    rounds (always including iteration 0 and the final iteration).

    Aborts with NonFiniteLoss (carrying the trace so far) if the loss or
    gradient stops being finite. Strictly sequential, so a fixed (config,
    seed) pair reproduces the trace bit for bit.
    """
    d = config.dist.d
    m = config.num_queries if config.num_queries is not None else default_num_queries(config.n)
    params = init_params(config, d)
    state = adam_init(params.matrix, lr=config.lr, decay=config.decay)
    trace = TrainTrace()
    eval_rng = rng.derive(0xE7A1)
    train_rng = rng.derive(0x7EA1)

    def checkpoint(iteration, running_loss):
        current = params.with_matrix(state.params)
        norm_m = linalg.spectral_norm(current.M())
        test_err = evaluate_icl(current, config.task_class, config.dist, config.n,
                                config.sigma, config.eval_tasks, eval_rng.derive(iteration),
                                num_queries=m)
        rho = None
        if config.subspace_basis is not None:
            rho = subspace_error(current.M(), config.subspace_basis)
        trace.append(Checkpoint(iteration, norm_m, test_err, rho, running_loss))

    loss_acc = 0.0
    loss_count = 0
    checkpoint(0, math.nan)
    for it in range(1, config.iterations + 1):
        sub = train_rng.derive(it)
        task = draw_task(config.task_class, d, sub)
        batch = make_context(task, config.dist, config.n, m, config.sigma, sub)
        current = params.with_matrix(state.params)
        loss = attention.context_sq_loss(current, batch)
        grad = attention.grad_context(current, batch)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NonFiniteLoss(f"non-finite loss or gradient at iteration {it}", trace=trace)
        loss_acc += loss
        loss_count += 1
        state = adam_step(state, grad)
        if it % config.eval_every == 0 or it == config.iterations:
            checkpoint(it, loss_acc / loss_count)
            loss_acc = 0.0
            loss_count = 0
    trace.final_params = params.with_matrix(state.params)
    return trace
