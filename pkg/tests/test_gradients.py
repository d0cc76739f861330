"""Analytic gradients against the central finite-difference oracle."""

import numpy as np
import pytest

from icl_lab import attention, sampling, tasks
from icl_lab.sampling import RngStream
from icl_lab.tasks import TaskClass

STEP = 1e-5
REL_TOL = 1e-5


def rel_err(a, b):
    denom = max(np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def random_instance(seed):
    rng = RngStream(seed)
    d = int(rng.integers(2, 6))        # d <= 5
    n = int(rng.integers(2, 9))        # n <= 8
    m = int(rng.integers(1, 4))
    task = tasks.draw_task(TaskClass(tasks.RELU, L=2.0), d, rng)
    batch = tasks.make_context(task, sampling.uniform_sphere(d), n, m, 0.1, rng)
    mat = rng.standard_normal((d, d))
    return batch, mat


class TestFiniteDiff:
    def test_linear_functional(self):
        g = attention.finite_diff_grad(lambda p: float(np.sum(p)), np.zeros((3, 2)), step=1e-4)
        assert np.max(np.abs(g - 1.0)) < 1e-10

    def test_frobenius_square(self):
        p = RngStream(0).standard_normal((3, 3))
        g = attention.finite_diff_grad(lambda q: float(np.sum(q**2)), p, step=1e-5)
        assert np.max(np.abs(g - 2.0 * p)) < 1e-6

    def test_richardson_quartic(self):
        # f(P) = sum P^4: truncation error is O(step^2), so halving the step
        # shrinks the error by ~4x
        p = np.full((2, 2), 0.7)
        exact = 4.0 * p**3

        def err(step):
            g = attention.finite_diff_grad(lambda q: float(np.sum(q**4)), p, step=step)
            return np.max(np.abs(g - exact))

        e1, e2 = err(2e-3), err(1e-3)
        assert e1 / e2 == pytest.approx(4.0, rel=0.05)


class TestSoftmaxGradient:
    def test_constant_labels_zero_gradient(self):
        rng = RngStream(1)
        task = tasks.TaskSpec(tasks.AFFINE, w=np.array([1.0, 0.0, 0.0]), slope=0.0, offset=1.5)
        batch = tasks.make_context(task, sampling.uniform_sphere(3), 5, 2, 0.0, rng)
        g = attention.grad_context_softmax(rng.standard_normal((3, 3)), batch)
        # y_i - p and p - t only vanish to rounding, so the product is ~1e-32
        assert np.max(np.abs(g)) < 1e-25

    def test_single_token_zero_gradient(self):
        batch_rng = RngStream(2)
        task = tasks.draw_task(TaskClass(tasks.RELU, L=1.0), 3, batch_rng)
        batch = tasks.make_context(task, sampling.uniform_sphere(3), 1, 2, 0.1, batch_rng)
        g = attention.grad_context_softmax(np.eye(3), batch)
        assert np.max(np.abs(g)) == 0.0

    def test_matches_finite_differences(self):
        batch, mat = random_instance(3)
        analytic = attention.grad_context_softmax(mat, batch)
        fd = attention.finite_diff_grad(
            lambda p: attention.context_sq_loss(attention.direct_params(p), batch), mat, STEP)
        assert rel_err(analytic, fd) < REL_TOL


class TestTiedGradient:
    def test_zero_factor_zero_gradient(self):
        batch, _ = random_instance(4)
        d = batch.X.shape[1]
        g = attention.grad_context_tied(np.zeros((d, d)), batch)
        assert np.max(np.abs(g)) == 0.0

    def test_constant_labels_zero(self):
        rng = RngStream(5)
        task = tasks.TaskSpec(tasks.AFFINE, w=np.array([1.0, 0.0]), slope=0.0, offset=-2.0)
        batch = tasks.make_context(task, sampling.uniform_sphere(2), 4, 1, 0.0, rng)
        g = attention.grad_context_tied(rng.standard_normal((2, 2)), batch)
        assert np.max(np.abs(g)) == 0.0

    def test_matches_finite_differences(self):
        batch, mat = random_instance(6)
        analytic = attention.grad_context_tied(mat, batch)
        fd = attention.finite_diff_grad(
            lambda a: attention.context_sq_loss(attention.tied_params(a), batch), mat, STEP)
        assert rel_err(analytic, fd) < REL_TOL


class TestLinearGradient:
    def test_matches_finite_differences_direct_and_tied(self):
        batch, mat = random_instance(7)
        direct = attention.direct_params(mat, estimator=attention.LINEAR)
        analytic = attention.grad_context(direct, batch)
        fd = attention.finite_diff_grad(
            lambda p: attention.context_sq_loss(attention.direct_params(p, estimator=attention.LINEAR), batch),
            mat, STEP)
        assert rel_err(analytic, fd) < REL_TOL

        tied = attention.tied_params(0.3 * mat, estimator=attention.LINEAR)
        analytic_t = attention.grad_context(tied, batch)
        fd_t = attention.finite_diff_grad(
            lambda a: attention.context_sq_loss(attention.tied_params(a, estimator=attention.LINEAR), batch),
            0.3 * mat, STEP)
        assert rel_err(analytic_t, fd_t) < REL_TOL


@pytest.mark.parametrize("mode", ["direct", "tied"])
def test_gradcheck_battery(mode):
    """50 random instances per mode; the acceptance suite runs the full 100."""
    from icl_lab.experiments import gradient_check

    failures = gradient_check(num_instances=50, modes=(mode,), seed=123)
    assert failures == []
