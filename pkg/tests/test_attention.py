import math

import numpy as np
import pytest

from icl_lab import attention, linalg, sampling, tasks
from icl_lab.errors import PreconditionViolated
from icl_lab.sampling import RngStream
from icl_lab.tasks import TaskClass


def random_batch(seed, d=3, n=4, m=2, sigma=0.1, kind=tasks.RELU, L=1.0):
    rng = RngStream(seed)
    task = tasks.draw_task(TaskClass(kind, L=L), d, rng)
    return tasks.make_context(task, sampling.uniform_sphere(d), n, m, sigma, rng)


class TestSoftmaxWeights:
    def test_zero_matrix_uniform(self):
        X = sampling.sample_uniform_sphere(7, 4, RngStream(0))
        s = attention.softmax_weights(np.zeros((4, 4)), X, X[0])
        assert np.allclose(s, np.full(7, 1.0 / 7.0))

    def test_hand_evaluated_three_tokens(self):
        X = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        q = np.array([1.0, 0.0])
        s = attention.softmax_weights(np.eye(2), X, q)
        z = math.e + 1.0 + 1.0 / math.e
        assert np.allclose(s, [math.e / z, 1.0 / z, 1.0 / math.e / z], atol=1e-15)

    def test_normalization_many_random(self):
        rng = RngStream(1)
        for i in range(300):
            sub = rng.derive(i)
            X = sampling.sample_uniform_sphere(6, 3, sub)
            m = sub.standard_normal((3, 3))
            s = attention.softmax_weights(m, X, sampling.sample_uniform_sphere(1, 3, sub)[0])
            assert np.all(s >= 0)
            assert abs(s.sum() - 1.0) < 1e-12

    def test_logit_shift_invariance(self):
        # dyadic logits and shift so the addition itself is exact; any
        # remaining difference is the softmax's own shift error
        rng = RngStream(2)
        logits = rng.integers(-(1 << 20), 1 << 20, size=10) * 2.0**-18
        shift = float(rng.integers(-(1 << 20), 1 << 20)) * 2.0**-18
        a = attention._softmax_rows(logits)
        b = attention._softmax_rows(logits + shift)
        assert np.max(np.abs(a - b)) < 1e-15

    def test_clip_counter_fires(self):
        attention.clip_events.reset()
        attention._softmax_rows(np.array([0.0, 1e4]))
        assert attention.clip_events.count == 1
        attention.clip_events.reset()

    def test_nearest_neighbor_ordering(self):
        # for M = w I on the sphere, logits are w(1 - ||x_i - q||^2 / 2)
        rng = RngStream(3)
        X = sampling.sample_uniform_sphere(12, 4, rng)
        q = sampling.sample_uniform_sphere(1, 4, rng)[0]
        s = attention.softmax_weights(2.5 * np.eye(4), X, q)
        dist = np.linalg.norm(X - q, axis=1)
        order = np.argsort(dist)
        assert np.all(np.diff(s[order]) < 0)


class TestPredictions:
    def test_constant_labels_any_matrix(self):
        X = sampling.sample_uniform_sphere(5, 3, RngStream(4))
        y = np.full(5, 3.25)
        m = RngStream(5).standard_normal((3, 3))
        assert attention.predict_softmax(m, X, y, X[0]) == pytest.approx(3.25, abs=1e-12)

    def test_single_token(self):
        X = sampling.sample_uniform_sphere(1, 3, RngStream(6))
        assert attention.predict_softmax(np.eye(3), X, np.array([7.0]), X[0]) == 7.0

    def test_weighted_mean_direct_formula_oracle(self):
        X = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        q = np.array([1.0, 0.0])
        y = np.array([1.0, 2.0, 3.0])
        logits = X @ q
        expected = float(np.exp(logits) @ y / np.exp(logits).sum())
        assert attention.predict_softmax(np.eye(2), X, y, q) == pytest.approx(expected, abs=1e-14)

    def test_prediction_inside_label_range(self):
        batch = random_batch(7, n=9)
        p = attention.predict_softmax(np.eye(3) * 4.0, batch.X, batch.y, batch.Q[0])
        assert batch.y.min() - 1e-12 <= p <= batch.y.max() + 1e-12

    def test_label_shift_equivariance(self):
        batch = random_batch(8, n=6)
        m = RngStream(9).standard_normal((3, 3))
        base = attention.predict_softmax(m, batch.X, batch.y, batch.Q[0])
        shifted = attention.predict_softmax(m, batch.X, batch.y + 5.5, batch.Q[0])
        assert shifted == pytest.approx(base + 5.5, abs=1e-12)

    def test_rotation_equivariance(self):
        rng = RngStream(10)
        batch = random_batch(11, d=4, n=6)
        m = rng.standard_normal((4, 4))
        r = linalg.gram_schmidt_orthonormalize(rng.standard_normal((4, 4)))
        base = attention.predict_softmax(m, batch.X, batch.y, batch.Q[0])
        rot = attention.predict_softmax(r @ m @ r.T, batch.X @ r.T, batch.y, r @ batch.Q[0])
        assert rot == pytest.approx(base, abs=1e-10)


class TestLinear:
    def test_zero_matrix(self):
        batch = random_batch(12)
        assert attention.predict_linear(np.zeros((3, 3)), batch.X, batch.y, batch.Q[0]) == 0.0

    def test_hand_evaluated(self):
        X = np.array([[1.0, 0.0], [0.0, 1.0]])
        y = np.array([3.0, 5.0])
        q = np.array([1.0, 0.0])
        assert attention.predict_linear(np.eye(2), X, y, q) == pytest.approx(3.0)

    def test_homogeneous_in_matrix(self):
        batch = random_batch(13)
        m = RngStream(14).standard_normal((3, 3))
        base = attention.predict_linear(m, batch.X, batch.y, batch.Q[0])
        for t in (-2.0, 0.5, 11.0):
            assert attention.predict_linear(t * m, batch.X, batch.y, batch.Q[0]) == pytest.approx(t * base, abs=1e-12 * max(1, abs(t * base)))

    def test_argmax_weight_invariant_under_scaling(self):
        batch = random_batch(15, n=8)
        m = RngStream(16).standard_normal((3, 3))
        w = batch.X @ m @ batch.Q[0]
        assert np.argmax(np.abs(w)) == np.argmax(np.abs(3.7 * w))


class TestWindow:
    def test_huge_window_plain_mean(self):
        batch = random_batch(17, n=10)
        # radius 1/sqrt(w) > 2 covers the whole sphere
        pred = attention.predict_window(0.2, batch.X, batch.y, batch.Q[0])
        assert not pred.fallback
        assert pred.value == pytest.approx(float(batch.y.mean()))

    def test_brute_force_distance_scan(self):
        batch = random_batch(18, n=12)
        q = batch.Q[0]
        w = 4.0
        inside = np.linalg.norm(batch.X - q, axis=1) < 1.0 / math.sqrt(w)
        if not inside.any():
            pytest.skip("window empty for this draw")
        pred = attention.predict_window(w, batch.X, batch.y, q)
        assert pred.value == pytest.approx(float(batch.y[inside].mean()))

    def test_exact_two_token_window(self):
        q = np.array([1.0, 0.0])
        X = np.array([[1.0, 0.0], [0.0, 1.0], [0.999, 0.0447], [-1.0, 0.0]])
        X = X / np.linalg.norm(X, axis=1, keepdims=True)
        y = np.array([1.0, 10.0, 3.0, 10.0])
        w = 1.0 / 0.5**2  # radius 0.5 captures tokens 0 and 2 only
        pred = attention.predict_window(w, X, y, q)
        assert pred.value == pytest.approx(2.0)

    def test_empty_window_nearest_fallback(self):
        X = np.array([[0.0, 1.0], [-1.0, 0.0]])
        y = np.array([4.0, 9.0])
        pred = attention.predict_window(1e6, X, y, np.array([1.0, 0.0]))
        assert pred.fallback and pred.value == 4.0

    def test_nonpositive_w_rejected(self):
        with pytest.raises(PreconditionViolated):
            attention.predict_window(0.0, np.eye(2), np.ones(2), np.array([1.0, 0.0]))


class TestContextLoss:
    def test_noiseless_constant_task_zero_loss(self):
        rng = RngStream(19)
        task = tasks.TaskSpec(tasks.AFFINE, w=np.array([1.0, 0.0]), slope=0.0, offset=2.0)
        batch = tasks.make_context(task, sampling.uniform_sphere(2), 6, 2, 0.0, rng)
        p = attention.direct_params(np.eye(2))
        assert attention.context_sq_loss(p, batch) == pytest.approx(0.0, abs=1e-28)

    def test_single_query_matches_direct_evaluation(self):
        batch = random_batch(20, m=1)
        m = RngStream(21).standard_normal((3, 3))
        p = attention.direct_params(m)
        direct = (attention.predict_softmax(m, batch.X, batch.y, batch.Q[0]) - batch.targets[0]) ** 2
        assert attention.context_sq_loss(p, batch) == pytest.approx(direct, abs=1e-14)

    def test_linear_zero_matrix_loss_is_mean_target_sq(self):
        batch = random_batch(22, m=3)
        p = attention.direct_params(np.zeros((3, 3)), estimator=attention.LINEAR)
        assert attention.context_sq_loss(p, batch) == pytest.approx(float(np.mean(batch.targets**2)))

    def test_window_estimator_loss(self):
        batch = random_batch(23, m=2)
        p = attention.window_params(0.1)
        expected = np.mean([(attention.predict_window(0.1, batch.X, batch.y, q).value - t) ** 2
                            for q, t in zip(batch.Q, batch.targets)])
        assert attention.context_sq_loss(p, batch) == pytest.approx(float(expected))


class TestMcLoss:
    def test_constant_tasks_zero(self):
        tc = TaskClass(tasks.AFFINE, L=0.0)
        p = attention.tied_params(0.01 * np.eye(3))
        est = attention.mc_loss(p, tc, sampling.uniform_sphere(3), 8, 2, 0.0, 10, RngStream(24))
        assert est.mean == 0.0 and est.stderr == 0.0

    def test_uniform_averaging_noise_floor(self):
        # analytic oracle: variance of a mean of n iid noises is sigma^2/n
        n, sigma = 25, 0.3
        tc = TaskClass(tasks.AFFINE, L=0.0)
        p = attention.direct_params(np.zeros((3, 3)))
        est = attention.mc_loss(p, tc, sampling.uniform_sphere(3), n, 1, sigma, 3000, RngStream(25))
        expected = sigma**2 / n
        assert abs(est.mean - expected) < 3.0 * est.stderr

    def test_replay_identical(self):
        tc = TaskClass(tasks.RELU, L=1.0)
        p = attention.tied_params(0.5 * np.eye(3))
        a = attention.mc_loss(p, tc, sampling.uniform_sphere(3), 6, 2, 0.1, 50, RngStream(26))
        b = attention.mc_loss(p, tc, sampling.uniform_sphere(3), 6, 2, 0.1, 50, RngStream(26))
        assert a == b


class TestDecomposition:
    def test_zero_sigma_noise_part_exactly_zero(self):
        tc = TaskClass(tasks.RELU, L=1.0)
        p = attention.direct_params(np.eye(4))
        bias, noise = attention.mc_loss_decomposed(p, tc, sampling.uniform_sphere(4), 10, 2, 0.0, 50, RngStream(27))
        assert noise == 0.0
        assert bias > 0.0

    def test_constant_task_bias_exactly_zero(self):
        tc = TaskClass(tasks.AFFINE, L=0.0)
        p = attention.direct_params(np.eye(4))
        bias, noise = attention.mc_loss_decomposed(p, tc, sampling.uniform_sphere(4), 10, 2, 0.2, 50, RngStream(28))
        assert bias == 0.0
        assert noise > 0.0

    def test_parts_sum_to_full_loss(self):
        tc = TaskClass(tasks.RELU, L=1.0)
        p = attention.direct_params(2.0 * np.eye(4))
        est = attention.mc_loss(p, tc, sampling.uniform_sphere(4), 12, 3, 0.1, 2000,
                                RngStream(29), decompose=True)
        assert abs(est.mean - (est.bias_part + est.noise_part)) <= 3.0 * est.stderr

    def test_noise_factor_monotone_in_w(self):
        rng = RngStream(30)
        X = sampling.sample_uniform_sphere(15, 4, rng)
        q = sampling.sample_uniform_sphere(1, 4, rng)[0]
        grid = np.linspace(0.0, 30.0, 40)
        vals = [attention.noise_factor(w * np.eye(4), X, q) for w in grid]
        assert np.all(np.diff(vals) >= -1e-12)
