import math

import numpy as np
import pytest

from icl_lab import sampling, tasks
from icl_lab.errors import DegenerateInput, DimensionMismatch
from icl_lab.sampling import RngStream
from icl_lab.tasks import TaskClass, TaskSpec


def lowrank_class(kind, d=6, k=2, seed=0):
    b, _ = sampling.make_random_subspace(d, k, RngStream(seed))
    return TaskClass(kind, basis=b)


class TestDrawTask:
    def test_affine_zero_scale_is_zero_function(self):
        t = tasks.draw_task(TaskClass(tasks.AFFINE, L=0.0), 4, RngStream(0))
        assert t.slope == 0.0 and t.offset == 0.0
        x = sampling.sample_covariate(sampling.uniform_sphere(4), RngStream(1))
        assert tasks.evaluate_task(t, x) == 0.0

    def test_relu_constraints(self):
        t = tasks.draw_task(TaskClass(tasks.RELU, L=2.0), 5, RngStream(2))
        assert abs(np.linalg.norm(t.w) - 1.0) < 1e-12
        for val in (t.slope_pos, t.slope_neg, t.offset):
            assert -2.0 <= val <= 2.0

    def test_hills_phase_range(self):
        for i in range(20):
            t = tasks.draw_task(TaskClass(tasks.HILLS, nu=1.5), 2, RngStream(i))
            assert -math.pi <= t.phase <= math.pi
            assert t.amplitude == 1.5

    def test_hills_requires_d2(self):
        with pytest.raises(DegenerateInput):
            tasks.draw_task(TaskClass(tasks.HILLS, nu=1.0), 3, RngStream(0))

    def test_lowrank_draws_unit_coefficient(self):
        tc = lowrank_class(tasks.LOWRANK_QUAD)
        t = tasks.draw_task(tc, 6, RngStream(3))
        assert abs(np.linalg.norm(t.a) - 1.0) < 1e-12


class TestEvaluate:
    def test_relu_two_branches_hand_evaluated(self):
        w = np.zeros(3)
        w[0] = 1.0
        t = TaskSpec(tasks.RELU, w=w, slope_pos=1.0, slope_neg=-1.0, offset=0.0)
        # f(x) = (w.x)_+ - (-w.x)_+ collapses to the linear map w.x
        assert tasks.evaluate_task(t, np.array([0.5, 0.2, 0.1])) == pytest.approx(0.5)
        assert tasks.evaluate_task(t, np.array([-0.5, 0.2, 0.1])) == pytest.approx(-0.5)

    def test_relu_absolute_value_branches(self):
        w = np.array([1.0, 0.0])
        t = TaskSpec(tasks.RELU, w=w, slope_pos=1.0, slope_neg=1.0, offset=0.0)
        assert tasks.evaluate_task(t, np.array([-0.7, 0.3])) == pytest.approx(0.7)

    def test_lowrank_affine_orthogonal_input_gives_offset(self):
        tc = lowrank_class(tasks.LOWRANK_AFFINE, d=6, k=2, seed=4)
        t = tasks.draw_task(tc, 6, RngStream(5))
        bp = sampling.make_random_subspace(6, 2, RngStream(4))[1]
        x = bp[:, 0]
        assert tasks.evaluate_task(t, x) == pytest.approx(2.0, abs=1e-12)

    def test_cosine_orthogonal_direction(self):
        w = np.array([1.0, 0.0, 0.0])
        t = TaskSpec(tasks.COSINE, w=w, freq=3.7)
        assert tasks.evaluate_task(t, np.array([0.0, 1.0, 0.0])) == pytest.approx(1.0)

    def test_dimension_mismatch(self):
        t = TaskSpec(tasks.AFFINE, w=np.array([1.0, 0.0]), slope=1.0)
        with pytest.raises(DimensionMismatch):
            tasks.evaluate_task(t, np.ones(3))

    def test_hills_planar_angle(self):
        t = TaskSpec(tasks.HILLS, amplitude=2.0, phase=0.0)
        assert tasks.evaluate_task(t, np.array([1.0, 0.0])) == pytest.approx(2.0)
        assert tasks.evaluate_task(t, np.array([0.0, 1.0])) == pytest.approx(0.0, abs=1e-12)


class TestLipschitz:
    def test_affine(self):
        t = TaskSpec(tasks.AFFINE, w=np.array([1.0, 0.0]), slope=0.7, offset=1.0)
        assert tasks.task_lipschitz(t) == pytest.approx(0.7)

    def test_relu_max_slope(self):
        t = TaskSpec(tasks.RELU, w=np.array([1.0, 0.0]), slope_pos=-2.0, slope_neg=1.0)
        assert tasks.task_lipschitz(t) == pytest.approx(2.0)

    def test_cosine_calculus_oracle(self):
        # max |d/dt cos(L t)| = L, attained where sin(Lt) = 1
        t = TaskSpec(tasks.COSINE, w=np.array([1.0, 0.0]), freq=4.2)
        assert tasks.task_lipschitz(t) == pytest.approx(4.2)

    @pytest.mark.parametrize("kind", [tasks.AFFINE, tasks.RELU, tasks.COSINE,
                                      tasks.LOWRANK_AFFINE, tasks.LOWRANK_QUAD,
                                      tasks.LOWRANK_COS, tasks.LOWRANK_LIN])
    def test_bound_holds_on_random_pairs(self, kind):
        d = 6
        if kind in tasks.LOWRANK_KINDS:
            tc = lowrank_class(kind, d=d, k=2, seed=10)
        else:
            tc = TaskClass(kind, L=1.5)
        rng = RngStream(11)
        dist = sampling.uniform_sphere(d)
        for rep in range(5):
            t = tasks.draw_task(tc, d, rng.derive(rep))
            lip = tasks.task_lipschitz(t)
            pts = sampling.sample_covariates(dist, 2000, rng.derive(1000 + rep))
            xs, ys = pts[:1000], pts[1000:]
            fx = tasks.evaluate_task(t, xs)
            fy = tasks.evaluate_task(t, ys)
            gap = np.abs(fx - fy) - lip * np.linalg.norm(xs - ys, axis=1)
            assert np.max(gap) <= 1e-9

    def test_hills_bound_on_circle(self):
        rng = RngStream(12)
        t = tasks.draw_task(TaskClass(tasks.HILLS, nu=1.5), 2, rng)
        pts = sampling.sample_covariates(sampling.uniform_sphere(2), 2000, rng.derive(1))
        xs, ys = pts[:1000], pts[1000:]
        gap = np.abs(tasks.evaluate_task(t, xs) - tasks.evaluate_task(t, ys))
        gap -= tasks.task_lipschitz(t) * np.linalg.norm(xs - ys, axis=1)
        assert np.max(gap) <= 1e-9


class TestClassIdentities:
    def test_relu_opposite_slopes_equal_affine(self):
        # slope_pos = l, slope_neg = -l collapses the two branches to slope l
        w = sampling.sample_uniform_sphere(1, 5, RngStream(13))[0]
        l, b = 0.83, -0.4
        relu = TaskSpec(tasks.RELU, w=w, slope_pos=l, slope_neg=-l, offset=b)
        aff = TaskSpec(tasks.AFFINE, w=w, slope=l, offset=b)
        x = sampling.sample_covariates(sampling.uniform_sphere(5), 200, RngStream(14))
        assert np.max(np.abs(tasks.evaluate_task(relu, x) - tasks.evaluate_task(aff, x))) < 1e-12

    def test_lowrank_lin_ignores_complement(self):
        tc = lowrank_class(tasks.LOWRANK_LIN, d=8, k=3, seed=15)
        t = tasks.draw_task(tc, 8, RngStream(16))
        x = sampling.sample_covariates(sampling.uniform_sphere(8), 50, RngStream(17))
        b = t.basis
        projected = x @ b @ b.T
        assert np.max(np.abs(tasks.evaluate_task(t, x) - tasks.evaluate_task(t, projected))) < 1e-12

    def test_cosine_outputs_bounded(self):
        for kind, tc in [(tasks.COSINE, TaskClass(tasks.COSINE, L=9.0)),
                         (tasks.LOWRANK_COS, lowrank_class(tasks.LOWRANK_COS, seed=18))]:
            t = tasks.draw_task(tc, 6, RngStream(19))
            x = sampling.sample_covariates(sampling.uniform_sphere(6), 500, RngStream(20))
            vals = tasks.evaluate_task(t, x)
            assert np.all(vals >= -1.0) and np.all(vals <= 1.0)


class TestMakeContext:
    def test_noiseless_labels_exact(self):
        tc = TaskClass(tasks.AFFINE, L=1.0)
        rng = RngStream(21)
        t = tasks.draw_task(tc, 4, rng)
        batch = tasks.make_context(t, sampling.uniform_sphere(4), 10, 3, 0.0, rng)
        assert np.array_equal(batch.y, tasks.evaluate_task(t, batch.X))
        assert np.all(batch.noise == 0.0)

    def test_shapes_with_sqrt_queries(self):
        assert tasks.default_num_queries(20) == 4
        tc = TaskClass(tasks.RELU, L=1.0)
        rng = RngStream(22)
        t = tasks.draw_task(tc, 5, rng)
        batch = tasks.make_context(t, sampling.uniform_sphere(5), 20, tasks.default_num_queries(20), 0.01, rng)
        assert batch.X.shape == (20, 5) and batch.y.shape == (20,)
        assert batch.Q.shape == (4, 5) and batch.targets.shape == (4,)

    def test_replay_identical(self):
        tc = TaskClass(tasks.COSINE, L=2.0)
        out = []
        for _ in range(2):
            rng = RngStream(23)
            t = tasks.draw_task(tc, 3, rng)
            out.append(tasks.make_context(t, sampling.uniform_sphere(3), 8, 2, 0.1, rng))
        assert np.array_equal(out[0].X, out[1].X)
        assert np.array_equal(out[0].y, out[1].y)
        assert np.array_equal(out[0].targets, out[1].targets)

    def test_noisy_labels_record_noise(self):
        tc = TaskClass(tasks.AFFINE, L=1.0)
        rng = RngStream(24)
        t = tasks.draw_task(tc, 4, rng)
        batch = tasks.make_context(t, sampling.uniform_sphere(4), 12, 2, 0.5, rng)
        assert np.allclose(batch.y - batch.noise, tasks.evaluate_task(t, batch.X))
        assert np.array_equal(batch.targets, tasks.evaluate_task(t, batch.Q))
