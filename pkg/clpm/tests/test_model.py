import io

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from clpm.events import IntervalPartition, parse_events
from clpm.exceptions import ModelError
from clpm.model import (LatentConfiguration, RateKind, RateModel, SamplingPlan, cumulative_rate_closed,
                        cumulative_rate_riemann, evaluate_nll, log_rate, normal_cdf, pair_interval_nll,
                        position_at, segment_log_integral, total_nll)


def random_partition(rng, K):
    inner = np.sort(rng.uniform(0.05, 0.95, K - 1))
    while K > 1 and np.min(np.diff(np.concatenate([[0.0], inner, [1.0]]))) < 1e-3:
        inner = np.sort(rng.uniform(0.05, 0.95, K - 1))
    return IntervalPartition(tuple(np.concatenate([[0.0], inner, [1.0]])))


def quad_rate(z, part, beta, i, j, k):
    """integral of exp(beta - ||z_i(t) - z_j(t)||^2) over interval k by adaptive quadrature"""
    lo, hi = part.bounds(k)
    da = z[i, k - 1] - z[j, k - 1]
    db = z[i, k] - z[j, k]

    def rate(t):
        s = (t - lo) / (hi - lo)
        delta = da + s * (db - da)
        return np.exp(beta - delta @ delta)

    value, _ = quad(rate, lo, hi, epsabs=0.0, epsrel=1e-11, limit=200)
    return value


def small_history(directed=False):
    rows = [("0", "1", 0.05), ("0", "1", 0.1), ("1", "2", 0.4), ("0", "2", 0.55), ("2", "3", 0.7),
            ("0", "1", 0.9), ("1", "3", 1.0)]
    text = "source,dest,timestamp\n" + "".join(f"{s},{d},{t}\n" for s, d, t in rows)
    return parse_events(io.StringIO(text), directed=directed, time_range=(0.0, 1.0))


class NormalCdfTest(SimpleTestCase):
    def test_reference_values(self):
        self.assertEqual(normal_cdf(0.0), 0.5)
        self.assertAlmostEqual(float(normal_cdf(1.96)), 0.9750021049, places=10)


class PositionTest(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.part = IntervalPartition.uniform(4)
        self.cfg = LatentConfiguration(rng.standard_normal((3, 5, 2)), self.part)

    def test_cut_points_and_midpoints(self):
        np.testing.assert_allclose(position_at(self.cfg, 1, 0.5), self.cfg.z[1, 2])
        np.testing.assert_allclose(position_at(self.cfg, 2, 1.0), self.cfg.z[2, 4])
        np.testing.assert_allclose(position_at(self.cfg, 0, 0.375), (self.cfg.z[0, 1] + self.cfg.z[0, 2]) / 2)

    def test_extended_precision_interpolation(self):
        rng = np.random.default_rng(1)
        for t in rng.uniform(0, 1, 50):
            k = int(self.part.interval_of(t))
            lo, hi = (np.longdouble(x) for x in self.part.bounds(k))
            s = (np.longdouble(t) - lo) / (hi - lo)
            expected = (1 - s) * self.cfg.z[0, k - 1].astype(np.longdouble) + s * self.cfg.z[0, k].astype(np.longdouble)
            np.testing.assert_allclose(position_at(self.cfg, 0, t), expected.astype(float), rtol=1e-12, atol=1e-14)

    def test_time_outside_unit_interval(self):
        with self.assertRaises(ModelError):
            position_at(self.cfg, 0, 1.5)
        with self.assertRaises(ModelError):
            position_at(self.cfg, 0, -0.1)

    def test_configuration_must_match_partition(self):
        with self.assertRaises(ModelError):
            LatentConfiguration(np.zeros((2, 3, 2)), self.part)
        with self.assertRaises(ModelError):
            LatentConfiguration(np.full((2, 5, 2), np.nan), self.part)


class LogRateTest(SimpleTestCase):
    def config(self, zi, zj):
        return LatentConfiguration(np.array([[zi, zi], [zj, zj]], dtype=float), IntervalPartition.uniform(1))

    def test_examples(self):
        self.assertEqual(log_rate(self.config((1, 2), (1, 2)), RateModel(), 0, 1, 0.3), 0.0)
        self.assertAlmostEqual(log_rate(self.config((0, 0), (1, 0)), RateModel(), 0, 1, 0.3), -1.0)
        self.assertAlmostEqual(log_rate(self.config((1, 0), (1, 0)), RateModel("dot-product"), 0, 1, 0.3), 1.0)
        self.assertAlmostEqual(log_rate(self.config((0, 0), (1, 0)), RateModel(beta=2.5), 0, 1, 0.3), 1.5)

    def test_self_pair(self):
        with self.assertRaises(ModelError):
            log_rate(self.config((0, 0), (1, 0)), RateModel(), 1, 1, 0.5)


class CumulativeRateTest(SimpleTestCase):
    def pair(self, da, db, cut_points=(0.0, 1.0)):
        part = IntervalPartition(cut_points)
        K = part.K
        z = np.zeros((2, K + 1, 2))
        z[0, :] = np.linspace(np.asarray(da, dtype=float), np.asarray(db, dtype=float), K + 1)
        return LatentConfiguration(z, part)

    def test_stationary_coincident(self):
        cfg = self.pair((0, 0), (0, 0), (0.0, 0.5, 1.0))
        self.assertAlmostEqual(cumulative_rate_closed(cfg, RateModel(), 0, 1, 1), 0.5, places=14)

    def test_constant_unit_separation(self):
        cfg = self.pair((1, 0), (1, 0))
        self.assertAlmostEqual(cumulative_rate_closed(cfg, RateModel(), 0, 1, 1), np.exp(-1), places=14)

    def test_gaussian_integral(self):
        cfg = self.pair((0, 0), (1, 0))
        self.assertAlmostEqual(cumulative_rate_closed(cfg, RateModel(), 0, 1, 1), 0.7468241328124270, places=12)

    def test_matches_quadrature(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            part = random_partition(rng, 3)
            z = rng.standard_normal((2, 4, 2))
            beta = rng.uniform(-3, 3)
            k = int(rng.integers(1, 4))
            value = cumulative_rate_closed(LatentConfiguration(z, part), RateModel(beta=beta), 0, 1, k)
            expected = quad_rate(z, part, beta, 0, 1, k)
            self.assertLessEqual(abs(value - expected) / expected, 1e-6)

    def test_riemann_converges_to_closed_form(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            cfg = LatentConfiguration(rng.standard_normal((2, 3, 2)), IntervalPartition.uniform(2))
            rm = RateModel(beta=rng.uniform(-3, 3))
            closed = cumulative_rate_closed(cfg, rm, 0, 1, 2)
            riemann = cumulative_rate_riemann(cfg, rm, 0, 1, 2, R=10 ** 5)
            self.assertLessEqual(abs(riemann - closed) / closed, 1e-4)

    def test_riemann_exact_for_constant_rate(self):
        cfg = self.pair((0.5, 0.5), (0.5, 0.5), (0.0, 0.3, 1.0))
        for R in (1, 3, 10):
            self.assertAlmostEqual(cumulative_rate_riemann(cfg, RateModel(beta=0.7), 0, 1, 2, R=R),
                                   0.7 * np.exp(0.7 - 0.5), places=12)

    def test_dot_product_self_convergence(self):
        z = np.array([[[0.0, 0.0], [1.0, 1.0]], [[1.0, 0.0], [0.5, 1.0]]])
        cfg = LatentConfiguration(z, IntervalPartition.uniform(1))
        rm = RateModel("dot-product")
        reference = cumulative_rate_riemann(cfg, rm, 0, 1, 1, R=2 ** 20)
        errors = [abs(cumulative_rate_riemann(cfg, rm, 0, 1, 1, R=2 ** p) - reference) for p in range(4, 15, 2)]
        self.assertTrue(all(a > b for a, b in zip(errors, errors[1:])))

    def test_closed_form_needs_euclidean(self):
        with self.assertRaises(ModelError):
            cumulative_rate_closed(self.pair((0, 0), (1, 0)), RateModel("dot-product"), 0, 1, 1)

    def test_interval_out_of_range(self):
        with self.assertRaises(ModelError):
            cumulative_rate_closed(self.pair((0, 0), (1, 0)), RateModel(), 0, 1, 2)

    def test_additivity_over_intervals(self):
        rng = np.random.default_rng(3)
        part = IntervalPartition.uniform(5)
        cfg = LatentConfiguration(rng.standard_normal((2, 6, 2)), part)
        total = sum(cumulative_rate_closed(cfg, RateModel(), 0, 1, k) for k in range(1, 6))
        expected = sum(quad_rate(cfg.z, part, 0.0, 0, 1, k) for k in range(1, 6))
        self.assertAlmostEqual(total / expected, 1.0, places=9)

    @given(st.floats(min_value=-5, max_value=5), st.floats(min_value=-5, max_value=5),
           st.floats(min_value=-5, max_value=5), st.floats(min_value=-5, max_value=5))
    @settings(deadline=None, max_examples=200)
    def test_always_positive_and_finite(self, a0, a1, b0, b1):
        value = cumulative_rate_closed(self.pair((a0, a1), (b0, b1)), RateModel(), 0, 1, 1)
        self.assertTrue(np.isfinite(value))
        self.assertGreaterEqual(value, 0.0)


class SegmentLogIntegralTest(SimpleTestCase):
    def test_degenerate_direction(self):
        a = np.array([0.5, 0.3])
        self.assertAlmostEqual(float(segment_log_integral(a, a)), -a @ a, places=14)
        near = float(segment_log_integral(a, a + np.array([1e-7, 0.0])))
        self.assertAlmostEqual(near, -a @ a, places=5)

    def test_far_separation_stays_finite(self):
        value = float(segment_log_integral(np.array([30.0, 0.0]), np.array([31.0, 0.0])))
        tail, _ = quad(lambda s: np.exp(-60 * s - s * s), 0, 1, epsabs=0.0, epsrel=1e-12)
        self.assertAlmostEqual(value, -900 + np.log(tail), places=8)

    def assert_gradient(self, da, db):
        _, grad_a, grad_b = segment_log_integral(da, db, with_grad=True)
        h = 1e-6
        for vec, grad, which in ((da, grad_a, 0), (db, grad_b, 1)):
            for axis in range(vec.size):
                step = np.zeros_like(vec)
                step[axis] = h
                if which == 0:
                    fd = (segment_log_integral(da + step, db) - segment_log_integral(da - step, db)) / (2 * h)
                else:
                    fd = (segment_log_integral(da, db + step) - segment_log_integral(da, db - step)) / (2 * h)
                self.assertAlmostEqual(float(grad[axis]), float(fd), delta=1e-6 * max(1.0, abs(float(fd))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            self.assert_gradient(rng.standard_normal(2) * 1.5, rng.standard_normal(2) * 1.5)

    def test_gradient_on_degenerate_branch(self):
        da = np.array([0.4, -0.2])
        _, grad_a, grad_b = segment_log_integral(da, da.copy(), with_grad=True)
        np.testing.assert_allclose(grad_a, -da, rtol=1e-12)
        np.testing.assert_allclose(grad_b, -da, rtol=1e-12)

    def test_gradient_when_direction_is_nearly_degenerate(self):
        da = np.array([2.0, 1.0])
        for delta in (1e-2, 1e-4, 1e-5, 1e-7, 1e-8, 2e-9):
            db = da + delta * np.array([1.0, 0.3])
            self.assert_gradient(da, db)
            exact, _ = quad(lambda s: np.exp(-np.sum((da + s * (db - da)) ** 2)), 0, 1, epsabs=0.0, epsrel=1e-13)
            self.assertAlmostEqual(float(segment_log_integral(da, db)), np.log(exact), places=11)

    def test_near_degenerate_rows_of_a_batch(self):
        da = np.array([[2.0, 1.0], [0.3, -0.4], [1.0, 1.0]])
        db = da + np.array([[1e-8, 3e-9], [0.5, 0.2], [0.0, 0.0]])
        log_I, grad_a, grad_b = segment_log_integral(da, db, with_grad=True)
        for row in range(3):
            single = segment_log_integral(da[row], db[row], with_grad=True)
            self.assertAlmostEqual(float(log_I[row]), float(single[0]), places=14)
            np.testing.assert_allclose(grad_a[row], single[1], rtol=1e-12)
            np.testing.assert_allclose(grad_b[row], single[2], rtol=1e-12)


class NllTest(SimpleTestCase):
    def setUp(self):
        self.ev = small_history()
        self.part = IntervalPartition.uniform(3)
        rng = np.random.default_rng(5)
        self.cfg = LatentConfiguration(rng.standard_normal((self.ev.n, 4, 2)) * 0.7, self.part)
        self.rm = RateModel(beta=0.3)

    def test_pair_interval_nll_examples(self):
        cfg = LatentConfiguration(np.zeros((2, 16, 2)), IntervalPartition.uniform(15))
        self.assertAlmostEqual(pair_interval_nll(cfg, RateModel(), 0, 1, 4, []), 1 / 15, places=14)
        self.assertAlmostEqual(pair_interval_nll(cfg, RateModel(), 0, 1, 4, [0.21]), 1 / 15, places=14)

    def test_pair_interval_nll_is_the_poisson_process_density(self):
        lo, hi = self.part.bounds(2)
        times = np.array([lo + 0.1 * (hi - lo), lo + 0.7 * (hi - lo)])
        nll = pair_interval_nll(self.cfg, self.rm, 0, 2, 2, times)
        survival = quad_rate(self.cfg.z, self.part, self.rm.beta, 0, 2, 2)
        density = np.exp(-survival) * np.prod([np.exp(log_rate(self.cfg, self.rm, 0, 2, t)) for t in times])
        self.assertAlmostEqual(np.exp(-nll) / density, 1.0, places=8)

    def test_event_outside_interval(self):
        with self.assertRaises(ModelError):
            pair_interval_nll(self.cfg, self.rm, 0, 1, 1, [0.9])

    def test_full_likelihood_decomposes_over_pairs(self):
        expected = 0.0
        for i in range(self.ev.n):
            for j in range(i + 1, self.ev.n):
                for k in range(1, 4):
                    lo, hi = self.part.bounds(k)
                    mask = (self.ev.sources == i) & (self.ev.dests == j) & (self.part.interval_of(self.ev.times) == k)
                    expected += pair_interval_nll(self.cfg, self.rm, i, j, k, self.ev.times[mask])
        self.assertAlmostEqual(total_nll(self.cfg, self.rm, self.ev) / expected, 1.0, places=12)

    def test_translation_invariance(self):
        shifted = LatentConfiguration(self.cfg.z + np.array([3.0, -2.0]), self.part)
        self.assertAlmostEqual(total_nll(shifted, self.rm, self.ev) / total_nll(self.cfg, self.rm, self.ev), 1.0,
                               places=10)

    def test_rotation_invariance(self):
        angle = 0.7
        rotation = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        rotated = LatentConfiguration(self.cfg.z @ rotation.T, self.part)
        self.assertAlmostEqual(total_nll(rotated, self.rm, self.ev) / total_nll(self.cfg, self.rm, self.ev), 1.0,
                               places=9)

    def test_survival_scales_with_beta(self):
        plan = SamplingPlan.full(self.ev, self.part)
        low = evaluate_nll(self.cfg.z, 0.3, "euclidean", self.part, plan)
        high = evaluate_nll(self.cfg.z, 1.3, "euclidean", self.part, plan)
        self.assertAlmostEqual(high.survival / low.survival, np.e, places=12)

    def test_threads_do_not_change_the_value(self):
        plan = SamplingPlan.full(self.ev, self.part)
        single = evaluate_nll(self.cfg.z, 0.3, "euclidean", self.part, plan, with_grad=True)
        many = evaluate_nll(self.cfg.z, 0.3, "euclidean", self.part, plan, with_grad=True, threads=3)
        self.assertAlmostEqual(many.value / single.value, 1.0, places=12)
        np.testing.assert_allclose(many.dz, single.dz, rtol=1e-10, atol=1e-13)

    def test_node_plan_without_sampling_equals_full(self):
        full = evaluate_nll(self.cfg.z, 0.3, "euclidean", self.part, SamplingPlan.full(self.ev, self.part))
        node = evaluate_nll(self.cfg.z, 0.3, "euclidean", self.part, SamplingPlan.sampled(self.ev, self.part))
        self.assertAlmostEqual(node.value / full.value, 1.0, places=12)

    def test_excluded_pairs_leave_the_likelihood(self):
        plan = SamplingPlan.full(self.ev, self.part, excluded=frozenset({(0, 1)}))
        rows = set(zip(plan.pair_i.tolist(), plan.pair_j.tolist()))
        self.assertNotIn((0, 1), rows)
        self.assertFalse(np.any((plan.event_i == 0) & (plan.event_j == 1)))

    def test_negative_sampling_is_unbiased(self):
        rng = np.random.default_rng(10)
        rows = [(str(a), str(b), t) for a, b, t in zip(rng.integers(0, 10, 40), rng.integers(0, 10, 40),
                                                        rng.uniform(0, 1, 40))]
        text = "source,dest,timestamp\n" + "".join(f"{s},{d},{t}\n" for s, d, t in rows)
        ev = parse_events(io.StringIO(text), time_range=(0.0, 1.0))
        part = IntervalPartition.uniform(2)
        z = rng.standard_normal((ev.n, 3, 2)) * 0.5
        full = evaluate_nll(z, 0.0, "euclidean", part, SamplingPlan.full(ev, part)).value
        plans = np.random.default_rng(99)
        values = np.array([evaluate_nll(z, 0.0, "euclidean", part,
                                        SamplingPlan.sampled(ev, part, negatives=2, seed=plans)).value
                           for _ in range(2000)])
        stderr = values.std(ddof=1) / np.sqrt(values.size)
        self.assertLess(abs(values.mean() - full), 4 * stderr + 1e-9)

    def assert_nll_gradient(self, kind):
        plan = SamplingPlan.full(self.ev, self.part)
        beta = 0.3
        result = evaluate_nll(self.cfg.z, beta, kind, self.part, plan, R=20, with_grad=True)
        h = 1e-6
        fd = np.zeros_like(self.cfg.z)
        for idx in np.ndindex(*self.cfg.z.shape):
            up, down = self.cfg.z.copy(), self.cfg.z.copy()
            up[idx] += h
            down[idx] -= h
            fd[idx] = (evaluate_nll(up, beta, kind, self.part, plan, R=20).value
                       - evaluate_nll(down, beta, kind, self.part, plan, R=20).value) / (2 * h)
        np.testing.assert_allclose(result.dz, fd, rtol=1e-5, atol=1e-6)
        fd_beta = (evaluate_nll(self.cfg.z, beta + h, kind, self.part, plan, R=20).value
                   - evaluate_nll(self.cfg.z, beta - h, kind, self.part, plan, R=20).value) / (2 * h)
        self.assertAlmostEqual(result.dbeta, fd_beta, delta=1e-5 * max(1.0, abs(fd_beta)))

    def test_euclidean_gradient(self):
        self.assert_nll_gradient(RateKind.EUCLIDEAN)

    def test_dot_product_gradient(self):
        self.assert_nll_gradient(RateKind.DOT_PRODUCT)
