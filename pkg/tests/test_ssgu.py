"""Anchor scheduling and gradient reuse for step-skipped optimization."""

import math
import time

import numpy as np
import pytest

from conceptswap.distill import GradientField
from conceptswap.errors import ContractError, ParamError, ShapeError
from conceptswap.ssgu import GradientCache, SSGUSchedule, apply_update, gradient_for_step, plan


class TestPlan:
    def test_period_one_disables_skipping(self):
        sched = plan(10, 1)
        assert sched.anchors == tuple(range(10))
        assert sched.forward_pass_count() == 10

    def test_partial_trailing_period(self):
        sched = plan(7, 3)
        assert sched.anchors == (0, 3, 6)
        assert sched.forward_pass_count() == 3

    def test_anchor_counts(self):
        # (total steps, period) -> gradient computations
        for (total, period), count in {
            (550, 5): 110,
            (550, 1): 550,
            (7, 3): 3,
            (10, 5): 2,
        }.items():
            assert plan(total, period).forward_pass_count() == count

    def test_count_is_ceil_over_random_configs(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            total = int(rng.integers(1, 700))
            period = int(rng.integers(1, 12))
            sched = plan(total, period)
            assert sched.forward_pass_count() == math.ceil(total / period)
            assert sched.anchors[0] == 0
            assert all(b > a for a, b in zip(sched.anchors, sched.anchors[1:]))
            assert all(i % period == 0 for i in sched.anchors)

    def test_parameter_domains(self):
        with pytest.raises(ParamError):
            plan(0, 5)
        with pytest.raises(ParamError):
            plan(10, 0)


class TestGradientForStep:
    def _grad(self, fill, t=0):
        return GradientField(values=np.full((4, 8, 8), float(fill)), t=t)

    def test_step_zero_always_computes(self):
        cache = GradientCache()
        grad, computed = gradient_for_step(0, plan(10, 5), cache, lambda: self._grad(1))
        assert computed
        assert cache.last_anchor_step == 0
        assert cache.last_gradient is grad

    def test_non_anchor_reuses_without_computing(self):
        """At period 2, step 1 applies g_0 and never calls the thunk."""
        cache = GradientCache()
        sched = plan(10, 2)
        g0, _ = gradient_for_step(0, sched, cache, lambda: self._grad(3))

        def explode():
            raise AssertionError("thunk must not run on a reuse step")

        reused, computed = gradient_for_step(1, sched, cache, explode)
        assert not computed
        assert reused is g0

    def test_compute_pattern_over_a_run(self):
        sched = plan(10, 5)
        cache = GradientCache()
        calls = []

        def thunk():
            calls.append(True)
            return self._grad(len(calls))

        computed_at = []
        for i in range(10):
            grad, computed = gradient_for_step(i, sched, cache, thunk)
            if computed:
                computed_at.append(i)
            expected_fill = 1.0 if i < 5 else 2.0
            assert grad.values[0, 0, 0] == expected_fill
        assert computed_at == [0, 5]
        assert len(calls) == 2

    def test_cold_cache_is_a_contract_violation(self):
        with pytest.raises(ContractError, match="empty gradient cache"):
            gradient_for_step(1, plan(10, 2), GradientCache(), lambda: self._grad(0))

    def test_step_domain(self):
        cache = GradientCache()
        sched = plan(10, 2)
        with pytest.raises(ParamError):
            gradient_for_step(-1, sched, cache, lambda: self._grad(0))
        with pytest.raises(ParamError):
            gradient_for_step(10, sched, cache, lambda: self._grad(0))


class TestApplyUpdate:
    def test_zero_eta_is_identity(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((4, 8, 8))
        g = GradientField(values=rng.standard_normal((4, 8, 8)), t=0)
        np.testing.assert_array_equal(apply_update(z, g, 0.0), z)

    def test_zero_gradient_is_identity(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal((4, 8, 8))
        g = GradientField(values=np.zeros((4, 8, 8)), t=0)
        np.testing.assert_array_equal(apply_update(z, g, 0.1), z)

    def test_hand_case(self):
        z = np.ones((4, 4, 4))
        g = GradientField(values=np.ones((4, 4, 4)), t=0)
        np.testing.assert_array_equal(apply_update(z, g, 0.1), np.full((4, 4, 4), 0.9))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            apply_update(
                np.zeros((4, 8, 8)), GradientField(values=np.zeros((4, 4, 4)), t=0), 0.1
            )


class TestSpeedupProxy:
    def test_wall_clock_scales_with_anchor_count(self):
        """With the thunk cost dominating, period 5 runs in ~1/5 the time.

        The bound allows 15 points of loop overhead on top of the ideal
        1/period ratio.
        """

        def timed_run(period, total=60, cost=0.003):
            sched = plan(total, period)
            cache = GradientCache()
            z = np.zeros((4, 8, 8))

            def thunk():
                time.sleep(cost)
                return GradientField(values=np.ones((4, 8, 8)), t=0)

            start = time.perf_counter()
            for i in range(total):
                grad, _ = gradient_for_step(i, sched, cache, thunk)
                z = apply_update(z, grad, 0.1)
            return time.perf_counter() - start

        base = timed_run(1)
        skipped = timed_run(5)
        assert skipped <= (1 / 5 + 0.15) * base
