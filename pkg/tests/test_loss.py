import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tchorizon import loss, metrics, nn
from tchorizon.geometry import HorizonParams, ImageDims
from tchorizon.loss import ScheduleState
from tchorizon.nn import Parameter, Tape

DIMS = ImageDims(64, 48)


def backward(fn, *params):
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        value = fn()
    tape.backward(value)
    return value.item(), [p.grad.copy() for p in params]


class TestHuber:
    @pytest.mark.parametrize("d,want", [(0, 0), (0.5, 0.125), (1, 0.5), (3, 2.5), (-2, 1.5)])
    def test_examples(self, d, want):
        assert loss.huber(d, 0) == want
        assert nn.huber(np.array([d], float), 0.0).item() == want

    def test_omega_theta_example(self):
        assert loss.loss_omega_theta(np.array(3.0), np.array(0.5), 0.0, 0.0).item() == 2.625

    @given(st.floats(-50, 50), st.floats(-50, 50))
    def test_scalar_matches_tensor(self, a, b):
        assert nn.huber(np.array(a), b).item() == pytest.approx(loss.huber(a, b), abs=1e-12)


class TestLossHorizon:
    def test_bit_identical_to_metric(self, rng):
        om, th = rng.normal(0, 10, 200), rng.uniform(-0.3, 0.3, 200)
        og, tg = rng.normal(0, 10, 200), rng.uniform(-0.3, 0.3, 200)
        got = loss.loss_horizon(om, th, og, tg, DIMS).data
        want = [metrics.max_horizon_error(HorizonParams(*a), HorizonParams(*b), DIMS)
                for a, b in zip(zip(om, th), zip(og, tg))]
        assert got.tolist() == want

    def test_offset_gradient_magnitude(self, rng):
        om = Parameter(rng.normal(0, 5, 20), "om")
        th = Parameter(rng.uniform(-0.2, 0.2, 20), "th")
        og, tg = om.data + rng.choice([-3.0, 3.0], 20), th.data.copy()
        _, (g_om, _) = backward(lambda: nn.sum_(loss.loss_horizon(om, th, og, tg, DIMS)), om, th)
        assert np.allclose(np.abs(g_om), 1 / DIMS.height, atol=1e-15)
        # predicted offset above truth (larger omega) means the line is lower in y: gap negative
        assert np.all(np.sign(g_om) == np.sign(om.data - og))

    def test_finite_differences(self, rng):
        om = Parameter(rng.normal(0, 5, 30), "om")
        th = Parameter(rng.uniform(-0.3, 0.3, 30), "th")
        og, tg = rng.normal(0, 5, 30), rng.uniform(-0.3, 0.3, 30)
        rep = nn.grad_check(lambda: nn.sum_(loss.loss_horizon(om, th, og, tg, DIMS)), [om, th])
        assert rep.passed, rep.max_rel_error

    def test_zero_error_has_zero_gradient(self):
        om, th = Parameter(np.array([2.0]), "om"), Parameter(np.array([0.1]), "th")
        v, (g_om, g_th) = backward(lambda: nn.sum_(loss.loss_horizon(om, th, [2.0], [0.1], DIMS)), om, th)
        assert v == 0 and g_om[0] == 0 and g_th[0] == 0

    def test_tie_takes_left_border(self):
        # pure slope change pivots at the centre, so both borders tie
        om, th = Parameter(np.array([0.0]), "om"), Parameter(np.array([0.2]), "th")
        _, (g_om, g_th) = backward(lambda: nn.sum_(loss.loss_horizon(om, th, [0.0], [0.0], DIMS)), om, th)
        d0 = -0.5 * DIMS.width * math.tan(0.2)
        assert g_om[0] == -np.sign(d0) / DIMS.height
        assert g_th[0] == pytest.approx(np.sign(d0) * -0.5 * DIMS.width / math.cos(0.2) ** 2 / DIMS.height)


class TestSchedule:
    def test_lambda_points(self):
        assert loss.lambda_schedule(ScheduleState(0, 30)) == 1.0
        assert loss.lambda_schedule(ScheduleState(30, 30)) == 0.0
        assert loss.lambda_schedule(ScheduleState(15, 30)) == 0.5

    @given(st.integers(1, 200), st.data())
    def test_monotone(self, T, data):
        a = data.draw(st.integers(0, T))
        b = data.draw(st.integers(a, T))
        assert loss.lambda_schedule(ScheduleState(b, T)) <= loss.lambda_schedule(ScheduleState(a, T))

    def test_invalid(self):
        for e, t in ((-1, 5), (6, 5), (0, 0)):
            with pytest.raises(ValueError):
                ScheduleState(e, t)


class TestCombined:
    def setup(self, rng, n=12):
        return (rng.normal(0, 6, n), rng.uniform(-0.3, 0.3, n), rng.normal(0, 6, n), rng.uniform(-0.3, 0.3, n))

    def test_endpoints_exact(self, rng):
        om, th, og, tg = self.setup(rng)
        start = loss.combined_loss(ScheduleState(0, 10), om, th, og, tg, DIMS).item()
        end = loss.combined_loss(ScheduleState(10, 10), om, th, og, tg, DIMS).item()
        assert start == nn.mean(loss.loss_omega_theta(om, th, og, tg)).item()
        assert end == nn.mean(loss.loss_horizon(om, th, og, tg, DIMS)).item()

    def test_midpoint_blend(self, rng):
        om, th, og, tg = self.setup(rng)
        mid = loss.combined_loss(ScheduleState(5, 10), om, th, og, tg, DIMS).item()
        a = np.mean(loss.loss_omega_theta(om, th, og, tg).data)
        b = np.mean(loss.loss_horizon(om, th, og, tg, DIMS).data)
        assert mid == pytest.approx(0.5 * a + 0.5 * b, abs=1e-14)

    def test_offset_scale(self, rng):
        om, th, og, tg = self.setup(rng)
        got = loss.combined_loss(ScheduleState(0, 10), om, th, og, tg, DIMS, offset_scale=DIMS.height).item()
        want = np.mean([loss.huber(a / 48, b / 48) + loss.huber(c, d) for a, b, c, d in zip(om, og, th, tg)])
        assert got == pytest.approx(want, abs=1e-14)

    def test_mask_excludes_frames(self, rng):
        om, th, og, tg = self.setup(rng)
        mask = np.r_[np.zeros(4), np.ones(8)]
        got = loss.combined_loss(ScheduleState(3, 10), om, th, og, tg, DIMS, mask=mask).item()
        want = loss.combined_loss(ScheduleState(3, 10), om[4:], th[4:], og[4:], tg[4:], DIMS).item()
        assert got == pytest.approx(want, abs=1e-14)

    def test_gradient_check(self, rng):
        om0, th0, og, tg = self.setup(rng)
        om, th = Parameter(om0, "om"), Parameter(th0, "th")
        rep = nn.grad_check(lambda: loss.combined_loss(ScheduleState(4, 10), om, th, og, tg, DIMS,
                                                       offset_scale=48.0), [om, th])
        assert rep.passed, rep.max_rel_error
