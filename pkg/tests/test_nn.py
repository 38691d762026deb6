import json

import numpy as np
import pytest

from tchorizon import gradcheck, nn
from tchorizon.errors import NonFinite, NotScalar, ShapeMismatch
from tchorizon.nn import Parameter, Tape, Tensor


def naive_conv(x, k, b=None, stride=1):
    """Direct loop cross-correlation with zero same-padding."""
    c_in, h, w = x.shape
    c_out, _, ka, kb = k.shape
    pa, pb = ka // 2, kb // 2
    xp = np.zeros((c_in, h + 2 * pa, w + 2 * pb))
    xp[:, pa:pa + h, pb:pb + w] = x
    ho, wo = (h + 2 * pa - ka) // stride + 1, (w + 2 * pb - kb) // stride + 1
    y = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0 if b is None else b[o]
                for c in range(c_in):
                    for a in range(ka):
                        for bb in range(kb):
                            acc += k[o, c, a, bb] * xp[c, i * stride + a, j * stride + bb]
                y[o, i, j] = acc
    return y


def grads(fn, *params):
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return [p.grad for p in params]


class TestConv:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 4, 5))
        assert np.array_equal(nn.conv2d(x, np.ones((1, 1, 1, 1))).data, x)

    def test_zero_kernel_bias(self, rng):
        y = nn.conv2d(rng.normal(size=(2, 4, 4)), np.zeros((3, 2, 3, 3)), np.array([1.5, -2, 0]))
        assert np.array_equal(y.data[0], np.full((4, 4), 1.5)) and np.all(y.data[1] == -2)

    def test_loop_oracle(self, rng):
        x, k, b = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        assert np.allclose(nn.conv2d(x, k, b).data, naive_conv(x, k, b), atol=1e-12, rtol=0)

    @pytest.mark.parametrize("stride,size", [(1, (7, 6)), (2, (7, 6)), (2, (8, 8)), (3, (5, 9))])
    def test_loop_oracle_strided(self, rng, stride, size):
        x, k = rng.normal(size=(2, *size)), rng.normal(size=(2, 2, 3, 5))
        y = nn.conv2d(x, k, stride=stride).data
        assert y.shape[1:] == (nn.conv_output_size(size[0], 3, stride), nn.conv_output_size(size[1], 5, stride))
        assert np.allclose(y, naive_conv(x, k, stride=stride), atol=1e-12, rtol=0)

    def test_integer_inputs_bit_exact(self, rng):
        x = rng.integers(-1000, 1000, size=(3, 6, 6)).astype(float)
        k = rng.integers(-1000, 1000, size=(2, 3, 3, 3)).astype(float)
        assert np.array_equal(nn.conv2d(x, k).data, naive_conv(x, k))

    def test_batched_matches_per_frame(self, rng):
        x, k = rng.normal(size=(4, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
        y = nn.conv2d(x, k).data
        for n in range(4):
            assert np.allclose(y[n], nn.conv2d(x[n], k).data, atol=1e-14)

    def test_shape_errors(self, rng):
        with pytest.raises(ShapeMismatch):
            nn.conv2d(rng.normal(size=(2, 4, 4)), rng.normal(size=(1, 3, 3, 3)))
        with pytest.raises(ShapeMismatch):
            nn.conv2d(rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 1, 2, 2)))
        with pytest.raises(ShapeMismatch):
            nn.conv2d(rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 1, 3, 3)), np.zeros(2))


class TestElementwise:
    def test_trivial_values(self, rng):
        assert nn.sigmoid(0.0).item() == 0.5
        assert nn.tanh(0.0).item() == 0.0
        x = rng.normal(size=(2, 3, 3))
        assert np.array_equal(nn.hadamard(x, np.ones_like(x)).data, x)
        assert np.array_equal(nn.global_avg_pool(np.full((3, 4, 5), 2.5)).data, [2.5] * 3)

    def test_sigmoid_stable(self):
        y = nn.sigmoid(np.array([-800.0, 800.0])).data
        assert y[0] == 0.0 and y[1] == 1.0

    def test_concat_channels(self, rng):
        a, b = rng.normal(size=(2, 3, 3)), rng.normal(size=(1, 3, 3))
        assert np.array_equal(nn.concat_channels([a, b]).data, np.concatenate([a, b]))

    def test_fully_connected(self, rng):
        x, w, b = rng.normal(size=5), rng.normal(size=(1, 5)), np.array([0.25])
        assert nn.fully_connected(x, w, b).item() == pytest.approx(x @ w[0] + 0.25, abs=1e-15)
        with pytest.raises(ShapeMismatch):
            nn.fully_connected(x, rng.normal(size=(2, 5)), b)

    def test_broadcast_mismatch(self):
        with pytest.raises(ShapeMismatch):
            nn.add(np.zeros(3), np.zeros(4))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_is_error(self):
        with pytest.raises(NonFinite):
            Tensor([1.0, np.nan])
        with pytest.raises(NonFinite):
            nn.scale(np.array([1e308]), 10.0)

    def test_tensor_is_read_only(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 3.0


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Parameter(rng.normal(size=(2, 3)), "x")
        (g,) = grads(lambda: nn.sum_(x), x)
        assert np.array_equal(g, np.ones((2, 3)))

    def test_sigmoid_closed_form(self):
        w, x = Parameter(np.array([0.7]), "w"), 1.3
        (g,) = grads(lambda: nn.sum_(nn.sigmoid(nn.scale(w, x))), w)
        s = 1 / (1 + np.exp(-0.7 * 1.3))
        assert g[0] == pytest.approx(s * (1 - s) * x, abs=1e-15)

    def test_shared_input_accumulates(self):
        a = Parameter(np.array([2.0]), "a")
        (g,) = grads(lambda: nn.sum_(nn.hadamard(a, a)), a)
        assert g[0] == 4.0

    def test_grads_accumulate_across_backward_calls(self):
        a = Parameter(np.array([1.0]), "a")
        for _ in range(2):
            with Tape() as tape:
                loss = nn.sum_(nn.scale(a, 3.0))
            tape.backward(loss)
        assert a.grad[0] == 6.0

    def test_not_scalar(self):
        a = Parameter(np.ones(3), "a")
        with Tape() as tape:
            y = nn.scale(a, 2.0)
        with pytest.raises(NotScalar):
            tape.backward(y)

    def test_no_tape_no_records(self):
        a = Parameter(np.ones(3), "a")
        nn.sum_(a)
        with Tape() as tape:
            nn.sum_(Tensor(np.ones(3)))
        assert len(tape) == 0

    def test_deterministic_forward(self, rng):
        x, k = rng.normal(size=(2, 6, 6)), rng.normal(size=(2, 2, 3, 3))
        a = nn.tanh(nn.conv2d(x, k)).data
        b = nn.tanh(nn.conv2d(x, k)).data
        assert a.tobytes() == b.tobytes()


class TestGradCheck:
    def test_linear_exact(self, rng):
        w = Parameter(rng.normal(size=(3, 3)), "w")
        c = rng.normal(size=(3, 3))
        rep = nn.grad_check(lambda: nn.sum_(nn.mul(w, c)), [w])
        assert rep.passed and rep.worst < 1e-8

    def test_wrong_gradient_fails(self, rng):
        w = Parameter(rng.normal(size=4), "w")
        rep = nn.grad_check(lambda: nn.sum_(nn.hadamard(w, w)), [w],
                            analytic=lambda: {"w": 3 * w.data})
        assert not rep.passed and rep.failures == ["w"]

    def test_huber_away_from_kink(self, rng):
        x = Parameter(rng.uniform(-3, 3, 50), "x")
        target = rng.uniform(-3, 3, 50)
        kink = np.abs(np.abs(x.data - target) - 1) < 0.05
        x.data[kink] += 0.2
        assert nn.grad_check(lambda: nn.sum_(nn.huber(x, target)), [x]).passed

    @pytest.mark.parametrize("seed", range(10))
    def test_every_primitive(self, seed):
        reports = gradcheck.check_primitives(1e-4, seed)
        bad = {k: r.worst for k, r in reports.items() if not r.passed}
        assert not bad


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        params = {"a": Parameter(rng.normal(size=(2, 3)), "a"), "b": Parameter(rng.normal(size=1), "b")}
        nn.save_checkpoint(tmp_path / "c.json", params, {"seed": 7})
        arrays, meta = nn.load_checkpoint(tmp_path / "c.json")
        assert meta == {"seed": 7}
        assert all(np.array_equal(arrays[k], params[k].data) for k in params)
        doc = json.loads((tmp_path / "c.json").read_text())
        assert doc["format"] == "tchorizon-checkpoint" and doc["version"] == 1

    def test_rejects_unknown_format(self):
        with pytest.raises(ValueError):
            nn.checkpoint_from_json({"format": "other", "version": 1, "tensors": {}})

    def test_init_uniform_bounds(self, rng):
        p = nn.init_uniform(rng, (64, 3, 3, 3), 27, "w")
        assert np.all(np.abs(p.data) <= np.sqrt(1 / 27)) and p.grad.shape == p.shape
