"""Finite-difference gradient checks for the primitives and recurrent cells.

Instances are single-channel with a 3x3 spatial grid.  Each check draws its
weights from a seeded generator, unrolls a few steps from a non-zero state
and contracts the outputs with fixed random weights so every gradient is of
order one.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import loss, nn
from .cells import CELL_VARIANTS, ConvLstmState, _STEP, init_convlstm_weights, init_tcn_weights, tcn_causal_conv
from .geometry import ImageDims
from .nn import GradCheckReport, Parameter, Tensor

CHECK_VARIANTS = CELL_VARIANTS + ("tcn",)
SPATIAL = (1, 3, 3)


def _contract(outputs, rng) -> Tensor:
    total = None
    for y in outputs:
        term = nn.sum_(nn.mul(y, rng.normal(size=y.shape)))
        total = term if total is None else nn.add(total, term)
    return total


def _cell_instance(variant: str, rng: np.random.Generator, steps: int = 3):
    weights = init_convlstm_weights(rng, 1, 1, 3, variant)
    for p in weights.values():
        p.data[...] = rng.uniform(-1, 1, p.shape)
    xs = [rng.normal(size=SPATIAL) for _ in range(steps)]
    h0 = Parameter(rng.uniform(-0.5, 0.5, SPATIAL), "H0")
    c0 = Parameter(rng.uniform(-0.5, 0.5, SPATIAL), "C0")
    x0 = Parameter(xs[0], "X0")
    contract = [rng.normal(size=SPATIAL) for _ in range(steps)]
    step = _STEP[variant]

    def fn():
        state = ConvLstmState(h0, c0)
        total = None
        for t in range(steps):
            y, state = step(weights, x0 if t == 0 else xs[t], state)
            term = nn.sum_(nn.mul(nn.add(y, state.C), contract[t]))
            total = term if total is None else nn.add(total, term)
        return total

    return fn, [*weights.values(), h0, c0, x0]


def _tcn_instance(rng: np.random.Generator, steps: int = 4, length: int = 3):
    w = init_tcn_weights(rng, 1, 1, length)
    w["H"].data[...] = rng.uniform(-1, 1, w["H"].shape)
    w["b"].data[...] = rng.uniform(-1, 1, w["b"].shape)
    frames = [Parameter(rng.normal(size=SPATIAL), f"X{t}") for t in range(steps)]
    crng_state = rng.bit_generator.state

    def fn():
        crng = np.random.default_rng()
        crng.bit_generator.state = crng_state
        return _contract([nn.tanh(y) for y in tcn_causal_conv(w["H"], w["b"], frames)], crng)

    return fn, [w["H"], w["b"], *frames]


def check_variant(variant: str, tolerance: float = 1e-4, seed: int = 0,
                  eps: float = 1e-5) -> GradCheckReport:
    """Gradient check of one cell variant (or ``"tcn"``) on a 1-channel 3x3 instance."""
    rng = np.random.default_rng(seed)
    if variant == "tcn":
        fn, params = _tcn_instance(rng)
    elif variant in CELL_VARIANTS:
        fn, params = _cell_instance(variant, rng)
    else:
        raise ValueError(f"unknown variant {variant!r}; expected one of {CHECK_VARIANTS}")
    return nn.grad_check(fn, params, tolerance, eps)


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Parameter]]]:
    def p(name, shape=SPATIAL, lo=-1.0, hi=1.0):
        return Parameter(rng.uniform(lo, hi, shape), name)

    def away_from(x: Parameter, kinks, margin=0.05):
        # nudge entries off non-differentiable points
        for k in kinks:
            near = np.abs(x.data - k) < margin
            x.data[near] = k + np.where(x.data[near] >= k, margin, -margin) * 2
        return x

    R = rng.normal(size=SPATIAL)
    cases = {}
    a, b = p("a"), p("b")
    cases["add"] = (lambda: nn.sum_(nn.mul(nn.add(a, b), R)), [a, b])
    cases["sub"] = (lambda: nn.sum_(nn.mul(nn.sub(a, b), R)), [a, b])
    cases["hadamard"] = (lambda: nn.sum_(nn.mul(nn.hadamard(a, b), R)), [a, b])
    cases["scale"] = (lambda: nn.sum_(nn.mul(nn.scale(a, 1.7), R)), [a])
    cases["sigmoid"] = (lambda: nn.sum_(nn.mul(nn.sigmoid(a), R)), [a])
    cases["tanh"] = (lambda: nn.sum_(nn.mul(nn.tanh(a), R)), [a])
    r = away_from(p("r"), [0.0])
    cases["relu"] = (lambda: nn.sum_(nn.mul(nn.relu(r), R)), [r])
    s = away_from(p("s"), [0.0])
    cases["abs"] = (lambda: nn.sum_(nn.mul(nn.abs_(s), R)), [s])
    t = p("t", lo=-1.2, hi=1.2)
    cases["tan"] = (lambda: nn.sum_(nn.mul(nn.tan(t), R)), [t])
    hx, hy = p("hx", lo=-3, hi=3), Tensor(rng.uniform(-3, 3, SPATIAL))
    away_from(hx, list((hy.data + 1).ravel()) + list((hy.data - 1).ravel()), 0.02)
    cases["huber"] = (lambda: nn.sum_(nn.mul(nn.huber(hx, hy), R)), [hx])
    cases["mean"] = (lambda: nn.mul(nn.mean(nn.tanh(a)), 3.0), [a])
    cases["reshape"] = (lambda: nn.sum_(nn.mul(nn.reshape(a, (9,)), R.reshape(9))), [a])
    cases["concat"] = (lambda: nn.sum_(nn.mul(nn.concat_channels([a, nn.tanh(b)]),
                                              np.concatenate([R, R[::-1]]))), [a, b])
    cases["stack"] = (lambda: nn.sum_(nn.mul(nn.stack([a, b]), np.stack([R, -R]))), [a, b])
    cases["slice"] = (lambda: nn.sum_(nn.mul(nn.slice_axis(a, -1, 1, 3), R[..., 1:3])), [a])
    cases["select"] = (lambda: nn.sum_(nn.mul(nn.select(a, -2, 1), R[:, 1])), [a])
    cases["global_avg_pool"] = (lambda: nn.sum_(nn.mul(nn.global_avg_pool(nn.tanh(a)), 2.5)), [a])
    fw, fb = p("fc.W", (1, 9)), p("fc.b", (1,))
    cases["fully_connected"] = (lambda: nn.sum_(nn.tanh(nn.fully_connected(nn.reshape(a, (9,)), fw, fb))),
                                [a, fw, fb])
    x5 = p("x5", (2, 5, 5))
    k = p("conv.W", (2, 2, 3, 3))
    cb = p("conv.b", (2,))
    R5 = rng.normal(size=(2, 5, 5))
    R3 = rng.normal(size=(2, 3, 3))
    cases["conv2d"] = (lambda: nn.sum_(nn.mul(nn.conv2d(x5, k, cb), R5)), [x5, k, cb])
    cases["conv2d_stride2"] = (lambda: nn.sum_(nn.mul(nn.conv2d(x5, k, cb, stride=2), R3)), [x5, k, cb])

    dims = ImageDims(3.0, 3.0)
    om, th = p("omega", (5,), -1, 1), p("theta", (5,), -0.3, 0.3)
    og, tg = rng.uniform(-1, 1, 5), rng.uniform(-0.3, 0.3, 5)
    cases["loss_omega_theta"] = (lambda: nn.sum_(loss.loss_omega_theta(om, th, og, tg)), [om, th])
    cases["loss_horizon"] = (lambda: nn.sum_(loss.loss_horizon(om, th, og, tg, dims)), [om, th])
    return cases


def check_primitives(tolerance: float = 1e-4, seed: int = 0, eps: float = 1e-5) -> dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)
    return {name: nn.grad_check(fn, params, tolerance, eps)
            for name, (fn, params) in _primitive_cases(rng).items()}
