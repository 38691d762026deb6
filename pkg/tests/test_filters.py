import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tchorizon import filters
from tchorizon.errors import BadAlpha, EmptyInput
from tchorizon.geometry import HorizonParams, ImageDims
from tchorizon.kitti import SequenceAnnotation

series = st.lists(st.builds(HorizonParams, st.floats(-100, 100), st.floats(-1, 1)), min_size=1, max_size=30)
alphas = st.floats(0.01, 1.0)


def test_alpha_one_is_identity():
    xs = [HorizonParams(1.5, 0.1), HorizonParams(-3.25, -0.2)]
    assert filters.exp_smooth(xs, 1.0) == xs


def test_step_input():
    xs = [HorizonParams(w, 0.0) for w in (0.0, 1.0, 1.0)]
    assert [p.omega for p in filters.exp_smooth(xs, 0.5)] == [0.0, 0.5, 0.75]


def test_default_alpha():
    assert filters.DEFAULT_ALPHA == 0.5


@given(st.floats(-100, 100), st.floats(-1, 1), alphas, st.integers(1, 20))
def test_constant_series(omega, theta, alpha, n):
    p = HorizonParams(omega, theta)
    out = filters.exp_smooth([p] * n, alpha)
    assert all(q.omega == pytest.approx(omega, abs=1e-12) and q.theta == pytest.approx(theta, abs=1e-15)
               for q in out)


@given(series, alphas)
def test_convex_combination(xs, alpha):
    out = filters.exp_smooth(xs, alpha)
    assert len(out) == len(xs)
    for t, q in enumerate(out):
        # explicit weights: alpha (1-alpha)^(t-k) for k >= 1 and (1-alpha)^t for x_0
        w = [(1 - alpha) ** t] + [alpha * (1 - alpha) ** (t - k) for k in range(1, t + 1)]
        assert math.fsum(w) == pytest.approx(1.0, abs=1e-12)
        assert q.omega == pytest.approx(math.fsum(wi * x.omega for wi, x in zip(w, xs)), abs=1e-9)
        lo, hi = min(x.theta for x in xs[:t + 1]), max(x.theta for x in xs[:t + 1])
        assert lo - 1e-12 <= q.theta <= hi + 1e-12


def test_errors():
    with pytest.raises(EmptyInput):
        filters.exp_smooth([], 0.5)
    for a in (0.0, -0.1, 1.5, float("nan")):
        with pytest.raises(BadAlpha):
            filters.exp_smooth([HorizonParams(0, 0)], a)


def _ann(params, sid="s"):
    return SequenceAnnotation.from_params(sid, params, ImageDims(10, 10))


def test_mean_baseline_examples():
    assert filters.mean_baseline([_ann([HorizonParams(3, 0.1)])]) == HorizonParams(3, 0.1)
    m = filters.mean_baseline([_ann([HorizonParams(0, 0)]), _ann([HorizonParams(2, 0.2)])])
    assert m.omega == 1 and m.theta == pytest.approx(0.1, abs=1e-17)
    with pytest.raises(EmptyInput):
        filters.mean_baseline([])


def test_mean_baseline_streaming_oracle(rng):
    params = [HorizonParams(float(o), float(t)) for o, t in zip(rng.normal(0, 80, 1000), rng.uniform(-0.4, 0.4, 1000))]
    anns = [_ann(params[k:k + 100], f"s{k}") for k in range(0, 1000, 100)]
    # Welford running mean
    mo = mt = 0.0
    for n, p in enumerate(params, 1):
        mo += (p.omega - mo) / n
        mt += (p.theta - mt) / n
    got = filters.mean_baseline(anns)
    assert got.omega == pytest.approx(mo, abs=1e-12)
    assert got.theta == pytest.approx(mt, abs=1e-12)
    assert filters.mean_baseline(anns[::-1]) == got
