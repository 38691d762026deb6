"""Temporal post-processing baselines for horizon trajectories."""
from __future__ import annotations

from dataclasses import dataclass
from math import fsum
from typing import Iterable, Sequence

from .errors import BadAlpha, EmptyInput
from .geometry import HorizonParams

DEFAULT_ALPHA = 0.5


@dataclass(frozen=True)
class SmoothingState:
    alpha: float
    value: HorizonParams | None = None

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise BadAlpha(f"alpha must lie in (0, 1], got {self.alpha}")


def smooth_step(state: SmoothingState, x: HorizonParams) -> SmoothingState:
    """One update ``s_t = alpha x_t + (1 - alpha) s_{t-1}``, with ``s_0 = x_0``."""
    if state.value is None:
        return SmoothingState(state.alpha, x)
    a, s = state.alpha, state.value
    return SmoothingState(a, HorizonParams(a * x.omega + (1 - a) * s.omega,
                                           a * x.theta + (1 - a) * s.theta))


def exp_smooth(series: Sequence[HorizonParams], alpha: float = DEFAULT_ALPHA) -> list[HorizonParams]:
    """Exponential moving average of offset and slope, treated as independent scalars."""
    state = SmoothingState(alpha)
    if not series:
        raise EmptyInput("empty series")
    out = []
    for x in series:
        state = smooth_step(state, x)
        out.append(state.value)
    return out


def mean_baseline(train: Iterable) -> HorizonParams:
    """Mean offset and slope over every frame of the training sequences."""
    omegas, thetas = [], []
    for ann in train:
        for f in ann.frames:
            omegas.append(f.params.omega)
            thetas.append(f.params.theta)
    if not omegas:
        raise EmptyInput("no training frames")
    # fsum keeps the result independent of frame order
    n = len(omegas)
    return HorizonParams(fsum(omegas) / n, fsum(thetas) / n)
