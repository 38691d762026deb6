"""Adaptive horizon loss: Huber on (offset, slope) blended into the max horizon error."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import metrics, nn
from .geometry import ImageDims
from .nn import Tensor


@dataclass(frozen=True)
class ScheduleState:
    epoch: int
    max_epochs: int

    def __post_init__(self):
        if self.max_epochs <= 0 or not 0 <= self.epoch <= self.max_epochs:
            raise ValueError(f"invalid schedule state {self}")


def lambda_schedule(s: ScheduleState) -> float:
    """Cosine weight of the Huber term: 1 at the first epoch, 0 at the last.

    ``cos(pi u)`` is evaluated as ``-sin(pi (u - 1/2))`` so the endpoints and
    the midpoint come out exact (``cos(pi/2)`` is not zero in binary64).
    """
    return 0.5 - 0.5 * math.sin(math.pi * (s.epoch / s.max_epochs - 0.5))


def huber(x, x_hat):
    """Scalar Huber loss (unit threshold) for plain numbers."""
    d = abs(x - x_hat)
    return 0.5 * d * d if d <= 1.0 else d - 0.5


def loss_omega_theta(omega, theta, omega_gt, theta_gt) -> Tensor:
    """Per-frame ``L_H(omega) + L_H(theta)``; inputs may be tensors or arrays."""
    return nn.add(nn.huber(omega, omega_gt), nn.huber(theta, theta_gt))


def loss_horizon(omega, theta, omega_gt, theta_gt, dims: ImageDims) -> Tensor:
    """Per-frame max horizon error, differentiable in the predicted offset/slope.

    The forward value comes from :func:`metrics.max_error_arrays`.  On a tie
    between the two borders the gradient follows the left border, and the
    gradient of ``|d|`` at ``d = 0`` is zero.  ``omega`` is in pixels.
    """
    omega, theta = nn.as_tensor(omega), nn.as_tensor(theta)
    og = np.broadcast_to(np.asarray(omega_gt, np.float64), omega.shape)
    tg = np.broadcast_to(np.asarray(theta_gt, np.float64), theta.shape)
    value = metrics.max_error_arrays(omega.data, theta.data, og, tg, dims)
    d0, dw = metrics.border_distances(omega.data, theta.data, og, tg, dims.width)
    left = np.abs(d0) >= np.abs(dw)
    d = np.where(left, d0, dw)
    x_rel = np.where(left, -0.5 * dims.width, 0.5 * dims.width)
    sign = np.sign(d) / dims.height
    sec2 = 1.0 + np.tan(theta.data) ** 2

    def vjp(g):
        return -g * sign, g * sign * x_rel * sec2

    return nn.primitive(value, (omega, theta), vjp, "max_horizon_error")


def combined_loss(s: ScheduleState, omega, theta, omega_gt, theta_gt, dims: ImageDims,
                  offset_scale: float = 1.0, mask=None) -> Tensor:
    """``lambda(t) L_omega_theta + (1 - lambda(t)) L_e``, averaged over frames.

    ``omega`` and ``omega_gt`` are in pixels.  The Huber term sees offsets
    divided by ``offset_scale``; the trainer passes the image height so that
    both Huber arguments are of order one.  ``mask`` (0/1 per frame) excludes
    context frames from the average.
    """
    lam = lambda_schedule(s)
    omega = nn.as_tensor(omega)
    theta = nn.as_tensor(theta)
    terms = []
    if lam > 0.0:
        oh = nn.scale(omega, 1.0 / offset_scale) if offset_scale != 1.0 else omega
        l_ot = loss_omega_theta(oh, theta, np.asarray(omega_gt) / offset_scale, theta_gt)
        terms.append(l_ot if lam == 1.0 else nn.scale(l_ot, lam))
    if lam < 1.0:
        l_e = loss_horizon(omega, theta, omega_gt, theta_gt, dims)
        terms.append(l_e if lam == 0.0 else nn.scale(l_e, 1.0 - lam))
    per_frame = terms[0] if len(terms) == 1 else nn.add(terms[0], terms[1])
    if mask is None:
        return nn.mean(per_frame)
    mask = np.broadcast_to(np.asarray(mask, np.float64), per_frame.shape)
    return nn.scale(nn.sum_(nn.mul(per_frame, mask)), 1.0 / float(mask.sum()))
