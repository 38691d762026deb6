"""Horizon line geometry.

A horizon is stored either as ``HorizonParams`` (offset ``omega`` in pixels,
slope ``theta`` in radians) or as a homogeneous 3-vector ``l`` with
``l . (x, y, 1) = 0``.  The offset/slope form is tied to the line

    y(x) = (x - W/2) * tan(theta) - omega

so ``omega`` is minus the line's y-coordinate at the centre column.  The
homogeneous form emitted here is ``[sin t, -cos t, -(W/2) sin t - omega cos t]``,
which satisfies that relation exactly.

The x-axis starts at the left image border.  The y origin is whatever frame
the line lives in: lines projected through a calibration matrix ``K`` use
pixel rows counted from the top, synthetic renders count rows from the
centre row (see :mod:`tchorizon.synth`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateProjection, SlopeSingularity, VerticalLine

_HALF_PI = math.pi / 2
_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class HorizonParams:
    omega: float
    theta: float

    def __post_init__(self):
        if not (math.isfinite(self.omega) and math.isfinite(self.theta)):
            raise ValueError(f"non-finite horizon parameters: {self}")
        if not (-_HALF_PI < self.theta <= _HALF_PI):
            raise ValueError(f"theta {self.theta} outside (-pi/2, pi/2]")


@dataclass(frozen=True)
class ImageDims:
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"image dimensions must be positive, got {self}")


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole intrinsics. ``K`` is upper triangular with ``K[2, 2] == 1``."""

    K: np.ndarray

    def __post_init__(self):
        K = np.array(self.K, dtype=np.float64)
        if K.shape != (3, 3):
            raise ValueError(f"K must be 3x3, got {K.shape}")
        if K[2, 2] != 1.0 or np.any(np.tril(K, -1) != 0):
            raise ValueError("K must be upper triangular with K[2,2] = 1")
        if abs(np.linalg.det(K)) < 1e-12:
            raise ValueError("K is singular")
        K.setflags(write=False)
        object.__setattr__(self, "K", K)

    @classmethod
    def from_intrinsics(cls, fx: float, fy: float, cx: float, cy: float, skew: float = 0.0):
        return cls(np.array([[fx, skew, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]))

    @classmethod
    def identity(cls):
        return cls(np.eye(3))


def wrap_params(omega: float, theta: float) -> HorizonParams:
    """Bring any slope into (-pi/2, pi/2]; ``tan`` has period pi so the line is unchanged."""
    theta = float(theta) - math.pi * math.floor((float(theta) + _HALF_PI) / math.pi)
    if theta <= -_HALF_PI:
        theta += math.pi
    return HorizonParams(float(omega), theta)


def as_rotation(R, tol: float = _ORTHO_TOL) -> np.ndarray:
    """Validate and return ``R`` as a float64 proper rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    if not np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0) or abs(np.linalg.det(R) - 1) > tol:
        raise ValueError("matrix is not a proper rotation")
    return R


def as_line(l) -> np.ndarray:
    l = np.asarray(l, dtype=np.float64).reshape(-1)
    if l.shape != (3,):
        raise ValueError(f"homogeneous line must have 3 entries, got {l.shape}")
    if not np.all(np.isfinite(l)) or not np.any(l):
        raise ValueError(f"invalid homogeneous line {l}")
    return l


def horizon_from_params(params: HorizonParams, dims: ImageDims) -> np.ndarray:
    s, c = math.sin(params.theta), math.cos(params.theta)
    return np.array([s, -c, -0.5 * dims.width * s - params.omega * c])


def params_from_line(line, dims: ImageDims) -> HorizonParams:
    """Recover offset and slope from a homogeneous line (any scale or sign)."""
    l = as_line(line)
    norm = math.hypot(l[0], l[1])
    if norm == 0.0 or abs(l[1]) <= 1e-12 * norm:
        raise VerticalLine(f"line {l} has no finite slope")
    # scale so the y-coefficient equals -cos(theta) with cos(theta) > 0
    scale = -math.copysign(1.0, l[1]) / norm
    sin_t, cos_t, c = l[0] * scale, l[1] * -scale, l[2] * scale
    theta = math.atan2(sin_t, cos_t)
    omega = (-c - 0.5 * dims.width * sin_t) / cos_t
    return HorizonParams(omega, theta)


def y_at_x(params: HorizonParams, x, dims: ImageDims):
    if abs(math.cos(params.theta)) < 1e-12:
        raise SlopeSingularity(f"theta={params.theta} is vertical")
    return (np.asarray(x, dtype=np.float64) - 0.5 * dims.width) * math.tan(params.theta) - params.omega


def horizon_from_gravity(cam: CameraModel, rot, g) -> np.ndarray:
    """Vanishing line of the planes orthogonal to ``g``: ``K^-T R g``."""
    R = as_rotation(rot)
    g = np.asarray(g, dtype=np.float64)
    h = np.linalg.solve(cam.K.T, R @ g)
    if np.linalg.norm(h) < 1e-12:
        raise DegenerateProjection("projected gravity vector vanishes")
    return h


def pose_from_horizon(cam: CameraModel, line) -> np.ndarray:
    """Camera pose vector ``K^T l``; defined up to scale and sign."""
    return cam.K.T @ as_line(line)


def _similarity(beta: float, shift: Sequence[float], pivot: Sequence[float]) -> np.ndarray:
    c, s = math.cos(beta), math.sin(beta)
    px, py = pivot
    sx, sy = shift
    # rotate about the pivot, then translate
    return np.array(
        [
            [c, -s, px - c * px + s * py + sx],
            [s, c, py - s * px - c * py + sy],
            [0.0, 0.0, 1.0],
        ]
    )


def transform_horizon(
    params: HorizonParams,
    dims: ImageDims,
    beta: float,
    shift: Sequence[float] = (0.0, 0.0),
    pivot: Sequence[float] | None = None,
) -> HorizonParams:
    """Map a horizon through an image rotation by ``beta`` followed by a shift.

    Points move as ``p' = Rot(beta) (p - pivot) + pivot + shift`` in image
    coordinates.  The pivot defaults to ``(W/2, 0)``, the point the offset is
    measured from, which is the image centre in the centre-row frame used for
    augmentation.
    """
    if pivot is None:
        pivot = (0.5 * dims.width, 0.0)
    T = _similarity(beta, shift, pivot)
    line = horizon_from_params(params, dims) @ np.linalg.inv(T)
    try:
        return params_from_line(line, dims)
    except VerticalLine as exc:
        raise SlopeSingularity(str(exc)) from exc


def rotation_matrix(axis: str, angle: float) -> np.ndarray:
    """Elementary right-handed rotation about ``x``, ``y`` or ``z``."""
    c, s = math.cos(angle), math.sin(angle)
    if axis == "x":
        return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    raise ValueError(f"unknown axis {axis!r}")
