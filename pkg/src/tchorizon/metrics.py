"""Evaluation metrics for horizon trajectories.

All horizon errors are the height-normalised maximum vertical distance
between predicted and true horizon at the left and right image borders.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import geometry
from .errors import EmptyInput, FrameMismatch, SlopeSingularity, TooShort, ZeroVector
from .geometry import CameraModel, HorizonParams, ImageDims

HORIZON_AUC_THRESHOLD = 0.25
POSE_AUC_THRESHOLD = math.radians(5.0)


def border_distances(omega, theta, omega_gt, theta_gt, width):
    """Signed vertical gaps ``y_pred - y_gt`` at ``x = 0`` and ``x = W``.

    Works elementwise on arrays.  Shared by the metric and the training loss so
    both produce bit-identical values.
    """
    omega, theta = np.asarray(omega, np.float64), np.asarray(theta, np.float64)
    omega_gt, theta_gt = np.asarray(omega_gt, np.float64), np.asarray(theta_gt, np.float64)
    if np.any(np.abs(np.cos(theta)) < 1e-12) or np.any(np.abs(np.cos(theta_gt)) < 1e-12):
        raise SlopeSingularity("slope at +-pi/2")
    half = 0.5 * width
    tan_p, tan_g = np.tan(theta), np.tan(theta_gt)
    d0 = ((0.0 - half) * tan_p - omega) - ((0.0 - half) * tan_g - omega_gt)
    dw = ((width - half) * tan_p - omega) - ((width - half) * tan_g - omega_gt)
    return d0, dw


def max_error_arrays(omega, theta, omega_gt, theta_gt, dims: ImageDims) -> np.ndarray:
    """Vectorised max horizon error; ties pick the left border."""
    d0, dw = border_distances(omega, theta, omega_gt, theta_gt, dims.width)
    a0, aw = np.abs(d0), np.abs(dw)
    return np.where(a0 >= aw, a0, aw) / dims.height


def max_horizon_error(pred: HorizonParams, gt: HorizonParams, dims: ImageDims) -> float:
    return float(max_error_arrays(pred.omega, pred.theta, gt.omega, gt.theta, dims))


def auc_cumulative(errors, threshold: float = HORIZON_AUC_THRESHOLD) -> float:
    """Area under the empirical error CDF on ``[0, threshold]``, normalised to 1."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise EmptyInput("no errors to integrate")
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise ValueError("errors must be finite and non-negative")
    # per-error normalisation keeps perfect scores at exactly 1
    return float(np.sum(np.maximum(1.0 - e / threshold, 0.0)) / e.size)


def cumulative_histogram(errors, threshold: float = HORIZON_AUC_THRESHOLD):
    """Step points ``(error, cdf)`` of the empirical CDF, clipped to the threshold."""
    e = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    if e.size == 0:
        raise EmptyInput("no errors")
    n = e.size
    e_in = e[e <= threshold]
    xs = np.concatenate([[0.0], e_in, [threshold]])
    cdf = np.concatenate([[np.count_nonzero(e <= 0.0) / n],
                          np.arange(1, e_in.size + 1) / n, [e_in.size / n]])
    return xs, cdf


def mse(trajectories: Iterable[Sequence[float]]) -> float:
    """Mean of squared errors over all frames of all sequences."""
    vals = [np.asarray(t, dtype=np.float64).ravel() for t in trajectories]
    allv = np.concatenate(vals) if vals else np.empty(0)
    if allv.size == 0:
        raise EmptyInput("no errors")
    return float(np.mean(allv ** 2))


def pose_angular_error(p, p_hat) -> float:
    p, p_hat = np.asarray(p, np.float64), np.asarray(p_hat, np.float64)
    n1, n2 = np.linalg.norm(p), np.linalg.norm(p_hat)
    if n1 == 0 or n2 == 0:
        raise ZeroVector("pose vector has zero length")
    # arccos(|p.q| / |p||q|) written as atan2, which stays exact near zero angle
    return math.atan2(float(np.linalg.norm(np.cross(p, p_hat))), abs(float(p @ p_hat)))


def pose_auc(xi_errors, threshold: float = POSE_AUC_THRESHOLD) -> float:
    return auc_cumulative(xi_errors, threshold)


def time_derivative(values) -> np.ndarray:
    """Second-order finite differences along time.

    Central differences inside, one-sided three-point stencils at both ends.
    Every stencil is evaluated on differences of samples, so constant
    trajectories give exactly zero.
    """
    f = np.asarray(values, dtype=np.float64)
    if f.size < 3:
        raise TooShort(f"need at least 3 frames, got {f.size}")
    d = np.empty_like(f)
    d[1:-1] = (f[2:] - f[:-2]) / 2
    d[0] = 2 * (f[1] - f[0]) - (f[2] - f[0]) / 2
    d[-1] = 2 * (f[-1] - f[-2]) - (f[-1] - f[-3]) / 2
    return d


def average_total_variation(trajectories: Iterable[Sequence[float]]) -> float:
    trajectories = list(trajectories)
    if not trajectories:
        raise EmptyInput("no trajectories")
    total = 0.0
    count = 0
    for traj in trajectories:
        total += float(np.sum(np.abs(time_derivative(traj))))
        count += len(traj)
    return total / count


@dataclass
class MetricsReport:
    horizon_auc: float
    mse: float
    a_tv: float
    pose_auc: float
    per_sequence: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def sequence_errors(pred: Sequence[HorizonParams], gt: Sequence[HorizonParams],
                    dims: ImageDims) -> np.ndarray:
    return max_error_arrays([p.omega for p in pred], [p.theta for p in pred],
                            [g.omega for g in gt], [g.theta for g in gt], dims)


def sequence_pose_errors(pred: Sequence[HorizonParams], gt: Sequence[HorizonParams],
                         dims: ImageDims, camera: CameraModel) -> np.ndarray:
    out = []
    for p, g in zip(pred, gt):
        pp = geometry.pose_from_horizon(camera, geometry.horizon_from_params(p, dims))
        pg = geometry.pose_from_horizon(camera, geometry.horizon_from_params(g, dims))
        out.append(pose_angular_error(pp, pg))
    return np.array(out)


def evaluate(predictions: Mapping[str, Sequence[HorizonParams]],
             ground_truth: Mapping[str, Sequence[HorizonParams]],
             dims: ImageDims, camera: CameraModel) -> MetricsReport:
    """Full metric suite over aligned prediction / ground-truth trajectories.

    Sequences are reduced in sorted-id order so the report does not depend on
    the mapping's iteration order.
    """
    if not ground_truth:
        raise EmptyInput("no sequences to evaluate")
    bad = sorted(set(predictions) ^ set(ground_truth))
    bad += sorted(s for s in set(predictions) & set(ground_truth)
                  if len(predictions[s]) != len(ground_truth[s]))
    if bad:
        raise FrameMismatch(f"mismatched sequences: {', '.join(bad)}")
    errs, xis, per_seq = [], [], {}
    for sid in sorted(ground_truth):
        e = sequence_errors(predictions[sid], ground_truth[sid], dims)
        xi = sequence_pose_errors(predictions[sid], ground_truth[sid], dims, camera)
        errs.append(e)
        xis.append(xi)
        per_seq[sid] = {
            "horizon_auc": auc_cumulative(e),
            "mse": mse([e]),
            "a_tv": average_total_variation([e]),
            "pose_auc": pose_auc(xi),
            "frames": int(e.size),
        }
    return MetricsReport(
        horizon_auc=auc_cumulative(np.concatenate(errs)),
        mse=mse(errs),
        a_tv=average_total_variation(errs),
        pose_auc=pose_auc(np.concatenate(xis)),
        per_sequence=per_seq,
    )
