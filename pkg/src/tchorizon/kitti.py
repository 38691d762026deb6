"""KITTI raw ingestion: OXTS poses, calibration chains and horizon labels.

Expected layout (the usual KITTI raw download)::

    root/2011_09_26/calib_cam_to_cam.txt
    root/2011_09_26/calib_imu_to_velo.txt
    root/2011_09_26/calib_velo_to_cam.txt
    root/2011_09_26/2011_09_26_drive_0001_sync/oxts/data/0000000000.txt
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import geometry
from .errors import BadCalibration, DegenerateProjection, InvalidPose, UnknownSequence
from .geometry import CameraModel, HorizonParams, ImageDims

logger = logging.getLogger(__name__)

ANNOTATION_HEADER = ("frame_index", "omega_px", "theta_rad", "l0", "l1", "l2")
SPLITS = ("train", "val", "test")
GRAVITY_CONVENTIONS = ("literal", "enu")
_Y_TO_Z = geometry.rotation_matrix("x", math.pi / 2)
_CALIB_TOL = 1e-6


@dataclass(frozen=True)
class OxtsRecord:
    roll: float
    pitch: float
    yaw: float
    fields: tuple[float, ...] = ()

    @classmethod
    def from_values(cls, values: Iterable[float]) -> OxtsRecord:
        values = tuple(float(v) for v in values)
        if len(values) < 6:
            raise ValueError(f"OXTS record needs at least 6 fields, got {len(values)}")
        # lat lon alt roll pitch yaw ...
        return cls(values[3], values[4], values[5], values)


@dataclass(frozen=True, eq=False)
class CalibChain:
    R_imu_to_velo: np.ndarray
    R_velo_to_cam: np.ndarray
    R_rect: np.ndarray
    P_rect: Mapping[int, np.ndarray]

    def camera(self, n: int) -> CameraModel:
        try:
            P = np.asarray(self.P_rect[n], dtype=np.float64).reshape(3, 4)
        except KeyError:
            raise BadCalibration(f"no rectified projection for camera {n}") from None
        return CameraModel(P[:, :3])


@dataclass(frozen=True)
class AnnotatedFrame:
    frame_index: int
    params: HorizonParams
    line: np.ndarray


@dataclass
class SequenceAnnotation:
    sequence_id: str
    camera_index: int
    frames: list[AnnotatedFrame] = field(default_factory=list)
    skipped: int = 0
    errors: list[str] = field(default_factory=list)

    def __post_init__(self):
        idx = [f.frame_index for f in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"{self.sequence_id}: frame indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def omegas(self) -> np.ndarray:
        return np.array([f.params.omega for f in self.frames])

    @property
    def thetas(self) -> np.ndarray:
        return np.array([f.params.theta for f in self.frames])

    @classmethod
    def from_params(cls, sequence_id: str, params: Iterable[HorizonParams], dims: ImageDims,
                    camera_index: int = 0, frame_indices: Iterable[int] | None = None):
        params = list(params)
        if frame_indices is None:
            frame_indices = range(len(params))
        frames = [AnnotatedFrame(int(i), p, geometry.horizon_from_params(p, dims))
                  for i, p in zip(frame_indices, params)]
        return cls(sequence_id, camera_index, frames)


def rotation_from_rpy(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """OXTS orientation as ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    if not all(math.isfinite(a) for a in (roll, pitch, yaw)):
        raise InvalidPose(f"non-finite angles roll={roll} pitch={pitch} yaw={yaw}")
    return (geometry.rotation_matrix("z", yaw)
            @ geometry.rotation_matrix("y", pitch)
            @ geometry.rotation_matrix("x", roll))


def imu_attitude(roll: float, pitch: float, yaw: float, convention: str = "literal") -> np.ndarray:
    """The ``R_IMU`` fed to :func:`annotate_frame`, which applies it to ``[0, 1, 0]``.

    ``literal`` uses ``rotation_from_rpy`` as is.  ``enu`` returns
    ``rotation_from_rpy(...).T @ Rx(pi/2)`` so that ``R_IMU [0, 1, 0]`` is the
    world z (up) axis expressed in IMU coordinates, which is the physical
    gravity direction for the raw-data OXTS convention (x forward, z up).
    """
    R = rotation_from_rpy(roll, pitch, yaw)
    if convention == "literal":
        return R
    if convention == "enu":
        return R.T @ _Y_TO_Z
    raise ValueError(f"unknown gravity convention {convention!r}; expected one of {GRAVITY_CONVENTIONS}")


def imu_to_cam_rotation(calib: CalibChain, n: int = 0) -> np.ndarray:
    """Rotation from IMU into rectified camera ``n`` coordinates.

    All rectified cameras share the reference rectification ``R_rect``; the
    camera index only selects the intrinsics, so ``n`` is validated here but
    does not change the rotation.
    """
    calib.camera(n)
    factors = {"R_rect": calib.R_rect, "R_velo_to_cam": calib.R_velo_to_cam,
               "R_imu_to_velo": calib.R_imu_to_velo}
    for name, R in factors.items():
        try:
            geometry.as_rotation(R, tol=_CALIB_TOL)
        except ValueError as exc:
            raise BadCalibration(f"{name}: {exc}") from None
    R = calib.R_rect @ calib.R_velo_to_cam @ calib.R_imu_to_velo
    return geometry.as_rotation(R, tol=_CALIB_TOL)


def annotate_frame(cam: CameraModel, r_imu_to_cam, r_imu, dims: ImageDims):
    """Horizon of one frame as ``(line, params)``."""
    up = np.array([0.0, 1.0, 0.0])
    R = np.asarray(r_imu_to_cam) @ np.asarray(r_imu)
    line = geometry.horizon_from_gravity(cam, R, up)
    return line, geometry.params_from_line(line, dims)


def annotate_sequence(sequence_id: str, oxts: list[OxtsRecord], calib: CalibChain,
                      camera_index: int, dims: ImageDims,
                      frame_indices: Iterable[int] | None = None,
                      convention: str = "literal") -> SequenceAnnotation:
    if not oxts:
        raise ValueError(f"{sequence_id}: no OXTS records")
    if frame_indices is None:
        frame_indices = range(len(oxts))
    cam = calib.camera(camera_index)
    r_cam = imu_to_cam_rotation(calib, camera_index)
    ann = SequenceAnnotation(sequence_id, camera_index)
    for idx, rec in zip(frame_indices, oxts):
        try:
            r_imu = imu_attitude(rec.roll, rec.pitch, rec.yaw, convention)
            line, params = annotate_frame(cam, r_cam, r_imu, dims)
        except (InvalidPose, DegenerateProjection, geometry.VerticalLine) as exc:
            ann.skipped += 1
            ann.errors.append(f"frame {idx}: {exc}")
            continue
        ann.frames.append(AnnotatedFrame(int(idx), params, line))
    if ann.skipped:
        logger.warning("%s: skipped %d of %d frames", sequence_id, ann.skipped, len(oxts))
    return ann


# -- file formats -----------------------------------------------------------

def read_oxts(path: str | Path) -> list[OxtsRecord]:
    """Read every non-empty line of an OXTS text file as one record."""
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(OxtsRecord.from_values(line.split()))
    return records


def read_oxts_dir(data_dir: str | Path) -> tuple[list[int], list[OxtsRecord]]:
    """Read ``oxts/data/*.txt`` (one record per frame file), sorted by index."""
    files = sorted(Path(data_dir).glob("*.txt"))
    indices, records = [], []
    for f in files:
        recs = read_oxts(f)
        if len(recs) != 1:
            raise ValueError(f"{f}: expected one record, found {len(recs)}")
        indices.append(int(f.stem))
        records.append(recs[0])
    return indices, records


def read_calib_file(path: str | Path) -> dict[str, np.ndarray]:
    """Parse ``key: v1 v2 ...`` rows; non-numeric rows (calib_time) are dropped."""
    out = {}
    for line in Path(path).read_text().splitlines():
        key, sep, value = line.partition(":")
        if not sep:
            continue
        try:
            out[key.strip()] = np.array([float(v) for v in value.split()])
        except ValueError:
            continue
    return out


def load_calib_chain(date_dir: str | Path) -> CalibChain:
    date_dir = Path(date_dir)
    try:
        imu_velo = read_calib_file(date_dir / "calib_imu_to_velo.txt")
        velo_cam = read_calib_file(date_dir / "calib_velo_to_cam.txt")
        cam_cam = read_calib_file(date_dir / "calib_cam_to_cam.txt")
        P = {n: cam_cam[f"P_rect_{n:02d}"].reshape(3, 4) for n in range(4)
             if f"P_rect_{n:02d}" in cam_cam}
        return CalibChain(imu_velo["R"].reshape(3, 3), velo_cam["R"].reshape(3, 3),
                          cam_cam["R_rect_00"].reshape(3, 3), P)
    except (KeyError, ValueError, OSError) as exc:
        raise BadCalibration(f"{date_dir}: {exc}") from None


def image_dims_from_calib(date_dir: str | Path, n: int) -> ImageDims:
    cam_cam = read_calib_file(Path(date_dir) / "calib_cam_to_cam.txt")
    w, h = cam_cam[f"S_rect_{n:02d}"]
    return ImageDims(float(w), float(h))


def discover_sequences(root: str | Path) -> list[tuple[str, Path, Path]]:
    """Find ``(sequence_id, date_dir, oxts_data_dir)`` for every drive under ``root``."""
    found = []
    for data_dir in sorted(Path(root).glob("*/*/oxts/data")):
        drive = data_dir.parent.parent
        found.append((drive.name, drive.parent, data_dir))
    return found


def _fmt(x: float) -> str:
    return repr(float(x))


def write_annotation_csv(ann: SequenceAnnotation, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ANNOTATION_HEADER)
        for f in ann.frames:
            w.writerow([f.frame_index, _fmt(f.params.omega), _fmt(f.params.theta),
                        *(_fmt(v) for v in f.line)])


def read_annotation_csv(path: str | Path, sequence_id: str | None = None,
                        camera_index: int = 0) -> SequenceAnnotation:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:3]) != ANNOTATION_HEADER[:3]:
            raise ValueError(f"{path}: unexpected header {header}")
        frames = []
        for row in reader:
            params = HorizonParams(float(row[1]), float(row[2]))
            line = np.array([float(v) for v in row[3:6]]) if len(row) >= 6 else None
            frames.append(AnnotatedFrame(int(row[0]), params, line))
    return SequenceAnnotation(sequence_id or path.stem, camera_index, frames)


# -- splits -----------------------------------------------------------------

@dataclass(frozen=True)
class FrameRange:
    split: str
    first: int
    last: int


@dataclass
class SplitSpec:
    """Sequence-to-split assignment with optional per-frame-range overrides.

    JSON form::

        {"drive_0001": "train",
         "drive_0042": {"ranges": [{"split": "test", "first": 0, "last": 99},
                                   {"split": "val", "first": 100, "last": 199}]}}
    """

    assignment: dict[str, str | None]
    ranges: dict[str, list[FrameRange]] = field(default_factory=dict)

    def __post_init__(self):
        for sid, split in self.assignment.items():
            if split is not None and split not in SPLITS:
                raise ValueError(f"{sid}: unknown split {split!r}")
        for sid, rs in self.ranges.items():
            if sid not in self.assignment:
                raise ValueError(f"ranges given for unlisted sequence {sid}")
            spans = sorted((r.first, r.last) for r in rs)
            for r in rs:
                if r.split not in SPLITS or r.last < r.first:
                    raise ValueError(f"{sid}: bad range {r}")
            if any(b[0] <= a[1] for a, b in zip(spans, spans[1:])):
                raise ValueError(f"{sid}: overlapping frame ranges")

    @classmethod
    def from_json(cls, doc: Mapping) -> SplitSpec:
        assignment, ranges = {}, {}
        for sid, entry in doc.items():
            if isinstance(entry, str):
                assignment[sid] = entry
                continue
            assignment[sid] = entry.get("split")
            if "ranges" in entry:
                ranges[sid] = [FrameRange(r["split"], int(r["first"]), int(r["last"]))
                               for r in entry["ranges"]]
        return cls(assignment, ranges)

    @classmethod
    def load(cls, path: str | Path) -> SplitSpec:
        return cls.from_json(json.loads(Path(path).read_text()))

    def to_json(self) -> dict:
        doc = {}
        for sid, split in self.assignment.items():
            if sid in self.ranges:
                entry = {"ranges": [{"split": r.split, "first": r.first, "last": r.last}
                                    for r in self.ranges[sid]]}
                if split is not None:
                    entry["split"] = split
                doc[sid] = entry
            else:
                doc[sid] = split
        return doc

    def split_of(self, sequence_id: str, frame_index: int) -> str:
        for r in self.ranges.get(sequence_id, ()):
            if r.first <= frame_index <= r.last:
                return r.split
        split = self.assignment[sequence_id]
        if split is None:
            raise ValueError(f"{sequence_id}: frame {frame_index} not covered by any range")
        return split


def apply_split(annotations: Iterable[SequenceAnnotation],
                spec: SplitSpec) -> dict[str, list[SequenceAnnotation]]:
    """Partition annotated sequences; divided sequences yield one piece per split."""
    out: dict[str, list[SequenceAnnotation]] = {s: [] for s in SPLITS}
    for ann in annotations:
        if ann.sequence_id not in spec.assignment:
            raise UnknownSequence(ann.sequence_id)
        pieces: dict[str, list[AnnotatedFrame]] = {}
        for f in ann.frames:
            pieces.setdefault(spec.split_of(ann.sequence_id, f.frame_index), []).append(f)
        for split in SPLITS:
            if split in pieces:
                out[split].append(SequenceAnnotation(ann.sequence_id, ann.camera_index,
                                                     pieces[split]))
    return out
