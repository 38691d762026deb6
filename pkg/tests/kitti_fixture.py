"""Builds miniature KITTI-raw directory trees for tests."""
from pathlib import Path

import numpy as np

IDENTITY_P = np.hstack([np.eye(3), np.zeros((3, 1))])


def _row(key, values):
    return f"{key}: " + " ".join(repr(float(v)) for v in np.ravel(values))


def write_calib(date_dir: Path, R_imu_velo=np.eye(3), R_velo_cam=np.eye(3), R_rect=np.eye(3),
                P=IDENTITY_P, size=(1242, 375)):
    date_dir.mkdir(parents=True, exist_ok=True)
    (date_dir / "calib_imu_to_velo.txt").write_text(
        "calib_time: 25-May-2012 12:47:16\n" + _row("R", R_imu_velo) + "\n" + _row("T", [0, 0, 0]) + "\n")
    (date_dir / "calib_velo_to_cam.txt").write_text(
        "calib_time: 15-Mar-2012 11:37:16\n" + _row("R", R_velo_cam) + "\n" + _row("T", [0, 0, 0]) + "\n")
    lines = ["calib_time: 09-Jan-2012 13:57:47", "corner_dist: 9.950000e-02"]
    for n in range(4):
        lines += [_row(f"S_rect_{n:02d}", size), _row(f"P_rect_{n:02d}", P)]
    lines.append(_row("R_rect_00", R_rect))
    (date_dir / "calib_cam_to_cam.txt").write_text("\n".join(lines) + "\n")


def oxts_line(roll, pitch, yaw):
    vals = [49.0, 8.4, 112.0, roll, pitch, yaw] + [0.0] * 24
    return " ".join(repr(float(v)) for v in vals)


def write_drive(date_dir: Path, drive: str, poses, first_index: int = 0) -> Path:
    data = date_dir / drive / "oxts" / "data"
    data.mkdir(parents=True, exist_ok=True)
    for k, (r, p, y) in enumerate(poses):
        (data / f"{first_index + k:010d}.txt").write_text(oxts_line(r, p, y) + "\n")
    return data


def make_tree(root: Path, drives: dict, date: str = "2011_09_26", **calib) -> Path:
    date_dir = root / date
    write_calib(date_dir, **calib)
    for name, poses in drives.items():
        write_drive(date_dir, name, poses)
    return root
