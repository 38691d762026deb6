"""Synthetic horizon video sequences.

Each frame is a two-region image: a bright "sky" above the horizon line and
a darker "ground" below, plus per-frame appearance noise.  Horizons follow a
smooth random walk in offset and slope.

Rendered labels use a centre-row frame: ``y = row + 0.5 - H/2`` for pixel
centres, so ``omega = 0, theta = 0`` splits the image at its middle row.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraModel, HorizonParams, ImageDims
from .kitti import SequenceAnnotation, read_annotation_csv, write_annotation_csv


@dataclass(frozen=True)
class SynthConfig:
    width: int = 64
    height: int = 64
    seq_len: int = 32
    n_train: int = 20
    n_val: int = 5
    n_test: int = 5
    sky: float = 0.75
    ground: float = 0.25
    noise: float = 0.1          # std of white pixel noise
    blotch: float = 0.2         # std of coarse (low-frequency) per-frame noise
    blotch_grid: int = 4
    omega_max: float = 0.25     # fraction of image height
    theta_max: float = 0.35     # radians; must stay below 0.4
    omega_step: float = 0.01    # random-walk acceleration std, fraction of height
    theta_step: float = 0.01    # radians
    inertia: float = 0.9
    supersample: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.theta_max < 0.4:
            raise ValueError("theta_max must lie in (0, 0.4) rad")
        if not 0 <= self.omega_max < 0.5:
            raise ValueError("omega_max must keep the horizon inside the image")

    @property
    def dims(self) -> ImageDims:
        return ImageDims(self.width, self.height)

    @classmethod
    def from_json(cls, doc) -> SynthConfig:
        return cls(**doc)

    def to_json(self) -> dict:
        return asdict(self)


def nominal_camera(cfg: SynthConfig) -> CameraModel:
    """Pinhole camera for pose metrics in the centre-row frame (focal = width)."""
    f = float(cfg.width)
    return CameraModel.from_intrinsics(f, f, cfg.width / 2, 0.0)


def _reflect(x: float, v: float, bound: float) -> tuple[float, float]:
    if x > bound:
        return 2 * bound - x, -v
    if x < -bound:
        return -2 * bound - x, -v
    return x, v


def random_trajectory(cfg: SynthConfig, rng: np.random.Generator) -> list[HorizonParams]:
    h = cfg.height
    om_b, th_b = cfg.omega_max * h, cfg.theta_max
    om, th = rng.uniform(-om_b, om_b), rng.uniform(-th_b, th_b)
    v_om = v_th = 0.0
    out = []
    for _ in range(cfg.seq_len):
        out.append(HorizonParams(float(om), float(th)))
        v_om = cfg.inertia * v_om + rng.normal(0, cfg.omega_step * h)
        v_th = cfg.inertia * v_th + rng.normal(0, cfg.theta_step)
        om, v_om = _reflect(om + v_om, v_om, om_b)
        th, v_th = _reflect(th + v_th, v_th, th_b)
    return out


def render_frame(params: HorizonParams, cfg: SynthConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """``[H, W]`` image; sky coverage is supersampled per pixel."""
    ss = cfg.supersample
    offs = (np.arange(ss) + 0.5) / ss
    xs = (np.arange(cfg.width)[:, None] + offs[None, :]).ravel()
    ys = (np.arange(cfg.height)[:, None] + offs[None, :]).ravel() - cfg.height / 2
    line_y = (xs - cfg.width / 2) * math.tan(params.theta) - params.omega
    sky = (ys[:, None] < line_y[None, :]).astype(np.float64)
    cover = sky.reshape(cfg.height, ss, cfg.width, ss).mean(axis=(1, 3))
    img = cfg.ground + (cfg.sky - cfg.ground) * cover
    if rng is not None:
        img = img + appearance_noise(cfg, rng)
    return img


def appearance_noise(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    noise = np.zeros((cfg.height, cfg.width))
    if cfg.noise > 0:
        noise += rng.normal(0, cfg.noise, size=noise.shape)
    if cfg.blotch > 0:
        g = cfg.blotch_grid
        coarse = rng.normal(0, cfg.blotch, size=(g + 1, g + 1))
        # bilinear upsampling of the coarse grid
        yi = np.linspace(0, g, cfg.height)
        xi = np.linspace(0, g, cfg.width)
        y0 = np.minimum(yi.astype(int), g - 1)
        x0 = np.minimum(xi.astype(int), g - 1)
        ty, tx = (yi - y0)[:, None], (xi - x0)[None, :]
        c00 = coarse[y0][:, x0]
        c01 = coarse[y0][:, x0 + 1]
        c10 = coarse[y0 + 1][:, x0]
        c11 = coarse[y0 + 1][:, x0 + 1]
        noise += (1 - ty) * ((1 - tx) * c00 + tx * c01) + ty * ((1 - tx) * c10 + tx * c11)
    return noise


@dataclass
class SynthSequence:
    frames: np.ndarray               # [T, 1, H, W]
    annotation: SequenceAnnotation


def synth_sequence(cfg: SynthConfig, seed: int, sequence_id: str = "seq") -> SynthSequence:
    rng = np.random.default_rng(seed)
    traj = random_trajectory(cfg, rng)
    frames = np.stack([render_frame(p, cfg, rng) for p in traj])[:, None]
    ann = SequenceAnnotation.from_params(sequence_id, traj, cfg.dims)
    return SynthSequence(frames, ann)


@dataclass
class SynthDataset:
    config: SynthConfig
    splits: dict[str, list[SynthSequence]] = field(default_factory=dict)

    @property
    def dims(self) -> ImageDims:
        return self.config.dims

    @property
    def camera(self) -> CameraModel:
        return nominal_camera(self.config)

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest = {"config": self.config.to_json(), "splits": {},
                    "camera": self.camera.K.tolist()}
        for split, seqs in self.splits.items():
            manifest["splits"][split] = [s.annotation.sequence_id for s in seqs]
            for s in seqs:
                np.save(out / f"{s.annotation.sequence_id}.npy", s.frames)
                write_annotation_csv(s.annotation, out / f"{s.annotation.sequence_id}.csv")
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, out_dir: str | Path) -> SynthDataset:
        out = Path(out_dir)
        manifest = json.loads((out / "manifest.json").read_text())
        ds = cls(SynthConfig.from_json(manifest["config"]))
        for split, ids in manifest["splits"].items():
            ds.splits[split] = [SynthSequence(np.load(out / f"{sid}.npy"),
                                              read_annotation_csv(out / f"{sid}.csv", sid))
                                for sid in ids]
        return ds


def make_dataset(cfg: SynthConfig) -> SynthDataset:
    """Deterministic train/val/test sequences; sequence ``k`` uses seed ``(cfg.seed, k)``."""
    ds = SynthDataset(cfg)
    k = 0
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        seqs = []
        for _ in range(n):
            seed = int(np.random.SeedSequence([cfg.seed, k]).generate_state(1)[0])
            seqs.append(synth_sequence(cfg, seed, f"{split}_{k:03d}"))
            k += 1
        ds.splits[split] = seqs
    return ds
