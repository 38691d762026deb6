"""Seeded SGD training, evaluation and ablation runs on synthetic sequences."""
from __future__ import annotations

import csv
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import geometry, metrics, nn
from .cells import HorizonNet, HorizonNetConfig
from .errors import DivergedLoss, NonFinite
from .geometry import CameraModel, ImageDims
from .loss import ScheduleState, combined_loss, lambda_schedule
from .metrics import MetricsReport
from .synth import SynthDataset, SynthSequence

logger = logging.getLogger(__name__)

LOSS_MODES = ("adaptive", "huber_only")
HISTORY_COLUMNS = ("epoch", "lr", "lambda", "train_loss", "val_loss", "val_auc")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_max: float = 1e-1
    lr_min: float = 1e-3
    seq_len: int = 32           # S
    batch_size: int = 4         # B
    loss_mode: str = "adaptive"
    seed: int = 0

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.epochs < 0 or self.seq_len < 1 or self.batch_size < 1:
            raise ValueError(f"invalid training config {self}")

    @property
    def frames_per_batch(self) -> int:
        return self.seq_len * self.batch_size

    @classmethod
    def from_json(cls, doc: Mapping) -> TrainConfig:
        return cls(**doc)

    def to_json(self) -> dict:
        return asdict(self)


def learning_rate(epoch: float, cfg: TrainConfig) -> float:
    """Cosine annealing from ``lr_max`` at epoch 0 to ``lr_min`` at ``cfg.epochs``."""
    if cfg.epochs == 0:
        return cfg.lr_max
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 - math.sin(math.pi * (epoch / cfg.epochs - 0.5)))


def schedule_state(epoch: int, cfg: TrainConfig) -> ScheduleState:
    # the Huber-only ablation pins the blend at its starting point
    if cfg.loss_mode == "huber_only":
        return ScheduleState(0, max(cfg.epochs, 1))
    return ScheduleState(epoch, max(cfg.epochs, 1))


@dataclass
class TrainResult:
    model: HorizonNet
    history: list[dict] = field(default_factory=list)

    @property
    def checkpoint(self) -> dict[str, np.ndarray]:
        return self.model.state_dict()


def _windows(seqs: Sequence[SynthSequence], seq_len: int, context: int):
    """Non-overlapping windows ``(frames, omega, theta, mask)`` of each sequence.

    With ``context`` > 0 each window is preceded by that many earlier frames
    (the first frame repeated where the sequence has none); they are masked
    out of the loss.
    """
    out = []
    for s in seqs:
        n = len(s.annotation)
        om, th = s.annotation.omegas, s.annotation.thetas
        for start in range(0, n - seq_len + 1, seq_len):
            idx = np.clip(np.arange(start - context, start + seq_len), 0, None)
            mask = np.r_[np.zeros(context), np.ones(seq_len)]
            out.append((s.frames[idx], om[idx], th[idx], mask))
    return out


def _batch_loss(model: HorizonNet, batch, epoch: int, cfg: TrainConfig, dims: ImageDims):
    frames = np.stack([w[0] for w in batch])
    om_gt = np.stack([w[1] for w in batch])
    th_gt = np.stack([w[2] for w in batch])
    mask = np.stack([w[3] for w in batch])
    om_n, th = model.forward(frames)
    om_px = nn.scale(om_n, dims.height)
    return combined_loss(schedule_state(epoch, cfg), om_px, th, om_gt, th_gt, dims,
                         offset_scale=dims.height, mask=None if mask.all() else mask)


def sequence_loss(model: HorizonNet, seqs: Sequence[SynthSequence], epoch: int,
                  cfg: TrainConfig, dims: ImageDims) -> float:
    total, count = 0.0, 0
    for s in seqs:
        batch = [(s.frames, s.annotation.omegas, s.annotation.thetas, np.ones(len(s.annotation)))]
        total += _batch_loss(model, batch, epoch, cfg, dims).item() * len(s.annotation)
        count += len(s.annotation)
    return total / count


def predict_sequence(model: HorizonNet, seq: SynthSequence, dims: ImageDims) -> list[geometry.HorizonParams]:
    """Run a whole sequence with persistent state from its first frame."""
    om, th = model.predict(seq.frames, dims.height)
    return [geometry.wrap_params(o, t) for o, t in zip(om, th)]


def evaluate_predictions(predictions: Mapping[str, Sequence[geometry.HorizonParams]],
                         seqs: Sequence[SynthSequence], dims: ImageDims,
                         camera: CameraModel) -> MetricsReport:
    gt = {s.annotation.sequence_id: [f.params for f in s.annotation.frames] for s in seqs}
    return metrics.evaluate(predictions, gt, dims, camera)


def evaluate_model(model: HorizonNet, seqs: Sequence[SynthSequence], dims: ImageDims,
                   camera: CameraModel) -> MetricsReport:
    preds = {s.annotation.sequence_id: predict_sequence(model, s, dims) for s in seqs}
    return evaluate_predictions(preds, seqs, dims, camera)


def train(net_config: HorizonNetConfig, cfg: TrainConfig, dataset: SynthDataset,
          log_every: int = 0) -> TrainResult:
    """SGD with momentum, L2 weight decay and cosine learning rate.

    The model is initialised from ``cfg.seed``; window order is reshuffled
    every epoch by the same seeded generator, so a run is fully determined by
    its configs and dataset.
    """
    model = HorizonNet.create(net_config, seed=cfg.seed)
    result = TrainResult(model)
    rng = np.random.default_rng([cfg.seed, 1])
    dims = dataset.dims
    windows = _windows(dataset.splits["train"], cfg.seq_len, net_config.context_frames)
    params = list(model.params.values())
    velocity = {id(p): np.zeros_like(p.data) for p in params}
    val = dataset.splits.get("val", [])
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = learning_rate(epoch, cfg)
        order = rng.permutation(len(windows))
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            batch = [windows[i] for i in order[b:b + cfg.batch_size]]
            for p in params:
                p.zero_grad()
            try:
                with nn.Tape() as tape:
                    loss = _batch_loss(model, batch, epoch, cfg, dims)
                tape.backward(loss)
            except NonFinite as exc:
                raise DivergedLoss(epoch, float("nan")) from exc
            if not math.isfinite(loss.item()):
                raise DivergedLoss(epoch, loss.item())
            losses.append(loss.item())
            for p in params:
                v = velocity[id(p)]
                v *= cfg.momentum
                v += p.grad + cfg.weight_decay * p.data
                p.data -= lr * v
        row = {"epoch": epoch, "lr": lr,
               "lambda": _lambda(epoch, cfg),
               "train_loss": float(np.mean(losses)) if losses else float("nan")}
        if val:
            try:
                row["val_loss"] = sequence_loss(model, val, epoch, cfg, dims)
                row["val_auc"] = evaluate_model(model, val, dims, dataset.camera).horizon_auc
            except (NonFinite, ValueError) as exc:
                raise DivergedLoss(epoch, float("nan")) from exc
        else:
            row["val_loss"] = row["val_auc"] = float("nan")
        result.history.append(row)
        if log_every and (epoch % log_every == 0 or epoch == cfg.epochs - 1):
            logger.info("epoch %d lr %.4f loss %.5f val_auc %.4f (%.1fs)", epoch, lr,
                        row["train_loss"], row["val_auc"], time.perf_counter() - t0)
    return result


def _lambda(epoch: int, cfg: TrainConfig) -> float:
    return lambda_schedule(schedule_state(epoch, cfg))


def write_history(history: Sequence[Mapping], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: row.get(k) for k in HISTORY_COLUMNS})


# -- ablations -------------------------------------------------------------------

@dataclass(frozen=True)
class AblationCell:
    name: str
    cell: str
    loss_mode: str = "adaptive"


@dataclass
class AblationRow:
    name: str
    seed: int
    val: MetricsReport
    test: MetricsReport

    def flat(self) -> dict:
        d = {"config": self.name, "seed": self.seed}
        for split, rep in (("val", self.val), ("test", self.test)):
            for k in ("horizon_auc", "mse", "a_tv", "pose_auc"):
                d[f"{split}_{k}"] = getattr(rep, k)
        return d


@dataclass
class AblationTable:
    rows: list[AblationRow] = field(default_factory=list)

    def by_config(self) -> dict[str, list[AblationRow]]:
        out: dict[str, list[AblationRow]] = {}
        for r in self.rows:
            out.setdefault(r.name, []).append(r)
        return out

    def metric(self, name: str, key: str) -> dict[int, float]:
        """``{seed: value}`` for one config, e.g. ``metric("temporal", "test_a_tv")``."""
        return {r.seed: r.flat()[key] for r in self.by_config()[name]}

    def aggregate(self) -> dict[str, dict[str, tuple[float, float]]]:
        """Mean and sample standard deviation over seeds for every metric."""
        agg = {}
        for name, rows in self.by_config().items():
            flats = [r.flat() for r in rows]
            keys = [k for k in flats[0] if k not in ("config", "seed")]
            agg[name] = {k: (statistics.fmean(f[k] for f in flats),
                             statistics.stdev([f[k] for f in flats]) if len(flats) > 1 else 0.0)
                         for k in keys}
        return agg

    def best(self, name: str) -> AblationRow:
        """Run with the highest validation AUC."""
        return max(self.by_config()[name], key=lambda r: r.val.horizon_auc)

    def write_csv(self, path: str | Path) -> None:
        flats = [r.flat() for r in self.rows]
        agg = self.aggregate()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(flats[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(flats)
            for name, stats in agg.items():
                w.writerow({"config": name, "seed": "mean", **{k: v[0] for k, v in stats.items()}})
                w.writerow({"config": name, "seed": "std", **{k: v[1] for k, v in stats.items()}})


def run_ablation(cells: Sequence[AblationCell], seeds: Sequence[int], dataset: SynthDataset,
                 net_config: HorizonNetConfig, train_config: TrainConfig) -> AblationTable:
    """Train every ``cell x seed`` on the shared dataset with matched budgets."""
    table = AblationTable()
    for c in cells:
        ncfg = replace(net_config, cell=c.cell)
        for seed in seeds:
            tcfg = replace(train_config, seed=seed, loss_mode=c.loss_mode)
            t0 = time.perf_counter()
            res = train(ncfg, tcfg, dataset)
            row = AblationRow(c.name, seed,
                              evaluate_model(res.model, dataset.splits["val"], dataset.dims, dataset.camera),
                              evaluate_model(res.model, dataset.splits["test"], dataset.dims, dataset.camera))
            logger.info("%s seed %d: test auc %.4f a_tv %.5f (%.0fs)", c.name, seed,
                        row.test.horizon_auc, row.test.a_tv, time.perf_counter() - t0)
            table.rows.append(row)
    return table
