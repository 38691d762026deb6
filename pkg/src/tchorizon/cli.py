"""Command-line workflows: ``tchorizon <command> --help`` documents each one.

Exit codes are 0 on success, 1 when a check or verification fails and 2 for
usage or input errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import filters, geometry, gradcheck, kitti, metrics, nn
from .cells import HorizonNetConfig
from .errors import HorizonError
from .geometry import CameraModel, ImageDims
from .kitti import SequenceAnnotation, SplitSpec
from .synth import SynthConfig, SynthDataset, make_dataset
from .train import AblationCell, TrainConfig, evaluate_model, run_ablation, train, write_history

logger = logging.getLogger("tchorizon")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
REPORT_FORMAT = {"format": "tchorizon-report", "version": 1}


class UsageError(Exception):
    """Bad flags or unusable input; maps to exit code 2."""


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def _existing_dir(path: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{path}: not a directory")
    return p


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- annotate ----------------------------------------------------------------------

def cmd_annotate(args) -> int:
    root = _existing_dir(args.kitti_root)
    found = kitti.discover_sequences(root)
    split = SplitSpec.load(args.split) if args.split else None
    if split is not None:
        found = [f for f in found if f[0] in split.assignment]
    if not found:
        print("no sequences found", file=sys.stderr)
        return EXIT_USAGE
    out = _out_dir(args.out_dir)
    annotations, failures, per_seq = [], {}, {}
    for sid, date_dir, data_dir in found:
        try:
            calib = kitti.load_calib_chain(date_dir)
            dims = kitti.image_dims_from_calib(date_dir, args.camera)
            indices, records = kitti.read_oxts_dir(data_dir)
            ann = kitti.annotate_sequence(sid, records, calib, args.camera, dims, indices,
                                          args.gravity_convention)
        except (HorizonError, OSError, KeyError) as exc:
            failures[sid] = str(exc)
            continue
        kitti.write_annotation_csv(ann, out / f"{sid}.csv")
        annotations.append(ann)
        per_seq[sid] = {"frames": len(ann), "skipped": ann.skipped, "errors": ann.errors}
    summary = {
        **REPORT_FORMAT,
        "camera": args.camera,
        "gravity_convention": args.gravity_convention,
        "seed": args.seed,
        "sequences": len(annotations),
        "frames": sum(len(a) for a in annotations),
        "skipped_frames": sum(a.skipped for a in annotations),
        "per_sequence": per_seq,
        "failed_sequences": failures,
    }
    if split is not None:
        parts = kitti.apply_split(annotations, split)
        summary["splits"] = {name: {"pieces": len(anns), "frames": sum(len(a) for a in anns)}
                             for name, anns in parts.items()}
    _write_json(out / "summary.json", summary)
    print(f"{summary['sequences']} sequences, {summary['frames']} frames, "
          f"{summary['skipped_frames']} skipped")
    for sid, msg in sorted(failures.items()):
        print(f"error: {sid}: {msg}", file=sys.stderr)
    return EXIT_CHECK if failures else EXIT_OK


# -- evaluate ----------------------------------------------------------------------

def _camera_from_args(args, dims: ImageDims) -> CameraModel:
    if args.camera_json:
        return CameraModel(np.array(_read_json(args.camera_json)["K"], dtype=np.float64))
    fx = args.fx if args.fx is not None else dims.width
    fy = args.fy if args.fy is not None else fx
    cx = args.cx if args.cx is not None else dims.width / 2
    cy = args.cy if args.cy is not None else dims.height / 2
    return CameraModel.from_intrinsics(fx, fy, cx, cy)


def _read_annotation_dir(path: Path) -> dict[str, SequenceAnnotation]:
    anns = {f.stem: kitti.read_annotation_csv(f) for f in sorted(path.glob("*.csv"))}
    if not anns:
        raise UsageError(f"{path}: no annotation CSVs")
    return anns


def cmd_evaluate(args) -> int:
    preds = _read_annotation_dir(_existing_dir(args.pred_dir))
    gts = _read_annotation_dir(_existing_dir(args.gt_dir))
    dims = ImageDims(args.width, args.height)
    camera = _camera_from_args(args, dims)
    pred_p = {k: [f.params for f in a.frames] for k, a in preds.items()}
    gt_p = {k: [f.params for f in a.frames] for k, a in gts.items()}
    report = metrics.evaluate(pred_p, gt_p, dims, camera)
    errs = np.concatenate([metrics.sequence_errors(pred_p[k], gt_p[k], dims) for k in sorted(gt_p)])
    xs, cdf = metrics.cumulative_histogram(errs, metrics.HORIZON_AUC_THRESHOLD)
    out_report = Path(args.report)
    out_report.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out_report, {**REPORT_FORMAT, "seed": args.seed, "width": dims.width,
                             "height": dims.height, "K": camera.K.tolist(), **report.to_json()})
    hist = Path(args.histogram)
    hist.parent.mkdir(parents=True, exist_ok=True)
    with open(hist, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["error", "fraction"])
        w.writerows(zip(map(repr, xs.tolist()), map(repr, cdf.tolist())))
    print(f"auc {report.horizon_auc:.4f} mse {report.mse:.6f} a_tv {report.a_tv:.6f} "
          f"pose_auc {report.pose_auc:.4f}")
    return EXIT_OK


# -- smooth ------------------------------------------------------------------------

def cmd_smooth(args) -> int:
    ann = kitti.read_annotation_csv(args.pred)
    dims = ImageDims(args.width, args.height if args.height else args.width)
    smoothed = filters.exp_smooth([f.params for f in ann.frames], args.alpha)
    out = SequenceAnnotation(
        ann.sequence_id, ann.camera_index,
        [kitti.AnnotatedFrame(f.frame_index, p, geometry.horizon_from_params(p, dims))
         for f, p in zip(ann.frames, smoothed)])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    kitti.write_annotation_csv(out, args.out)
    return EXIT_OK


# -- gradcheck ---------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.variant == "primitives":
        reports = gradcheck.check_primitives(args.tolerance, seed)
    elif args.variant == "all":
        reports = gradcheck.check_primitives(args.tolerance, seed)
        reports.update({v: gradcheck.check_variant(v, args.tolerance, seed)
                        for v in gradcheck.CHECK_VARIANTS})
    else:
        reports = {args.variant: gradcheck.check_variant(args.variant, args.tolerance, seed)}
    ok = True
    for name, rep in reports.items():
        status = "ok" if rep.passed else "FAIL"
        print(f"{name:20s} {status:4s} max rel error {rep.worst:.3e}")
        for p in rep.failures:
            print(f"  {p}: {rep.max_rel_error[p]:.3e} > {args.tolerance:g}")
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_CHECK


# -- synth / train / ablate ----------------------------------------------------------

def _configs(doc: dict, seed: int | None):
    synth = SynthConfig.from_json(doc.get("synth", {}))
    net = HorizonNetConfig.from_json(doc.get("net", {}))
    tr = TrainConfig.from_json(doc.get("train", {}))
    if seed is not None:
        tr = replace(tr, seed=seed)
    return synth, net, tr


def _dataset(args, synth: SynthConfig) -> SynthDataset:
    if getattr(args, "data", None):
        return SynthDataset.load(_existing_dir(args.data))
    return make_dataset(synth)


def cmd_synth(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    cfg = SynthConfig.from_json(doc.get("synth", doc))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    ds = make_dataset(cfg)
    ds.save(_out_dir(args.out_dir))
    print(f"wrote {sum(len(s) for s in ds.splits.values())} sequences to {args.out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    synth, net, tr = _configs(doc, args.seed)
    if args.epochs is not None:
        tr = replace(tr, epochs=args.epochs)
    out = _out_dir(args.out_dir)
    ds = _dataset(args, synth)
    result = train(net, tr, ds, log_every=1)
    meta = {"seed": tr.seed, "net": net.to_json(), "train": tr.to_json(),
            "synth": ds.config.to_json()}
    nn.save_checkpoint(out / "checkpoint.json", result.model.params, meta)
    write_history(result.history, out / "history.csv")
    report = evaluate_model(result.model, ds.splits["test"], ds.dims, ds.camera)
    _write_json(out / "report.json", {**REPORT_FORMAT, "seed": tr.seed, "split": "test",
                                      **report.to_json()})
    print(f"test auc {report.horizon_auc:.4f} a_tv {report.a_tv:.6f}")
    return EXIT_OK


DEFAULT_MATRIX = [
    {"name": "temporal", "cell": "residual_dense", "loss_mode": "adaptive"},
    {"name": "disabled", "cell": "disabled", "loss_mode": "adaptive"},
    {"name": "huber_only", "cell": "residual_dense", "loss_mode": "huber_only"},
]


def cmd_ablate(args) -> int:
    doc = _read_json(args.matrix) if args.matrix else {}
    synth, net, tr = _configs(doc, None)
    seeds = doc.get("seeds", [0, 1, 2, 3]) if args.seeds is None else args.seeds
    cells = [AblationCell(**c) for c in doc.get("cells", DEFAULT_MATRIX)]
    out = _out_dir(args.out_dir)
    ds = _dataset(args, synth)
    table = run_ablation(cells, seeds, ds, net, tr)
    table.write_csv(out / "ablation.csv")
    _write_json(out / "ablation.json", {
        **REPORT_FORMAT,
        "seeds": list(seeds),
        "rows": [r.flat() for r in table.rows],
        "aggregate": {name: {k: {"mean": m, "std": s} for k, (m, s) in stats.items()}
                      for name, stats in table.aggregate().items()},
        "best_seed": {name: table.best(name).seed for name in table.by_config()},
    })
    for name, stats in table.aggregate().items():
        auc, atv = stats["test_horizon_auc"], stats["test_a_tv"]
        print(f"{name:12s} test auc {auc[0]:.4f} +- {auc[1]:.4f}  a_tv {atv[0]:.5f} +- {atv[1]:.5f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tchorizon", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--seed", type=int, default=None,
                       help="random seed; recorded in every JSON output")
        p.set_defaults(func=func)
        return p

    p = add("annotate", cmd_annotate, "Ground-truth horizons from KITTI raw OXTS poses and calibration.")
    p.add_argument("--kitti-root", required=True,
                   help="directory holding <date>/<drive>/oxts/data and <date>/calib_*.txt")
    p.add_argument("--camera", type=int, default=2, choices=range(4), help="camera index N (default 2)")
    p.add_argument("--out-dir", required=True,
                   help="one CSV per sequence (frame_index,omega_px,theta_rad,l0,l1,l2) plus summary.json")
    p.add_argument("--split", help="split JSON {sequence_id: split | {split, ranges}}; unlisted drives are dropped")
    p.add_argument("--gravity-convention", choices=kitti.GRAVITY_CONVENTIONS, default="literal",
                   help="literal: R_IMU = Rz Ry Rx applied to [0,1,0]; enu: gravity along the "
                        "world z axis expressed in IMU coordinates (default literal)")

    p = add("evaluate", cmd_evaluate, "Metric suite over prediction and ground-truth annotation CSVs.")
    p.add_argument("--pred-dir", required=True, help="directory of predicted <sequence>.csv files")
    p.add_argument("--gt-dir", required=True, help="directory of ground-truth <sequence>.csv files")
    p.add_argument("--report", required=True, help="output JSON report (format tchorizon-report v1)")
    p.add_argument("--histogram", required=True, help="output CSV: error,fraction cumulative histogram")
    p.add_argument("--width", type=float, required=True, help="image width in pixels")
    p.add_argument("--height", type=float, required=True, help="image height in pixels")
    p.add_argument("--camera-json", help='JSON {"K": 3x3} for pose metrics; overrides --fx/--fy/--cx/--cy')
    p.add_argument("--fx", type=float, help="focal length in x (default: width)")
    p.add_argument("--fy", type=float, help="focal length in y (default: fx)")
    p.add_argument("--cx", type=float, help="principal point x (default: width/2)")
    p.add_argument("--cy", type=float, help="principal point y (default: height/2)")

    p = add("smooth", cmd_smooth, "Exponential smoothing of a prediction CSV.")
    p.add_argument("--pred", required=True, help="input annotation CSV")
    p.add_argument("--alpha", type=float, default=filters.DEFAULT_ALPHA,
                   help=f"weight of the newest frame, in (0, 1] (default {filters.DEFAULT_ALPHA})")
    p.add_argument("--out", required=True, help="output annotation CSV")
    p.add_argument("--width", type=float, required=True, help="image width, used to rebuild the line columns")
    p.add_argument("--height", type=float, help="image height (default: width)")

    p = add("gradcheck", cmd_gradcheck, "Finite-difference gradient checks.")
    p.add_argument("variant", choices=(*gradcheck.CHECK_VARIANTS, "primitives", "all"))
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative error (default 1e-4)")

    p = add("synth", cmd_synth, "Render a synthetic train/val/test dataset.")
    p.add_argument("--config", help='JSON SynthConfig, bare or under a "synth" key')
    p.add_argument("--out-dir", required=True, help="output: <id>.npy frames, <id>.csv labels, manifest.json")

    p = add("train", cmd_train, "Train one model on synthetic data.")
    p.add_argument("--config", help='JSON with optional "synth", "net" and "train" sections')
    p.add_argument("--data", help="dataset written by the synth command (default: render from config)")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--out-dir", required=True, help="output: checkpoint.json, history.csv, report.json")

    p = add("ablate", cmd_ablate, "Train a matrix of variants over several seeds.")
    p.add_argument("--matrix", help='JSON with "synth", "net", "train", "cells" [{name, cell, loss_mode}], "seeds"')
    p.add_argument("--data", help="dataset written by the synth command")
    p.add_argument("--seeds", type=int, nargs="+", help="override the matrix seeds")
    p.add_argument("--out-dir", required=True, help="output: ablation.csv, ablation.json")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, HorizonError, OSError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
