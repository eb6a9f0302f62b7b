"""Command-line entry point: synth, train, infer, eval-depth, eval-pose.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 checkpoint version
mismatch, 5 data mismatch.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_VERSION, EXIT_MISMATCH = 0, 2, 3, 4, 5

log = logging.getLogger("monoindoor")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


# polynomial fit of the turbo colour map, c(x) = sum_k a_k x^k
_TURBO = np.array([
    [0.13572138, 4.61539260, -42.66032258, 132.13108234, -152.94239396, 59.28637943],
    [0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604],
    [0.10667330, 12.64194608, -60.58204836, 110.36276771, -89.90310912, 27.34824973],
])


def turbo(x: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to uint8 RGB."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    powers = np.stack([x ** k for k in range(6)], axis=-1)
    rgb = np.clip(powers @ _TURBO.T, 0.0, 1.0)
    return np.round(rgb * 255).astype(np.uint8)


def depth_preview(depth: np.ndarray) -> np.ndarray:
    """Turbo-coloured inverse depth, near = warm, normalized per image."""
    disp = 1.0 / depth
    lo, hi = float(disp.min()), float(disp.max())
    return turbo((disp - lo) / (hi - lo) if hi > lo else np.zeros_like(disp))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from . import synthetic

    text = ""
    if args.spec is not None:
        try:
            text = Path(args.spec).read_text(encoding="utf-8")
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read spec {args.spec}: {exc.strerror}") from None
    try:
        spec = synthetic.parse_scene_spec(text, seed=args.seed)
    except synthetic.SpecError as exc:
        raise CliError(EXIT_CONFIG, f"{args.spec or '<default spec>'}: {exc}") from None
    try:
        scene = synthetic.render_scene(spec)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"scene cannot be rendered: {exc}") from None
    try:
        synthetic.write_dataset(scene, args.out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset to {exc.filename or args.out}: {exc.strerror}") from None
    n = len(scene.triplet_ids("train")) + len(scene.triplet_ids("val")) + len(scene.triplet_ids("test"))
    print(f"wrote {n} triplets ({len(scene.frames)} frames) to {synthetic.scene_dir(args.out, scene.name)}")
    return EXIT_OK


def cmd_train(args) -> int:
    import torch

    from . import trainer
    from .checkpoint import CheckpointFormatError, CheckpointVersionError
    from .config import ConfigError, load_config
    from .io import DatasetError
    from .losses import NonFiniteLossError

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"{args.config}: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {args.config}: {exc.strerror}") from None
    if not cfg["train.dataset"]:
        raise CliError(EXIT_CONFIG, f"{args.config}: train.dataset is not set")
    torch.set_num_threads(cfg["train.threads"])
    try:
        state = trainer.fit(cfg, args.out, resume=args.resume, init_checkpoint=args.init_from)
    except (CheckpointVersionError, CheckpointFormatError) as exc:
        raise CliError(EXIT_VERSION, str(exc)) from None
    except DatasetError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    except NonFiniteLossError as exc:
        raise CliError(1, str(exc)) from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"{exc.filename}: {exc.strerror}") from None
    except ValueError as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from None
    print(f"trained {state.epoch} epochs, {state.step} steps; checkpoint {Path(args.out) / 'final.midx'}")
    if args.dump_views:
        from .synthetic import read_dataset
        scenes = read_dataset(cfg["train.dataset"])
        for scene in scenes:
            ids = scene.triplet_ids("test") or scene.triplet_ids("train")
            out = Path(args.dump_views) / scene.name
            trainer.dump_views(state.model, scene.triplet(ids[0]), out)
            print(f"views of frame {ids[0]} written to {out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    import torch

    from . import trainer
    from .checkpoint import CheckpointFormatError, CheckpointVersionError
    from .io import DatasetFormatError, read_ppm, write_pfm, write_ppm

    try:
        model = trainer.load_model(args.checkpoint)
    except CheckpointVersionError as exc:
        raise CliError(EXIT_VERSION, str(exc)) from None
    except CheckpointFormatError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint {args.checkpoint}: {exc.strerror}") from None
    try:
        img = read_ppm(args.image)
    except DatasetFormatError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read image {args.image}: {exc.strerror}") from None
    torch.set_num_threads(1)
    try:
        depth = trainer.predict_depth(model, img[None].astype(np.float32) / 255.0)[0]
    except ValueError as exc:
        raise CliError(EXIT_MISMATCH, f"{args.image}: {exc}") from None
    out = Path(args.out)
    preview = Path(args.preview) if args.preview else out.with_suffix(".ppm")
    try:
        write_pfm(out, depth)
        write_ppm(preview, depth_preview(depth))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {exc.filename}: {exc.strerror}") from None
    print(f"depth {out} (min {depth.min():.4f}, max {depth.max():.4f}); preview {preview}")
    return EXIT_OK


def _depth_files(d: Path) -> dict:
    """Depth rasters keyed by frame id: ``depth_000012.pfm`` and ``000012.pfm`` both map to ``000012``."""
    out = {}
    for p in sorted(d.glob("*.pfm")):
        key = p.stem[len("depth_"):] if p.stem.startswith("depth_") else p.stem
        out[key] = p
    return out


def cmd_eval_depth(args) -> int:
    from .io import DatasetFormatError, read_pfm
    from .metrics import DepthEvalConfig, TABLE_ORDERS, csv_header, csv_row, depth_metrics, format_table
    from .metrics import mean_depth_metrics

    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise CliError(EXIT_IO, f"{d}: not a directory")
    pred, gt = _depth_files(pred_dir), _depth_files(gt_dir)
    orphans = sorted([str(pred[k]) for k in pred.keys() - gt.keys()]
                     + [str(gt[k]) for k in gt.keys() - pred.keys()])
    if orphans:
        raise CliError(EXIT_MISMATCH, "files without a counterpart:\n  " + "\n  ".join(orphans))
    if not pred:
        raise CliError(EXIT_MISMATCH, f"no .pfm depth files in {pred_dir}")
    cap = None if args.cap.lower() in ("none", "off") else float(args.cap)
    try:
        cfg = DepthEvalConfig(cap=cap, median_scaling=not args.no_median_scaling)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    reports = []
    for key in sorted(pred):
        try:
            p, g = read_pfm(pred[key]), read_pfm(gt[key])
        except DatasetFormatError as exc:
            raise CliError(EXIT_IO, str(exc)) from None
        try:
            reports.append(depth_metrics(p, g, cfg))
        except ValueError as exc:
            raise CliError(EXIT_MISMATCH, f"{pred[key]}: {exc}") from None
    report = mean_depth_metrics(reports)
    cols = TABLE_ORDERS[args.table]
    note = (f"{len(reports)} images, cap={'off' if cap is None else cap}, "
            f"median_scaling={'off' if args.no_median_scaling else 'per-image'}")
    print(format_table(report, cols, note))
    print()
    print(csv_header(cols))
    print(csv_row(report, cols))
    return EXIT_OK


def cmd_eval_pose(args) -> int:
    from .io import DatasetFormatError
    from .metrics import MetricsReport, POSE_FIELDS, ate, csv_header, csv_row, format_table, rpe
    from .synthetic import read_poses

    try:
        pred = [np.linalg.inv(m) for m in read_poses(args.pred)]
        gt = [np.linalg.inv(m) for m in read_poses(args.gt)]
    except DatasetFormatError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"{exc.filename}: {exc.strerror}") from None
    if len(pred) != len(gt):
        raise CliError(EXIT_MISMATCH, f"{args.pred} has {len(pred)} poses, {args.gt} has {len(gt)}")
    try:
        rpe_m, rpe_deg = rpe(pred, gt, args.stride)
        report = MetricsReport(ate_m=ate(pred, gt, args.alignment), rpe_m=rpe_m, rpe_deg=rpe_deg)
    except ValueError as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from None
    print(format_table(report, POSE_FIELDS, f"{len(gt)} poses, ate alignment={args.alignment}, "
                                            f"rpe stride={args.stride}"))
    print()
    print(csv_header(POSE_FIELDS))
    print(csv_row(report, POSE_FIELDS))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .config import describe_keys

    epilog = ("training config keys (train --config FILE, one key=value per line):\n" + describe_keys()
              + "\n\nexit codes: 0 ok, 2 config error, 3 I/O error, 4 checkpoint version, 5 data mismatch")
    parser = argparse.ArgumentParser(prog="monoindoor", description="Self-supervised indoor monocular depth.",
                                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--spec", help="scene spec file (scene.key=value lines); defaults if omitted")
    p.add_argument("--out", required=True, help="dataset root to write")
    p.add_argument("--seed", type=int, help="overrides scene.seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a config file", epilog=epilog,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.add_argument("--resume", help="continue from a checkpoint written by a previous run")
    p.add_argument("--init-from", help="initialize matching parameters from a checkpoint")
    p.add_argument("--dump-views", help="write intermediate synthesized views (PPM) here after training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict depth for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="binary PPM (P6)")
    p.add_argument("--out", required=True, help="output PFM")
    p.add_argument("--preview", help="preview PPM path (default: --out with .ppm suffix)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval-depth", help="depth metrics over matching PFM files")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--cap", default="10", help="depth cap, or 'none'")
    p.add_argument("--no-median-scaling", action="store_true")
    p.add_argument("--table", choices=("accuracy", "errors"), default="accuracy",
                   help="column order: accuracy = AbsRel RMS d1 d2 d3, errors = AbsRel SqRel RMS RMSlog")
    p.set_defaults(func=cmd_eval_depth)

    p = sub.add_parser("eval-pose", help="ATE and RPE between two poses.txt files")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--alignment", choices=("sim3", "rigid", "none"), default="sim3")
    p.set_defaults(func=cmd_eval_pose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
