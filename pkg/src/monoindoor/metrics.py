"""Depth accuracy (median-scaled, capped) and trajectory metrics (ATE, RPE)."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import kernels

DEPTH_FIELDS = ("abs_rel", "sq_rel", "rms", "rms_log", "delta1", "delta2", "delta3")
POSE_FIELDS = ("ate_m", "rpe_m", "rpe_deg")
# column orders of the two standard depth result layouts
TABLE_ORDERS = {
    "accuracy": ("abs_rel", "rms", "delta1", "delta2", "delta3"),
    "errors": ("abs_rel", "sq_rel", "rms", "rms_log"),
}
COLUMN_NAMES = {"abs_rel": "AbsRel", "sq_rel": "SqRel", "rms": "RMS", "rms_log": "RMSlog",
                "delta1": "d1<1.25", "delta2": "d2<1.25^2", "delta3": "d3<1.25^3",
                "ate_m": "ATE(m)", "rpe_m": "RPE(m)", "rpe_deg": "RPE(deg)"}


@dataclass(frozen=True)
class DepthEvalConfig:
    cap: float | None = 10.0
    median_scaling: bool = True
    min_eval_depth: float = 0.01

    def __post_init__(self):
        if self.min_eval_depth <= 0:
            raise ValueError("min_eval_depth must be positive")
        if self.cap is not None and self.cap <= self.min_eval_depth:
            raise ValueError("cap must exceed min_eval_depth")


@dataclass
class MetricsReport:
    abs_rel: float = math.nan
    sq_rel: float = math.nan
    rms: float = math.nan
    rms_log: float = math.nan
    delta1: float = math.nan
    delta2: float = math.nan
    delta3: float = math.nan
    ate_m: float = math.nan
    rpe_m: float = math.nan
    rpe_deg: float = math.nan

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def depth_metrics(pred, gt, cfg: DepthEvalConfig = DepthEvalConfig()) -> MetricsReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    valid = (gt > 0) & np.isfinite(gt)
    if not valid.any():
        raise ValueError("ground truth has no valid pixels")
    p = pred[valid]
    g = gt[valid]
    if np.any(p <= 0):
        raise ValueError("predicted depth must be positive")
    if cfg.median_scaling:
        p = p * (np.median(g) / np.median(p))
    hi = np.inf if cfg.cap is None else cfg.cap
    p = np.clip(p, cfg.min_eval_depth, hi)
    g = np.clip(g, cfg.min_eval_depth, hi)
    return MetricsReport(*(float(x) for x in kernels.depth_error_stats(p, g)))


def mean_depth_metrics(reports) -> MetricsReport:
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    return MetricsReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in DEPTH_FIELDS})


# ---------------------------------------------------------------------------
# trajectories: lists of 4x4 camera-to-world matrices
# ---------------------------------------------------------------------------


def _as_traj(traj) -> np.ndarray:
    arr = np.asarray(traj, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[1:] != (4, 4):
        raise ValueError("trajectory must be a sequence of 4x4 matrices")
    return arr


def align_positions(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Least-squares ``s, R, t`` minimising ``|dst - (s R src + t)|^2`` (Umeyama)."""
    mu_s = src.mean(0)
    mu_d = dst.mean(0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    rot = u @ sign @ vt
    var_s = (xs ** 2).sum() / len(src)
    scale = float(np.trace(np.diag(d) @ sign) / var_s) if with_scale and var_s > 0 else 1.0
    trans = mu_d - scale * rot @ mu_s
    return scale, rot, trans


def ate(pred_traj, gt_traj, alignment: str = "sim3") -> float:
    """Position RMSE after aligning the predicted trajectory to ground truth.

    ``alignment`` is ``sim3`` (rotation, translation, scale), ``rigid``, or
    ``none``.
    """
    pred = _as_traj(pred_traj)
    gt = _as_traj(gt_traj)
    if len(pred) != len(gt):
        raise ValueError(f"trajectory length mismatch: {len(pred)} vs {len(gt)}")
    if len(pred) < 2:
        raise ValueError("trajectories need at least 2 poses")
    p = pred[:, :3, 3]
    g = gt[:, :3, 3]
    if alignment != "none":
        if alignment not in ("sim3", "rigid"):
            raise ValueError(f"unknown alignment {alignment!r}")
        s, r, t = align_positions(p, g, with_scale=alignment == "sim3")
        p = s * p @ r.T + t
    return float(np.sqrt(np.mean(np.sum((p - g) ** 2, axis=1))))


def rotation_angle(rot: np.ndarray) -> float:
    """Rotation angle in radians."""
    cos = (np.trace(rot) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, cos)))


def rpe(pred_traj, gt_traj, stride: int = 1):
    """RMSE of frame-to-frame translation (m) and rotation (deg) errors."""
    pred = _as_traj(pred_traj)
    gt = _as_traj(gt_traj)
    if len(pred) != len(gt):
        raise ValueError(f"trajectory length mismatch: {len(pred)} vs {len(gt)}")
    if stride < 1 or len(pred) < stride + 1:
        raise ValueError(f"need at least stride+1 = {stride + 1} poses")
    trans_err, rot_err = [], []
    for k in range(len(pred) - stride):
        rel_gt = np.linalg.inv(gt[k]) @ gt[k + stride]
        rel_pred = np.linalg.inv(pred[k]) @ pred[k + stride]
        err = np.linalg.inv(rel_gt) @ rel_pred
        trans_err.append(np.linalg.norm(err[:3, 3]))
        rot_err.append(math.degrees(rotation_angle(err[:3, :3])))
    return (float(np.sqrt(np.mean(np.square(trans_err)))),
            float(np.sqrt(np.mean(np.square(rot_err)))))


def chain_relative_poses(relative, start=None) -> np.ndarray:
    """Camera-to-world trajectory from camera ``k -> k+1`` point transforms.

    ``relative[k]`` maps camera-``k`` coordinates into camera ``k+1``.
    """
    traj = [np.eye(4) if start is None else np.asarray(start, dtype=np.float64)]
    for rel in relative:
        traj.append(traj[-1] @ np.linalg.inv(rel))
    return np.stack(traj)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def format_table(report: MetricsReport, columns, header_note: str | None = None) -> str:
    names = [COLUMN_NAMES[c] for c in columns]
    vals = [f"{getattr(report, c):.4f}" for c in columns]
    widths = [max(len(n), len(v)) for n, v in zip(names, vals)]
    lines = []
    if header_note:
        lines.append(f"# {header_note}")
    lines.append(" | ".join(n.rjust(w) for n, w in zip(names, widths)))
    lines.append("-+-".join("-" * w for w in widths))
    lines.append(" | ".join(v.rjust(w) for v, w in zip(vals, widths)))
    return "\n".join(lines)


def csv_header(columns) -> str:
    return ",".join(columns)


def csv_row(report: MetricsReport, columns) -> str:
    return ",".join(repr(float(getattr(report, c))) for c in columns)
