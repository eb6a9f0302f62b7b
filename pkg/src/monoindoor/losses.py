"""Self-supervision objective: photometric, smoothness and depth consistency."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import geometry
from .geometry import Pose

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.85
    tau: float = 0.001
    gamma: float = 0.035

    def __post_init__(self):
        for name in ("alpha", "tau", "gamma"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"loss weight {name}={value} outside [0, 1]")


@dataclass
class LossBundle:
    photometric: torch.Tensor
    smoothness: torch.Tensor
    consistency: torch.Tensor
    total: torch.Tensor
    automask_fraction: float = 1.0

    def as_floats(self) -> dict:
        out = {k: float(getattr(self, k).detach()) for k in ("photometric", "smoothness", "consistency", "total")}
        out["automask_fraction"] = float(self.automask_fraction)
        return out


class NonFiniteLossError(ValueError):
    def __init__(self, term: str, step: int | None = None):
        self.term = term
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite {term} loss{where}")


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _box3(x):
    """3x3 mean over a tensor padded by one pixel on each side."""
    y = x[..., :, :-2] + x[..., :, 1:-1] + x[..., :, 2:]
    return (y[..., :-2, :] + y[..., 1:-1, :] + y[..., 2:, :]) / 9.0


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel, per-channel SSIM over 3x3 windows (reflect-padded)."""
    _check_same_shape(a, b)
    c = a.shape[1]
    x = F.pad(torch.cat([a, b, a * a, b * b, a * b], dim=1), (1, 1, 1, 1), mode="reflect")
    mu_a, mu_b, e_aa, e_bb, e_ab = _box3(x).split(c, dim=1)
    var_a = e_aa - mu_a ** 2
    var_b = e_bb - mu_b ** 2
    cov = e_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def photometric_error(target: torch.Tensor, recon: torch.Tensor, alpha: float = 0.85) -> torch.Tensor:
    """``(alpha/2)(1 - SSIM) + (1 - alpha) L1``, channel-averaged, shape (B,1,H,W)."""
    _check_same_shape(target, recon)
    l1 = (target - recon).abs().mean(1, keepdim=True)
    if alpha == 0.0:
        return l1
    s = (1.0 - ssim(target, recon)).mean(1, keepdim=True)
    return 0.5 * alpha * s + (1.0 - alpha) * l1


def identity_errors(target, sources, alpha: float = 0.85) -> torch.Tensor:
    """Photometric error of each unwarped source, stacked on dim 1."""
    return torch.cat([photometric_error(target, s, alpha) for s in sources], dim=1)


def photometric_loss(target, recons, sources, alpha: float = 0.85, masks=None,
                     automask: bool = True, reduction: str = "min", identity=None):
    """Reconstruction loss over several synthesized views of ``target``.

    With ``reduction="min"`` the per-pixel minimum over reconstructions is
    taken; when ``automask`` is on, pixels whose best reconstruction is not
    better than the best unwarped source are dropped. ``masks`` optionally
    marks each reconstruction's valid pixels; a pixel with no valid
    reconstruction is dropped. ``identity`` may carry precomputed
    :func:`identity_errors`. ``reduction="sum"`` sums errors over
    reconstructions instead and skips auto-masking.

    Returns ``(loss, kept)`` where ``kept`` is a (B,1,H,W) bool mask. A loss
    with no kept pixels is 0.
    """
    if len(recons) == 0:
        raise ValueError("photometric_loss needs at least one reconstruction")
    if automask and len(sources) != len(recons):
        raise ValueError("sources must align with reconstructions")
    n_rec = len(recons)
    # one batched SSIM over all reconstructions
    errors = photometric_error(target.repeat(n_rec, 1, 1, 1), torch.cat(recons), alpha)
    errors = torch.cat(errors.split(target.shape[0]), dim=1)
    if masks is not None:
        valid = torch.stack([m.reshape(errors[:, 0].shape) for m in masks], dim=1)
    else:
        valid = torch.ones_like(errors, dtype=torch.bool)
    if reduction == "sum":
        kept = valid.all(1, keepdim=True)
        per_pixel = errors.sum(1, keepdim=True)
    elif reduction == "min":
        big = torch.full_like(errors, 1e4)
        best = torch.where(valid, errors, big).min(1, keepdim=True).values
        kept = valid.any(1, keepdim=True)
        if automask:
            if identity is None:
                identity = identity_errors(target, sources, alpha)
            kept = kept & (best < identity.min(1, keepdim=True).values)
        per_pixel = best
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    n = kept.sum()
    if n == 0:
        return per_pixel.sum() * 0.0, kept
    return (per_pixel * kept).sum() / n, kept


def smoothness_loss(disp: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Edge-aware first-order penalty on mean-normalized disparity."""
    d = disp / disp.mean(dim=(2, 3), keepdim=True)
    gd_x = (d[..., :, :-1] - d[..., :, 1:]).abs()
    gd_y = (d[..., :-1, :] - d[..., 1:, :]).abs()
    gi_x = (image[..., :, :-1] - image[..., :, 1:]).abs().mean(1, keepdim=True)
    gi_y = (image[..., :-1, :] - image[..., 1:, :]).abs().mean(1, keepdim=True)
    return (gd_x * torch.exp(-gi_x)).mean() + (gd_y * torch.exp(-gi_y)).mean()


def synthesize_target_depth(depth_target, depth_source, T: Pose, K):
    """Source depth expressed as target-camera z and resampled onto the target grid.

    ``T`` maps target-camera points to the source camera. Returns the
    synthesized depth (B,1,H,W) and its validity mask (B,H,W).
    """
    coords, valid = geometry.project(geometry.backproject(depth_target, K), T, K)
    b, _, h, w = depth_source.shape
    src_pts = geometry.backproject(depth_source, K).reshape(b, 3, h * w)
    z_in_target = geometry.invert(T).apply(src_pts)[:, 2:3].reshape(b, 1, h, w)
    synth, inb = geometry.bilinear_sample(z_in_target, coords)
    valid = valid & inb & (synth[:, 0] > 0)
    return synth, valid


def relative_depth_difference(depth_a, depth_b, mask=None):
    """Mean of ``|a - b| / (a + b)`` over ``mask``."""
    diff = (depth_a - depth_b).abs() / (depth_a + depth_b).clamp(min=1e-7)
    if mask is None:
        return diff.mean()
    mask = mask.reshape(diff.shape)
    n = mask.sum()
    if n == 0:
        return diff.sum() * 0.0
    return (diff * mask).sum() / n


def depth_consistency_loss(depth_target, depth_source, T: Pose, K):
    """Symmetric relative difference between target depth and warped source depth."""
    synth, valid = synthesize_target_depth(depth_target, depth_source, T, K)
    return relative_depth_difference(depth_target, synth, valid), valid


def total_loss(photometric, smoothness, consistency, weights: LossWeights,
               automask_fraction: float = 1.0, step: int | None = None) -> LossBundle:
    parts = {"photometric": photometric, "smoothness": smoothness, "consistency": consistency}
    parts = {k: v if torch.is_tensor(v) else torch.tensor(float(v), dtype=torch.float64)
             for k, v in parts.items()}
    for name, value in parts.items():
        if not math.isfinite(float(value.detach())):
            raise NonFiniteLossError(name, step)
    total = parts["photometric"] + weights.tau * parts["smoothness"]
    if weights.gamma != 0.0:
        total = total + weights.gamma * parts["consistency"]
    return LossBundle(parts["photometric"], parts["smoothness"], parts["consistency"], total,
                      automask_fraction)
