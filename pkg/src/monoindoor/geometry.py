"""Pinhole camera, SE(3) poses and differentiable view synthesis.

Conventions:

* integer pixel coordinates address pixel centers (no half-pixel offset);
* camera axes are x right, y down, z forward;
* a pose maps points from its source frame to its destination frame,
  ``x_dst = R @ x_src + t``; ``compose(a, b)`` applies ``b`` first.

All tensors are batched: images ``(B,C,H,W)``, depth ``(B,1,H,W)``, pose
rotations ``(B,3,3)`` and translations ``(B,3)``. Unbatched poses with shape
``(3,3)``/``(3,)`` work for the pose algebra too.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

Z_MIN = 1e-3
BOUND_EPS = 1e-4


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    def matrix(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor([[self.fx, 0.0, self.cx],
                             [0.0, self.fy, self.cy],
                             [0.0, 0.0, 1.0]], dtype=dtype)

    def flipped(self) -> "Intrinsics":
        """Intrinsics of the horizontally mirrored image."""
        return Intrinsics(self.fx, self.fy, self.width - 1 - self.cx, self.cy, self.width, self.height)

    def resized(self, width: int, height: int) -> "Intrinsics":
        # pixel-center convention: corner pixel centers map onto each other
        sx = (width - 1) / (self.width - 1)
        sy = (height - 1) / (self.height - 1)
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)

    def as_tuple(self):
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height)


@dataclass(frozen=True)
class Pose:
    rotation: torch.Tensor
    translation: torch.Tensor

    @classmethod
    def identity(cls, batch: int | None = None, dtype=torch.float32) -> "Pose":
        rot = torch.eye(3, dtype=dtype)
        trans = torch.zeros(3, dtype=dtype)
        if batch is not None:
            rot = rot.expand(batch, 3, 3).clone()
            trans = trans.expand(batch, 3).clone()
        return cls(rot, trans)

    @classmethod
    def from_matrix(cls, m: torch.Tensor) -> "Pose":
        return cls(m[..., :3, :3], m[..., :3, 3])

    def matrix(self) -> torch.Tensor:
        top = torch.cat([self.rotation, self.translation.unsqueeze(-1)], dim=-1)
        bottom = torch.zeros_like(top[..., :1, :])
        bottom[..., 0, 3] = 1.0
        return torch.cat([top, bottom], dim=-2)

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        """Transform ``(B,3,N)`` points."""
        return self.rotation @ points + self.translation.unsqueeze(-1)

    def detach(self) -> "Pose":
        return Pose(self.rotation.detach(), self.translation.detach())

    def __getitem__(self, idx) -> "Pose":
        return Pose(self.rotation[idx], self.translation[idx])


def compose(a: Pose, b: Pose) -> Pose:
    """The transform that applies ``b`` then ``a``."""
    rot = a.rotation @ b.rotation
    trans = (a.rotation @ b.translation.unsqueeze(-1)).squeeze(-1) + a.translation
    return Pose(rot, trans)


def invert(p: Pose) -> Pose:
    rt = p.rotation.transpose(-1, -2)
    return Pose(rt, -(rt @ p.translation.unsqueeze(-1)).squeeze(-1))


def _skew(r: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(r[..., 0])
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    return torch.stack([
        torch.stack([zero, -z, y], dim=-1),
        torch.stack([z, zero, -x], dim=-1),
        torch.stack([-y, x, zero], dim=-1),
    ], dim=-2)


def axis_angle_to_rotation(r: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula; ``|r|`` is the angle in radians."""
    theta2 = (r * r).sum(-1, keepdim=True).unsqueeze(-1)
    small = theta2 < 1e-8
    # keep the unused branch finite so gradients through torch.where stay clean
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    a = torch.where(small, 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0, (1.0 - torch.cos(theta)) / safe2)
    k = _skew(r)
    eye = torch.eye(3, dtype=r.dtype, device=r.device).expand_as(k)
    return eye + a * k + b * (k @ k)


def axis_angle_to_pose(r: torch.Tensor, t: torch.Tensor) -> Pose:
    return Pose(axis_angle_to_rotation(r), t)


def rotation_to_axis_angle(rot: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`axis_angle_to_rotation` for angles below pi."""
    cos = ((rot[..., 0, 0] + rot[..., 1, 1] + rot[..., 2, 2] - 1.0) / 2.0).clamp(-1.0, 1.0)
    theta = torch.acos(cos)
    w = torch.stack([rot[..., 2, 1] - rot[..., 1, 2],
                     rot[..., 0, 2] - rot[..., 2, 0],
                     rot[..., 1, 0] - rot[..., 0, 1]], dim=-1)
    sin = torch.sin(theta)
    scale = torch.where(sin.abs() < 1e-8, 0.5 + theta ** 2 / 12.0, theta / (2.0 * sin.clamp(min=1e-12)))
    return w * scale.unsqueeze(-1)


def _k_matrix(K, batch: int, dtype) -> torch.Tensor:
    if isinstance(K, Intrinsics):
        K = K.matrix(dtype)
    K = K.to(dtype)
    if K.dim() == 2:
        K = K.expand(batch, 3, 3)
    return K


def pixel_grid(height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """Homogeneous pixel coordinates ``(3, H*W)`` in row-major order."""
    v, u = torch.meshgrid(torch.arange(height, dtype=dtype), torch.arange(width, dtype=dtype),
                          indexing="ij")
    return torch.stack([u.reshape(-1), v.reshape(-1), torch.ones(height * width, dtype=dtype)])


def backproject(depth: torch.Tensor, K) -> torch.Tensor:
    """Camera-frame points ``(B,3,H,W)`` with ``X = depth * K^-1 [u, v, 1]``."""
    if (depth <= 0).any():
        raise ValueError("backproject requires strictly positive depth")
    b, _, h, w = depth.shape
    kinv = torch.linalg.inv(_k_matrix(K, b, depth.dtype))
    rays = kinv @ pixel_grid(h, w, depth.dtype)
    return (rays * depth.reshape(b, 1, h * w)).reshape(b, 3, h, w)


def _in_bounds(u, v, h, w):
    return (u >= -BOUND_EPS) & (u <= w - 1 + BOUND_EPS) & (v >= -BOUND_EPS) & (v <= h - 1 + BOUND_EPS)


def project(points: torch.Tensor, T: Pose, K, z_min: float = Z_MIN):
    """Pixel coordinates ``(B,H,W,2)`` of ``K (T points)`` and a validity mask.

    The mask is false where the transformed depth is at most ``z_min`` or the
    projection falls outside the image bounds.
    """
    b, _, h, w = points.shape
    cam = T.apply(points.reshape(b, 3, h * w))
    z = cam[:, 2:3]
    pix = _k_matrix(K, b, points.dtype) @ (cam / z.clamp(min=z_min))
    coords = pix[:, :2].transpose(1, 2).reshape(b, h, w, 2)
    u, v = coords[..., 0], coords[..., 1]
    valid = (z.reshape(b, h, w) > z_min) & _in_bounds(u, v, h, w)
    return coords, valid


def bilinear_sample(src: torch.Tensor, coords: torch.Tensor):
    """Bilinearly sample ``src`` at pixel ``coords`` (u, v).

    Out-of-bounds coordinates are clamped to the edge; the returned mask marks
    them false. Differentiable with respect to both arguments.
    """
    _, _, h, w = src.shape
    u, v = coords[..., 0], coords[..., 1]
    mask = _in_bounds(u, v, h, w)
    grid = torch.stack([2.0 * u / (w - 1) - 1.0, 2.0 * v / (h - 1) - 1.0], dim=-1)
    out = F.grid_sample(src, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return out, mask


def warp(src: torch.Tensor, depth_target: torch.Tensor, T_target_to_src: Pose, K):
    """Synthesize the target view by sampling ``src`` through target depth."""
    coords, valid = project(backproject(depth_target, K), T_target_to_src, K)
    out, inb = bilinear_sample(src, coords)
    return out, valid & inb
