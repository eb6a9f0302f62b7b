"""Procedural indoor-like sequences with exact depth and pose.

Scenes are sets of textured planes (a single plane, or the six walls of a
box room) rendered by ray casting. Textures are functions of the surface
point, so brightness is constant across views.

On disk a scene lives in ``<root>/scene/<name>/``::

    frame_%06d.ppm   binary P6 color frames
    depth_%06d.pfm   float32 z-depth
    intrinsics.txt   fx fy cx cy
    poses.txt        one row-major 3x4 world-to-camera matrix per frame
    split.txt        lines "train|val|test <frame id>" (triplet centers)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .geometry import Intrinsics
from .io import (DatasetError, DatasetFormatError, MissingIntrinsics, atomic_write_text,
                 read_pfm, read_ppm, write_pfm, write_ppm)

LAYOUTS = ("fronto-plane", "tilted-plane", "box-room")
SPLITS = ("train", "val", "test")


@dataclass
class SceneSpec:
    layout: str
    trajectory: list  # 4x4 world-to-camera matrices
    texture_seed: int = 0
    depth_range: tuple = (0.1, 20.0)
    image_size: tuple = (64, 64)  # (H, W)
    name: str = "scene"
    room_size: tuple = (4.0, 2.6, 5.0)  # box-room extent along x, y, z
    plane_depth: float = 2.0
    plane_tilt_deg: float = 30.0
    focal_scale: float = 0.85
    noise_cell: float = 0.08
    noise_amp: float = 0.15

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        near, far = self.depth_range
        if not 0 < near < far:
            raise ValueError(f"depth_range needs 0 < near < far, got {self.depth_range}")
        if len(self.trajectory) < 3:
            raise ValueError("trajectory needs at least 3 poses")

    def intrinsics(self) -> Intrinsics:
        h, w = self.image_size
        return Intrinsics(self.focal_scale * w, self.focal_scale * w, (w - 1) / 2, (h - 1) / 2, w, h)


@dataclass
class FrameTriplet:
    target: np.ndarray  # (H,W,3) float32 in [0,1]
    sources: list  # [I_{t-1}, I_{t+1}]
    gt_depth: np.ndarray  # (H,W) float32
    gt_poses: list  # 4x4 target-to-source transforms, aligned with sources
    K: Intrinsics
    frame_id: int = 0
    source_depths: list = field(default_factory=list)


@dataclass
class RenderedScene:
    name: str
    frames: list  # uint8 (H,W,3)
    depths: list  # float32 (H,W)
    world_to_cam: list  # float64 4x4
    K: Intrinsics
    split: dict  # frame id -> split name

    def __len__(self):
        return len(self.frames)

    def image(self, i) -> np.ndarray:
        return self.frames[i].astype(np.float32) / 255.0

    def relative_pose(self, i, j) -> np.ndarray:
        """Transform from camera ``i`` coordinates to camera ``j`` coordinates."""
        return self.world_to_cam[j] @ np.linalg.inv(self.world_to_cam[i])

    def triplet(self, t) -> FrameTriplet:
        if not 1 <= t <= len(self.frames) - 2:
            raise IndexError(f"frame {t} has no temporal neighbours")
        srcs = [t - 1, t + 1]
        return FrameTriplet(self.image(t), [self.image(s) for s in srcs], self.depths[t],
                            [self.relative_pose(t, s) for s in srcs], self.K, t,
                            [self.depths[s] for s in srcs])

    def triplet_ids(self, split: str | None = None) -> list:
        ids = range(1, len(self.frames) - 1)
        if split is None:
            return list(ids)
        return [t for t in ids if self.split.get(t) == split]

    def triplets(self, split: str | None = None) -> list:
        return [self.triplet(t) for t in self.triplet_ids(split)]


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


def rotation_xyz(rx, ry, rz) -> np.ndarray:
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    r_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    r_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    r_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return r_y @ r_x @ r_z


def camera_pose(center, r_c2w) -> np.ndarray:
    """World-to-camera matrix of a camera at ``center`` with orientation ``r_c2w``."""
    m = np.eye(4)
    m[:3, :3] = r_c2w.T
    m[:3, 3] = -r_c2w.T @ np.asarray(center, dtype=np.float64)
    return m


def rotation_angle_deg(rot: np.ndarray) -> float:
    cos = (np.trace(rot) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def lateral_trajectory(n_frames: int, step: float) -> list:
    """Camera translating along +x by ``step`` per frame, no rotation."""
    return [camera_pose((k * step, 0.0, 0.0), np.eye(3)) for k in range(n_frames)]


def wandering_trajectory(n_frames: int, seed: int = 0, max_rotation_deg: float = 5.0,
                         step: float = 0.06, amplitude=(0.6, 0.12, 0.7)) -> list:
    """Smooth handheld-like path: sinusoidal position, yaw-dominant rotation.

    Rotation amplitudes are set so the frame-to-frame rotation angle stays at
    or below ``max_rotation_deg``.
    """
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi, size=6)
    ax, ay, az = amplitude
    # angular rates chosen from the desired per-frame translation
    wx = step / max(ax, 1e-9) * 0.75
    wz = step / max(az, 1e-9) * 0.6
    wy = 2 * np.pi / 50.0
    yaw_period, pitch_period, roll_period = 40.0, 55.0, 70.0
    yaw_amp = math.radians(max_rotation_deg) * 0.9 * yaw_period / (2 * np.pi)
    pitch_amp = math.radians(max_rotation_deg) * 0.2 * pitch_period / (2 * np.pi)
    roll_amp = math.radians(max_rotation_deg) * 0.1 * roll_period / (2 * np.pi)
    poses = []
    for k in range(n_frames):
        center = (ax * math.sin(wx * k + phase[0]),
                  ay * math.sin(wy * k + phase[1]),
                  az * math.sin(wz * k + phase[2]))
        rot = rotation_xyz(pitch_amp * math.sin(2 * np.pi * k / pitch_period + phase[3]),
                           yaw_amp * math.sin(2 * np.pi * k / yaw_period + phase[4]),
                           roll_amp * math.sin(2 * np.pi * k / roll_period + phase[5]))
        poses.append(camera_pose(center, rot))
    return poses


def yaw_trajectory(n_frames: int, yaw_deg_per_frame: float, step: float = 0.0) -> list:
    return [camera_pose((k * step, 0.0, 0.0), rotation_xyz(0.0, math.radians(k * yaw_deg_per_frame), 0.0))
            for k in range(n_frames)]


# ---------------------------------------------------------------------------
# scene geometry and texture
# ---------------------------------------------------------------------------


def _plane_arrays(normals, offsets, u_axes, v_axes, anchors, rng, n_waves=6, grid=64):
    p = len(normals)
    freq_mag = rng.uniform(0.2, 1.6, size=(p, n_waves))
    freq_dir = rng.uniform(0, 2 * np.pi, size=(p, n_waves))
    wave_freq = np.stack([freq_mag * np.cos(freq_dir), freq_mag * np.sin(freq_dir)], axis=-1)
    return {
        "normals": np.asarray(normals, dtype=np.float64),
        "offsets": np.asarray(offsets, dtype=np.float64),
        "u_axes": np.asarray(u_axes, dtype=np.float64),
        "v_axes": np.asarray(v_axes, dtype=np.float64),
        "anchors": np.asarray(anchors, dtype=np.float64),
        "tints": rng.uniform(0.55, 1.0, size=(p, 3)),
        "wave_freq": wave_freq,
        "wave_phase": rng.uniform(0, 2 * np.pi, size=(p, n_waves)),
        "wave_amp": rng.uniform(0.06, 0.12, size=(p, n_waves)),
        "noise": rng.uniform(0.0, 1.0, size=(p, grid, grid)),
    }


def scene_planes(spec: SceneSpec) -> dict:
    rng = np.random.default_rng(spec.texture_seed)
    if spec.layout == "fronto-plane":
        return _plane_arrays([(0, 0, 1)], [spec.plane_depth], [(1, 0, 0)], [(0, 1, 0)],
                             [(0, 0, spec.plane_depth)], rng)
    if spec.layout == "tilted-plane":
        a = math.radians(spec.plane_tilt_deg)
        n = (math.sin(a), 0.0, math.cos(a))
        anchor = (0.0, 0.0, spec.plane_depth)
        return _plane_arrays([n], [spec.plane_depth * n[2]], [(math.cos(a), 0.0, -math.sin(a))],
                             [(0, 1, 0)], [anchor], rng)
    hx, hy, hz = (s / 2 for s in spec.room_size)
    normals = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    offsets = [hx, hx, hy, hy, hz, hz]
    u_axes = [(0, 0, 1), (0, 0, 1), (1, 0, 0), (1, 0, 0), (1, 0, 0), (1, 0, 0)]
    v_axes = [(0, 1, 0), (0, 1, 0), (0, 0, 1), (0, 0, 1), (0, 1, 0), (0, 1, 0)]
    anchors = [(hx, -hy, -hz), (-hx, -hy, -hz), (-hx, hy, -hz), (-hx, -hy, -hz),
               (-hx, -hy, hz), (-hx, -hy, -hz)]
    return _plane_arrays(normals, offsets, u_axes, v_axes, anchors, rng)


def default_split(frame_id: int) -> str:
    r = frame_id % 8
    if r == 0:
        return "test"
    if r == 4:
        return "val"
    return "train"


def render_scene(spec: SceneSpec) -> RenderedScene:
    """Ray-cast every trajectory frame. Rejects cameras outside the scene."""
    K = spec.intrinsics()
    planes = scene_planes(spec)
    near, far = spec.depth_range
    if spec.layout == "box-room":
        half = np.asarray(spec.room_size) / 2
        for k, pose in enumerate(spec.trajectory):
            center = -pose[:3, :3].T @ pose[:3, 3]
            if np.any(np.abs(center) >= half - near):
                raise ValueError(f"trajectory frame {k} at {center.round(3).tolist()} leaves the room interior")
    frames, depths = [], []
    for k, pose in enumerate(spec.trajectory):
        r_c2w = pose[:3, :3].T
        center = -r_c2w @ pose[:3, 3]
        img, depth, face = kernels.raycast_planes(center, r_c2w, K.as_tuple(), planes,
                                                  spec.noise_cell, spec.noise_amp)
        if np.any(face < 0) or depth.min() < near or depth.max() > far:
            raise ValueError(f"trajectory frame {k} sees outside the scene depth range {spec.depth_range}")
        frames.append(np.round(img * 255.0).astype(np.uint8))
        depths.append(depth.astype(np.float32))
    split = {t: default_split(t) for t in range(1, len(frames) - 1)}
    return RenderedScene(spec.name, frames, depths, [np.asarray(p, dtype=np.float64) for p in spec.trajectory],
                         K, split)


def default_box_room_spec(seed: int = 0, n_triplets: int = 120, image_size=(64, 64),
                          max_rotation_deg: float = 5.0, name: str = "room") -> SceneSpec:
    return SceneSpec("box-room", wandering_trajectory(n_triplets + 2, seed, max_rotation_deg),
                     texture_seed=seed, depth_range=(0.3, 12.0), image_size=image_size, name=name)


def reconstruction_error(scene: RenderedScene, t: int, s: int) -> float:
    """Mean absolute error of frame ``s`` warped into frame ``t`` with ground truth."""
    K = scene.K
    h, w = scene.depths[t].shape
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    rays = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    pts = rays * scene.depths[t][..., None].astype(np.float64)
    T = scene.relative_pose(t, s)
    cam = pts @ T[:3, :3].T + T[:3, 3]
    coords = np.stack([K.fx * cam[..., 0] / cam[..., 2] + K.cx, K.fy * cam[..., 1] / cam[..., 2] + K.cy], -1)
    out, mask = kernels.bilinear_sample_ref(scene.image(s), coords)
    mask &= cam[..., 2] > 1e-3
    if not mask.any():
        return float("nan")
    return float(np.abs(out - scene.image(t))[mask].mean())


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------


def scene_dir(root, name) -> Path:
    return Path(root) / "scene" / name


def write_dataset(scenes, root) -> list:
    """Write scenes under ``root``; returns the scene directories."""
    if isinstance(scenes, RenderedScene):
        scenes = [scenes]
    out = []
    for scene in scenes:
        d = scene_dir(root, scene.name)
        d.mkdir(parents=True, exist_ok=True)
        for i, (img, depth) in enumerate(zip(scene.frames, scene.depths)):
            write_ppm(d / f"frame_{i:06d}.ppm", img)
            write_pfm(d / f"depth_{i:06d}.pfm", depth)
        K = scene.K
        atomic_write_text(d / "intrinsics.txt", f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r}\n")
        atomic_write_text(d / "poses.txt", "".join(
            " ".join(repr(float(x)) for x in p[:3].ravel()) + "\n" for p in scene.world_to_cam))
        atomic_write_text(d / "split.txt", "".join(f"{scene.split[t]} {t}\n" for t in sorted(scene.split)))
        out.append(d)
    return out


def _read_numbers(path, per_line=None):
    data = path.read_bytes()
    rows = []
    offset = 0
    for line in data.splitlines(keepends=True):
        text = line.decode("ascii", errors="replace").strip()
        if text:
            try:
                row = [float(x) for x in text.split()]
            except ValueError:
                raise DatasetFormatError(path, offset, f"non-numeric entry in {text!r}") from None
            if per_line is not None and len(row) != per_line:
                raise DatasetFormatError(path, offset, f"expected {per_line} numbers, got {len(row)}")
            rows.append(row)
        offset += len(line)
    return rows


def read_poses(path) -> list:
    path = Path(path)
    out = []
    for row in _read_numbers(path, 12):
        m = np.eye(4)
        m[:3] = np.asarray(row).reshape(3, 4)
        out.append(m)
    return out


def write_poses(path, poses):
    atomic_write_text(path, "".join(" ".join(repr(float(x)) for x in np.asarray(p)[:3].ravel()) + "\n"
                                    for p in poses))


def read_scene(d) -> RenderedScene:
    d = Path(d)
    kpath = d / "intrinsics.txt"
    if not kpath.exists():
        raise MissingIntrinsics(f"{kpath}: intrinsics file missing")
    rows = _read_numbers(kpath)
    flat = [x for r in rows for x in r]
    if len(flat) != 4:
        raise DatasetFormatError(kpath, 0, f"expected 4 numbers (fx fy cx cy), got {len(flat)}")
    frame_paths = sorted(d.glob("frame_*.ppm"))
    if not frame_paths:
        raise DatasetError(f"{d}: no frame_*.ppm files")
    frames, depths = [], []
    for i, fp in enumerate(frame_paths):
        if fp.name != f"frame_{i:06d}.ppm":
            raise DatasetError(f"{d}: frame numbering gap at {fp.name}")
        frames.append(read_ppm(fp))
        dp = d / f"depth_{i:06d}.pfm"
        if not dp.exists():
            raise DatasetError(f"{dp}: depth file missing")
        depths.append(read_pfm(dp))
    h, w = frames[0].shape[:2]
    K = Intrinsics(flat[0], flat[1], flat[2], flat[3], w, h)
    poses = read_poses(d / "poses.txt")
    if len(poses) != len(frames):
        raise DatasetError(f"{d / 'poses.txt'}: {len(poses)} poses for {len(frames)} frames")
    split = {}
    spath = d / "split.txt"
    if spath.exists():
        offset = 0
        for line in spath.read_bytes().splitlines(keepends=True):
            parts = line.decode("ascii", errors="replace").split()
            if parts:
                if len(parts) != 2 or parts[0] not in SPLITS or not parts[1].isdigit():
                    raise DatasetFormatError(spath, offset, f"bad split entry {line!r}")
                split[int(parts[1])] = parts[0]
            offset += len(line)
    else:
        split = {t: default_split(t) for t in range(1, len(frames) - 1)}
    return RenderedScene(d.name, frames, depths, poses, K, split)


def read_dataset(root) -> list:
    root = Path(root)
    base = root / "scene"
    if not base.is_dir():
        raise DatasetError(f"{root}: no scene/ directory")
    dirs = sorted(p for p in base.iterdir() if p.is_dir())
    if not dirs:
        raise DatasetError(f"{base}: no scenes")
    return [read_scene(p) for p in dirs]


# ---------------------------------------------------------------------------
# scene spec files (key=value)
# ---------------------------------------------------------------------------

SPEC_KEYS = {
    "scene.name": "room",
    "scene.layout": "box-room",
    "scene.triplets": "120",
    "scene.height": "64",
    "scene.width": "64",
    "scene.seed": "0",
    "scene.max_rotation_deg": "5.0",
    "scene.step": "0.06",
    "scene.room_size": "4.0,2.6,5.0",
    "scene.plane_depth": "2.0",
    "scene.plane_tilt_deg": "30.0",
}


class SpecError(ValueError):
    def __init__(self, message, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def parse_scene_spec(text: str, seed: int | None = None) -> SceneSpec:
    values = dict(SPEC_KEYS)
    lines = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"expected key=value, got {raw.strip()!r}", n)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SPEC_KEYS:
            raise SpecError(f"unknown key {key!r}", n)
        values[key] = value
        lines[key] = n
    if seed is not None:
        values["scene.seed"] = str(seed)

    def get(key, conv):
        try:
            return conv(values[key])
        except ValueError as exc:
            raise SpecError(f"bad value for {key}: {exc}", lines.get(key)) from None

    def floats(s):
        return tuple(float(x) for x in s.split(","))

    n_trip = get("scene.triplets", int)
    h, w = get("scene.height", int), get("scene.width", int)
    s = get("scene.seed", int)
    layout = values["scene.layout"]
    if layout not in LAYOUTS:
        raise SpecError(f"scene.layout must be one of {LAYOUTS}", lines.get("scene.layout"))
    if n_trip < 1:
        raise SpecError("scene.triplets must be >= 1", lines.get("scene.triplets"))
    step = get("scene.step", float)
    try:
        if layout == "box-room":
            room = get("scene.room_size", floats)
            if len(room) != 3:
                raise SpecError("scene.room_size needs 3 comma-separated numbers", lines.get("scene.room_size"))
            traj = wandering_trajectory(n_trip + 2, s, get("scene.max_rotation_deg", float), step)
            return SceneSpec(layout, traj, texture_seed=s, depth_range=(0.3, 12.0), image_size=(h, w),
                             name=values["scene.name"], room_size=room)
        traj = lateral_trajectory(n_trip + 2, step)
        return SceneSpec(layout, traj, texture_seed=s, depth_range=(0.1, 50.0), image_size=(h, w),
                         name=values["scene.name"], plane_depth=get("scene.plane_depth", float),
                         plane_tilt_deg=get("scene.plane_tilt_deg", float))
    except SpecError:
        raise
    except ValueError as exc:
        raise SpecError(str(exc)) from None
