"""Initial + residual pose estimation through repeated view synthesis.

Convention: every pose network predicts the target-to-source motion of the
pair it sees, and every warp consumes a target-to-source transform. The
residual network sees ``(target, current synthesized view)`` and its output
is applied to target points before the previous estimate, so after ``k``
residual steps the composed target-to-source pose is the matrix product
``T_0 @ R_1 @ ... @ R_k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import geometry
from .coords import build_pose_input, coord_batch, widened_conv
from .depth import ResBlock, he_init, normalize_image
from .geometry import Pose, axis_angle_to_pose, compose

ENCODING_POSITIONS = ("input", "encoder", "both")


@dataclass(frozen=True)
class PoseNetConfig:
    num_residual_iterations: int = 1
    shared_encoder: bool = True
    use_coords: bool = True
    coord_init: str = "zeros"
    encoding_position: str = "input"
    channels: tuple = (16, 24, 32, 48)
    rotation_scale: float = 0.01
    translation_scale: float = 0.01

    def __post_init__(self):
        if self.num_residual_iterations < 0:
            raise ValueError("num_residual_iterations must be >= 0")
        if self.encoding_position not in ENCODING_POSITIONS:
            raise ValueError(f"encoding_position must be one of {ENCODING_POSITIONS}")
        if self.coord_init not in ("zeros", "random"):
            raise ValueError("coord_init must be 'zeros' or 'random'")

    @property
    def coords_at_input(self) -> bool:
        return self.use_coords and self.encoding_position in ("input", "both")

    @property
    def coords_in_encoder(self) -> bool:
        return self.use_coords and self.encoding_position in ("encoder", "both")

    @property
    def input_channels(self) -> int:
        return 8 if self.coords_at_input else 6


@dataclass
class PoseChain:
    initial: Pose
    residuals: list = field(default_factory=list)
    composed: Pose | None = None
    views: list = field(default_factory=list)
    masks: list = field(default_factory=list)


class PoseEncoder(nn.Module):
    def __init__(self, cfg: PoseNetConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.channels
        first = he_init(nn.Conv2d(6, chans[0], 3, 2, 1))
        if cfg.coords_at_input:
            seed = int(torch.randint(0, 2 ** 31 - 1, (1,)))
            first = widened_conv(first, 2, cfg.coord_init, seed)
        self.conv1 = first
        extra = 2 if cfg.coords_in_encoder else 0
        self.stages = he_init(nn.ModuleList(
            ResBlock(chans[i] + (extra if i == 0 else 0), chans[i + 1], stride=2)
            for i in range(len(chans) - 1)))

    def forward(self, x):
        if x.shape[1] != self.cfg.input_channels:
            raise ValueError(f"pose input has {x.shape[1]} channels, expected {self.cfg.input_channels}")
        # colors are normalized; coordinate channels are already in [-1, 1]
        x = torch.cat([normalize_image(x[:, :6]), x[:, 6:]], dim=1)
        x = F.relu(self.conv1(x))
        for i, stage in enumerate(self.stages):
            if i == 0 and self.cfg.coords_in_encoder:
                x = torch.cat([x, coord_batch(x)], dim=1)
            x = stage(x)
        return x


class PoseRegressor(nn.Module):
    def __init__(self, in_channels, hidden=32):
        super().__init__()
        self.squeeze = nn.Conv2d(in_channels, hidden, 1)
        self.conv = nn.Conv2d(hidden, hidden, 3, 1, 1)
        self.out = nn.Conv2d(hidden, 6, 1)

    def forward(self, feats):
        x = F.relu(self.squeeze(feats))
        x = F.relu(self.conv(x))
        return self.out(x).mean(dim=(2, 3))


class PoseModel(nn.Module):
    """One encoder (or one per stage) and an independent regressor per stage."""

    def __init__(self, cfg: PoseNetConfig = PoseNetConfig()):
        super().__init__()
        self.cfg = cfg
        n_stages = 1 + cfg.num_residual_iterations
        n_enc = 1 if cfg.shared_encoder else n_stages
        self.encoders = nn.ModuleList(PoseEncoder(cfg) for _ in range(n_enc))
        self.regressors = nn.ModuleList(PoseRegressor(cfg.channels[-1]) for _ in range(n_stages))

    def raw(self, pair_input, stage=0):
        enc = self.encoders[0 if self.cfg.shared_encoder else stage]
        return self.regressors[stage](enc(pair_input))

    def forward(self, pair_input, stage=0) -> Pose:
        return pose_net_forward(self, pair_input, stage)


def raw_to_pose(raw: torch.Tensor, cfg: PoseNetConfig) -> Pose:
    return axis_angle_to_pose(cfg.rotation_scale * raw[:, :3], cfg.translation_scale * raw[:, 3:])


def pose_net_forward(model: PoseModel, pair_input: torch.Tensor, stage: int = 0) -> Pose:
    """Target-to-source pose for the stacked pair."""
    return raw_to_pose(model.raw(pair_input, stage), model.cfg)


def residual_step(model: PoseModel, target, synthesized, depth_target, K, prior_mask=None,
                  stage: int = 1, residual: Pose | None = None):
    """Predict the residual pose of ``synthesized`` and re-warp it.

    ``residual`` bypasses the network (used for injection tests). Returns
    ``(residual, new_synthesized, mask)``; the mask is the intersection of
    ``prior_mask`` with the new warp's validity.
    """
    if residual is None:
        pair = build_pose_input(target, synthesized, model.cfg.coords_at_input)
        residual = pose_net_forward(model, pair, stage)
    new_synth, mask = geometry.warp(synthesized, depth_target, residual, K)
    if prior_mask is not None:
        mask = mask & prior_mask
    return residual, new_synth, mask


def estimate_pose_chain(model: PoseModel, target, source, depth_target, K, injected=None):
    """Run the initial pose network then each residual stage.

    ``injected`` optionally replaces network outputs with a list of poses
    ``[initial, residual_1, ...]``. Returns ``(chain, synthesized, mask)``;
    ``chain.views`` holds every intermediate synthesized view.
    """
    cfg = model.cfg
    if injected is not None and len(injected) != 1 + cfg.num_residual_iterations:
        raise ValueError("injected poses must cover the initial and every residual stage")
    if injected is not None:
        initial = injected[0]
    else:
        initial = pose_net_forward(model, build_pose_input(target, source, cfg.coords_at_input), 0)
    synth, mask = geometry.warp(source, depth_target, initial, K)
    chain = PoseChain(initial=initial, views=[synth], masks=[mask])
    composed = initial
    for i in range(1, cfg.num_residual_iterations + 1):
        forced = injected[i] if injected is not None else None
        res, synth, mask = residual_step(model, target, synth, depth_target, K, mask, i, forced)
        chain.residuals.append(res)
        chain.views.append(synth)
        chain.masks.append(mask)
        composed = compose(composed, res)
    chain.composed = composed
    return chain, synth, mask
