"""Joint training of the depth, scale and pose networks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint, geometry
from .config import TrainConfig, make_config, parse_config
from .depth import DepthModel
from .geometry import Pose
from .io import atomic_write_text, write_ppm
from .losses import (LossBundle, NonFiniteLossError, depth_consistency_loss, identity_errors,
                     photometric_loss, smoothness_loss, total_loss)
from .metrics import depth_metrics, mean_depth_metrics, MetricsReport
from .pose import PoseModel, estimate_pose_chain
from .synthetic import RenderedScene, read_dataset

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "photometric", "smoothness", "consistency", "total", "lr")


class MonoIndoorModel(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        self.depth = DepthModel(cfg.depth_config(), cfg.scale_config(),
                                factorize=cfg["model.depth_factorization"])
        self.pose = PoseModel(cfg.pose_config())

    def forward(self, image):
        return self.depth(image)


def build_model(cfg: TrainConfig) -> MonoIndoorModel:
    torch.manual_seed(cfg["train.seed"])
    return MonoIndoorModel(cfg)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    target: torch.Tensor  # (B,3,H,W)
    sources: list  # of (B,3,H,W)
    K: torch.Tensor  # (B,3,3)
    gt_depth: torch.Tensor | None = None
    ids: list = field(default_factory=list)


def _to_chw(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32))


def make_batch(triplets, rng: np.random.Generator | None = None, augment: bool = False) -> Batch:
    targets, sources, ks, depths = [], [[] for _ in triplets[0].sources], [], []
    for trip in triplets:
        imgs = [trip.target, *trip.sources]
        K = trip.K
        depth = trip.gt_depth
        if augment and rng is not None:
            flip = rng.random() < 0.5
            gain = rng.uniform(0.8, 1.2)
            if flip:
                imgs = [im[:, ::-1] for im in imgs]
                depth = depth[:, ::-1]
                K = K.flipped()
            imgs = [np.clip(im * gain, 0.0, 1.0) for im in imgs]
        targets.append(_to_chw(imgs[0]))
        for s, im in zip(sources, imgs[1:]):
            s.append(_to_chw(im))
        ks.append(K.matrix(torch.float32))
        depths.append(torch.from_numpy(np.ascontiguousarray(depth, dtype=np.float32))[None])
    return Batch(torch.stack(targets), [torch.stack(s) for s in sources], torch.stack(ks),
                 torch.stack(depths), [t.frame_id for t in triplets])


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


@dataclass
class StepOutputs:
    losses: LossBundle
    depth: torch.Tensor
    chains: list


def _upsample(x, size):
    if x.shape[-2:] == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def _pose_warp_sequence(source, depth, chain, K):
    """Re-synthesize through every stage of ``chain`` using ``depth``."""
    synth, mask = geometry.warp(source, depth, chain.initial, K)
    for res in chain.residuals:
        synth, m = geometry.warp(synth, depth, res, K)
        mask = mask & m
    return synth, mask


def compute_losses(model: MonoIndoorModel, batch: Batch, step: int | None = None,
                   generator: torch.Generator | None = None) -> StepOutputs:
    cfg = model.cfg
    weights = cfg.loss_weights()
    target, K = batch.target, batch.K
    b = target.shape[0]
    size = target.shape[-2:]
    with_consistency = weights.gamma > 0
    images = torch.cat([target, *batch.sources]) if with_consistency else target
    fd = model.depth(images, generator=generator)
    disps = [d[:b] for d in fd.relative_disparity]
    scale = fd.global_scale.reshape(-1, 1, 1, 1)
    depths_full = [scale[:b] / _upsample(d, size) for d in disps]

    chains = [estimate_pose_chain(model.pose, target, src, depths_full[0], K)[0] for src in batch.sources]

    identity = None
    if cfg["loss.automask"]:
        with torch.no_grad():
            identity = identity_errors(target, batch.sources, weights.alpha)
    photo_terms, smooth_terms, kept0 = [], [], None
    for k, depth_k in enumerate(depths_full):
        if k == 0:
            recons = [c.views[-1] for c in chains]
            masks = [c.masks[-1] for c in chains]
        else:
            pairs = [_pose_warp_sequence(src, depth_k, c, K) for src, c in zip(batch.sources, chains)]
            recons = [p[0] for p in pairs]
            masks = [p[1] for p in pairs]
        loss_k, kept = photometric_loss(target, recons, batch.sources, weights.alpha, masks,
                                        automask=cfg["loss.automask"], reduction=cfg["loss.reduction"],
                                        identity=identity)
        if k == 0:
            kept0 = kept
        photo_terms.append(loss_k)
        img_k = target if disps[k].shape[-2:] == size else F.interpolate(
            target, size=disps[k].shape[-2:], mode="area")
        smooth_terms.append(smoothness_loss(disps[k], img_k) / (2 ** k))
    photometric = torch.stack(photo_terms).mean()
    smoothness = torch.stack(smooth_terms).mean()

    if with_consistency:
        src_depth = scale[b:] / _upsample(fd.relative_disparity[0][b:], size)
        terms = []
        for i, c in enumerate(chains):
            d_src = src_depth[i * b:(i + 1) * b]
            terms.append(depth_consistency_loss(depths_full[0], d_src, c.composed, K)[0])
        consistency = torch.stack(terms).mean()
    else:
        consistency = photometric.new_zeros(())
    bundle = total_loss(photometric, smoothness, consistency, weights,
                        float(kept0.float().mean()), step)
    return StepOutputs(bundle, depths_full[0], chains)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    model: MonoIndoorModel
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0
    best_abs_rel: float = math.inf


def init_state(cfg: TrainConfig) -> TrainState:
    torch.set_num_threads(cfg["train.threads"])
    model = build_model(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_at(0), foreach=False)
    return TrainState(model, opt)


def _step_generator(cfg, step):
    return torch.Generator().manual_seed(cfg["train.seed"] * 1_000_003 + step)


def train_step(batch: Batch, state: TrainState) -> LossBundle:
    model = state.model
    cfg = model.cfg
    model.train()
    try:
        out = compute_losses(model, batch, state.step, _step_generator(cfg, state.step))
    except NonFiniteLossError as exc:
        raise NonFiniteLossError(exc.term, state.step) from None
    state.optimizer.zero_grad(set_to_none=True)
    out.losses.total.backward()
    if cfg["train.grad_clip"] > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg["train.grad_clip"])
    state.optimizer.step()
    state.step += 1
    return out.losses


def set_lr(state: TrainState, lr: float):
    for group in state.optimizer.param_groups:
        group["lr"] = lr


def epoch_batches(cfg: TrainConfig, triplets, epoch: int):
    """Deterministic shuffled batches for ``epoch``; incomplete tails dropped."""
    rng = np.random.default_rng([cfg["train.seed"], epoch])
    order = rng.permutation(len(triplets))
    bs = cfg["train.batch_size"]
    for i in range(len(order) // bs):
        idx = order[i * bs:(i + 1) * bs]
        yield make_batch([triplets[j] for j in idx], rng, cfg["train.augment"])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, state: TrainState, include_optimizer: bool = True):
    cfg = state.model.cfg
    tensors = {f"param.{k}": v.detach().numpy() for k, v in state.model.state_dict().items()}
    manifest = {k: v for k, v in
                (line.split("=", 1) for line in cfg.to_text().splitlines())}
    manifest.update({"state.epoch": str(state.epoch), "state.step": str(state.step),
                     "state.best_abs_rel": repr(state.best_abs_rel)})
    if include_optimizer:
        names = dict((id(p), n) for n, p in state.model.named_parameters())
        for group in state.optimizer.param_groups:
            for p in group["params"]:
                st = state.optimizer.state.get(p)
                if st:
                    n = names[id(p)]
                    tensors[f"adam.exp_avg.{n}"] = st["exp_avg"].numpy()
                    tensors[f"adam.exp_avg_sq.{n}"] = st["exp_avg_sq"].numpy()
                    manifest[f"adam.step.{n}"] = str(int(st["step"]))
    checkpoint.save(path, tensors, manifest)


def config_from_manifest(manifest: dict) -> TrainConfig:
    return parse_config("".join(f"{k}={v}\n" for k, v in manifest.items()
                                if not k.startswith(("state.", "adam."))))


def load_model(path) -> MonoIndoorModel:
    tensors, manifest = checkpoint.load(path)
    cfg = config_from_manifest(manifest)
    model = MonoIndoorModel(cfg)
    _load_params(model, tensors)
    model.eval()
    return model


def _load_params(model, tensors):
    sd = {k[len("param."):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith("param.")}
    model.load_state_dict(sd)


def restore_state(path, cfg: TrainConfig | None = None) -> TrainState:
    tensors, manifest = checkpoint.load(path)
    saved = config_from_manifest(manifest)
    state = init_state(cfg or saved)
    _load_params(state.model, tensors)
    params = dict(state.model.named_parameters())
    for n, p in params.items():
        if f"adam.exp_avg.{n}" in tensors:
            state.optimizer.state[p] = {
                "step": torch.tensor(float(manifest[f"adam.step.{n}"])),
                "exp_avg": torch.from_numpy(tensors[f"adam.exp_avg.{n}"].copy()),
                "exp_avg_sq": torch.from_numpy(tensors[f"adam.exp_avg_sq.{n}"].copy()),
            }
    state.epoch = int(manifest["state.epoch"])
    state.step = int(manifest["state.step"])
    state.best_abs_rel = float(manifest["state.best_abs_rel"])
    return state


def init_from(state: TrainState, path):
    """Copy matching parameters from a checkpoint (fine-tuning start point)."""
    tensors, _ = checkpoint.load(path)
    own = state.model.state_dict()
    with torch.no_grad():
        for k, v in tensors.items():
            name = k[len("param."):]
            if k.startswith("param.") and name in own and tuple(own[name].shape) == v.shape:
                own[name].copy_(torch.from_numpy(v.copy()))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@torch.no_grad()
def predict_depth(model: MonoIndoorModel, images: np.ndarray) -> np.ndarray:
    """Metric depth (N,H,W) for float images (N,H,W,3)."""
    model.eval()
    x = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=np.float32))
    return model.depth(x).metric_depth[0][:, 0].numpy()


def evaluate_depth(model, scenes, split="test", eval_cfg=None) -> MetricsReport:
    eval_cfg = eval_cfg or model.cfg.eval_config()
    reports = []
    for scene in scenes:
        ids = scene.triplet_ids(split)
        if not ids:
            continue
        pred = predict_depth(model, np.stack([scene.image(t) for t in ids]))
        reports += [depth_metrics(p, scene.depths[t], eval_cfg) for p, t in zip(pred, ids)]
    return mean_depth_metrics(reports)


@torch.no_grad()
def predict_relative_poses(model: MonoIndoorModel, scene: RenderedScene) -> list:
    """Predicted camera ``k -> k+1`` transforms (4x4) along the sequence."""
    model.eval()
    K = scene.K.matrix(torch.float32)
    out = []
    for k in range(len(scene) - 1):
        tgt = _to_chw(scene.image(k))[None]
        src = _to_chw(scene.image(k + 1))[None]
        depth = model.depth(tgt).metric_depth[0]
        chain, _, _ = estimate_pose_chain(model.pose, tgt, src, depth, K)
        out.append(chain.composed.matrix()[0].double().numpy())
    return out


def evaluate_pose(model, scene: RenderedScene, stride: int = 1):
    from .metrics import ate, chain_relative_poses, rpe
    rel = predict_relative_poses(model, scene)
    gt = np.stack([np.linalg.inv(p) for p in scene.world_to_cam])
    pred = chain_relative_poses(rel, gt[0])
    rpe_m, rpe_deg = rpe(pred, gt, stride)
    return MetricsReport(ate_m=ate(pred, gt), rpe_m=rpe_m, rpe_deg=rpe_deg)


@torch.no_grad()
def dump_views(model: MonoIndoorModel, triplet, out_dir):
    """Write target, sources and every intermediate synthesized view as PPM."""
    model.eval()
    out_dir = Path(out_dir)
    batch = make_batch([triplet])
    depth = model.depth(batch.target).metric_depth[0]
    write_ppm(out_dir / "target.ppm", _to_u8(batch.target[0]))
    for s, src in enumerate(batch.sources):
        write_ppm(out_dir / f"source{s}.ppm", _to_u8(src[0]))
        chain, _, _ = estimate_pose_chain(model.pose, batch.target, src, depth, batch.K)
        for i, view in enumerate(chain.views):
            write_ppm(out_dir / f"source{s}_view{i}.ppm", _to_u8(view[0]))


def _to_u8(chw: torch.Tensor) -> np.ndarray:
    return np.round(chw.clamp(0, 1).permute(1, 2, 0).numpy() * 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _log_line(epoch, step, bundle: dict, lr) -> str:
    return (f"{epoch},{step},{bundle['photometric']!r},{bundle['smoothness']!r},"
            f"{bundle['consistency']!r},{bundle['total']!r},{lr!r}")


def fit(cfg: TrainConfig, out_dir, scenes=None, resume=None, init_checkpoint=None,
        stop_after_epoch: int | None = None) -> TrainState:
    """Train for ``cfg.epochs`` epochs with the two-phase learning rate.

    Writes ``final.midx``, ``best.midx`` (by validation AbsRel),
    ``epoch_NNN.midx`` snapshots, ``train_log.csv`` (one line per step),
    ``epoch_log.csv`` (per-epoch mean losses and validation metrics).
    ``stop_after_epoch`` ends early (used to test resumption).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if scenes is None:
        if not cfg["train.dataset"]:
            raise ValueError("train.dataset is not set")
        scenes = read_dataset(cfg["train.dataset"])
    train = [t for s in scenes for t in s.triplets("train")]
    has_val = any(s.triplet_ids("val") for s in scenes)
    if not train:
        raise ValueError("dataset has no training triplets")

    if resume is not None:
        state = restore_state(resume, cfg)
        step_lines = (out_dir / "train_log.csv").read_text().splitlines()[1:]
        step_lines = [l for l in step_lines if int(l.split(",")[1]) < state.step]
        epoch_lines = (out_dir / "epoch_log.csv").read_text().splitlines()[1:]
        epoch_lines = [l for l in epoch_lines if int(l.split(",")[0]) < state.epoch]
    else:
        state = init_state(cfg)
        if init_checkpoint is not None:
            init_from(state, init_checkpoint)
        step_lines, epoch_lines = [], []
    bs = cfg["train.batch_size"]
    dropped = len(train) % bs
    log.info("training on %d triplets, batch %d (%d dropped per epoch)", len(train), bs, dropped)
    max_steps = cfg["train.max_steps"]

    def write_logs():
        atomic_write_text(out_dir / "train_log.csv", ",".join(LOG_COLUMNS) + "\n"
                          + "".join(l + "\n" for l in step_lines))
        atomic_write_text(out_dir / "epoch_log.csv",
                          "epoch,photometric,smoothness,consistency,total,lr,val_abs_rel,val_delta1\n"
                          + "".join(l + "\n" for l in epoch_lines))

    while state.epoch < cfg.epochs and not (max_steps and state.step >= max_steps):
        epoch = state.epoch
        lr = cfg.lr_at(epoch)
        set_lr(state, lr)
        sums = np.zeros(4)
        n = 0
        for batch in epoch_batches(cfg, train, epoch):
            if max_steps and state.step >= max_steps:
                break
            bundle = train_step(batch, state).as_floats()
            step_lines.append(_log_line(epoch, state.step - 1, bundle, lr))
            sums += [bundle[k] for k in ("photometric", "smoothness", "consistency", "total")]
            n += 1
        mean = sums / max(n, 1)
        val = MetricsReport()
        if has_val and cfg["train.val_every"] and (epoch + 1) % cfg["train.val_every"] == 0:
            val = evaluate_depth(state.model, scenes, "val")
        state.epoch += 1
        if val.abs_rel < state.best_abs_rel:
            state.best_abs_rel = val.abs_rel
            save_checkpoint(out_dir / "best.midx", state, include_optimizer=False)
        means = ",".join(repr(float(x)) for x in mean)
        epoch_lines.append(f"{epoch},{means},{lr!r},{val.abs_rel!r},{val.delta1!r}")
        snap = cfg["train.snapshot_every"]
        if snap and state.epoch % snap == 0:
            save_checkpoint(out_dir / f"epoch_{state.epoch:03d}.midx", state)
        save_checkpoint(out_dir / "last.midx", state)
        write_logs()
        log.info("epoch %d: total %.5f val AbsRel %.4f", epoch, mean[3], val.abs_rel)
        if stop_after_epoch is not None and state.epoch >= stop_after_epoch:
            return state
    save_checkpoint(out_dir / "final.midx", state)
    write_logs()
    return state


def default_config(**overrides) -> TrainConfig:
    return make_config({k.replace("__", "."): v for k, v in overrides.items()})
