"""Flat ``key=value`` training configuration.

Every key has a default; unknown keys and malformed values are errors that
carry the offending line number.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .depth import DepthNetConfig, ScaleRegressionConfig, RELATIVE_D_MAX, RELATIVE_D_MIN
from .losses import LossWeights
from .metrics import DepthEvalConfig
from .pose import PoseNetConfig


class ConfigError(ValueError):
    def __init__(self, message, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s: str):
    return None if s.strip().lower() in ("none", "off", "") else float(s)


# key -> (default, parser, description)
KEYS = {
    "train.epochs": ("40", int, "number of epochs"),
    "train.lr_initial": ("1e-4", float, "Adam learning rate before the drop"),
    "train.lr_drop_epoch": ("20", int, "first epoch using train.lr_final"),
    "train.lr_final": ("1e-5", float, "learning rate after the drop"),
    "train.batch_size": ("4", int, "triplets per step; incomplete final batches are dropped"),
    "train.seed": ("0", int, "seed for initialization, batching, augmentation and dropout"),
    "train.max_steps": ("0", int, "stop after this many optimizer steps (0 = no limit)"),
    "train.snapshot_every": ("10", int, "write epoch_NNN.midx every N epochs (0 = never)"),
    "train.grad_clip": ("10.0", float, "global gradient-norm clip"),
    "train.augment": ("true", _bool, "horizontal flip + brightness jitter, shared across a triplet"),
    "train.dataset": ("", str, "dataset root containing scene/<name>/"),
    "train.threads": ("1", int, "torch intra-op threads"),
    "train.val_every": ("1", int, "validate every N epochs (0 = never)"),
    "model.residual_pose": ("true", _bool, "use residual pose stages"),
    "model.depth_factorization": ("true", _bool, "relative depth x regressed global scale"),
    "model.depth_consistency": ("true", _bool, "include the depth consistency term"),
    "depth.encoder_channels": ("8,16,32,48", str, "depth encoder widths per stage"),
    "depth.decoder_channels": ("8,16,24,32", str, "depth decoder widths per stage"),
    "scale.d_max_bins": ("10", int, "largest integer scale bin"),
    "scale.attention_dim": ("16", int, "query/key/value width"),
    "scale.dropout": ("0.5", float, "dropout between fully-connected layers"),
    "scale.use_attention": ("true", _bool, "self-attention block before the scale head"),
    "scale.use_prob_regression": ("true", _bool, "soft-argmax over bins instead of a direct positive scalar"),
    "pose.use_coords": ("true", _bool, "append normalized (i, j) coordinate channels"),
    "pose.coord_init": ("zeros", str, "init of coordinate kernels: zeros | random"),
    "pose.encoding_position": ("input", str, "where coordinates enter: input | encoder | both"),
    "pose.num_residual_iterations": ("1", int, "residual pose stages when model.residual_pose"),
    "pose.shared_encoder": ("true", _bool, "share one pose encoder across stages"),
    "pose.channels": ("16,24,32,48", str, "pose encoder widths"),
    "pose.rotation_scale": ("0.01", float, "multiplier on raw axis-angle outputs"),
    "pose.translation_scale": ("0.01", float, "multiplier on raw translation outputs"),
    "loss.alpha": ("0.85", float, "SSIM weight in the photometric error"),
    "loss.tau": ("0.001", float, "smoothness weight"),
    "loss.gamma": ("0.035", float, "depth consistency weight"),
    "loss.scales": ("4", int, "decoder output scales in the loss"),
    "loss.automask": ("true", _bool, "drop pixels better explained by an unwarped source"),
    "loss.reduction": ("min", str, "combine sources by per-pixel min or sum"),
    "eval.cap": ("10", _opt_float, "evaluation depth cap (none = off)"),
    "eval.median_scaling": ("true", _bool, "per-image median scaling"),
    "eval.min_depth": ("0.01", float, "lower evaluation clamp"),
}


def _ints(s):
    return tuple(int(x) for x in s.split(","))


@dataclass(frozen=True)
class TrainConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def epochs(self) -> int:
        return self.values["train.epochs"]

    def lr_at(self, epoch: int) -> float:
        v = self.values
        return v["train.lr_initial"] if epoch < v["train.lr_drop_epoch"] else v["train.lr_final"]

    def loss_weights(self) -> LossWeights:
        v = self.values
        gamma = v["loss.gamma"] if v["model.depth_consistency"] else 0.0
        return LossWeights(v["loss.alpha"], v["loss.tau"], gamma)

    def depth_config(self) -> DepthNetConfig:
        v = self.values
        hi = RELATIVE_D_MAX if v["model.depth_factorization"] else float(v["scale.d_max_bins"])
        return DepthNetConfig(encoder_channels=_ints(v["depth.encoder_channels"]),
                              decoder_channels=_ints(v["depth.decoder_channels"]),
                              num_scales=v["loss.scales"], d_min=RELATIVE_D_MIN, d_max=hi)

    def scale_config(self) -> ScaleRegressionConfig:
        v = self.values
        return ScaleRegressionConfig(d_max_bins=v["scale.d_max_bins"], attention_dim=v["scale.attention_dim"],
                                     dropout_rate=v["scale.dropout"], use_attention=v["scale.use_attention"],
                                     use_prob_regression=v["scale.use_prob_regression"])

    def pose_config(self) -> PoseNetConfig:
        v = self.values
        iters = v["pose.num_residual_iterations"] if v["model.residual_pose"] else 0
        return PoseNetConfig(num_residual_iterations=iters, shared_encoder=v["pose.shared_encoder"],
                             use_coords=v["pose.use_coords"], coord_init=v["pose.coord_init"],
                             encoding_position=v["pose.encoding_position"], channels=_ints(v["pose.channels"]),
                             rotation_scale=v["pose.rotation_scale"],
                             translation_scale=v["pose.translation_scale"])

    def eval_config(self) -> DepthEvalConfig:
        v = self.values
        return DepthEvalConfig(cap=v["eval.cap"], median_scaling=v["eval.median_scaling"],
                               min_eval_depth=v["eval.min_depth"])

    def replace(self, **overrides) -> "TrainConfig":
        """Copy with overrides; keys use ``__`` for ``.`` (``train__epochs=3``)."""
        return make_config({k.replace("__", "."): v for k, v in overrides.items()}, base=self)

    def to_text(self) -> str:
        return "".join(f"{k}={format_value(self.values[k])}\n" for k in KEYS)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key, raw, line=None):
    if key not in KEYS:
        raise ConfigError(f"unknown key {key!r}", line)
    parser = KEYS[key][1]
    if not isinstance(raw, str):
        raw = format_value(raw)
    try:
        return parser(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}", line) from None


def _validate(values, lines):
    def fail(msg, key):
        raise ConfigError(msg, lines.get(key))

    if values["train.epochs"] < 0:
        fail("train.epochs must be >= 0", "train.epochs")
    if values["train.epochs"] > 0 and not values["train.lr_drop_epoch"] < values["train.epochs"]:
        fail("train.lr_drop_epoch must be < train.epochs", "train.lr_drop_epoch")
    for key in ("train.lr_initial", "train.lr_final"):
        if values[key] <= 0:
            fail(f"{key} must be > 0", key)
    if values["train.batch_size"] < 1:
        fail("train.batch_size must be >= 1", "train.batch_size")
    if values["loss.reduction"] not in ("min", "sum"):
        fail("loss.reduction must be min or sum", "loss.reduction")
    for key in ("depth.encoder_channels", "depth.decoder_channels", "pose.channels"):
        try:
            _ints(values[key])
        except ValueError:
            fail(f"{key} must be comma-separated integers", key)
    # constructing the sub-configs runs their own invariant checks
    cfg = TrainConfig(values)
    for build, key in ((cfg.loss_weights, "loss.alpha"), (cfg.depth_config, "loss.scales"),
                       (cfg.scale_config, "scale.dropout"), (cfg.pose_config, "pose.encoding_position"),
                       (cfg.eval_config, "eval.cap")):
        try:
            build()
        except ValueError as exc:
            fail(str(exc), key)
    return cfg


def make_config(overrides: dict | None = None, base: TrainConfig | None = None) -> TrainConfig:
    values = dict(base.values) if base is not None else {k: _coerce(k, d) for k, (d, _, _) in KEYS.items()}
    for k, raw in (overrides or {}).items():
        values[k] = _coerce(k, raw)
    return _validate(values, {})


def parse_config(text: str) -> TrainConfig:
    values = {k: _coerce(k, d) for k, (d, _, _) in KEYS.items()}
    lines = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw.strip()!r}", n)
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, value, n)
        lines[key] = n
    return _validate(values, lines)


def load_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def describe_keys() -> str:
    width = max(len(k) for k in KEYS)
    return "\n".join(f"  {k.ljust(width)}  default {d!r:>14}  {doc}" for k, (d, _, doc) in KEYS.items())
