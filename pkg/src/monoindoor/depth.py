"""Depth network, transformer scale regressor and their factorized combination."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

# relative branch range; the scale network carries the scene scale
RELATIVE_D_MIN = 0.1
RELATIVE_D_MAX = 1.0


@dataclass(frozen=True)
class DepthNetConfig:
    encoder_channels: tuple = (8, 16, 32, 48)
    decoder_channels: tuple = (8, 16, 24, 32)
    stem_channels: int = 8
    num_scales: int = 4
    d_min: float = RELATIVE_D_MIN
    d_max: float = RELATIVE_D_MAX

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if not 1 <= self.num_scales <= len(self.decoder_channels):
            raise ValueError(f"num_scales must be in [1, {len(self.decoder_channels)}]")
        if len(self.encoder_channels) != len(self.decoder_channels):
            raise ValueError("encoder and decoder need the same number of stages")

    @property
    def stages(self) -> int:
        return len(self.encoder_channels)


@dataclass(frozen=True)
class ScaleRegressionConfig:
    d_max_bins: int = 10
    attention_dim: int = 16
    hidden: int = 32
    dropout_rate: float = 0.5
    use_attention: bool = True
    use_prob_regression: bool = True
    max_feature_size: int = 32

    def __post_init__(self):
        if self.d_max_bins < 1:
            raise ValueError("d_max_bins must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass
class FactorizedDepth:
    relative_disparity: list
    global_scale: torch.Tensor
    metric_depth: list = field(default_factory=list)


def depth_activation(sigma: torch.Tensor, d_min: float, d_max: float) -> torch.Tensor:
    """Map sigmoid output to depth by interpolating disparity between 1/d_max and 1/d_min."""
    if sigma.detach().min() < 0 or sigma.detach().max() > 1:
        raise ValueError("depth_activation expects sigma in [0, 1]")
    return 1.0 / sigma_to_disparity(sigma, d_min, d_max)


def sigma_to_disparity(sigma, d_min, d_max):
    lo, hi = 1.0 / d_max, 1.0 / d_min
    return lo + (hi - lo) * sigma


# color normalization applied at encoder inputs
IMAGE_MEAN = 0.45
IMAGE_STD = 0.225


def normalize_image(x):
    return (x - IMAGE_MEAN) / IMAGE_STD


def he_init(module: nn.Module):
    """He-normal weights and zero biases for every conv in ``module``.

    PyTorch's default conv init shrinks activations layer by layer; without
    normalization layers the features of a deep stack become nearly input
    independent, which stalls the pose network.
    """
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return module


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride, 1)


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv = conv3x3(cin, cout, stride)

    def forward(self, x):
        return F.elu(self.conv(x))


class ResBlock(nn.Module):
    """Two 3x3 convolutions with an identity (or 1x1) shortcut."""

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = conv3x3(cin, cout, stride)
        self.conv2 = conv3x3(cout, cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride)

    def forward(self, x):
        y = self.conv2(F.relu(self.conv1(x)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(y + skip)


class DepthEncoder(nn.Module):
    def __init__(self, cfg: DepthNetConfig, in_channels=3):
        super().__init__()
        self.stem = ConvBlock(in_channels, cfg.stem_channels)
        chans = [cfg.stem_channels, *cfg.encoder_channels]
        self.stages = nn.ModuleList(ResBlock(chans[i], chans[i + 1], stride=2)
                                    for i in range(cfg.stages))
        self.channels = chans
        he_init(self)

    def forward(self, x):
        feats = [self.stem(normalize_image(x))]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats


class DepthDecoder(nn.Module):
    """Upsampling decoder with encoder skips; emits sigmoid maps at several scales."""

    def __init__(self, cfg: DepthNetConfig, enc_channels):
        super().__init__()
        n = cfg.stages
        self.num_scales = cfg.num_scales
        dec = cfg.decoder_channels
        self.upconv0 = nn.ModuleList()
        self.upconv1 = nn.ModuleList()
        self.dispconv = nn.ModuleDict()
        for level in range(n - 1, -1, -1):
            cin = enc_channels[-1] if level == n - 1 else dec[level + 1]
            self.upconv0.append(ConvBlock(cin, dec[level]))
            self.upconv1.append(ConvBlock(dec[level] + enc_channels[level], dec[level]))
            if level < cfg.num_scales:
                self.dispconv[str(level)] = conv3x3(dec[level], 1)

    def forward(self, feats):
        n = len(feats) - 1
        x = feats[-1]
        outputs = {}
        for k, level in enumerate(range(n - 1, -1, -1)):
            x = self.upconv0[k](x)
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.upconv1[k](torch.cat([x, feats[level]], 1))
            if str(level) in self.dispconv:
                outputs[level] = torch.sigmoid(self.dispconv[str(level)](x))
        return [outputs[s] for s in range(self.num_scales)]


class DepthNet(nn.Module):
    def __init__(self, cfg: DepthNetConfig = DepthNetConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = DepthEncoder(cfg)
        self.decoder = DepthDecoder(cfg, self.encoder.channels)

    def check_input(self, image):
        div = 2 ** self.cfg.stages
        h, w = image.shape[-2:]
        if h % div or w % div:
            raise ValueError(f"image size {h}x{w} must be divisible by {div}")

    def forward(self, image):
        """Returns (sigmoid maps per scale, bottleneck features)."""
        self.check_input(image)
        feats = self.encoder(image)
        return self.decoder(feats), feats[-1]


def depth_net_forward(net: DepthNet, image: torch.Tensor):
    """Per-scale disparity in ``(1/d_max, 1/d_min)`` plus the bottleneck features."""
    sigmas, bottleneck = net(image)
    cfg = net.cfg
    return [sigma_to_disparity(s, cfg.d_min, cfg.d_max) for s in sigmas], bottleneck


class AttentionBlock(nn.Module):
    """Single-head spatial self-attention with a residual connection.

    Logits are ``(W_q F)^T (W_k F)`` plus a learned bias indexed by the
    (row, column) offset between query and key. The output projection adds
    back onto the input, so zeroing it gives the identity.
    """

    def __init__(self, dim, attn_dim, max_size=32):
        super().__init__()
        self.query = nn.Conv2d(dim, attn_dim, 1, bias=False)
        self.key = nn.Conv2d(dim, attn_dim, 1, bias=False)
        self.value = nn.Conv2d(dim, attn_dim, 1, bias=False)
        self.out = nn.Conv2d(attn_dim, dim, 1, bias=False)
        self.max_size = max_size
        self.rel_bias = nn.Parameter(torch.zeros(2 * max_size - 1, 2 * max_size - 1))

    def relative_bias(self, h, w):
        if h > self.max_size or w > self.max_size:
            raise ValueError(f"feature map {h}x{w} exceeds attention max size {self.max_size}")
        rows = torch.arange(h).repeat_interleave(w)
        cols = torch.arange(w).repeat(h)
        dr = rows[:, None] - rows[None, :] + self.max_size - 1
        dc = cols[:, None] - cols[None, :] + self.max_size - 1
        return self.rel_bias[dr, dc]

    def attention(self, x):
        b, _, h, w = x.shape
        q = self.query(x).flatten(2)
        k = self.key(x).flatten(2)
        logits = q.transpose(1, 2) @ k + self.relative_bias(h, w)
        return torch.softmax(logits, dim=-1)

    def forward(self, x):
        b, _, h, w = x.shape
        attn = self.attention(x)
        v = self.value(x).flatten(2)
        g = (v @ attn.transpose(1, 2)).reshape(b, -1, h, w)
        return self.out(g) + x


def _dropout(x, p, training, generator):
    if not training or p == 0.0:
        return x
    keep = torch.empty_like(x).bernoulli_(1.0 - p, generator=generator)
    return x * keep / (1.0 - p)


def scale_expectation(logits: torch.Tensor) -> torch.Tensor:
    """Expected bin value ``sum_s s * softmax(logits)_s`` over bins 0..n-1."""
    bins = torch.arange(logits.shape[-1], dtype=logits.dtype, device=logits.device)
    return (torch.softmax(logits, dim=-1) * bins).sum(-1)


class ScaleNet(nn.Module):
    def __init__(self, in_channels, cfg: ScaleRegressionConfig = ScaleRegressionConfig()):
        super().__init__()
        self.cfg = cfg
        self.attention = (AttentionBlock(in_channels, cfg.attention_dim, cfg.max_feature_size)
                          if cfg.use_attention else None)
        self.res1 = ResBlock(in_channels, in_channels)
        self.res2 = ResBlock(in_channels, in_channels)
        out = cfg.d_max_bins + 1 if cfg.use_prob_regression else 1
        self.fc1 = nn.Linear(in_channels, cfg.hidden)
        self.fc2 = nn.Linear(cfg.hidden, cfg.hidden)
        self.fc3 = nn.Linear(cfg.hidden, out)

    def logits(self, feats, generator=None):
        x = feats if self.attention is None else self.attention(feats)
        x = self.res2(self.res1(x)).mean(dim=(2, 3))
        p = self.cfg.dropout_rate
        x = _dropout(F.relu(self.fc1(x)), p, self.training, generator)
        x = _dropout(F.relu(self.fc2(x)), p, self.training, generator)
        return self.fc3(x)

    def forward(self, feats, generator=None):
        """Returns (global scale (B,), per-bin probabilities or None)."""
        out = self.logits(feats, generator)
        if self.cfg.use_prob_regression:
            return scale_expectation(out), torch.softmax(out, dim=-1)
        return F.softplus(out[:, 0]), None


def scale_regression(net: ScaleNet, feats, generator=None):
    return net(feats, generator)


class DepthModel(nn.Module):
    """Relative depth network, optionally factorized with a global scale."""

    def __init__(self, depth_cfg: DepthNetConfig | None = None,
                 scale_cfg: ScaleRegressionConfig = ScaleRegressionConfig(),
                 factorize: bool = True):
        super().__init__()
        if depth_cfg is None:
            # unfactorized depth spans the full evaluation range directly
            depth_cfg = DepthNetConfig() if factorize else DepthNetConfig(
                d_min=RELATIVE_D_MIN, d_max=float(scale_cfg.d_max_bins))
        self.depth_net = DepthNet(depth_cfg)
        self.factorized = factorize
        self.scale_net = ScaleNet(self.depth_net.encoder.channels[-1], scale_cfg) if factorize else None

    def forward(self, image, scale_override=None, generator=None) -> FactorizedDepth:
        return factorize(self, image, scale_override, generator)


def factorize(model: DepthModel, image, scale_override=None, generator=None) -> FactorizedDepth:
    """Metric depth per scale = global scale x relative depth."""
    disps, bottleneck = depth_net_forward(model.depth_net, image)
    b = image.shape[0]
    if scale_override is not None:
        scale = torch.as_tensor(scale_override, dtype=image.dtype).expand(b)
    elif model.scale_net is not None:
        scale, _ = model.scale_net(bottleneck, generator)
    else:
        scale = torch.ones(b, dtype=image.dtype)
    s = scale.reshape(b, 1, 1, 1)
    return FactorizedDepth(disps, scale, [s / d for d in disps])
