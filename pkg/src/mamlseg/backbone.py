"""Modality-specific encoder-decoder producing a shape-preserving embedding."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    pass


@dataclass
class BackboneConfig:
    levels: int = 3
    base_channels: int = 8
    feature_channels: int = 32
    norm_epsilon: float = 1e-5
    leaky_slope: float = 0.01
    in_channels: int = 1

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.feature_channels < 1 or self.base_channels < 1 or self.in_channels < 1:
            raise ConfigError("channel counts must be >= 1")

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def check_shape(self, spatial):
        bad = [s for s in spatial if s % self.divisor]
        if bad:
            raise ConfigError(
                f"spatial shape {tuple(spatial)} not divisible by {self.divisor} "
                f"(levels={self.levels})"
            )

    def to_dict(self):
        return asdict(self)


def instance_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Normalise each channel over its own spatial extent (population variance).

    Accepts ``C x D x H x W`` or batched ``B x C x D x H x W`` tensors.
    """
    dims = tuple(range(x.dim() - 3, x.dim()))
    mean = x.mean(dim=dims, keepdim=True)
    var = x.var(dim=dims, keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


def leaky_relu(x: torch.Tensor, slope: float = 0.01) -> torch.Tensor:
    return torch.where(x >= 0, x, slope * x)


class InstanceNorm(nn.Module):
    """Instance normalisation with a learnable per-channel scale and shift."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        shape = (1, -1, 1, 1, 1)
        return instance_norm(x, self.eps) * self.weight.view(shape) + self.bias.view(shape)


class ConvNormAct(nn.Module):
    def __init__(self, cin, cout, kernel=3, stride=1, eps=1e-5, slope=0.01):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, kernel, stride=stride, padding=kernel // 2)
        self.norm = InstanceNorm(cout, eps)
        self.slope = slope

    def forward(self, x):
        return leaky_relu(self.norm(self.conv(x)), self.slope)


class UNet3D(nn.Module):
    """Plain UNet: two conv blocks per level, strided-conv downsampling,
    transposed-conv upsampling and skip concatenation.

    The output is the last feature tensor before any classifier, with
    ``feature_channels`` channels and the input's spatial shape.
    """

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = cfg = config or BackboneConfig()
        kw = dict(eps=cfg.norm_epsilon, slope=cfg.leaky_slope)
        widths = [cfg.base_channels * 2**i for i in range(cfg.levels)]

        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        cin = cfg.in_channels
        for i, w in enumerate(widths):
            if i > 0:
                self.downs.append(ConvNormAct(cin, w, stride=2, **kw))
                cin = w
            self.encoders.append(nn.Sequential(ConvNormAct(cin, w, **kw), ConvNormAct(w, w, **kw)))
            cin = w

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in reversed(range(cfg.levels - 1)):
            w = widths[i]
            self.ups.append(nn.ConvTranspose3d(widths[i + 1], w, kernel_size=2, stride=2))
            out = cfg.feature_channels if i == 0 else w
            self.decoders.append(nn.Sequential(ConvNormAct(2 * w, w, **kw), ConvNormAct(w, out, **kw)))
        if cfg.levels == 1:
            self.out = ConvNormAct(widths[0], cfg.feature_channels, **kw)
        else:
            self.out = nn.Identity()

    def forward(self, x):
        self.config.check_shape(x.shape[-3:])
        skips = []
        for i, enc in enumerate(self.encoders):
            if i > 0:
                x = self.downs[i - 1](x)
            x = enc(x)
            skips.append(x)
        skips.pop()
        for up, dec in zip(self.ups, self.decoders):
            x = dec(torch.cat([skips.pop(), up(x)], dim=1))
        return self.out(x)


class SegmentationHead(nn.Module):
    """1x1x1 projection to two classes followed by a per-voxel softmax."""

    def __init__(self, channels, num_classes=2):
        super().__init__()
        self.channels = channels
        self.proj = nn.Conv3d(channels, num_classes, kernel_size=1)

    def logits(self, feat):
        if feat.shape[1] != self.channels:
            raise ValueError(f"head expects {self.channels} channels, got {feat.shape[1]}")
        return self.proj(feat)

    def forward(self, feat):
        return F.softmax(self.logits(feat), dim=1)


def zero_init_(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def backbone_forward(volume, net: UNet3D) -> torch.Tensor:
    """Embed one volume (``D x H x W`` array or tensor) into ``C x D x H x W``."""
    if hasattr(volume, "data") and not isinstance(volume, torch.Tensor):
        volume = volume.data
    x = torch.as_tensor(volume)
    x = x.to(dtype=next(net.parameters()).dtype)
    squeeze = x.dim() == 3
    while x.dim() < 5:
        x = x.unsqueeze(0)
    out = net(x)
    return out[0] if squeeze else out
