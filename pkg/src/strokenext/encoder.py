"""ConvNeXt-style hierarchical encoder used by both branches."""

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError


@dataclass(frozen=True)
class EncoderVariant:
    name: str
    channels: tuple  # per-stage widths
    depths: tuple    # per-stage block counts

    def __post_init__(self):
        if len(self.channels) != 4 or len(self.depths) != 4:
            raise ConfigurationError("variant needs 4 per-stage channels and depths")
        if any(c2 <= c1 for c1, c2 in zip(self.channels, self.channels[1:])):
            raise ConfigurationError("stage widths must be strictly increasing")
        if min(self.depths) < 1:
            raise ConfigurationError("stage depths must be >= 1")

    @property
    def embed_dim(self):
        return self.channels[3]


VARIANTS = {
    "nano": EncoderVariant("nano", (24, 48, 96, 192), (2, 2, 4, 2)),
    "tiny": EncoderVariant("tiny", (96, 192, 384, 768), (3, 3, 9, 3)),
    "small": EncoderVariant("small", (96, 192, 384, 768), (3, 3, 27, 3)),
    "base": EncoderVariant("base", (128, 256, 512, 1024), (3, 3, 27, 3)),
    "large": EncoderVariant("large", (192, 384, 768, 1536), (3, 3, 27, 3)),
}


def get_variant(name):
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigurationError(f"unknown encoder variant: {name!r}") from None


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of NCHW feature maps."""

    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = x.var(1, keepdim=True, unbiased=False)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class Block(nn.Module):
    """Residual block: 7x7 depthwise conv -> LN -> 1x1 expand (4x) -> GELU ->
    1x1 project, scaled by a learnable per-channel gamma."""

    def __init__(self, dim, layer_scale_init=1e-6):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, kernel_size=7, padding=3, groups=dim)
        self.norm = ChannelLayerNorm(dim)
        self.pwconv1 = nn.Conv2d(dim, 4 * dim, kernel_size=1)
        self.act = nn.GELU()
        self.pwconv2 = nn.Conv2d(4 * dim, dim, kernel_size=1)
        self.gamma = nn.Parameter(layer_scale_init * torch.ones(dim))

    def forward(self, x):
        if x.shape[1] != self.dwconv.in_channels:
            raise ConfigurationError(
                f"block expects {self.dwconv.in_channels} channels, got {x.shape[1]}")
        y = self.dwconv(x)
        y = self.norm(y)
        y = self.pwconv1(y)
        y = self.act(y)
        y = self.pwconv2(y)
        return x + self.gamma[:, None, None] * y


class Encoder(nn.Module):
    """Four-stage trunk: 4x4/4 patchify stem, LN+2x2/2 downsampling between
    stages, no pooling or classifier."""

    def __init__(self, variant):
        super().__init__()
        if isinstance(variant, str):
            variant = get_variant(variant)
        self.variant = variant
        ch, depths = variant.channels, variant.depths

        self.stem = nn.Sequential(
            nn.Conv2d(3, ch[0], kernel_size=4, stride=4),
            ChannelLayerNorm(ch[0]),
        )
        self.downsample = nn.ModuleList()
        self.stages = nn.ModuleList()
        for i in range(4):
            if i > 0:
                self.downsample.append(nn.Sequential(
                    ChannelLayerNorm(ch[i - 1]),
                    nn.Conv2d(ch[i - 1], ch[i], kernel_size=2, stride=2),
                ))
            self.stages.append(nn.Sequential(*[Block(ch[i]) for _ in range(depths[i])]))

    def forward(self, x):
        if x.shape[-1] % 32 or x.shape[-2] % 32:
            raise ConfigurationError(
                f"spatial dims must be divisible by 32, got {tuple(x.shape[-2:])}")
        x = self.stem(x)
        x = self.stages[0](x)
        for ds, stage in zip(self.downsample, self.stages[1:]):
            x = stage(ds(x))
        return x


class ConvNeXtClassifier(nn.Module):
    """Single-branch encoder with the standard pool -> LN -> linear head,
    used only for parameter/FLOP parity checks against published figures."""

    def __init__(self, variant, num_classes=1000):
        super().__init__()
        self.encoder = Encoder(variant)
        dim = self.encoder.variant.embed_dim
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.head = nn.Linear(dim, num_classes)

    def forward(self, x):
        f = self.encoder(x)
        return self.head(self.norm(global_pool(f)))


def init_weights(module, seed):
    """Truncated-normal (std 0.02) conv/linear weights, zero biases, seeded.

    No-op on meta tensors so shape-only builds stay cheap.
    """
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv1d, nn.Linear)):
            if m.weight.is_meta:
                continue
            with torch.no_grad():
                _trunc_normal(m.weight, 0.02, gen)
                if m.bias is not None:
                    m.bias.zero_()
    return module


def _trunc_normal(t, std, gen):
    # resample-out-of-range truncation at 2 std
    vals = torch.randn(t.shape, generator=gen) * std
    bad = vals.abs() > 2 * std
    while bad.any():
        vals[bad] = torch.randn(int(bad.sum()), generator=gen) * std
        bad = vals.abs() > 2 * std
    t.copy_(vals)


def build_encoder(variant, seed):
    """Build one encoder branch with parameters drawn from ``seed``."""
    enc = Encoder(variant)
    return init_weights(enc, seed)


def global_pool(f):
    """Per-channel spatial mean: [B,C,H,W] -> [B,C]."""
    return f.mean(dim=(-2, -1))
