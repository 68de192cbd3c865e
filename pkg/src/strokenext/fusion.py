"""Fusion decoder: stack the branch embeddings, merge with a kernel-2 1-D
convolution, refine through a pointwise bottleneck, classify. Alternative
fusion strategies (sum, concat+MLP, two-token attention) live here too."""

import hashlib
import json
import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .encoder import Encoder, get_variant, global_pool, init_weights
from .errors import ConfigurationError

FUSION_MODES = ("k2conv", "sum", "concat_mlp", "attention2")


@dataclass(frozen=True)
class FusionConfig:
    channels: int
    hidden_width: int = None  # defaults to channels
    dropout_rate: float = 0.2
    num_classes: int = 2
    mode: str = "k2conv"

    def __post_init__(self):
        if self.hidden_width is None:
            object.__setattr__(self, "hidden_width", self.channels)
        if self.hidden_width < 1:
            raise ConfigurationError("hidden_width must be >= 1")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must be in [0,1)")
        if self.mode not in FUSION_MODES:
            raise ConfigurationError(f"unknown fusion mode: {self.mode!r}")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "tiny"
    task: str = "presence"
    fusion_mode: str = "k2conv"
    hidden_width: int = None
    dropout_rate: float = 0.2
    num_classes: int = 2
    seed: int = 0

    @property
    def branch_seeds(self):
        # distinct per-branch init streams derived from the run seed
        return (self.seed * 4 + 1, self.seed * 4 + 2)

    @property
    def fusion_seed(self):
        return self.seed * 4 + 3

    def fusion_config(self):
        return FusionConfig(channels=get_variant(self.variant).embed_dim,
                            hidden_width=self.hidden_width,
                            dropout_rate=self.dropout_rate,
                            num_classes=self.num_classes,
                            mode=self.fusion_mode)

    def fingerprint(self):
        payload = json.dumps({
            "variant": self.variant, "task": self.task,
            "fusion_mode": self.fusion_mode,
            "hidden_width": self.fusion_config().hidden_width,
            "dropout_rate": self.dropout_rate,
            "num_classes": self.num_classes,
        }, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def stack_pair(f1, f2):
    """[B,C] x [B,C] -> [B,C,2] with branch 1 at sequence position 0."""
    if f1.shape != f2.shape:
        raise ConfigurationError(f"embedding shapes differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    return torch.stack((f1, f2), dim=2)


class Merge(nn.Module):
    """Kernel-2 1-D convolution collapsing the stacked pair to [B,C],
    followed by BatchNorm and GELU. Full cross-channel mixing: the conv
    weight is [C, C, 2]."""

    def __init__(self, channels, identity_norm=False):
        super().__init__()
        self.conv = nn.Conv1d(channels, channels, kernel_size=2)
        self.norm = nn.Identity() if identity_norm else nn.BatchNorm1d(channels, eps=1e-5, momentum=0.1)
        self.act = nn.GELU()

    def pre_activation(self, s):
        return self.conv(s).squeeze(2)

    def forward(self, s):
        return self.act(self.norm(self.pre_activation(s)))


class Bottleneck(nn.Module):
    """Pointwise C->H -> norm -> GELU -> dropout -> pointwise H->C -> norm -> GELU.

    On a length-1 sequence a pointwise convolution is exactly a dense map,
    so both projections are Linear layers.
    """

    def __init__(self, channels, hidden_width, dropout_rate=0.2, identity_norm=False):
        super().__init__()
        make_norm = (lambda d: nn.Identity()) if identity_norm else \
                    (lambda d: nn.BatchNorm1d(d, eps=1e-5, momentum=0.1))
        self.proj_in = nn.Linear(channels, hidden_width)
        self.norm1 = make_norm(hidden_width)
        self.act1 = nn.GELU()
        self.drop = nn.Dropout(dropout_rate)
        self.proj_out = nn.Linear(hidden_width, channels)
        self.norm2 = make_norm(channels)
        self.act2 = nn.GELU()

    def forward(self, e):
        e = self.act1(self.norm1(self.proj_in(e)))
        e = self.drop(e)
        return self.act2(self.norm2(self.proj_out(e)))


class SumFusion(nn.Module):
    def forward(self, f1, f2):
        return f1 + f2


class ConcatMLPFusion(nn.Module):
    """Concatenate to 2C then dense 2C->H -> GELU -> dense H->C."""

    def __init__(self, channels, hidden_width):
        super().__init__()
        self.fc1 = nn.Linear(2 * channels, hidden_width)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden_width, channels)

    def forward(self, f1, f2):
        return self.fc2(self.act(self.fc1(torch.cat((f1, f2), dim=1))))


class Attention2Fusion(nn.Module):
    """Two-token self-attention (Q/K/V projections, 2x2 softmax mixing),
    mean over tokens."""

    def __init__(self, channels):
        super().__init__()
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.scale = 1.0 / math.sqrt(channels)

    def forward(self, f1, f2):
        tokens = torch.stack((f1, f2), dim=1)  # [B,2,C]
        q, k, v = self.q(tokens), self.k(tokens), self.v(tokens)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        return (attn @ v).mean(dim=1)


def make_alt_fusion(mode, channels, hidden_width):
    if mode == "sum":
        return SumFusion()
    if mode == "concat_mlp":
        return ConcatMLPFusion(channels, hidden_width)
    if mode == "attention2":
        return Attention2Fusion(channels)
    raise ConfigurationError(f"unknown fusion mode: {mode!r}")


def alt_fusion(mode, f1, f2, module):
    """Apply one of the comparison fusion strategies."""
    if mode not in ("sum", "concat_mlp", "attention2"):
        raise ConfigurationError(f"unknown fusion mode: {mode!r}")
    return module(f1, f2)


class FusionDecoder(nn.Module):
    """merge + bottleneck for k2conv mode; a comparison strategy otherwise."""

    def __init__(self, cfg, identity_norm=False):
        super().__init__()
        self.cfg = cfg
        if cfg.mode == "k2conv":
            self.merge = Merge(cfg.channels, identity_norm=identity_norm)
            self.bottleneck = Bottleneck(cfg.channels, cfg.hidden_width,
                                         cfg.dropout_rate, identity_norm=identity_norm)
        else:
            self.alt = make_alt_fusion(cfg.mode, cfg.channels, cfg.hidden_width)
        self.head = nn.Linear(cfg.channels, cfg.num_classes)

    def fuse(self, f1, f2):
        if self.cfg.mode == "k2conv":
            return self.bottleneck(self.merge(stack_pair(f1, f2)))
        return self.alt(f1, f2)

    def forward(self, f1, f2):
        return self.head(self.fuse(f1, f2))


class StrokeNeXt(nn.Module):
    """Dual-branch model: two independently parameterized encoders over the
    same input, global average pooling, fusion decoder, classifier."""

    def __init__(self, config, identity_norm=False):
        super().__init__()
        self.config = config
        variant = get_variant(config.variant)
        self.encoder1 = Encoder(variant)
        self.encoder2 = Encoder(variant)
        self.decoder = FusionDecoder(config.fusion_config(), identity_norm=identity_norm)

    def forward(self, x):
        f1 = global_pool(self.encoder1(x))
        f2 = global_pool(self.encoder2(x))
        return self.decoder(f1, f2)


def build_model(config, identity_norm=False, device=None):
    """Assemble a StrokeNeXt model with branch/fusion parameters drawn from
    the config's derived seeds."""
    if device is not None:
        with torch.device(device):
            model = StrokeNeXt(config, identity_norm=identity_norm)
    else:
        model = StrokeNeXt(config, identity_norm=identity_norm)
    s1, s2 = config.branch_seeds
    init_weights(model.encoder1, s1)
    init_weights(model.encoder2, s2)
    init_weights(model.decoder, config.fusion_seed)
    return model


def model_forward(x, model):
    return model(x)
