"""Critic network and the multi-scale L1 feature-matching loss."""

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class CriticConfig:
    in_channels: int = 3
    block_channels: Sequence[int] = (64, 128, 256, 512)
    kernel: int = 3
    stride: int = 2
    slope: float = 0.2
    tap: str = "post"  # features taken after the leaky ReLU ("pre" takes the conv output)

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        if len(self.block_channels) < 2:
            raise ValueError("critic needs at least 2 feature layers")
        if self.kernel % 2 == 0:
            raise ValueError("critic kernel must be odd")
        if self.tap not in ("pre", "post"):
            raise ValueError(f"unknown tap {self.tap!r}")

    @property
    def feature_layers(self):
        return len(self.block_channels)

    def to_dict(self):
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        return d


class Critic(nn.Module):
    """Strided conv stack; every block contributes one feature layer. No normalization layers."""

    def __init__(self, config: CriticConfig = None):
        super().__init__()
        self.config = config = config or CriticConfig()
        ins = (config.in_channels,) + config.block_channels[:-1]
        self.blocks = nn.ModuleList(
            nn.Conv2d(i, o, config.kernel, stride=config.stride, padding=config.kernel // 2)
            for i, o in zip(ins, config.block_channels)
        )

    def forward(self, img):
        return critic_features(img, self)


def mask_input(x, m):
    """Broadcast a ``[B,1,H,W]`` mask over the image channels."""
    if m.dim() != 4 or m.shape[1] != 1 or m.shape[0] != x.shape[0] or m.shape[-2:] != x.shape[-2:]:
        raise ValueError(f"mask {tuple(m.shape)} does not fit image {tuple(x.shape)}")
    return x * m.to(x.dtype)


def critic_features(img, critic):
    """One flattened ``[B, n_i]`` feature tensor per critic block."""
    cfg = critic.config
    div = cfg.stride ** cfg.feature_layers
    if img.dim() != 4 or img.shape[1] != cfg.in_channels or img.shape[-2] % div or img.shape[-1] % div:
        raise ValueError(f"critic input {tuple(img.shape)} must have {cfg.in_channels} channels and sides divisible by {div}")
    feats = []
    x = img
    for conv in critic.blocks:
        z = conv(x)
        x = F.leaky_relu(z, cfg.slope)
        feats.append((x if cfg.tap == "post" else z).flatten(1))
    return feats


def multiscale_l1(a, b):
    """Mean absolute difference per layer, averaged over layers."""
    if len(a) != len(b) or not a:
        raise ValueError(f"feature lists differ in depth ({len(a)} vs {len(b)})")
    terms = []
    for fa, fb in zip(a, b):
        if fa.shape != fb.shape:
            raise ValueError(f"feature layer shapes differ: {tuple(fa.shape)} vs {tuple(fb.shape)}")
        terms.append((fa - fb).abs().mean())
    return torch.stack(terms).mean()


def adversarial_loss(x, s_pred, y, critic):
    fake = critic_features(mask_input(x, s_pred), critic)
    real = critic_features(mask_input(x, y), critic)
    return multiscale_l1(fake, real)
