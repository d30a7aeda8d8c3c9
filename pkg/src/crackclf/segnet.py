"""U-shape segmentation front end with deep-supervision side outputs."""

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from crackclf.attention import UCBAM

MIN_SIDE = 16


@dataclass
class SegNetConfig:
    in_channels: int = 3
    stage_channels: Sequence[int] = (64, 128, 256, 512, 1024)
    reduction_ratio: int = 16
    side_count: int = 5
    fusion: str = "add"
    input_mean: Optional[Sequence[float]] = None
    input_std: Optional[Sequence[float]] = None

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) != 5:
            raise ValueError(f"stage_channels needs 5 entries, got {self.stage_channels}")
        if any(b != 2 * a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError(f"stage_channels must double at every stage, got {self.stage_channels}")
        if self.side_count != 5:
            raise ValueError("side_count is fixed at 5 (bottleneck + 4 decoder taps)")
        if self.in_channels < 1 or self.stage_channels[0] < 1:
            raise ValueError("channel counts must be positive")
        for name in ("input_mean", "input_std"):
            v = getattr(self, name)
            if v is not None:
                v = tuple(float(x) for x in v)
                if len(v) != self.in_channels:
                    raise ValueError(f"{name} needs {self.in_channels} entries")
                setattr(self, name, v)

    def to_dict(self):
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        for k in ("input_mean", "input_std"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d


@dataclass
class SideOutputs:
    """Side probability maps, the fused map, and the logits behind them."""

    sides: List[torch.Tensor]
    fused: torch.Tensor
    side_logits: List[torch.Tensor]
    fused_logit: torch.Tensor
    features: Dict[str, torch.Tensor] = field(default_factory=dict)


class EncoderBlock(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1)

    def forward(self, x):
        return F.relu(self.conv2(F.relu(self.conv1(x))))


def encoder_block(f, block):
    """Run one encoder stage; returns ``(pre_pool, pooled)``."""
    if f.dim() != 4 or f.shape[-2] % 2 or f.shape[-1] % 2:
        raise ValueError(f"encoder input must be [B,C,H,W] with even H and W, got {tuple(f.shape)}")
    pre = block(f)
    return pre, F.max_pool2d(pre, 2)


class SegNet(nn.Module):
    """Five encoder stages, four UCBAM decoder stages, five side heads and a fuse head.

    Side maps are tapped at the bottleneck and after each decoder stage, in
    that order (coarsest first).
    """

    def __init__(self, config: Optional[SegNetConfig] = None):
        super().__init__()
        self.config = config = config or SegNetConfig()
        ch = config.stage_channels
        ins = (config.in_channels,) + ch[:-1]
        self.encoders = nn.ModuleList(EncoderBlock(i, o) for i, o in zip(ins, ch))
        self.decoders = nn.ModuleList(
            UCBAM(c, config.reduction_ratio, config.fusion) for c in reversed(ch[:-1])
        )
        tap_channels = (ch[-1],) + tuple(reversed(ch[:-1]))
        self.side_heads = nn.ModuleList(nn.Conv2d(c, 1, kernel_size=1) for c in tap_channels)
        self.fuse = nn.Conv2d(len(tap_channels), 1, kernel_size=1)
        if config.input_mean is not None:
            self.register_buffer("input_mean", torch.tensor(config.input_mean).view(1, -1, 1, 1))
        else:
            self.input_mean = None
        if config.input_std is not None:
            self.register_buffer("input_std", torch.tensor(config.input_std).view(1, -1, 1, 1))
        else:
            self.input_std = None

    def check_input(self, image):
        c = self.config.in_channels
        if image.dim() != 4 or image.shape[1] != c:
            raise ValueError(f"expected image batch [B,{c},H,W], got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h < MIN_SIDE or w < MIN_SIDE or h % 16 or w % 16:
            raise ValueError(f"image size {h}x{w} must be at least 16 and divisible by 16")

    def forward(self, image, return_features=False):
        self.check_input(image)
        size = image.shape[-2:]
        x = image
        if self.input_mean is not None:
            x = x - self.input_mean
        if self.input_std is not None:
            x = x / self.input_std

        skips = []
        for block in self.encoders[:-1]:
            pre, x = encoder_block(x, block)
            skips.append(pre)
        x = self.encoders[-1](x)
        taps = [x]
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = dec(skip, x)
            taps.append(x)

        # 1x1 conv commutes with bilinear resampling, so reduce first
        side_logits = [
            F.interpolate(head(t), size=size, mode="bilinear", align_corners=False)
            for head, t in zip(self.side_heads, taps)
        ]
        fused_logit = self.fuse(torch.cat(side_logits, dim=1))
        features = {}
        if return_features:
            features["bottleneck"] = taps[0]
            for i, t in enumerate(taps[1:], start=1):
                features[f"ucbam{i}"] = t
            for i, s in enumerate(side_logits, start=1):
                features[f"side{i}_logit"] = s
        return SideOutputs(
            sides=[torch.sigmoid(s) for s in side_logits],
            fused=torch.sigmoid(fused_logit),
            side_logits=side_logits,
            fused_logit=fused_logit,
            features=features,
        )


def threshold_map(prob, threshold=0.5):
    """Binarize a probability map; ties count as crack."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return prob >= threshold


@torch.no_grad()
def predict(image, net, threshold=0.5):
    """Boolean crack mask ``[B,1,H,W]`` from the fused map."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return threshold_map(net(image).fused, threshold)
