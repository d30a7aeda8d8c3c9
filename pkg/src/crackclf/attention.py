"""Channel/spatial attention (CBAM+) and the UCBAM decoder block.

All functions operate on batched tensors shaped ``[B, C, H, W]``. The
``params`` argument is the module that owns the weights, so the functional
form and ``module(x)`` always agree.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F


def _hidden_width(channels, reduction_ratio):
    r = min(reduction_ratio, channels)
    if reduction_ratio < 1 or channels % r:
        raise ValueError(f"reduction ratio {reduction_ratio} incompatible with {channels} channels")
    return channels // r


class CBAMPlus(nn.Module):
    """Weights of the CBAM+ gate pair.

    ``w_k`` scores positions for attention pooling, ``w0``/``w1`` form the
    MLP shared by the pooled descriptors, ``sa_conv`` is the 3x3 spatial
    gate over ``[mean; max]`` channel statistics.
    """

    def __init__(self, channels, reduction_ratio=16):
        super().__init__()
        hidden = _hidden_width(channels, reduction_ratio)
        self.channels = channels
        self.reduction_ratio = reduction_ratio
        self.w_k = nn.Conv2d(channels, 1, kernel_size=1, bias=False)
        self.w0 = nn.Linear(channels, hidden, bias=False)
        self.w1 = nn.Linear(hidden, channels, bias=False)
        self.sa_conv = nn.Conv2d(2, 1, kernel_size=3, padding=1, bias=True)

    def forward(self, x):
        return cbam_plus(x, self)


def _check_channels(f, params):
    if f.dim() != 4 or f.shape[1] != params.channels:
        raise ValueError(f"expected [B, {params.channels}, H, W] feature map, got {tuple(f.shape)}")


def attention_pooling_weights(f, params):
    """Softmax over all H*W positions of the 1x1 projection ``w_k``; ``[B, H*W]``."""
    _check_channels(f, params)
    logits = params.w_k(f).flatten(1)
    return torch.softmax(logits, dim=1)


def global_attention_pooling(f, params):
    """Attention-weighted spatial pooling: ``sum_j alpha_j * x_j`` per channel -> ``[B, C]``."""
    alpha = attention_pooling_weights(f, params)
    return torch.einsum("bcn,bn->bc", f.flatten(2), alpha)


def _shared_mlp(v, params):
    return params.w1(F.relu(params.w0(v)))


def channel_attention(f, params):
    """Per-channel gate in (0, 1), ``[B, C]``, from attention-pooled and max-pooled descriptors."""
    f_gap = global_attention_pooling(f, params)
    f_max = f.flatten(2).amax(dim=2)
    return torch.sigmoid(_shared_mlp(f_gap, params) + _shared_mlp(f_max, params))


def spatial_attention(f, params):
    """Per-pixel gate in (0, 1), ``[B, 1, H, W]``."""
    if f.dim() != 4:
        raise ValueError(f"expected [B, C, H, W] feature map, got {tuple(f.shape)}")
    stats = torch.cat([f.mean(dim=1, keepdim=True), f.amax(dim=1, keepdim=True)], dim=1)
    return torch.sigmoid(params.sa_conv(stats))


def cbam_plus(f, params):
    # channel gate first, spatial gate computed on the re-weighted map
    g = f * channel_attention(f, params)[:, :, None, None]
    return g * spatial_attention(g, params)


class UCBAM(nn.Module):
    """Decoder block: transposed-conv upsampling, skip fusion, CBAM+.

    ``fusion="add"`` sums the upsampled map with the skip features.
    ``fusion="concat"`` stacks them and projects back to ``channels`` with a
    1x1 conv after the attention gates.
    """

    def __init__(self, channels, reduction_ratio=16, fusion="add"):
        super().__init__()
        if fusion not in ("add", "concat"):
            raise ValueError(f"unknown fusion mode {fusion!r}")
        self.channels = channels
        self.fusion = fusion
        self.up = nn.ConvTranspose2d(2 * channels, channels, kernel_size=2, stride=2)
        fused = channels if fusion == "add" else 2 * channels
        self.attn = CBAMPlus(fused, reduction_ratio)
        self.reduce = nn.Conv2d(fused, channels, kernel_size=1) if fusion == "concat" else None

    def forward(self, skip, below):
        return ucbam(skip, below, self)


def ucbam(skip, below, params):
    c = params.channels
    if (
        skip.dim() != 4
        or below.dim() != 4
        or skip.shape[1] != c
        or below.shape[1] != 2 * c
        or below.shape[0] != skip.shape[0]
        or 2 * below.shape[2] != skip.shape[2]
        or 2 * below.shape[3] != skip.shape[3]
    ):
        raise ValueError(
            f"UCBAM({c}) needs skip [B,{c},H,W] and below [B,{2 * c},H/2,W/2]; "
            f"got {tuple(skip.shape)} and {tuple(below.shape)}"
        )
    up = params.up(below)
    if params.fusion == "add":
        return cbam_plus(up + skip, params.attn)
    return params.reduce(cbam_plus(torch.cat([up, skip], dim=1), params.attn))
