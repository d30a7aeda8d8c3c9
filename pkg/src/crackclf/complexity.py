"""Parameter, FLOP and throughput accounting.

FLOPs count convolutions, transposed convolutions and linear maps only, at
2 FLOPs per multiply-accumulate. Activations, pooling, softmax and
interpolation are excluded.
"""

import statistics
import time
from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch import nn

REFERENCE = {"params": 18.84e6, "flops": 17.02e9, "fps": 30.0}
PARAM_BAND = 0.25
CONVENTION = "2 FLOPs per multiply-accumulate; conv, transposed conv and linear layers only"


@dataclass
class ComplexityReport:
    params: int
    flops: int
    fps: Optional[float]
    input_size: tuple
    critic_params: Optional[int] = None
    critic_flops: Optional[int] = None
    convention: str = CONVENTION
    reference: dict = None
    params_within_band: bool = True

    def to_dict(self):
        return asdict(self)

    def summary(self):
        lines = [
            f"# FLOP convention: {self.convention}",
            f"# input: {self.input_size[0]}x{self.input_size[1]}",
            f"params       {self.params:,} ({self.params / 1e6:.2f}M, reference {REFERENCE['params'] / 1e6:.2f}M)",
            f"flops        {self.flops:,} ({self.flops / 1e9:.2f}G, reference {REFERENCE['flops'] / 1e9:.2f}G)",
        ]
        if self.fps is not None:
            lines.append(f"fps          {self.fps:.2f} (reference {REFERENCE['fps']:.0f})")
        if self.critic_params is not None:
            lines.append(f"critic params {self.critic_params:,}  critic flops {self.critic_flops:,}")
        if not self.params_within_band:
            lines.append(f"WARNING: params differ from the reference by more than {PARAM_BAND:.0%}")
        return "\n".join(lines)


def count_params(module):
    return sum(p.numel() for p in module.parameters())


def _layer_flops(layer, inp, out):
    if isinstance(layer, nn.Conv2d):
        k = layer.kernel_size[0] * layer.kernel_size[1]
        macs = layer.in_channels // layer.groups * k * out.shape[1] * out.shape[2] * out.shape[3]
    elif isinstance(layer, nn.ConvTranspose2d):
        # every input pixel scatters a full kernel into every output channel
        k = layer.kernel_size[0] * layer.kernel_size[1]
        macs = layer.in_channels * layer.out_channels // layer.groups * k * inp.shape[2] * inp.shape[3]
    elif isinstance(layer, nn.Linear):
        macs = layer.in_features * layer.out_features * (out.numel() // out.shape[-1]) // out.shape[0]
    else:
        return 0
    return 2 * macs


def count_flops(module, example):
    """FLOPs of one forward pass on a single image shaped like ``example`` ([1,C,H,W])."""
    total = 0

    def hook(layer, args, out):
        nonlocal total
        total += _layer_flops(layer, args[0], out)

    handles = [
        m.register_forward_hook(hook)
        for m in module.modules()
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear))
    ]
    try:
        with torch.no_grad():
            module(example)
    finally:
        for h in handles:
            h.remove()
    return total


def measure_fps(module, example, runs=50, warmup=5):
    """Frames per second from the median of ``runs`` timed forwards after ``warmup`` untimed ones."""
    times = []
    with torch.no_grad():
        for i in range(warmup + runs):
            t0 = time.perf_counter()
            module(example)
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt)
    return example.shape[0] / statistics.median(times)


def complexity(segmenter, input_size=(256, 256), critic=None, runs=50, warmup=5, timing=True):
    was_training = segmenter.training
    segmenter.eval()
    in_ch = getattr(getattr(segmenter, "config", None), "in_channels", 3)
    example = torch.zeros(1, in_ch, *input_size)
    try:
        params = count_params(segmenter)
        flops = count_flops(segmenter, example)
        fps = measure_fps(segmenter, example, runs, warmup) if timing else None
    finally:
        segmenter.train(was_training)
    report = ComplexityReport(params, flops, fps, tuple(input_size), reference=dict(REFERENCE))
    report.params_within_band = abs(params - REFERENCE["params"]) <= PARAM_BAND * REFERENCE["params"]
    if critic is not None:
        report.critic_params = count_params(critic)
        report.critic_flops = count_flops(critic, example)
    return report
