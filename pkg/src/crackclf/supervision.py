"""Deep-supervision losses: class-weighted BCE per side output and on the fused map."""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import torch

EPS = 1e-7


@dataclass
class LossWeights:
    alpha: Sequence[float] = (1.0, 1.0, 1.0, 1.0, 1.0)
    beta: Optional[float] = None
    gamma: Optional[float] = None
    balance_mode: str = "per-batch"

    def __post_init__(self):
        self.alpha = tuple(float(a) for a in self.alpha)
        if any(a < 0 for a in self.alpha):
            raise ValueError("side weights must be non-negative")
        if self.balance_mode not in ("per-batch", "fixed"):
            raise ValueError(f"unknown balance_mode {self.balance_mode!r}")
        if self.balance_mode == "fixed":
            if self.beta is None or self.gamma is None:
                raise ValueError("fixed balance_mode needs beta and gamma")
            if self.beta < 0 or self.gamma < 0:
                raise ValueError("beta and gamma must be non-negative")

    def coefficients(self, gt):
        if self.balance_mode == "fixed":
            return self.beta, self.gamma
        return class_balance(gt)


@dataclass
class LossReport:
    side_losses: List[torch.Tensor]
    l_side_total: torch.Tensor
    l_fuse: torch.Tensor
    l_total: torch.Tensor
    beta: float = 1.0
    gamma: float = 1.0
    extra: dict = field(default_factory=dict)

    def as_floats(self):
        return {
            "side_losses": [float(s) for s in self.side_losses],
            "l_side": float(self.l_side_total),
            "l_fuse": float(self.l_fuse),
            "l_total": float(self.l_total),
        }


def weighted_bce(pred, gt, beta, gamma, eps=EPS):
    """Class-weighted binary cross-entropy averaged over pixels.

    ``-(1/N) sum_i [beta*y*log(p) + gamma*(1-y)*log(1-p)]`` with ``p``
    clamped to ``[eps, 1-eps]``.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and mask {tuple(gt.shape)} differ in shape")
    y = gt.to(pred.dtype)
    p = pred.clamp(eps, 1.0 - eps)
    return -(beta * y * torch.log(p) + gamma * (1.0 - y) * torch.log1p(-p)).mean()


def class_balance(gt):
    """``(beta, gamma) = (N_neg/N, N_pos/N)``; ``(1, 0)`` when there are no crack pixels."""
    n = gt.numel()
    if n == 0:
        raise ValueError("empty mask")
    n_pos = int((gt > 0).sum())
    if n_pos == 0:
        return 1.0, 0.0
    return (n - n_pos) / n, n_pos / n


def total_loss(sides, gt, weights: Optional[LossWeights] = None):
    """Weighted side losses plus the fused-map loss, both with the same balancing policy."""
    weights = weights or LossWeights()
    maps = list(sides.sides)
    if len(maps) != len(weights.alpha):
        raise ValueError(f"{len(maps)} side maps but {len(weights.alpha)} side weights")
    beta, gamma = weights.coefficients(gt)
    side_losses = [weighted_bce(m, gt, beta, gamma) for m in maps]
    l_side = sum(a * l for a, l in zip(weights.alpha, side_losses))
    l_fuse = weighted_bce(sides.fused, gt, beta, gamma)
    return LossReport(side_losses, l_side, l_fuse, l_side + l_fuse, beta, gamma)
