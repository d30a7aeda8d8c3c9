"""Closed-loop training: alternating critic ascent and segmenter descent.

The segmenter minimizes ``J = l_total + lambda_adv * L1_adv`` while the
critic maximizes ``L1_adv``, the multi-scale feature distance between the
image masked by the prediction and by the ground truth. With
``clf_enabled=False`` no critic exists and ``J = l_total``.
"""

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import torch

from crackclf import checkpoint as ckpt
from crackclf.adversary import Critic, CriticConfig, adversarial_loss
from crackclf.metrics import TOLERANCE, evaluate
from crackclf.segnet import SegNet, SegNetConfig, SideOutputs
from crackclf.supervision import LossReport, LossWeights, total_loss, weighted_bce

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "adam"
    adam_betas: Sequence[float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    critic_lr: Optional[float] = None
    epochs: int = 500
    batch_size: int = 4
    lambda_adv: float = 1.0
    threshold: float = 0.5
    tolerance: float = TOLERANCE
    seed: int = 0
    critic_steps_per_gen_step: int = 1
    critic_clip: Optional[float] = 0.01
    clf_enabled: bool = True
    side_weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0, 1.0)
    balance_mode: str = "per-batch"
    beta: Optional[float] = None
    gamma: Optional[float] = None
    shuffle: bool = True
    checkpoint_every: int = 1

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.side_weights = tuple(float(a) for a in self.side_weights)
        if self.lr <= 0 or (self.critic_lr is not None and self.critic_lr <= 0):
            raise ValueError("learning rates must be positive")
        if self.optimizer.lower() != "adam":
            raise ValueError(f"only the adam optimizer is supported, got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be >= 0")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.critic_clip is not None and self.critic_clip <= 0:
            raise ValueError("critic_clip must be positive or null")
        if self.critic_steps_per_gen_step < 0:
            raise ValueError("critic_steps_per_gen_step must be >= 0")
        self.loss_weights()

    def loss_weights(self):
        return LossWeights(self.side_weights, self.beta, self.gamma, self.balance_mode)

    def to_dict(self):
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["side_weights"] = list(self.side_weights)
        return d


def segnet_loss(weights):
    def loss(out, gt):
        return total_loss(out, gt, weights)

    return loss


def fused_only_loss(weights):
    """Supervised loss for backbones that emit a single probability map."""

    def loss(out, gt):
        beta, gamma = weights.coefficients(gt)
        l_fuse = weighted_bce(out, gt, beta, gamma)
        return LossReport([], torch.zeros(()), l_fuse, l_fuse, beta, gamma)

    return loss


def output_probability(out):
    return out.fused if isinstance(out, SideOutputs) else out


@dataclass
class TrainState:
    segmenter: torch.nn.Module
    seg_opt: torch.optim.Optimizer
    supervised_loss: Callable
    to_prob: Callable = output_probability
    critic: Optional[Critic] = None
    critic_opt: Optional[torch.optim.Optimizer] = None
    critic_config: Optional[CriticConfig] = None
    data_rng: torch.Generator = field(default_factory=torch.Generator)
    step: int = 0
    epoch: int = 0
    critic_steps: int = 0
    best_f1: float = -1.0


def _adam(params, lr, cfg):
    return torch.optim.Adam(params, lr=lr, betas=cfg.adam_betas, eps=cfg.adam_eps)


def init_state(segmenter, cfg: TrainConfig, critic_config=None, supervised_loss=None, to_prob=None):
    """Attach optimizers (and, with CLF on, a freshly seeded critic) to ``segmenter``.

    The critic is initialised from its own seed so the global RNG stream,
    and hence everything else, is identical with CLF on or off.
    """
    if supervised_loss is None:
        w = cfg.loss_weights()
        supervised_loss = segnet_loss(w) if isinstance(segmenter, SegNet) else fused_only_loss(w)
    state = TrainState(
        segmenter=segmenter,
        seg_opt=_adam(segmenter.parameters(), cfg.lr, cfg),
        supervised_loss=supervised_loss,
        to_prob=to_prob or output_probability,
    )
    state.data_rng.manual_seed(cfg.seed)
    if cfg.clf_enabled:
        state.critic_config = critic_config or CriticConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed + 1)
            state.critic = Critic(state.critic_config)
        _clip(state.critic, cfg.critic_clip)
        state.critic_opt = _adam(state.critic.parameters(), cfg.critic_lr or cfg.lr, cfg)
    return state


class _frozen:
    def __init__(self, module):
        self.module = module

    def __enter__(self):
        self.flags = [p.requires_grad for p in self.module.parameters()]
        for p in self.module.parameters():
            p.requires_grad_(False)

    def __exit__(self, *exc):
        for p, f in zip(self.module.parameters(), self.flags):
            p.requires_grad_(f)


def _clip(critic, bound):
    # the ascent objective is unbounded in the critic weights, so they live in a box
    if bound is None:
        return
    with torch.no_grad():
        for p in critic.parameters():
            p.clamp_(-bound, bound)


def critic_step(batch, state: TrainState, cfg: TrainConfig):
    """One ascent step on the adversarial loss w.r.t. critic parameters; returns the post-step loss."""
    if not cfg.clf_enabled or state.critic is None:
        raise RuntimeError("critic_step called with CLF disabled")
    x, y = batch
    with torch.no_grad():
        s_pred = state.to_prob(state.segmenter(x))
    loss = adversarial_loss(x, s_pred, y, state.critic)
    state.critic_opt.zero_grad(set_to_none=False)
    (-loss).backward()
    state.critic_opt.step()
    _clip(state.critic, cfg.critic_clip)
    state.critic_steps += 1
    with torch.no_grad():
        after = adversarial_loss(x, s_pred, y, state.critic)
    return state, after.item()


def segmenter_objective(batch, state: TrainState, cfg: TrainConfig):
    """``(J, LossReport, adv)`` for the current parameters; differentiable in the segmenter."""
    x, y = batch
    out = state.segmenter(x)
    report = state.supervised_loss(out, y)
    if not cfg.clf_enabled or state.critic is None:
        return report.l_total, report, None
    with _frozen(state.critic):
        adv = adversarial_loss(x, state.to_prob(out), y, state.critic)
    return report.l_total + cfg.lambda_adv * adv, report, adv


def segmenter_step(batch, state: TrainState, cfg: TrainConfig):
    """One descent step on ``J``; returns the pre-step loss record."""
    j, report, adv = segmenter_objective(batch, state, cfg)
    state.seg_opt.zero_grad(set_to_none=False)
    j.backward()
    state.seg_opt.step()
    state.step += 1
    rec = {"l_side": report.l_side_total.item(), "l_fuse": report.l_fuse.item(), "l_total": report.l_total.item()}
    if adv is not None:
        rec["adv_loss"] = adv.item()
    rec["J"] = j.item()
    return state, rec


def _item_path(dataset, i):
    if hasattr(dataset, "path"):
        return str(dataset.path(i))
    return f"item {i}"


def _collate(dataset, idx):
    items = [dataset[i] for i in idx]
    shapes = {tuple(img.shape) for img, _ in items}
    if len(shapes) > 1:
        raise ValueError(f"mixed image sizes in one batch: {sorted(shapes)}")
    for i, (img, _) in zip(idx, items):
        h, w = img.shape[-2:]
        if h % 16 or w % 16 or h < 16 or w < 16:
            raise ValueError(f"{_item_path(dataset, i)}: image size {h}x{w} not divisible by 16")
    return torch.stack([a for a, _ in items]), torch.stack([b for _, b in items])


def _batches(n, cfg, gen):
    order = torch.randperm(n, generator=gen).tolist() if cfg.shuffle else list(range(n))
    return [order[k : k + cfg.batch_size] for k in range(0, n, cfg.batch_size)]


def save_state(path, state: TrainState, cfg: TrainConfig):
    seg = state.segmenter
    ckpt.save_checkpoint(
        path,
        seg,
        state.critic,
        segnet_config=seg.config.to_dict() if isinstance(seg, SegNet) else None,
        critic_config=state.critic_config.to_dict() if state.critic_config else None,
        train_config=cfg.to_dict(),
        optim={
            "segmenter": state.seg_opt.state_dict(),
            "critic": state.critic_opt.state_dict() if state.critic_opt else None,
        },
        progress={"step": state.step, "epoch": state.epoch, "critic_steps": state.critic_steps,
                  "best_f1": state.best_f1},
        rng={"data": state.data_rng.get_state(), "torch": torch.get_rng_state()},
    )


def restore_state(path, state: TrainState):
    payload = ckpt.read_checkpoint(path)
    state.segmenter.load_state_dict(ckpt.segmenter_tensors(payload))
    state.seg_opt.load_state_dict(payload["optim"]["segmenter"])
    if state.critic is not None:
        ct = ckpt.critic_tensors(payload)
        if not ct:
            raise ValueError(f"{path} has no critic parameters but CLF is enabled")
        state.critic.load_state_dict(ct)
        state.critic_opt.load_state_dict(payload["optim"]["critic"])
    p = payload["progress"]
    state.step, state.epoch, state.critic_steps = p["step"], p["epoch"], p["critic_steps"]
    state.best_f1 = p.get("best_f1", -1.0)
    state.data_rng.set_state(payload["rng"]["data"])
    torch.set_rng_state(payload["rng"]["torch"])
    return state


@torch.no_grad()
def dataset_f1(segmenter, dataset, threshold=0.5, tol=TOLERANCE, to_prob=output_probability):
    """Tolerance-aware F1 at a fixed threshold over ``dataset``."""
    was_training = segmenter.training
    segmenter.eval()
    probs, gts = [], []
    for i in range(len(dataset)):
        x, y = dataset[i]
        probs.append(to_prob(segmenter(x[None]))[0])
        gts.append(y)
    segmenter.train(was_training)
    return evaluate(probs, gts, threshold, tol).f1


def fit(dataset, cfg: TrainConfig, segmenter=None, *, segnet_config=None, critic_config=None,
        supervised_loss=None, to_prob=None, out_dir=None, val_dataset=None, resume=None,
        state=None, on_record=None):
    """Train on ``dataset`` (a sequence of ``(image, mask)`` tensors).

    Returns ``(state, records)``. Each batch gets ``critic_steps_per_gen_step``
    critic steps followed by one segmenter step, and every step appends a
    record. With ``out_dir`` set, ``last.pt`` is written every
    ``checkpoint_every`` epochs and ``best.pt`` whenever validation F1 improves.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("empty training dataset")
    if state is None:
        if segmenter is None:
            torch.manual_seed(cfg.seed)
            segmenter = SegNet(segnet_config or SegNetConfig())
        state = init_state(segmenter, cfg, critic_config, supervised_loss, to_prob)
    if resume is not None:
        restore_state(resume, state)
    out_dir = Path(out_dir) if out_dir is not None else None
    records: List[dict] = []

    def emit(rec):
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    state.segmenter.train()
    while state.epoch < cfg.epochs:
        epoch = state.epoch + 1
        for idx in _batches(n, cfg, state.data_rng):
            batch = _collate(dataset, idx)
            if cfg.clf_enabled:
                for _ in range(cfg.critic_steps_per_gen_step):
                    t0 = time.perf_counter()
                    state, c_loss = critic_step(batch, state, cfg)
                    emit({"kind": "critic", "step": state.critic_steps, "epoch": epoch, "adv_loss": c_loss,
                          "wall_ms": (time.perf_counter() - t0) * 1e3})
            t0 = time.perf_counter()
            state, rec = segmenter_step(batch, state, cfg)
            emit({"kind": "segmenter", "step": state.step, "epoch": epoch, **rec,
                  "wall_ms": (time.perf_counter() - t0) * 1e3})
        state.epoch = epoch
        if out_dir is not None:
            if val_dataset is not None and len(val_dataset):
                f1 = dataset_f1(state.segmenter, val_dataset, cfg.threshold, cfg.tolerance, state.to_prob)
                emit({"kind": "val", "epoch": epoch, "f1": f1})
                if f1 > state.best_f1:
                    state.best_f1 = f1
                    save_state(out_dir / "best.pt", state, cfg)
            if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
                save_state(out_dir / "last.pt", state, cfg)
    return state, records


class CLFModel:
    """A backbone plus the closed-loop critic; ``fit`` trains the backbone with ``J``."""

    def __init__(self, backbone, critic_config=None, supervised_loss=None, to_prob=None):
        self.backbone = backbone
        self.critic_config = critic_config or CriticConfig()
        self.supervised_loss = supervised_loss
        self.to_prob = to_prob or output_probability
        self.state = None

    def __call__(self, x):
        return self.to_prob(self.backbone(x))

    def fit(self, dataset, cfg: TrainConfig, **kwargs):
        self.state, records = fit(
            dataset,
            cfg,
            self.backbone,
            critic_config=self.critic_config,
            supervised_loss=self.supervised_loss,
            to_prob=self.to_prob,
            **kwargs,
        )
        return self.state, records


def wrap_with_clf(backbone, supervised_loss=None, critic_config=None, to_prob=None, probe_shape=(1, 3, 64, 64)):
    """Attach closed-loop feedback to any differentiable image -> probability-map model.

    The backbone is probed once with a zero batch; its probability output
    must be ``[B,1,H,W]`` with values in [0, 1].
    """
    if not isinstance(backbone, torch.nn.Module) or not any(True for _ in backbone.parameters()):
        raise TypeError("backbone must be a torch.nn.Module with trainable parameters")
    to_prob = to_prob or output_probability
    with torch.no_grad():
        probe = to_prob(backbone(torch.zeros(probe_shape)))
    if probe.dim() != 4 or probe.shape[1] != 1 or probe.shape[-2:] != torch.Size(probe_shape[-2:]):
        raise ValueError(f"backbone output {tuple(probe.shape)} is not a [B,1,H,W] map at input resolution")
    if not torch.isfinite(probe).all() or probe.min() < 0 or probe.max() > 1:
        raise ValueError("backbone output is not a probability map in [0, 1]")
    return CLFModel(backbone, critic_config, supervised_loss, to_prob)


def train_config_fields():
    return {f.name for f in fields(TrainConfig)}
