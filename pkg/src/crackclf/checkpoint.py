"""Checkpoint archive.

One ``torch.save`` file holding a dict::

    {"format": "crackclf-checkpoint", "version": 1,
     "segnet_config": {...} | None, "critic_config": {...} | None,
     "train_config": {...} | None,
     "tensors": {"segmenter/<name>": Tensor, "critic/<name>": Tensor},
     "optim": {"segmenter": state_dict, "critic": state_dict | None},
     "progress": {"step", "epoch", "critic_steps", "best_f1"},
     "rng": {"data": ByteTensor}}

Segmenter and critic parameters live in separate ``segmenter/`` and
``critic/`` namespaces of the same tensor table.
"""

from pathlib import Path

import torch

FORMAT = "crackclf-checkpoint"
VERSION = 1


def _namespaced(prefix, module):
    return {f"{prefix}/{k}": v.detach().clone() for k, v in module.state_dict().items()}


def _strip(tensors, prefix):
    p = prefix + "/"
    return {k[len(p) :]: v for k, v in tensors.items() if k.startswith(p)}


def save_checkpoint(path, segmenter, critic=None, *, segnet_config=None, critic_config=None,
                    train_config=None, optim=None, progress=None, rng=None):
    tensors = _namespaced("segmenter", segmenter)
    if critic is not None:
        tensors.update(_namespaced("critic", critic))
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "segnet_config": segnet_config,
        "critic_config": critic_config,
        "train_config": train_config,
        "tensors": tensors,
        "optim": optim or {},
        "progress": progress or {},
        "rng": rng or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def read_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise ValueError(f"{path} is not a crackclf checkpoint")
    if payload.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def segmenter_tensors(payload):
    return _strip(payload["tensors"], "segmenter")


def critic_tensors(payload):
    return _strip(payload["tensors"], "critic")


def load_segnet(path_or_payload):
    """Rebuild a :class:`SegNet` from a checkpoint written for one."""
    from crackclf.segnet import SegNet, SegNetConfig

    payload = path_or_payload if isinstance(path_or_payload, dict) else read_checkpoint(path_or_payload)
    if payload.get("segnet_config") is None:
        raise ValueError("checkpoint holds no SegNet configuration")
    net = SegNet(SegNetConfig(**payload["segnet_config"]))
    net.load_state_dict(segmenter_tensors(payload))
    return net.eval()
