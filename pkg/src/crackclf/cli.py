"""``crackclf train|eval|infer|complexity|synth``.

Exit codes: 0 success, 1 runtime failure (e.g. some inference inputs
unreadable), 2 invalid configuration or usage, 3 checkpoint/config mismatch.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from crackclf import checkpoint as ckpt
from crackclf.adversary import Critic
from crackclf.complexity import complexity
from crackclf.config import ConfigError, load_config, parse_overrides
from crackclf.data_io import CrackDataset, DatasetManifest, load_pair, write_synthetic_dataset
from crackclf.metrics import evaluate
from crackclf.reporting import format_report, plot_losses, write_metrics
from crackclf.segnet import SegNet, SegNetConfig
from crackclf.trainer import fit, output_probability

log = logging.getLogger("crackclf")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class Mismatch(Exception):
    pass


def _load_manifest(cfg):
    if not cfg.data.manifest:
        raise ConfigError("data.manifest is required")
    try:
        return DatasetManifest.load(cfg.data.manifest)
    except FileNotFoundError:
        raise ConfigError(f"data.manifest: file not found: {cfg.data.manifest}") from None
    except ValueError as e:
        raise ConfigError(f"data.manifest: {e}") from None


def _dataset(manifest, split, cfg, flips=False):
    return CrackDataset(manifest, split=split, flips=flips, seed=cfg.train.seed)


def cmd_train(cfg):
    manifest = _load_manifest(cfg)
    train_ds = _dataset(manifest, cfg.data.train_split, cfg, flips=cfg.data.flips)
    if len(train_ds) == 0:
        raise ConfigError(f"data.train_split: no entries labelled {cfg.data.train_split!r} in {cfg.data.manifest}")
    val_ds = _dataset(manifest, cfg.data.val_split, cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config_snapshot.yaml")
    records = []
    with open(out / "log.jsonl", "w") as fh:

        def on_record(rec):
            records.append(rec)
            fh.write(json.dumps(rec) + "\n")
            fh.flush()

        state, _ = fit(
            train_ds,
            cfg.train,
            segnet_config=cfg.segnet,
            critic_config=cfg.critic,
            out_dir=out,
            val_dataset=val_ds if len(val_ds) else None,
            resume=cfg.resume,
            on_record=on_record,
        )
    cfg.dump(out / "config_snapshot.yaml")
    plot_losses(records, out / "loss_curve.png")
    last = [r for r in records if r["kind"] == "segmenter"]
    if last:
        print(f"trained {state.step} steps over {state.epoch} epochs; final l_total={last[-1]['l_total']:.6f}")
    print(f"artifacts in {out}")
    return 0


def _config_diff(saved, cfg):
    """Differences between a checkpoint's SegNet config and explicitly configured keys."""
    current = cfg.segnet.to_dict()
    keys = [k.split(".", 1)[1] for k in cfg.explicit if k.startswith("segnet.")]
    return [f"  segnet.{k}: checkpoint={saved.get(k)!r} config={current[k]!r}" for k in sorted(keys)
            if saved.get(k) != current[k]]


def _load_model(cfg, path):
    if not path:
        for name in ("best.pt", "last.pt"):
            cand = Path(cfg.output_dir) / name
            if cand.is_file():
                path = cand
                break
        else:
            raise ConfigError(f"no checkpoint given and none found in {cfg.output_dir}")
    try:
        payload = ckpt.read_checkpoint(path)
    except (FileNotFoundError, ValueError) as e:
        raise ConfigError(str(e)) from None
    saved = payload.get("segnet_config")
    if saved is None:
        raise ConfigError(f"{path} holds no SegNet configuration")
    diff = _config_diff(saved, cfg)
    if diff:
        raise Mismatch(f"checkpoint {path} does not match the configured network:\n" + "\n".join(diff))
    net = SegNet(SegNetConfig(**saved))
    try:
        net.load_state_dict(ckpt.segmenter_tensors(payload))
    except RuntimeError as e:
        raise Mismatch(f"checkpoint {path} tensors do not fit its stored config: {e}") from None
    return net.eval(), Path(path)


def _padded_forward(net, image, features=False):
    """Forward ``[3,H,W]`` at any size by replicate-padding to multiples of 16 and cropping back."""
    h, w = image.shape[-2:]
    ph, pw = (-h) % 16, (-w) % 16
    x = image[None]
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    with torch.no_grad():
        out = net(x, return_features=features)
    return out, (h, w)


def _find_prediction(pred_dir, stem):
    for name in (f"{stem}.png", f"{stem}_mask.png", f"{stem}.jpg"):
        p = Path(pred_dir) / name
        if p.is_file():
            return p
    raise ConfigError(f"eval.pred_dir: no prediction for {stem!r} in {pred_dir}")


def cmd_eval(cfg):
    manifest = _load_manifest(cfg)
    entries = [e for e in manifest.entries if e.split == cfg.eval.split]
    if not entries:
        raise ConfigError(f"eval.split: no entries labelled {cfg.eval.split!r} in {cfg.data.manifest}")
    probs, gts = [], []
    # threshold and tolerance travel in the report itself
    meta = {"manifest": str(cfg.data.manifest), "split": cfg.eval.split, "metric": cfg.eval.metric}
    if cfg.eval.pred_dir:
        meta["predictions"] = str(cfg.eval.pred_dir)
        for e in entries:
            _, mask = load_pair(e, manifest)
            pred = np.asarray(Image.open(_find_prediction(cfg.eval.pred_dir, Path(e.image_path).stem)).convert("L"))
            if pred.shape != tuple(mask.shape[-2:]):
                raise ConfigError(f"eval.pred_dir: prediction for {e.image_path} is {pred.shape}, mask is {tuple(mask.shape[-2:])}")
            probs.append(pred.astype(np.float64) / 255.0)
            gts.append(mask[0].numpy() > 0)
    else:
        net, path = _load_model(cfg, cfg.eval.checkpoint)
        meta["checkpoint"] = str(path)
        for e in entries:
            image, mask = load_pair(e, manifest)
            out, (h, w) = _padded_forward(net, image)
            probs.append(output_probability(out)[0, 0, :h, :w].numpy())
            gts.append(mask[0].numpy() > 0)
    report = evaluate(probs, gts, cfg.eval.threshold, cfg.eval.tolerance, cfg.eval.metric)
    out = Path(cfg.output_dir) / "eval"
    write_metrics(report, out, meta, figure=cfg.eval.figure)
    sys.stdout.write(format_report(report, meta))
    return 0


def _expand_inputs(paths):
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES))
        else:
            out.append(p)
    return out


def cmd_infer(cfg, positionals=()):
    inputs = _expand_inputs(list(cfg.infer.inputs) + list(positionals))
    if not inputs:
        raise ConfigError("infer.inputs: no input images given")
    net, _ = _load_model(cfg, cfg.infer.checkpoint)
    out = Path(cfg.output_dir) / "infer"
    out.mkdir(parents=True, exist_ok=True)
    failed = []
    for path in inputs:
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except (OSError, ValueError) as e:
            print(f"error: cannot read {path}: {e}", file=sys.stderr)
            failed.append(path)
            continue
        image = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
        res, (h, w) = _padded_forward(net, image, cfg.infer.dump_features)
        prob = output_probability(res)[0, 0, :h, :w].numpy()
        mask = np.where(prob >= cfg.infer.threshold, 255, 0).astype(np.uint8)
        Image.fromarray(mask).save(out / f"{path.stem}_mask.png")
        if cfg.infer.dump_probs:
            arrays = {"fused": prob.astype(np.float32)}
            for i, s in enumerate(res.sides, 1):
                arrays[f"side{i}"] = s[0, 0, :h, :w].numpy().astype(np.float32)
            np.savez(out / f"{path.stem}_probs.npz", **arrays)
        if cfg.infer.dump_features:
            feats = {k: v[0].numpy().astype(np.float32) for k, v in res.features.items()}
            np.savez(out / f"{path.stem}_features.npz", **feats)
    print(f"wrote {len(inputs) - len(failed)} mask(s) to {out}")
    if failed:
        print(f"{len(failed)} input(s) failed: " + ", ".join(map(str, failed)), file=sys.stderr)
        return 1
    return 0


def cmd_complexity(cfg):
    torch.manual_seed(cfg.train.seed)
    net = SegNet(cfg.segnet)
    critic = Critic(cfg.critic) if cfg.train.clf_enabled else None
    c = cfg.complexity
    report = complexity(net, c.input_size, critic, runs=c.runs, warmup=c.warmup, timing=c.timing)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "complexity.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    (out / "complexity.txt").write_text(report.summary() + "\n")
    print(report.summary())
    return 0


def cmd_synth(args):
    fractions = tuple(float(f) for f in args.fractions.split(","))
    path = write_synthetic_dataset(args.out, args.n, args.size, args.seed, fractions)
    print(path)
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "complexity": cmd_complexity}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="crackclf",
        description="Crack segmentation with closed-loop adversarial feedback.",
        epilog="Any config key can be overridden as --section.key VALUE or --key VALUE when unambiguous.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("train", "train a segmenter"), ("eval", "evaluate on the test split"),
                        ("infer", "write masks for images"), ("complexity", "params / FLOPs / FPS")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML run configuration")
    s = sub.add_parser("synth", help="write a synthetic crack dataset and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fractions", default="0.5,0,0.5", help="train,val,test fractions")
    return parser


def main(argv=None):
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "synth":
        if rest:
            parser.error(f"unrecognized arguments: {' '.join(rest)}")
        return cmd_synth(args)
    try:
        overrides, positionals = parse_overrides(rest, args.command)
        if positionals and args.command != "infer":
            raise ConfigError(f"unexpected argument(s): {' '.join(positionals)}")
        cfg = load_config(args.config, overrides)
        if args.command == "infer":
            return cmd_infer(cfg, positionals)
        return COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Mismatch as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
