"""Manifests, image/mask loading, tiling, splits and a synthetic crack generator.

Manifest files are JSON Lines. An optional first record carries dataset
metadata (``{"dataset": ..., "tile_size": ...}``); every other record is
``{"image_path": ..., "mask_path": ..., "split": "train"|"val"|"test"}``.
Relative paths resolve against the manifest's directory.
"""

import json
import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MASK_THRESHOLD = 128
SPLIT_PRESETS = {"cfd": (72, 0, 46)}


@dataclass
class Entry:
    image_path: str
    mask_path: str
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r} for {self.image_path}")


@dataclass
class DatasetManifest:
    entries: List[Entry] = field(default_factory=list)
    dataset_name: str = ""
    tile_size: Optional[int] = None
    root: Optional[Path] = None

    def __len__(self):
        return len(self.entries)

    def resolve(self, p):
        p = Path(p)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def subset(self, split):
        return DatasetManifest(
            [e for e in self.entries if e.split == split], self.dataset_name, self.tile_size, self.root
        )

    def save(self, path):
        path = Path(path)
        with open(path, "w") as fh:
            fh.write(json.dumps({"dataset": self.dataset_name, "tile_size": self.tile_size}) + "\n")
            for e in self.entries:
                fh.write(json.dumps({"image_path": e.image_path, "mask_path": e.mask_path, "split": e.split}) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest not found: {path}")
        m = cls(root=path.parent)
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ValueError(f"{path}:{lineno}: {e}") from None
                if "dataset" in rec:
                    m.dataset_name = rec["dataset"] or ""
                    m.tile_size = rec.get("tile_size")
                    continue
                try:
                    m.entries.append(Entry(rec["image_path"], rec["mask_path"], rec.get("split", "train")))
                except KeyError as e:
                    raise ValueError(f"{path}:{lineno}: missing field {e}") from None
        return m


def _open(path, mode):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except (UnidentifiedImageError, OSError) as e:
        raise ValueError(f"cannot decode image {path}: {e}") from None


def binarize_mask(values):
    return (np.asarray(values) >= MASK_THRESHOLD).astype(np.uint8)


def load_pair(entry, manifest=None):
    """Return ``(image [3,H,W] float32 in [0,1], mask [1,H,W] float32 in {0,1})``."""
    resolve = manifest.resolve if manifest is not None else Path
    ip, mp = resolve(entry.image_path), resolve(entry.mask_path)
    img = _open(ip, "RGB")
    mask = _open(mp, "L")
    if img.shape[:2] != mask.shape:
        raise ValueError(f"image {ip} is {img.shape[:2]} but mask {mp} is {mask.shape}")
    image = torch.from_numpy(img.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()
    m = torch.from_numpy(binarize_mask(mask).astype(np.float32))[None]
    return image, m


def center_crop(a, multiple, axes=(-2, -1)):
    """Crop array/tensor ``a`` centrally so the given axes are multiples of ``multiple``."""
    slices = [slice(None)] * a.ndim
    for ax in axes:
        n = a.shape[ax]
        keep = n - n % multiple
        if keep == 0:
            raise ValueError(f"size {n} smaller than {multiple}")
        off = (n - keep) // 2
        slices[ax] = slice(off, off + keep)
    return a[tuple(slices)]


def tile(image, mask, grid=4):
    """Split an ``[H,W,...]`` image and ``[H,W]`` mask into ``grid*grid`` tiles, row-major.

    Both are first centre-cropped to the largest size divisible by ``grid``.
    """
    image, mask = np.asarray(image), np.asarray(mask)
    if image.shape[:2] != mask.shape[:2]:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape[:2]} differ in size")
    h, w = mask.shape[:2]
    if h < grid or w < grid:
        raise ValueError(f"image {h}x{w} is smaller than the {grid}x{grid} grid")
    image = center_crop(image, grid, axes=(0, 1))
    mask = center_crop(mask, grid, axes=(0, 1))
    th, tw = image.shape[0] // grid, image.shape[1] // grid
    return [
        (image[r * th : (r + 1) * th, c * tw : (c + 1) * tw], mask[r * th : (r + 1) * th, c * tw : (c + 1) * tw])
        for r in range(grid)
        for c in range(grid)
    ]


def tile_manifest(manifest, out_dir, grid=4, drop_empty=False):
    """Write tiles for every entry as PNG files and return the tiled manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tiled = DatasetManifest(dataset_name=manifest.dataset_name, root=out_dir)
    for e in manifest.entries:
        img = _open(manifest.resolve(e.image_path), "RGB")
        mask = _open(manifest.resolve(e.mask_path), "L")
        stem = Path(e.image_path).stem
        for k, (ti, tm) in enumerate(tile(img, mask, grid)):
            if drop_empty and not binarize_mask(tm).any():
                continue
            iname, mname = f"{stem}_{k:02d}.png", f"{stem}_{k:02d}_mask.png"
            Image.fromarray(ti).save(out_dir / iname)
            Image.fromarray(tm).save(out_dir / mname)
            tiled.entries.append(Entry(iname, mname, e.split))
    if tiled.entries:
        tiled.tile_size = int(Image.open(out_dir / tiled.entries[0].image_path).size[1])
    return tiled


def _split_counts(n, fractions):
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr < 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be 3 non-negative numbers summing to 1, got {fractions}")
    raw = fr * n
    counts = np.floor(raw).astype(int)
    # largest remainder
    for k in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    return tuple(int(c) for c in counts)


def split(manifest, fractions=(0.8, 0.1, 0.1), seed=0, counts=None, preset=None):
    """Assign train/val/test labels by a seeded shuffle; returns a new manifest."""
    n = len(manifest)
    if n == 0:
        raise ValueError("cannot split an empty manifest")
    if preset is not None:
        try:
            counts = SPLIT_PRESETS[preset.lower()]
        except KeyError:
            raise ValueError(f"unknown split preset {preset!r}") from None
    if counts is not None:
        if sum(counts) != n:
            raise ValueError(f"split counts {tuple(counts)} do not add up to {n} entries")
    else:
        counts = _split_counts(n, fractions)
    order = list(range(n))
    random.Random(seed).shuffle(order)
    labels = [None] * n
    pos = 0
    for name, c in zip(SPLITS, counts):
        for i in order[pos : pos + c]:
            labels[i] = name
        pos += c
    out = replace(manifest, entries=[replace(e, split=s) for e, s in zip(manifest.entries, labels)])
    return out


def assign_splits(manifest, lists):
    """Apply precomputed membership: ``lists`` maps split name to image file names or stems."""
    lookup = {}
    for name, members in lists.items():
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        for m in members:
            lookup[Path(m).stem] = name
    entries = []
    for e in manifest.entries:
        stem = Path(e.image_path).stem
        if stem in lookup:
            entries.append(replace(e, split=lookup[stem]))
    return replace(manifest, entries=entries)


class CrackDataset(torch.utils.data.Dataset):
    """Image/mask pairs from a manifest, centre-cropped to multiples of 16."""

    def __init__(self, manifest, split=None, multiple=16, flips=False, seed=0):
        self.manifest = manifest
        self.entries = [e for e in manifest.entries if split is None or e.split == split]
        self.multiple = multiple
        self.flips = flips
        self._gen = torch.Generator().manual_seed(seed)

    def __len__(self):
        return len(self.entries)

    def path(self, i):
        return self.manifest.resolve(self.entries[i].image_path)

    def __getitem__(self, i):
        image, mask = load_pair(self.entries[i], self.manifest)
        h, w = image.shape[-2:]
        if h % self.multiple or w % self.multiple:
            log.warning("centre-cropping %s from %dx%d to multiples of %d", self.path(i), h, w, self.multiple)
            image, mask = center_crop(image, self.multiple), center_crop(mask, self.multiple)
        if self.flips:
            if torch.rand(1, generator=self._gen).item() < 0.5:
                image, mask = image.flip(-1), mask.flip(-1)
            if torch.rand(1, generator=self._gen).item() < 0.5:
                image, mask = image.flip(-2), mask.flip(-2)
        return image, mask


def synthetic_crack(size=64, rng=None, width=(1, 2)):
    """Random-walk crack on a noisy pavement-like background.

    Returns ``(image [3,H,W] float32, mask [1,H,W] float32)``.
    """
    rng = np.random.default_rng(rng)
    h = w = size
    mask = np.zeros((h, w), dtype=bool)
    y, x = rng.uniform(0, h), 0.0
    angle = rng.uniform(-0.6, 0.6)
    if rng.random() < 0.5:
        y, x, angle = 0.0, rng.uniform(0, w), angle + np.pi / 2
    radius = rng.uniform(*width) / 2
    yy, xx = np.mgrid[0:h, 0:w]
    while 0 <= y < h and 0 <= x < w:
        mask |= (yy - y) ** 2 + (xx - x) ** 2 <= radius**2 + 0.25
        angle += rng.normal(0, 0.25)
        y += np.sin(angle)
        x += np.cos(angle)
    texture = ndimage.gaussian_filter(rng.normal(0, 1, (h, w)), 1.0)
    base = 0.6 + 0.06 * texture + rng.normal(0, 0.03, (h, w))
    gray = np.where(mask, 0.25 + rng.normal(0, 0.03, (h, w)), base)
    tint = rng.uniform(0.95, 1.05, size=3)
    image = np.clip(gray[None] * tint[:, None, None], 0, 1).astype(np.float32)
    return torch.from_numpy(image), torch.from_numpy(mask.astype(np.float32))[None]


def synthetic_dataset(n, size=64, seed=0):
    rng = np.random.default_rng(seed)
    return [synthetic_crack(size, rng) for _ in range(n)]


def write_synthetic_dataset(out_dir, n, size=64, seed=0, fractions=(1.0, 0.0, 0.0)):
    """Write ``n`` synthetic PNG pairs plus ``manifest.jsonl``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    m = DatasetManifest(dataset_name="synthetic", root=out_dir)
    for k, (img, mask) in enumerate(synthetic_dataset(n, size, seed)):
        iname, mname = f"crack_{k:03d}.png", f"crack_{k:03d}_mask.png"
        Image.fromarray((img.permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)).save(out_dir / iname)
        Image.fromarray((mask[0].numpy() * 255).astype(np.uint8)).save(out_dir / mname)
        m.entries.append(Entry(iname, mname))
    m = split(m, fractions, seed)
    m.save(out_dir / "manifest.jsonl")
    return out_dir / "manifest.jsonl"
