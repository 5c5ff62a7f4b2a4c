"""Toy datasets and the crop/flip augmentation policy.

Procedural shape images stand in for a real classification corpus: one shape
per image (class = shape type) over a smoothly textured background, all
rendered deterministically from the dataset seed. Folder ingestion reads
``root/<class_name>/*.png|ppm`` 8-bit RGB files into the same in-memory form.
"""

import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigurationError

SHAPE_CLASSES = ("circle", "square", "triangle", "cross")

DEFAULT_TRAIN_COUNT = 5000
DEFAULT_VAL_COUNT = 1000


@dataclass
class LabeledDataset:
    """Immutable image/label collection.

    images: (N, 3, H, W) float32 in [0, 1]; labels: (N,) int64.
    """

    images: torch.Tensor
    labels: torch.Tensor
    class_names: tuple = SHAPE_CLASSES
    split: str = "train"
    seed: int = 0

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ConfigurationError(f"images must be (N, 3, H, W), got {tuple(self.images.shape)}")
        if len(self.images) != len(self.labels):
            raise ConfigurationError("images and labels must have equal length")
        if len(self.images) and not torch.isfinite(self.images).all():
            raise ConfigurationError("images contain non-finite values")
        if len(self.images) and (self.images.min() < 0 or self.images.max() > 1):
            raise ConfigurationError("image values must lie in [0, 1]")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, idx):
        return self.images[idx], int(self.labels[idx])

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def image_size(self):
        return int(self.images.shape[-1])

    def manifest(self):
        return {
            "seed": self.seed,
            "split": self.split,
            "count": len(self),
            "size": int(self.images.shape[-1]) if len(self) else 0,
            "class_names": list(self.class_names),
        }


def save_manifest(ds, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(ds.manifest(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _coordinate_grid(size):
    ax = (np.arange(size, dtype=np.float64) + 0.5) / size
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    return yy, xx


def _soft_edge(signed, width):
    # smooth 0..1 step across the zero level set; width in normalized units
    return np.clip(0.5 - signed / max(width, 1e-9), 0.0, 1.0)


def _shape_coverage(kind, yy, xx, cx, cy, radius, angle, size):
    """Anti-aliased coverage map in [0,1] for one shape instance."""
    edge = 0.7 / size
    ca, sa = math.cos(angle), math.sin(angle)
    u = ca * (xx - cx) + sa * (yy - cy)
    v = -sa * (xx - cx) + ca * (yy - cy)
    if kind == "circle":
        d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2) - radius
        return _soft_edge(d, edge)
    if kind == "square":
        d = np.maximum(np.abs(u), np.abs(v)) - radius
        return _soft_edge(d, edge)
    if kind == "triangle":
        # equilateral, vertex up in the rotated frame
        d1 = -v - radius * 0.5
        d2 = 0.8660254037844386 * u + 0.5 * v - radius * 0.5
        d3 = -0.8660254037844386 * u + 0.5 * v - radius * 0.5
        d = np.maximum(np.maximum(d1, d2), d3) * (2.0 / 1.7320508075688772)
        return _soft_edge(d, edge)
    if kind == "cross":
        arm = radius * 0.38
        bar1 = np.maximum(np.abs(u) - radius, np.abs(v) - arm)
        bar2 = np.maximum(np.abs(v) - radius, np.abs(u) - arm)
        d = np.minimum(bar1, bar2)
        return _soft_edge(d, edge)
    raise ConfigurationError(f"unknown shape kind {kind!r}")


def _background(rng, yy, xx):
    c0 = rng.uniform(0.15, 0.85, size=3)
    c1 = rng.uniform(0.15, 0.85, size=3)
    theta = rng.uniform(0, 2 * math.pi)
    ramp = (math.cos(theta) * xx + math.sin(theta) * yy + 1.0) / 2.0
    img = c0[:, None, None] + (c1 - c0)[:, None, None] * ramp[None]
    # low-frequency texture so backgrounds are not linearly trivial
    for _ in range(2):
        fx, fy = rng.uniform(0.5, 1.8, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(0.015, 0.045)
        wave = np.cos(2 * math.pi * (fx * xx + fy * yy) + phase)
        img = img + amp * wave[None]
    return img


def _luminance(color):
    return 0.299 * color[0] + 0.587 * color[1] + 0.114 * color[2]


def render_shape_image(kind, rng, size):
    """One (3, size, size) float64 image with a single shape over texture."""
    yy, xx = _coordinate_grid(size)
    img = _background(rng, yy, xx)
    radius = rng.uniform(0.16, 0.30)
    cx = rng.uniform(radius, 1 - radius)
    cy = rng.uniform(radius, 1 - radius)
    angle = rng.uniform(0, 2 * math.pi)
    bg_mean = img.mean(axis=(1, 2))
    for _ in range(16):
        color = rng.uniform(0.0, 1.0, size=3)
        if abs(_luminance(color) - _luminance(bg_mean)) >= 0.25:
            break
    cover = _shape_coverage(kind, yy, xx, cx, cy, radius, angle, size)
    img = img * (1 - cover[None]) + color[:, None, None] * cover[None]
    return np.clip(img, 0.0, 1.0)


def generate_shapes(seed, count, size=32, num_classes=4, downsample=8, split="train"):
    """Deterministic procedural shape dataset.

    Pure function of its arguments: the same (seed, count, size, num_classes,
    split) always yields bit-identical tensors.
    """
    if count < 0:
        raise ConfigurationError("count must be >= 0")
    if num_classes < 2 or num_classes > len(SHAPE_CLASSES):
        raise ConfigurationError(f"num_classes must be in [2, {len(SHAPE_CLASSES)}]")
    if downsample and size % downsample != 0:
        raise ConfigurationError(f"size {size} not divisible by downsample factor {downsample}")
    split_code = {"train": 0, "val": 1, "test": 2}.get(split, hash(split) % 97 + 3)
    rng = np.random.default_rng((seed, split_code, size, num_classes))
    images = np.zeros((count, 3, size, size), dtype=np.float32)
    labels = rng.integers(0, num_classes, size=count)
    for i in range(count):
        images[i] = render_shape_image(SHAPE_CLASSES[labels[i]], rng, size)
    return LabeledDataset(
        images=torch.from_numpy(images),
        labels=torch.from_numpy(labels.astype(np.int64)),
        class_names=SHAPE_CLASSES[:num_classes],
        split=split,
        seed=seed,
    )


def augment(image, rng, scale_range=(0.6, 1.0), out_size=None, flip_prob=0.5):
    """Random-resized-crop followed by horizontal flip.

    rng consumption order (relied on by replay tests): per attempt
    ``uniform(area)``, ``uniform(log aspect)``, then on success
    ``integers(top)``, ``integers(left)``; after the crop one ``uniform()``
    against flip_prob. Degenerate proposals are resampled up to 10 times, then
    the center crop is used.
    """
    lo, hi = scale_range
    if not (0 < lo <= hi <= 1):
        raise ConfigurationError(f"scale_range must satisfy 0 < lo <= hi <= 1, got {scale_range}")
    c, h, w = image.shape
    out_size = out_size or min(h, w)
    region = None
    for _ in range(10):
        area = rng.uniform(lo, hi) * h * w
        log_ratio = rng.uniform(math.log(3 / 4), math.log(4 / 3))
        ratio = math.exp(log_ratio)
        cw = int(round(math.sqrt(area * ratio)))
        ch = int(round(math.sqrt(area / ratio)))
        if 0 < ch <= h and 0 < cw <= w:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            region = (top, left, ch, cw)
            break
    if region is None:
        side = min(h, w)
        region = ((h - side) // 2, (w - side) // 2, side, side)
    top, left, ch, cw = region
    crop = image[:, top : top + ch, left : left + cw]
    if (ch, cw) == (out_size, out_size):
        out = crop.clone()
    else:
        out = F.interpolate(
            crop.unsqueeze(0), size=(out_size, out_size), mode="bilinear", align_corners=False
        ).squeeze(0)
    if flip_prob > 0 and rng.uniform() < flip_prob:
        out = torch.flip(out, dims=[2])
    return out.clamp_(0.0, 1.0)


def augment_batch(images, rng, scale_range=(0.6, 1.0), out_size=None, flip_prob=0.5):
    return torch.stack([augment(img, rng, scale_range, out_size, flip_prob) for img in images])


def epoch_permutation(n, shuffle_seed, epoch=0):
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng((shuffle_seed, epoch)).permutation(n)


def iterate_batches(ds, batch_size, shuffle_seed=None, epoch=0):
    """Yield (images, labels) batches for one epoch; the last partial batch is kept."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    order = epoch_permutation(len(ds), shuffle_seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = torch.from_numpy(np.ascontiguousarray(order[start : start + batch_size]))
        yield ds.images[idx], ds.labels[idx]


def load_image_folder(root, size=None, split="folder"):
    """Read ``root/<class_name>/*.png|ppm`` into a LabeledDataset.

    Files are 8-bit RGB, converted to float32 in [0, 1]; if size is given the
    images are bilinearly resized to (size, size).
    """
    root = os.fspath(root)
    class_names = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not class_names:
        raise ConfigurationError(f"{root}: no class subdirectories")
    images, labels = [], []
    for label, name in enumerate(class_names):
        folder = os.path.join(root, name)
        for fname in sorted(os.listdir(folder)):
            if not fname.lower().endswith((".png", ".ppm")):
                continue
            with Image.open(os.path.join(folder, fname)) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            t = torch.from_numpy(arr).permute(2, 0, 1)
            if size is not None and t.shape[-2:] != (size, size):
                t = F.interpolate(
                    t.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False
                ).squeeze(0)
            images.append(t.clamp_(0, 1))
            labels.append(label)
    if not images:
        raise ConfigurationError(f"{root}: no .png/.ppm files found")
    return LabeledDataset(
        images=torch.stack(images),
        labels=torch.tensor(labels, dtype=torch.int64),
        class_names=tuple(class_names),
        split=split,
        seed=0,
    )


def save_image(tensor, path):
    """Write a (3, H, W) [0,1] tensor as an 8-bit RGB PNG/PPM file."""
    arr = (tensor.detach().clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)
