"""Image datasets: a procedural 10-class 32x32 task plus PNG/CIFAR loaders."""

from __future__ import annotations

import pickle
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

CLASS_NAMES = (
    "disk",
    "square",
    "triangle",
    "ring",
    "cross",
    "hbars",
    "vbars",
    "ellipse",
    "pair",
    "checker",
)


def _soft(d, width=0.6):
    # anti-aliased inside test for a signed distance (negative = inside)
    return 1.0 / (1.0 + np.exp(np.clip(d / width, -30, 30)))


def _shape_mask(label, yy, xx, rng, size):
    cy, cx = rng.uniform(size * 0.35, size * 0.65, 2)
    r = rng.uniform(size * 0.18, size * 0.3)
    theta = rng.uniform(-0.3, 0.3)
    dy, dx = yy - cy, xx - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    if label == 0:
        d = np.hypot(u, v) - r
    elif label == 1:
        d = np.maximum(np.abs(u), np.abs(v)) - r * 0.85
    elif label == 2:
        # equilateral triangle, apex pointing down in image rows
        k = np.sqrt(3.0)
        a, b = np.abs(u), v + r * 0.4
        d = np.maximum(k * a + b - r * 1.2, -b) / 2.0
    elif label == 3:
        d = np.abs(np.hypot(u, v) - r * 0.8) - r * 0.25
    elif label == 4:
        arm = r * 0.3
        d = np.minimum(
            np.maximum(np.abs(u) - r, np.abs(v) - arm),
            np.maximum(np.abs(v) - r, np.abs(u) - arm),
        )
    elif label in (5, 6):
        along = v if label == 5 else u
        period = rng.uniform(4.5, 6.5)
        stripes = np.abs(((along / period) % 1.0) - 0.5) * period - period * 0.25
        box = np.maximum(np.abs(u), np.abs(v)) - r * 1.1
        d = np.maximum(stripes, box)
    elif label == 7:
        d = (np.hypot(u / (r * 1.25), v / (r * 0.45)) - 1.0) * r * 0.45
    elif label == 8:
        off = r * 0.6
        rr = r * 0.42
        d = np.minimum(np.hypot(u - off, v) - rr, np.hypot(u + off, v) - rr)
    else:
        cell = r * 0.55
        chk = np.sign(np.sin(np.pi * u / cell) * np.sin(np.pi * v / cell))
        box = np.maximum(np.abs(u), np.abs(v)) - r
        d = np.maximum(-chk * 0.8, box)
    return _soft(d)


def _background(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.15, 0.85, 3)
    grad = rng.normal(0, 0.2, (2, 3))
    bg = base + yy[..., None] * grad[0] + xx[..., None] * grad[1]
    # low-frequency clutter via upsampled noise
    coarse = rng.normal(0, 0.12, (4, 4, 3))
    clutter = np.asarray(
        Image.fromarray(((coarse + 1) * 127.5).clip(0, 255).astype(np.uint8)).resize(
            (size, size), Image.BICUBIC
        ),
        dtype=np.float64,
    ) / 127.5 - 1
    return bg + (clutter - clutter.mean()) * 0.8


def synthetic_image(
    label: int,
    rng: np.random.Generator,
    size: int = 32,
    min_contrast: float = 0.3,
    max_noise: float = 0.04,
    max_contrast: Optional[float] = None,
) -> np.ndarray:
    """One ``(size, size, 3)`` float image in [0, 1] of the given class.

    ``min_contrast`` is the smallest allowed per-channel gap between the
    shape color and the mean background color; ``max_noise`` bounds the
    std of the additive pixel noise. With ``max_contrast`` set, the largest
    per-channel gap is drawn uniformly from ``[min_contrast, max_contrast]``
    instead of leaving the shape color unconstrained.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    mask = _shape_mask(label, yy, xx, rng, size)[..., None]
    bg = _background(rng, size)
    mean = bg.mean(axis=(0, 1))
    if max_contrast is None:
        fg = rng.uniform(0.0, 1.0, 3)
        while np.abs(fg - mean).max() < min_contrast:
            fg = rng.uniform(0.0, 1.0, 3)
    else:
        w = rng.uniform(0.3, 1.0, 3)
        step = rng.uniform(min_contrast, max_contrast) * w / w.max() * rng.choice([-1.0, 1.0], 3)
        fg = mean + step
        # flip channels that would leave the unit range
        fg = np.where((fg < 0) | (fg > 1), mean - step, fg)
    img = bg * (1 - mask) + fg * mask
    img = img + rng.normal(0, rng.uniform(0.25, 1.0) * max_noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def make_synthetic(n: int, seed: int = 0, size: int = 32, num_classes: int = 10, **style):
    """Balanced procedural dataset as ``(images, labels)`` tensors.

    Images are ``(n, 3, size, size)`` float32 quantized to 8 bits, labels are
    int64. Deterministic in ``seed``. ``style`` is forwarded to
    :func:`synthetic_image`.
    """
    if not 2 <= num_classes <= len(CLASS_NAMES):
        raise ValueError(f"num_classes must be in [2, {len(CLASS_NAMES)}]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    imgs = np.stack([synthetic_image(int(c), rng, size, **style) for c in labels])
    imgs = np.round(imgs * 255) / 255
    x = torch.from_numpy(imgs.transpose(0, 3, 1, 2).astype(np.float32))
    return x, torch.from_numpy(labels.astype(np.int64))


def load_cifar10_batches(root, train: bool = True):
    """Read the python-pickle CIFAR-10 release from ``root`` if one is on disk."""
    root = Path(root)
    names = [f"data_batch_{i}" for i in range(1, 6)] if train else ["test_batch"]
    xs, ys = [], []
    for name in names:
        with open(root / name, "rb") as fh:
            batch = pickle.load(fh, encoding="bytes")
        xs.append(np.asarray(batch[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        ys.append(np.asarray(batch[b"labels"], dtype=np.int64))
    x = torch.from_numpy(np.concatenate(xs).astype(np.float32) / 255.0)
    return x, torch.from_numpy(np.concatenate(ys))


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """``(3, H, W)`` or ``(H, W, 3)`` tensor in [0, 1] to an HWC uint8 array."""
    arr = x.detach().cpu().double().numpy()
    if arr.ndim == 3 and arr.shape[0] == 3:
        arr = arr.transpose(1, 2, 0)
    return np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    """HWC uint8 array to a ``(3, H, W)`` float32 tensor in [0, 1]."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return torch.from_numpy(arr[..., :3].transpose(2, 0, 1).astype(np.float32) / 255.0)


def save_png(x: torch.Tensor, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(x)).save(path, format="PNG")


def load_image(path) -> torch.Tensor:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def load_image_dir(directory):
    """All PNG/JPEG images in a directory (sorted by name) as a batch tensor."""
    directory = Path(directory)
    paths = sorted(
        p for p in directory.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not paths:
        raise FileNotFoundError(f"no images in {directory}")
    return torch.stack([load_image(p) for p in paths]), paths
