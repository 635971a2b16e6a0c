"""Mock lossy channels built on a real JPEG codec (Pillow/libjpeg).

A channel applies, in order: truncation to 8-bit, optional downscale,
optional 3x3 enhancement filter, and a JPEG encode/decode round trip.
"""

from __future__ import annotations

import io
import logging
import random
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .attacks import TABLE1_DEFAULTS, AttackConfig, run_attack
from .data import from_uint8, to_uint8
from .jpeg_codec import estimate_qf, extract_quant_table
from .pairs import PairDataset, TransmissionPair

log = logging.getLogger(__name__)


class ChannelError(RuntimeError):
    pass


def sharpen_kernel(strength: float) -> np.ndarray:
    s = float(strength)
    return np.array([[0, -s, 0], [-s, 1 + 4 * s, -s], [0, -s, 0]], dtype=np.float64)


FILTERS = {"sharpen": sharpen_kernel}


@dataclass(frozen=True)
class ChannelSpec:
    id: str
    jpeg_qf: int
    resize: Optional[int] = None
    filter: Optional[str] = None
    filter_strength: float = 0.5
    subsampling: int = 2  # Pillow code: 0 = 4:4:4, 1 = 4:2:2, 2 = 4:2:0

    def __post_init__(self):
        if not 1 <= int(self.jpeg_qf) <= 100:
            raise ValueError(f"jpeg_qf must be in [1, 100], got {self.jpeg_qf}")
        if self.filter is not None and self.filter not in FILTERS:
            raise ValueError(f"unknown filter {self.filter!r}; choose from {sorted(FILTERS)}")
        if self.resize is not None and self.resize < 1:
            raise ValueError("resize target must be positive")

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        """Transmit an image or a batch and return decoded pixels only."""
        if x.dim() == 3:
            return transmit(self, x)[0]
        return transmit_batch(self, x)[0]


CHANNELS = {
    "mock-fb": ChannelSpec("mock-fb", jpeg_qf=80, filter="sharpen", filter_strength=0.5),
    "mock-alt": ChannelSpec("mock-alt", jpeg_qf=60),
}


def get_channel(name: str) -> ChannelSpec:
    """Preset by id, or ``jpeg:QF`` for a plain JPEG channel."""
    if name in CHANNELS:
        return CHANNELS[name]
    if name.startswith("jpeg:"):
        try:
            return ChannelSpec(name, jpeg_qf=int(name.split(":", 1)[1]))
        except ValueError as exc:
            raise ValueError(f"bad channel {name!r}: {exc}") from None
    raise ValueError(f"unknown channel {name!r}; choose from {sorted(CHANNELS)} or jpeg:QF")


def _apply_filter(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    padded = np.pad(arr.astype(np.float64), ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = arr.shape[:2]
    out = np.zeros((h, w, arr.shape[2]))
    for dy in range(3):
        for dx in range(3):
            if kernel[dy, dx]:
                out += kernel[dy, dx] * padded[dy:dy + h, dx:dx + w]
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def encode_jpeg(arr: np.ndarray, qf: int, subsampling: int = 2) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="JPEG", quality=int(qf), subsampling=subsampling)
    return buf.getvalue()


def decode_jpeg(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"))


def transmit(spec: ChannelSpec, x: torch.Tensor):
    """Send one ``(3, H, W)`` image through the channel; returns ``(image, jpeg_bytes)``."""
    if x.dim() != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {tuple(x.shape)}")
    try:
        arr = to_uint8(x)
        if spec.resize is not None and max(arr.shape[:2]) > spec.resize:
            h, w = arr.shape[:2]
            k = spec.resize / max(h, w)
            size = (max(1, round(w * k)), max(1, round(h * k)))
            arr = np.asarray(Image.fromarray(arr).resize(size, Image.BICUBIC))
        if spec.filter is not None:
            arr = _apply_filter(arr, FILTERS[spec.filter](spec.filter_strength))
        data = encode_jpeg(arr, spec.jpeg_qf, spec.subsampling)
        out = decode_jpeg(data)
    except (OSError, ValueError) as exc:
        raise ChannelError(f"{spec.id}: codec failure: {exc}") from exc
    return from_uint8(out).to(x.dtype), data


def transmit_batch(spec: ChannelSpec, x: torch.Tensor):
    """Batch version of :func:`transmit`; returns ``(images, list_of_bytes)``."""
    outs, blobs = zip(*(transmit(spec, xi) for xi in x)) if len(x) else ((), ())
    if not outs:
        return x.clone(), []
    return torch.stack(outs), list(blobs)


def quantize8(x: torch.Tensor) -> torch.Tensor:
    """What a lossless PNG save would store."""
    return torch.round(x.clamp(0, 1) * 255) / 255


def build_pairs(
    spec: ChannelSpec,
    x: torch.Tensor,
    y: torch.Tensor,
    target,
    attack_mix: Sequence[str],
    seed: int = 0,
    configs: Optional[dict] = None,
    batch_size: int = 64,
) -> PairDataset:
    """Attack each clean image with a method drawn uniformly from ``attack_mix`` and transmit it.

    ``configs`` maps method names to :class:`AttackConfig`; missing methods use
    the training defaults. Images the target already misclassifies, or for
    which the attack leaves the image unchanged, are skipped with a log entry.
    """
    if not attack_mix:
        raise ValueError("attack_mix must name at least one attack")
    configs = {**TABLE1_DEFAULTS, **(configs or {})}
    for m in attack_mix:
        if m not in configs:
            raise ValueError(f"unknown attack {m!r}")
    rng = random.Random(seed)
    choice = [rng.choice(list(attack_mix)) for _ in range(len(x))]

    correct = target.classify(x) == y
    for i in (~correct).nonzero().flatten().tolist():
        log.info("image %d skipped: misclassified before attack", i)

    uploaded: dict[int, tuple] = {}
    for method in dict.fromkeys(attack_mix):
        idx = [i for i, m in enumerate(choice) if m == method and correct[i]]
        if not idx:
            continue
        cfg: AttackConfig = configs[method].with_(seed=seed)
        res = run_attack(method, x[idx], y[idx], target, None, cfg, robust=False, batch_size=batch_size, check=False)
        adv = quantize8(res.adversarial)
        for j, i in enumerate(idx):
            if torch.equal(adv[j], quantize8(x[i])):
                log.info("image %d skipped: %s produced no perturbation", i, method)
                continue
            uploaded[i] = (adv[j], method)

    pairs = []
    for i in sorted(uploaded):
        adv, method = uploaded[i]
        out, data = transmit(spec, adv)
        meta = {
            "attack": method,
            "channel_id": spec.id,
            "est_qf": estimate_qf(extract_quant_table(data)),
            "index": i,
            "label": int(y[i]),
        }
        pairs.append(TransmissionPair(adv, out, meta))
    log.info("built %d pairs from %d images on %s", len(pairs), len(x), spec.id)
    return PairDataset(pairs)


@dataclass
class QFAnalysis:
    counts: dict
    argmax: int
    n_files: int
    skipped: list

    def to_dict(self):
        return {
            "counts": {str(k): v for k, v in sorted(self.counts.items())},
            "argmax": self.argmax,
            "n_files": self.n_files,
            "skipped": self.skipped,
        }


def analyze_qf(directory) -> QFAnalysis:
    """Histogram of estimated quality factors over the JPEG files in ``directory``.

    The most frequent QF is the maximum-likelihood pick; ties go to the higher QF.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    files = sorted(p for p in directory.iterdir() if p.is_file())
    counts: Counter = Counter()
    skipped = []
    for p in files:
        try:
            counts[estimate_qf(extract_quant_table(p.read_bytes()))] += 1
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", p.name, exc)
            skipped.append(p.name)
    if not counts:
        raise ValueError(f"no readable JPEG files in {directory}")
    top = max(counts.values())
    argmax = max(q for q, n in counts.items() if n == top)
    return QFAnalysis(dict(counts), argmax, sum(counts.values()), skipped)
