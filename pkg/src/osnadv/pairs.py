"""Upload/download image pairs and their on-disk layout.

A pair directory looks like::

    <root>/uploaded/00000.png
    <root>/transmitted/00000.png
    <root>/manifest.jsonl

Each manifest line is ``{uploaded_path, transmitted_path, attack, channel_id, est_qf}``
with paths relative to ``<root>``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import torch

from .data import load_image, save_png

log = logging.getLogger(__name__)

MANIFEST = "manifest.jsonl"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class TransmissionPair:
    """An image before (``uploaded``) and after (``transmitted``) a channel, both ``(3, H, W)``."""

    uploaded: torch.Tensor
    transmitted: torch.Tensor
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.uploaded.shape != self.transmitted.shape:
            raise ValueError(
                f"pair shapes differ: {tuple(self.uploaded.shape)} vs {tuple(self.transmitted.shape)}"
            )
        for name, t in (("uploaded", self.uploaded), ("transmitted", self.transmitted)):
            if t.numel() and (t.min() < 0 or t.max() > 1):
                raise ValueError(f"{name} image has values outside [0, 1]")


class PairDataset(Sequence):
    def __init__(self, pairs: Iterable[TransmissionPair] = ()):
        self.pairs = list(pairs)

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return PairDataset(self.pairs[i])
        return self.pairs[i]

    def subset(self, indices) -> "PairDataset":
        return PairDataset(self.pairs[int(i)] for i in indices)

    def tensors(self):
        """Stacked ``(uploaded, transmitted)`` batches; requires equal image sizes."""
        if not self.pairs:
            raise ValueError("empty pair dataset")
        up = torch.stack([p.uploaded for p in self.pairs])
        tr = torch.stack([p.transmitted for p in self.pairs])
        return up, tr

    @classmethod
    def from_tensors(cls, uploaded, transmitted, meta: Optional[list] = None) -> "PairDataset":
        meta = meta or [{} for _ in range(len(uploaded))]
        return cls(TransmissionPair(u, t, dict(m)) for u, t, m in zip(uploaded, transmitted, meta))

    def save(self, root) -> Path:
        root = Path(root)
        (root / "uploaded").mkdir(parents=True, exist_ok=True)
        (root / "transmitted").mkdir(parents=True, exist_ok=True)
        with open(root / MANIFEST, "w") as fh:
            for i, p in enumerate(self.pairs):
                up = f"uploaded/{i:05d}.png"
                tr = f"transmitted/{i:05d}.png"
                save_png(p.uploaded, root / up)
                save_png(p.transmitted, root / tr)
                rec = {
                    "uploaded_path": up,
                    "transmitted_path": tr,
                    "attack": p.meta.get("attack"),
                    "channel_id": p.meta.get("channel_id"),
                    "est_qf": p.meta.get("est_qf"),
                }
                rec.update({k: v for k, v in p.meta.items() if k not in rec})
                fh.write(json.dumps(rec) + "\n")
        return root / MANIFEST

    @classmethod
    def load(cls, root) -> "PairDataset":
        root = Path(root)
        manifest = root / MANIFEST if root.is_dir() else root
        base = manifest.parent
        pairs = []
        with open(manifest) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                try:
                    up = load_image(base / rec.pop("uploaded_path"))
                    tr = load_image(base / rec.pop("transmitted_path"))
                except (OSError, KeyError) as exc:
                    log.warning("manifest line %d skipped: %s", lineno, exc)
                    continue
                pairs.append(TransmissionPair(up, tr, rec))
        if not pairs:
            raise ValueError(f"no readable pairs in {manifest}")
        return cls(pairs)


def ingest_pair_dirs(uploaded_dir, transmitted_dir, channel_id: str = "external") -> PairDataset:
    """Pair files by stem from two directories, e.g. images downloaded back from a real platform.

    Files present in only one directory, or with mismatched sizes, are skipped
    with a warning.
    """
    uploaded_dir, transmitted_dir = Path(uploaded_dir), Path(transmitted_dir)
    down = {p.stem: p for p in transmitted_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    pairs = []
    for p in sorted(uploaded_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        q = down.get(p.stem)
        if q is None:
            log.warning("no transmitted counterpart for %s", p.name)
            continue
        up, tr = load_image(p), load_image(q)
        if up.shape != tr.shape:
            log.warning("size mismatch for %s: %s vs %s", p.stem, tuple(up.shape), tuple(tr.shape))
            continue
        pairs.append(TransmissionPair(up, tr, {"channel_id": channel_id, "source": p.name}))
    if not pairs:
        raise ValueError(f"no matching pairs between {uploaded_dir} and {transmitted_dir}")
    return PairDataset(pairs)
