"""Target classifiers: the ``TargetModel`` interface and a small reference CNN."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "osnadv-classifier-v1"


class LoadError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


class TargetModel:
    """Differentiable classifier wrapper.

    Anything exposing ``logits(x) -> (B, c)`` for ``(B, 3, H, W)`` inputs in
    [0, 1] can act as a target. To adapt an external network, pass the module
    (and an optional preprocessing callable such as mean/std normalization)
    to this constructor; parameters are frozen and the module is put in
    eval mode so logits are deterministic.
    """

    def __init__(
        self,
        module: nn.Module,
        num_classes: int,
        preprocess: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
        name: str = "external",
    ):
        if num_classes < 2:
            raise ValueError("a classifier needs at least two classes")
        self.module = module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.num_classes = num_classes
        self.preprocess = preprocess
        self.name = name

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if self.preprocess is not None:
            x = self.preprocess(x)
        return self.module(x)

    __call__ = logits

    @torch.no_grad()
    def classify(self, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
        out = [self.logits(x[i:i + batch_size]).argmax(dim=1) for i in range(0, len(x), batch_size)]
        return torch.cat(out) if out else torch.empty(0, dtype=torch.long)

    @torch.no_grad()
    def accuracy(self, x, y) -> float:
        return (self.classify(x) == y).float().mean().item()


class ReferenceCNN(nn.Module):
    """Four 3x3 conv blocks (conv, optional batch norm, ReLU) and two linear layers."""

    def __init__(self, num_classes: int = 10, width: int = 32, input_size: int = 32, batch_norm: bool = True):
        super().__init__()
        if input_size % 4:
            raise ValueError("input_size must be divisible by 4")
        w = width

        def block(cin, cout):
            norm = [nn.BatchNorm2d(cout)] if batch_norm else []
            return [nn.Conv2d(cin, cout, 3, padding=1), *norm, nn.ReLU(inplace=True)]

        self.features = nn.Sequential(
            *block(3, w),
            *block(w, w),
            nn.MaxPool2d(2),
            *block(w, 2 * w),
            *block(2 * w, 2 * w),
            nn.MaxPool2d(2),
        )
        side = input_size // 4
        self.classifier = nn.Sequential(
            nn.Flatten(),
            nn.Linear(2 * w * side * side, 128),
            nn.ReLU(inplace=True),
            nn.Linear(128, num_classes),
        )

    def forward(self, x):
        return self.classifier(self.features(x * 2.0 - 1.0))


ARCHITECTURES = {"refcnn": ReferenceCNN}


@dataclass
class ClassifierSpec:
    architecture: str = "refcnn"
    num_classes: int = 10
    input_size: int = 32
    checkpoint: Optional[str] = None
    width: int = 32
    batch_norm: bool = True

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


def build_module(spec: ClassifierSpec) -> nn.Module:
    try:
        cls = ARCHITECTURES[spec.architecture]
    except KeyError:
        raise LoadError(f"unknown architecture {spec.architecture!r}") from None
    return cls(num_classes=spec.num_classes, width=spec.width, input_size=spec.input_size, batch_norm=spec.batch_norm)


def save_classifier(model: TargetModel, spec: ClassifierSpec, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "architecture": spec.architecture,
            "num_classes": spec.num_classes,
            "input_size": spec.input_size,
            "width": spec.width,
            "batch_norm": spec.batch_norm,
            "state_dict": model.module.state_dict(),
        },
        path,
    )


def load_classifier(spec: ClassifierSpec) -> TargetModel:
    """Build the classifier named by ``spec``, restoring weights if a checkpoint is given."""
    if spec.checkpoint is None:
        return TargetModel(build_module(spec), spec.num_classes, name=spec.architecture)
    try:
        blob = torch.load(spec.checkpoint, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as exc:
        raise LoadError(f"cannot read classifier checkpoint {spec.checkpoint}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise LoadError(f"{spec.checkpoint} is not a classifier checkpoint")
    if blob["num_classes"] != spec.num_classes:
        raise LoadError(
            f"checkpoint has {blob['num_classes']} classes, spec expects {spec.num_classes}"
        )
    if blob["architecture"] != spec.architecture or blob["input_size"] != spec.input_size:
        raise LoadError("checkpoint architecture/input size does not match the requested classifier")
    spec = ClassifierSpec(
        spec.architecture,
        spec.num_classes,
        spec.input_size,
        spec.checkpoint,
        blob.get("width", spec.width),
        blob.get("batch_norm", spec.batch_norm),
    )
    module = build_module(spec)
    try:
        module.load_state_dict(blob["state_dict"])
    except RuntimeError as exc:
        raise LoadError(f"weights do not fit {spec.architecture}: {exc}") from exc
    return TargetModel(module, spec.num_classes, name=spec.architecture)


@dataclass
class CNNTrainReport:
    train_accuracy: float
    val_accuracy: float
    epochs: int
    seconds: float
    history: list = field(default_factory=list)


def train_reference_cnn(
    x: torch.Tensor,
    y: torch.Tensor,
    seed: int = 0,
    spec: Optional[ClassifierSpec] = None,
    epochs: int = 8,
    lr: float = 3e-4,
    batch_size: int = 128,
    val_fraction: float = 0.1,
    min_accuracy: Optional[float] = 0.8,
    checkpoint: Optional[str] = None,
):
    """Train the reference CNN; returns ``(TargetModel, CNNTrainReport)``.

    Raises :class:`TrainingError` when held-out accuracy ends below
    ``min_accuracy`` (pass ``None`` to skip the check).
    """
    spec = spec or ClassifierSpec(num_classes=int(y.max()) + 1, input_size=x.shape[-1])
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    perm = torch.randperm(len(x), generator=gen)
    n_val = max(1, int(round(len(x) * val_fraction)))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    xt, yt, xv, yv = x[tr_idx], y[tr_idx], x[val_idx], y[val_idx]

    module = build_module(spec)
    opt = torch.optim.Adam(module.parameters(), lr=lr)
    start = time.perf_counter()
    history = []
    for epoch in range(epochs):
        module.train()
        order = torch.randperm(len(xt), generator=gen)
        total = 0.0
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            loss = F.cross_entropy(module(xt[idx]), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        module.eval()
        with torch.no_grad():
            val_acc = (module(xv).argmax(1) == yv).float().mean().item()
        history.append({"epoch": epoch + 1, "train_loss": total / len(xt), "val_accuracy": val_acc})
        log.info("cnn epoch %d loss %.4f val_acc %.4f", epoch + 1, total / len(xt), val_acc)

    model = TargetModel(module, spec.num_classes, name=spec.architecture)
    report = CNNTrainReport(
        train_accuracy=model.accuracy(xt, yt),
        val_accuracy=model.accuracy(xv, yv),
        epochs=epochs,
        seconds=time.perf_counter() - start,
        history=history,
    )
    if min_accuracy is not None and report.val_accuracy < min_accuracy:
        raise TrainingError(
            f"held-out accuracy {report.val_accuracy:.3f} below floor {min_accuracy:.3f} "
            f"after {epochs} epochs ({report.seconds:.0f}s); last epochs: {history[-3:]}"
        )
    if checkpoint is not None:
        save_classifier(model, spec, checkpoint)
    return model, report
