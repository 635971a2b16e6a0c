"""Fitting the simulated channel to observed upload/download pairs."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

from .metrics import mse, psnr_from_mse, ssim
from .pairs import PairDataset
from .sio_net import SIOConfig, SIOModel

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    max_epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    min_lr: float = 1e-6
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.max_epochs < 0 or self.batch_size < 1 or self.plateau_patience < 1:
            raise ValueError("max_epochs >= 0, batch_size >= 1 and plateau_patience >= 1 required")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


class PlateauHalver:
    """Multiply the lr by ``factor`` after ``patience`` epochs without a new best."""

    def __init__(self, optimizer, patience=10, factor=0.5):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, value: float) -> bool:
        """Record one epoch; returns True when the lr was reduced."""
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs < self.patience:
            return False
        for g in self.optimizer.param_groups:
            g["lr"] = g["lr"] * self.factor
        self.bad_epochs = 0
        return True


def _pair_batches(pairs):
    if isinstance(pairs, PairDataset):
        return pairs.tensors()
    if isinstance(pairs, (list, tuple)) and pairs and hasattr(pairs[0], "uploaded"):
        return PairDataset(pairs).tensors()
    up, tr = pairs
    return up, tr


def training_loss(model, batch) -> torch.Tensor:
    """Mean over the batch of the per-image L2 distance between channel output and model output.

    ``batch`` is a list of pairs, a :class:`PairDataset`, or an
    ``(uploaded, transmitted)`` tensor tuple.
    """
    if batch is None or len(batch) == 0 or (isinstance(batch, tuple) and len(batch[0]) == 0):
        raise ValueError("training_loss needs a nonempty batch")
    up, tr = _pair_batches(batch)
    diff = (tr - model(up)).reshape(len(up), -1)
    return diff.norm(dim=1).mean()


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    seconds: float = 0.0
    stopped: str = ""

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "lr"])
            w.writeheader()
            w.writerows(self.rows)


def split_indices(n: int, val_fraction: float, seed: int):
    """Seeded ``(train, val)`` index split with at least one validation item."""
    if n < 2:
        raise ValueError("need at least two pairs to hold out a validation split")
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    n_val = min(n - 1, max(1, int(round(n * val_fraction))))
    return perm[n_val:], perm[:n_val]


@torch.no_grad()
def _eval_loss(model, up, tr, batch_size):
    total = 0.0
    for i in range(0, len(up), batch_size):
        total += training_loss(model, (up[i:i + batch_size], tr[i:i + batch_size])).item() * len(up[i:i + batch_size])
    return total / len(up)


def train_sio(
    pairs,
    cfg: Optional[TrainConfig] = None,
    sio_config: Optional[SIOConfig] = None,
    model: Optional[SIOModel] = None,
    log_path=None,
    time_budget: Optional[float] = None,
):
    """Adam on :func:`training_loss` with a plateau lr schedule.

    Returns ``(model, TrainLog)``. The returned model carries the parameters
    of the epoch with the lowest validation loss. Training stops at
    ``max_epochs``, when the lr drops below ``min_lr``, or after
    ``time_budget`` seconds.
    """
    cfg = cfg or TrainConfig()
    up, tr = _pair_batches(pairs)
    tr_idx, val_idx = split_indices(len(up), cfg.val_fraction, cfg.seed)
    xt, yt, xv, yv = up[tr_idx], tr[tr_idx], up[val_idx], tr[val_idx]

    torch.manual_seed(cfg.seed)
    if model is None:
        model = SIOModel(sio_config or SIOConfig())
    train_log = TrainLog()
    if cfg.max_epochs == 0:
        train_log.stopped = "max_epochs"
        return model.eval(), train_log

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    sched = PlateauHalver(opt, cfg.plateau_patience, cfg.plateau_factor)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    best_state = copy.deepcopy(model.state_dict())
    start = time.perf_counter()

    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = torch.randperm(len(xt), generator=gen)
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            loss = training_loss(model, (xt[idx], yt[idx]))
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}, batch {i // cfg.batch_size}, lr {sched.lr:g}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        model.eval()
        val = _eval_loss(model, xv, yv, cfg.batch_size)
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        lr_used = sched.lr
        train_log.rows.append({"epoch": epoch, "train_loss": total / len(xt), "val_loss": val, "lr": lr_used})
        if val < train_log.best_val:
            train_log.best_val, train_log.best_epoch = val, epoch
            best_state = copy.deepcopy(model.state_dict())
        log.info("sio epoch %d train %.5f val %.5f lr %.2e", epoch, total / len(xt), val, lr_used)
        sched.step(val)
        if sched.lr < cfg.min_lr:
            train_log.stopped = "min_lr"
            break
        if time_budget is not None and time.perf_counter() - start > time_budget:
            train_log.stopped = "time_budget"
            break
    else:
        train_log.stopped = "max_epochs"

    model.load_state_dict(best_state)
    train_log.seconds = time.perf_counter() - start
    if log_path is not None:
        train_log.write_csv(log_path)
    return model.eval(), train_log


@dataclass
class SimMetrics:
    psnr: float
    ssim: float
    mse: float
    n: int

    def to_dict(self):
        return {"psnr": self.psnr, "ssim": self.ssim, "mse": self.mse, "n": self.n}


def noise_metrics(sim_noise: torch.Tensor, true_noise: torch.Tensor) -> SimMetrics:
    """Mean PSNR/SSIM/MSE between simulated and true noise residuals (0-255 scale)."""
    if len(sim_noise) == 0:
        raise ValueError("no images to compare")
    m = mse(sim_noise, true_noise)
    return SimMetrics(
        psnr=psnr_from_mse(m).mean().item(),
        ssim=ssim(sim_noise, true_noise).mean().item(),
        mse=m.mean().item(),
        n=len(sim_noise),
    )


@torch.no_grad()
def validate_sim(model, pairs, batch_size: int = 64) -> SimMetrics:
    """Compare ``model(x) - x`` with ``transmitted - x`` over a pair set."""
    if pairs is None or len(pairs) == 0:
        raise ValueError("validate_sim needs at least one pair")
    up, tr = _pair_batches(pairs)
    sim = torch.cat([model(up[i:i + batch_size]) for i in range(0, len(up), batch_size)])
    return noise_metrics(sim - up, tr - up)
