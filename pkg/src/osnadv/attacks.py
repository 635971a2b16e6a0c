"""Vanilla and channel-robust adversarial attacks.

Every attack takes a batch ``x`` of shape ``(B, ...)`` in [0, 1], labels
``y`` of shape ``(B,)``, a target with ``logits`` and ``classify`` methods, and
an optional surrogate channel ``sio`` (any differentiable image-to-image
callable). The robust objectives mix the loss on the bare target with the
loss on ``target(sio(x))`` using weight ``lam``; with ``lam == 1`` or
``sio is None`` the surrogate branch is skipped and the attack is the vanilla
one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import torch
import torch.nn.functional as F

__all__ = [
    "AttackConfig",
    "AEResult",
    "PreconditionError",
    "TABLE1_DEFAULTS",
    "default_config",
    "margin_f",
    "tanh_reparam",
    "inverse_reparam",
    "lagrange_loss",
    "joint_ce",
    "rcw_attack",
    "rfgsm",
    "rpgd",
    "rmifgsm",
    "fgsm",
    "pgd",
    "mifgsm",
    "cw",
    "ATTACKS",
    "run_attack",
]

EPS_CLAMP = 1e-6


class PreconditionError(ValueError):
    """The clean input is not classified correctly by the target."""


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters shared by all attacks. Budgets are on the [0, 1] scale.

    ``alpha=None`` resolves to 2/255 for PGD and ``epsilon / T`` for MIFGSM.
    ``lr`` is the Adam step used by the Lagrange-form attack.
    """

    epsilon: float = 3 / 255
    alpha: Optional[float] = None
    T: int = 40
    mu: float = 1.0
    lam: float = 1.0
    c: float = 1.0
    k: float = 0.0
    lr: float = 0.01
    seed: int = 0
    success_on: str = "clean"
    momentum_norm: str = "grad"
    rebase: str = "origin"

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lambda must lie in (0, 1], got {self.lam}")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.success_on not in ("clean", "transmitted"):
            raise ValueError("success_on must be 'clean' or 'transmitted'")
        if self.momentum_norm not in ("grad", "loss"):
            raise ValueError("momentum_norm must be 'grad' or 'loss'")
        if self.rebase not in ("origin", "previous"):
            raise ValueError("rebase must be 'origin' or 'previous'")

    def with_(self, **changes) -> "AttackConfig":
        return replace(self, **changes)


# Parameters used to generate training AEs (epsilon from the 0-255 scale).
TABLE1_DEFAULTS = {
    "fgsm": AttackConfig(epsilon=3 / 255, T=1),
    "pgd": AttackConfig(epsilon=3 / 255, alpha=2 / 255, T=40),
    "mifgsm": AttackConfig(epsilon=3 / 255, T=5, mu=1.0),
    "cw": AttackConfig(c=1.0, k=0.0, T=40),
}


def default_config(method: str, **overrides) -> AttackConfig:
    try:
        base = TABLE1_DEFAULTS[method]
    except KeyError:
        raise ValueError(f"unknown attack {method!r}") from None
    return base.with_(**overrides)


@dataclass
class AEResult:
    """Batch of adversarial examples with per-image bookkeeping."""

    adversarial: torch.Tensor
    success_clean: torch.Tensor
    l2: torch.Tensor
    linf: torch.Tensor
    iterations_used: torch.Tensor
    found: Optional[torch.Tensor] = None
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.adversarial)

    @staticmethod
    def cat(results: list["AEResult"]) -> "AEResult":
        found = None
        if all(r.found is not None for r in results):
            found = torch.cat([r.found for r in results])
        return AEResult(
            adversarial=torch.cat([r.adversarial for r in results]),
            success_clean=torch.cat([r.success_clean for r in results]),
            l2=torch.cat([r.l2 for r in results]),
            linf=torch.cat([r.linf for r in results]),
            iterations_used=torch.cat([r.iterations_used for r in results]),
            found=found,
        )


def _flat(t: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape[0], -1)


def _finish(x, x_adv, y, target, iters, found=None) -> AEResult:
    x_adv = x_adv.detach()
    delta = _flat(x_adv - x)
    with torch.no_grad():
        success = target.classify(x_adv) != y
    return AEResult(
        adversarial=x_adv,
        success_clean=success,
        l2=delta.norm(dim=1),
        linf=delta.abs().max(dim=1).values,
        iterations_used=torch.as_tensor(iters, dtype=torch.long).expand(len(x)).clone(),
        found=found,
    )


def _check_clean(x, y, target):
    with torch.no_grad():
        wrong = (target.classify(x) != y).nonzero().flatten()
    if len(wrong):
        raise PreconditionError(
            f"{len(wrong)} clean input(s) already misclassified, e.g. index {wrong[:5].tolist()}"
        )


def _uses_sio(sio, lam) -> bool:
    return sio is not None and lam < 1.0


# --- margin / reparameterization / losses -------------------------------------------


def margin_f(z: torch.Tensor, y, k: float = 0.0) -> torch.Tensor:
    """``max(Z[y] - max_{i != y} Z[i], -k)`` per row; non-positive iff misclassified."""
    z = torch.as_tensor(z)
    squeeze = z.dim() == 1
    if squeeze:
        z = z.unsqueeze(0)
    y = torch.as_tensor(y, dtype=torch.long, device=z.device).reshape(-1)
    c = z.shape[1]
    if ((y < 0) | (y >= c)).any():
        raise ValueError(f"labels must lie in [0, {c})")
    true = z.gather(1, y[:, None]).squeeze(1)
    other = z.masked_fill(F.one_hot(y, c).bool(), float("-inf")).max(dim=1).values
    out = torch.clamp(true - other, min=-k)
    return out[0] if squeeze else out


def tanh_reparam(w: torch.Tensor) -> torch.Tensor:
    return (1.0 + torch.tanh(w)) / 2.0


def inverse_reparam(x: torch.Tensor, eps: float = EPS_CLAMP) -> torch.Tensor:
    x = x.clamp(eps, 1.0 - eps)
    return 0.5 * torch.log(x / (1.0 - x))


def _l2_dist(a, b):
    sq = _flat(a - b).pow(2).sum(dim=1)
    # zero distance has no gradient direction; give it a zero subgradient
    return torch.where(sq > 0, sq.clamp_min(1e-30).sqrt(), torch.zeros_like(sq))


def lagrange_loss(w_t, w, y, target, sio=None, cfg: AttackConfig = AttackConfig(), reduction="sum"):
    """``c * ||h(w_t) - h(w)||_2 + lam * f(h(w_t)) + (1 - lam) * f(sio(h(w_t)))``."""
    x_t = tanh_reparam(w_t)
    loss = cfg.c * _l2_dist(x_t, tanh_reparam(w))
    loss = loss + cfg.lam * margin_f(target.logits(x_t), y, cfg.k)
    if _uses_sio(sio, cfg.lam):
        loss = loss + (1.0 - cfg.lam) * margin_f(target.logits(sio(x_t)), y, cfg.k)
    return _reduce(loss, reduction)


def _reduce(v, reduction):
    if reduction == "none":
        return v
    if reduction == "sum":
        return v.sum()
    if reduction == "mean":
        return v.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def joint_ce(x_t, y, target, sio=None, lam: float = 1.0, reduction="mean"):
    """``lam * CE(Z(x_t), y) + (1 - lam) * CE(Z(sio(x_t)), y)``."""
    loss = lam * F.cross_entropy(target.logits(x_t), y, reduction="none")
    if _uses_sio(sio, lam):
        loss = loss + (1.0 - lam) * F.cross_entropy(target.logits(sio(x_t)), y, reduction="none")
    return _reduce(loss, reduction)


def _ce_grad(x_t, y, target, sio, lam):
    x_t = x_t.detach().requires_grad_(True)
    losses = joint_ce(x_t, y, target, sio, lam, reduction="none")
    (grad,) = torch.autograd.grad(losses.sum(), x_t)
    return grad, losses.detach()


# --- gradient projection attacks ----------------------------------------------------


def rfgsm(x, y, target, sio=None, cfg: AttackConfig = TABLE1_DEFAULTS["fgsm"], check=True) -> AEResult:
    """Single signed-gradient step of size epsilon on the joint CE loss."""
    if check:
        _check_clean(x, y, target)
    grad, _ = _ce_grad(x, y, target, sio, cfg.lam)
    x_adv = torch.clamp(x + abs(cfg.epsilon) * grad.sign(), 0.0, 1.0)
    return _finish(x, x_adv, y, target, 1)


def _project(x_t, x, eps):
    return torch.min(torch.max(x_t, x - eps), x + eps).clamp(0.0, 1.0)


def rpgd(x, y, target, sio=None, cfg: AttackConfig = TABLE1_DEFAULTS["pgd"], check=True, trace=None) -> AEResult:
    """Projected signed-gradient ascent inside the epsilon ball and the unit box."""
    if check:
        _check_clean(x, y, target)
    alpha = abs(cfg.alpha if cfg.alpha is not None else 2 / 255)
    x_t = x.detach().clone()
    for _ in range(cfg.T):
        grad, _ = _ce_grad(x_t, y, target, sio, cfg.lam)
        x_t = _project(x_t + alpha * grad.sign(), x, cfg.epsilon)
        if trace is not None:
            trace.append(x_t)
    return _finish(x, x_t, y, target, cfg.T)


def rmifgsm(x, y, target, sio=None, cfg: AttackConfig = TABLE1_DEFAULTS["mifgsm"], check=True, trace=None) -> AEResult:
    """Momentum iterative FGSM on the joint CE loss.

    ``cfg.momentum_norm='loss'`` normalizes the gradient by the absolute loss
    value instead of the gradient L1 norm; ``cfg.rebase='previous'`` applies
    the clipped perturbation to the previous iterate instead of the clean image.
    """
    if check:
        _check_clean(x, y, target)
    alpha = abs(cfg.alpha if cfg.alpha is not None else cfg.epsilon / cfg.T)
    shape = (-1,) + (1,) * (x.dim() - 1)
    g = torch.zeros_like(x)
    x_t = x.detach().clone()
    for _ in range(cfg.T):
        grad, losses = _ce_grad(x_t, y, target, sio, cfg.lam)
        if cfg.momentum_norm == "grad":
            norm = _flat(grad).abs().sum(dim=1)
        else:
            norm = losses.abs()
        g = cfg.mu * g + grad / norm.clamp_min(1e-12).view(shape)
        stepped = x_t + alpha * g.sign()
        delta = torch.clamp(stepped - x, -cfg.epsilon, cfg.epsilon)
        base = x if cfg.rebase == "origin" else x_t
        x_t = torch.clamp(base + delta, 0.0, 1.0)
        if trace is not None:
            trace.append(x_t)
    return _finish(x, x_t, y, target, cfg.T)


# --- Lagrange-form attack -------------------------------------------------------------


def rcw_attack(x, y, target, sio=None, cfg: AttackConfig = TABLE1_DEFAULTS["cw"], check=True, trace=None) -> AEResult:
    """Best-so-far Adam descent on the Lagrange loss in tanh space.

    An iterate replaces the stored AE when its L2 distance to ``x`` shrinks
    and it fools the target (or ``target(sio(.))`` when
    ``cfg.success_on='transmitted'``). Each image stops early when its loss
    at a check point (every ``max(T // 10, 1)`` steps) exceeds the loss at
    the previous check point. Images never fooled are returned unchanged
    with ``found=False``.
    """
    if check:
        _check_clean(x, y, target)
    if cfg.success_on == "transmitted" and sio is None:
        raise ValueError("success_on='transmitted' requires a surrogate")
    b = len(x)
    shape = (-1,) + (1,) * (x.dim() - 1)
    w = inverse_reparam(x.detach())
    w_t = w.clone()
    m = torch.zeros_like(w)
    v = torch.zeros_like(w)
    steps = torch.zeros(b, dtype=x.dtype)
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8

    best_l2 = torch.full((b,), math.exp(10), dtype=x.dtype)
    best_x = x.detach().clone()
    found = torch.zeros(b, dtype=torch.bool)
    active = torch.ones(b, dtype=torch.bool)
    iters = torch.zeros(b, dtype=torch.long)
    last_check = torch.full((b,), float("inf"), dtype=x.dtype)
    interval = max(cfg.T // 10, 1)

    for t in range(cfg.T):
        w_t.requires_grad_(True)
        losses = lagrange_loss(w_t, w, y, target, sio, cfg, reduction="none")
        (g,) = torch.autograd.grad(losses.sum(), w_t)
        losses = losses.detach()
        w_t = w_t.detach()

        if t % interval == 0:
            stop = active & (losses > last_check)
            last_check = torch.where(active, losses, last_check)
            active = active & ~stop
            if not active.any():
                break

        mask = active.view(shape)
        steps = steps + active.to(x.dtype)
        m = torch.where(mask, beta1 * m + (1 - beta1) * g, m)
        v = torch.where(mask, beta2 * v + (1 - beta2) * g * g, v)
        bc1 = (1 - beta1 ** steps).clamp_min(1e-12).view(shape)
        bc2 = (1 - beta2 ** steps).clamp_min(1e-12).view(shape)
        update = cfg.lr * (m / bc1) / ((v / bc2).sqrt() + adam_eps)
        w_t = torch.where(mask, w_t - update, w_t)
        iters = iters + active.long()

        x_next = tanh_reparam(w_t)
        if trace is not None:
            trace.append(x_next)
        with torch.no_grad():
            judged = sio(x_next) if cfg.success_on == "transmitted" else x_next
            fooled = target.classify(judged) != y
        l2 = _flat(x_next - x).norm(dim=1)
        better = active & fooled & (l2 < best_l2)
        best_l2 = torch.where(better, l2, best_l2)
        best_x = torch.where(better.view(shape), x_next, best_x)
        found = found | better

    res = _finish(x, best_x, y, target, 0, found=found)
    res.iterations_used = iters
    return res


# --- vanilla counterparts --------------------------------------------------------------


def fgsm(x, y, target, cfg: AttackConfig = TABLE1_DEFAULTS["fgsm"], check=True) -> AEResult:
    return rfgsm(x, y, target, None, cfg.with_(lam=1.0), check=check)


def pgd(x, y, target, cfg: AttackConfig = TABLE1_DEFAULTS["pgd"], check=True, trace=None) -> AEResult:
    return rpgd(x, y, target, None, cfg.with_(lam=1.0), check=check, trace=trace)


def mifgsm(x, y, target, cfg: AttackConfig = TABLE1_DEFAULTS["mifgsm"], check=True, trace=None) -> AEResult:
    return rmifgsm(x, y, target, None, cfg.with_(lam=1.0), check=check, trace=trace)


def cw(x, y, target, cfg: AttackConfig = TABLE1_DEFAULTS["cw"], check=True, trace=None) -> AEResult:
    return rcw_attack(x, y, target, None, cfg.with_(lam=1.0), check=check, trace=trace)


ATTACKS: dict[str, Callable[..., AEResult]] = {
    "fgsm": rfgsm,
    "pgd": rpgd,
    "mifgsm": rmifgsm,
    "cw": rcw_attack,
}


def run_attack(method, x, y, target, sio=None, cfg: Optional[AttackConfig] = None, robust=True, batch_size=64, check=True) -> AEResult:
    """Run ``method`` over a dataset in chunks; ``robust=False`` drops the surrogate."""
    try:
        fn = ATTACKS[method]
    except KeyError:
        raise ValueError(f"unknown attack {method!r}; choose from {sorted(ATTACKS)}") from None
    cfg = cfg or TABLE1_DEFAULTS[method]
    if not robust:
        sio, cfg = None, cfg.with_(lam=1.0)
    if robust and cfg.lam < 1.0 and sio is None:
        raise ValueError("a robust attack with lam < 1 needs a surrogate model")
    parts = [
        fn(x[i:i + batch_size], y[i:i + batch_size], target, sio, cfg, check=check)
        for i in range(0, len(x), batch_size)
    ]
    return AEResult.cat(parts)
