"""Attack success before/after a channel, confidence levels, error analysis and defenses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .channel import decode_jpeg, encode_jpeg
from .data import from_uint8, to_uint8
from .metrics import mse


@dataclass
class EvalRecords:
    """Column-wise per-image evaluation records."""

    y: torch.Tensor
    pred: torch.Tensor
    pred_transmitted: torch.Tensor
    logits: torch.Tensor
    logits_transmitted: torch.Tensor
    l2: torch.Tensor
    linf: torch.Tensor

    def __post_init__(self):
        n = len(self.y)
        for name in ("pred", "pred_transmitted", "logits", "logits_transmitted", "l2", "linf"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has {len(getattr(self, name))} rows, expected {n}")
        c = self.logits.shape[1] if self.logits.dim() == 2 else None
        if c is not None and n and ((self.y < 0) | (self.y >= c)).any():
            raise ValueError(f"labels must lie in [0, {c})")

    def __len__(self):
        return len(self.y)

    def rows(self):
        for i in range(len(self)):
            yield {
                "index": i,
                "y": int(self.y[i]),
                "pred": int(self.pred[i]),
                "pred_transmitted": int(self.pred_transmitted[i]),
                "l2": float(self.l2[i]),
                "linf": float(self.linf[i]),
            }


@torch.no_grad()
def _logits(target, x, batch_size=256):
    return torch.cat([target.logits(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


@torch.no_grad()
def make_records(target, aes, transmitted, y, clean=None) -> EvalRecords:
    """Classify ``aes`` and their channel outputs as two separate forward passes."""
    z = _logits(target, aes)
    zt = _logits(target, transmitted)
    if clean is not None:
        delta = (aes - clean).reshape(len(aes), -1)
        l2, linf = delta.norm(dim=1), delta.abs().max(dim=1).values
    else:
        l2 = linf = torch.zeros(len(aes))
    return EvalRecords(y, z.argmax(1), zt.argmax(1), z, zt, l2, linf)


def asr(records: EvalRecords) -> dict:
    """Fraction fooled on the bare model (``ASR``) and after the channel (``ASR_prime``)."""
    n = len(records)
    if n == 0:
        raise ValueError("asr needs at least one record")
    n1 = int((records.pred != records.y).sum())
    n2 = int((records.pred_transmitted != records.y).sum())
    return {"ASR": n1 / n, "ASR_prime": n2 / n, "N": n, "N1": n1, "N2": n2}


def summarize(records: EvalRecords) -> dict:
    """One results-table row: ASR, ASR', mean L2 of the perturbation."""
    out = asr(records)
    out["avg_l2"] = float(records.l2.mean())
    out["avg_linf"] = float(records.linf.mean())
    return out


def acl_from_logits(z: torch.Tensor, y: torch.Tensor, v: bool = True) -> float:
    """Mean softmax probability of the true label (``v``) or of the top other label."""
    if len(z) == 0:
        raise ValueError("acl needs a nonempty set")
    p = F.softmax(z.double(), dim=1)
    if v:
        return p.gather(1, y[:, None]).mean().item()
    other = z.masked_fill(F.one_hot(y, z.shape[1]).bool(), float("-inf")).argmax(dim=1)
    return p.gather(1, other[:, None]).mean().item()


def acl(transmitted: torch.Tensor, labels: torch.Tensor, target, v: bool = True) -> float:
    if len(transmitted) == 0:
        raise ValueError("acl needs a nonempty set")
    return acl_from_logits(_logits(target, transmitted), labels, v)


@torch.no_grad()
def error_analysis(aes, y, channel: Callable, sio: Callable, target, transmitted=None, batch_size=64) -> dict:
    """Mean noise and simulation-error MSE (0-255 scale), split by post-channel success.

    Returns ``{"success": {...} or None, "fail": {...} or None}``; each split
    holds ``n``, ``osn_noise_mse`` = MSE(x* - channel(x*)) and
    ``sim_error_mse`` = MSE(sio(x*) - channel(x*)).
    """
    if len(aes) == 0:
        raise ValueError("error_analysis needs at least one AE")
    if transmitted is None:
        transmitted = channel(aes)
    sim = torch.cat([sio(aes[i:i + batch_size]) for i in range(0, len(aes), batch_size)])
    fooled = target.classify(transmitted) != y
    noise = mse(aes, transmitted)
    sim_err = mse(sim, transmitted)
    out = {}
    for name, mask in (("success", fooled), ("fail", ~fooled)):
        if mask.any():
            out[name] = {
                "n": int(mask.sum()),
                "osn_noise_mse": noise[mask].mean().item(),
                "sim_error_mse": sim_err[mask].mean().item(),
            }
        else:
            out[name] = None
    return out


# --- preprocessing defenses ------------------------------------------------------------


def bit_depth_reduce(x: torch.Tensor, bits: int) -> torch.Tensor:
    """Quantize to ``2**bits`` evenly spaced levels; ties round up."""
    if not 1 <= int(bits) <= 8:
        raise ValueError(f"bits must lie in [1, 8], got {bits}")
    levels = 2 ** int(bits) - 1
    return torch.floor(x.clamp(0, 1) * levels + 0.5) / levels


def jpeg_defense(x: torch.Tensor, qf: int = 75) -> torch.Tensor:
    """Real JPEG re-encode of each image (4:2:0)."""
    single = x.dim() == 3
    xs = x.unsqueeze(0) if single else x
    out = torch.stack([from_uint8(decode_jpeg(encode_jpeg(to_uint8(xi), qf))) for xi in xs]).to(x.dtype)
    return out[0] if single else out


def random_resize_pad(x: torch.Tensor, seed: int = 0, low: float = 0.9, high: float = 1.1) -> torch.Tensor:
    """Resize each image by a random factor in ``[low, high]`` and restore the original size.

    Shrunk images are zero-padded at a random offset; enlarged ones are
    cropped at a random offset. Deterministic given ``seed``.
    """
    single = x.dim() == 3
    xs = x.unsqueeze(0) if single else x
    rng = np.random.default_rng(seed)
    h, w = xs.shape[-2:]
    out = []
    for xi in xs:
        s = rng.uniform(low, high)
        nh, nw = max(1, round(h * s)), max(1, round(w * s))
        r = F.interpolate(xi[None], size=(nh, nw), mode="bilinear", align_corners=False)[0]
        canvas = torch.zeros_like(xi)
        if nh <= h and nw <= w:
            top, left = rng.integers(0, h - nh + 1), rng.integers(0, w - nw + 1)
            canvas[:, top:top + nh, left:left + nw] = r
        else:
            ph, pw = max(nh, h), max(nw, w)
            big = torch.zeros(xi.shape[0], ph, pw, dtype=xi.dtype)
            big[:, :nh, :nw] = r
            top, left = rng.integers(0, ph - h + 1), rng.integers(0, pw - w + 1)
            canvas = big[:, top:top + h, left:left + w].clone()
        out.append(canvas.clamp(0, 1))
    res = torch.stack(out)
    return res[0] if single else res


def parse_defense(text: Optional[str], seed: int = 0) -> Optional[Callable]:
    """``bitred:B``, ``jpeg:QF`` or ``rrp`` (optionally ``rrp:SEED``); ``None``/``none`` disables."""
    if text is None or text in ("", "none"):
        return None
    name, _, arg = text.partition(":")
    try:
        if name == "bitred":
            bits = int(arg or 4)
            bit_depth_reduce(torch.zeros(1), bits)
            return lambda x: bit_depth_reduce(x, bits)
        if name == "jpeg":
            qf = int(arg or 75)
            if not 1 <= qf <= 100:
                raise ValueError(f"jpeg quality {qf} outside [1, 100]")
            return lambda x: jpeg_defense(x, qf)
        if name == "rrp":
            s = int(arg) if arg else seed
            return lambda x: random_resize_pad(x, s)
    except ValueError as exc:
        raise ValueError(f"bad defense {text!r}: {exc}") from None
    raise ValueError(f"unknown defense {text!r}; use bitred:B, jpeg:QF or rrp")


def evaluate_aes(target, aes, y, channel: Callable, clean=None, defense: Optional[Callable] = None) -> EvalRecords:
    """AE -> channel -> optional defense -> classifier, plus the bare-model pass."""
    transmitted = channel(aes)
    if defense is not None:
        transmitted = defense(transmitted)
    return make_records(target, aes, transmitted, y, clean)
