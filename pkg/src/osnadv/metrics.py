"""Per-image fidelity metrics on the 0-255 scale."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

PSNR_CAP = 100.0
DATA_RANGE = 255.0


def _batch(a):
    return a.unsqueeze(0) if a.dim() == 3 else a


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image MSE of two [0, 1]-scale tensors, measured in 0-255 units."""
    a, b = _batch(a), _batch(b)
    return ((a - b) * 255.0).pow(2).reshape(len(a), -1).mean(dim=1)


def psnr_from_mse(m: torch.Tensor, cap: float = PSNR_CAP) -> torch.Tensor:
    m = torch.as_tensor(m, dtype=torch.float64)
    out = 10.0 * torch.log10(DATA_RANGE**2 / m.clamp_min(1e-300))
    return torch.where(m > 0, out.clamp(max=cap), torch.full_like(out, cap))


def psnr(a: torch.Tensor, b: torch.Tensor, cap: float = PSNR_CAP) -> torch.Tensor:
    return psnr_from_mse(mse(a, b), cap)


def _gaussian_window(size=7, sigma=1.5, dtype=torch.float64):
    ax = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: torch.Tensor, b: torch.Tensor, win_size: int = 7, sigma: float = 1.5, window: str = "gaussian") -> torch.Tensor:
    """Per-image SSIM (mean over channels and valid window positions).

    Inputs are on the [0, 1] scale and are compared after multiplying by 255
    with ``data_range=255``; signed inputs (noise residuals) are allowed.
    Uses a ``win_size`` Gaussian window (or a flat one with
    ``window="uniform"``) and the usual ``K1=0.01, K2=0.03``.
    """
    a, b = _batch(a).double() * 255.0, _batch(b).double() * 255.0
    if a.shape != b.shape:
        raise ValueError("ssim inputs must have the same shape")
    if min(a.shape[-2:]) < win_size:
        raise ValueError(f"images smaller than the {win_size}x{win_size} window")
    c = a.shape[1]
    if window == "gaussian":
        k = _gaussian_window(win_size, sigma)
    elif window == "uniform":
        k = torch.full((win_size, win_size), 1.0 / win_size**2, dtype=torch.float64)
    else:
        raise ValueError(f"unknown window {window!r}")
    w = k.to(a.device).expand(c, 1, win_size, win_size)
    filt = lambda t: F.conv2d(t, w, groups=c)
    mu_a, mu_b = filt(a), filt(b)
    # unbiased covariance like the reference implementation
    n = win_size * win_size
    cov = n / (n - 1)
    saa = cov * (filt(a * a) - mu_a**2)
    sbb = cov * (filt(b * b) - mu_b**2)
    sab = cov * (filt(a * b) - mu_a * mu_b)
    c1, c2 = (0.01 * DATA_RANGE) ** 2, (0.03 * DATA_RANGE) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2))
    return s.reshape(len(a), -1).mean(dim=1)


def psnr_value(m: float, cap: float = PSNR_CAP) -> float:
    return cap if m <= 0 else min(cap, 10.0 * math.log10(DATA_RANGE**2 / m))
