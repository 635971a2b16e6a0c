"""The simulated-channel network: an SCSE U-Net with a residual shortcut
followed by the differentiable JPEG layer.

The U-Net pads its input (replicate) to a multiple of ``2**depth`` and crops
the result, so any image size is accepted.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .jpeg_codec import RoundingMode, jpeg_layer

CHECKPOINT_HEADER = "SIO-v1"


class ConfigError(ValueError):
    pass


# --- squeeze-and-excitation primitives ---------------------------------------------


@dataclass
class SSEParams:
    """1x1 conv ``C -> 1``: ``weight`` of shape ``(1, C, 1, 1)`` and ``bias`` ``(1,)``."""

    weight: torch.Tensor
    bias: torch.Tensor


@dataclass
class CSEParams:
    """Gating MLP ``C -> C/r -> C``."""

    w2: torch.Tensor
    b2: torch.Tensor
    w3: torch.Tensor
    b3: torch.Tensor


def _as_batch(u):
    if u.dim() == 3:
        return u.unsqueeze(0), True
    if u.dim() != 4:
        raise ValueError(f"feature map must be (C, H, W) or (B, C, H, W), got {tuple(u.shape)}")
    return u, False


def sse_forward(u: torch.Tensor, p: SSEParams) -> torch.Tensor:
    """Spatial gate ``sigmoid(W1 * U)`` broadcast over channels."""
    u4, squeeze = _as_batch(u)
    if p.weight.shape != (1, u4.shape[1], 1, 1):
        raise ValueError(f"SSE kernel {tuple(p.weight.shape)} does not fit {u4.shape[1]} channels")
    out = torch.sigmoid(F.conv2d(u4, p.weight, p.bias)) * u4
    return out[0] if squeeze else out


def cse_forward(u: torch.Tensor, p: CSEParams) -> torch.Tensor:
    """Channel gate from global average pooling through a bottleneck MLP."""
    u4, squeeze = _as_batch(u)
    c = u4.shape[1]
    if p.w2.shape[1] != c or p.w3.shape[0] != c:
        raise ValueError(f"CSE weights do not fit {c} channels")
    v1 = u4.mean(dim=(2, 3))
    v3 = torch.sigmoid(F.linear(F.relu(F.linear(v1, p.w2, p.b2)), p.w3, p.b3))
    out = u4 * v3[:, :, None, None]
    return out[0] if squeeze else out


def scse_forward(u: torch.Tensor, sse: SSEParams, cse: CSEParams) -> torch.Tensor:
    """Elementwise max of the spatial and channel recalibrations."""
    return torch.maximum(sse_forward(u, sse), cse_forward(u, cse))


def reduced_channels(channels: int, r: int, min_hidden: int = 4) -> int:
    """Hidden width of the channel gate; the ratio is capped so it stays >= ``min_hidden``."""
    r_eff = max(1, min(r, channels // min_hidden))
    if channels % r_eff:
        raise ConfigError(f"{channels} channels not divisible by reduction ratio {r_eff}")
    return channels // r_eff


class SSEBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, 1)

    def params(self):
        return SSEParams(self.conv.weight, self.conv.bias)

    def forward(self, u):
        return sse_forward(u, self.params())


class CSEBlock(nn.Module):
    def __init__(self, channels, r=16):
        super().__init__()
        hidden = reduced_channels(channels, r)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def params(self):
        return CSEParams(self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)

    def forward(self, u):
        return cse_forward(u, self.params())


class SCSEBlock(nn.Module):
    def __init__(self, channels, r=16):
        super().__init__()
        self.sse = SSEBlock(channels)
        self.cse = CSEBlock(channels, r)

    def forward(self, u):
        return scse_forward(u, self.sse.params(), self.cse.params())


def conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(inplace=True),
    )


# --- network ----------------------------------------------------------------------


@dataclass
class SIOConfig:
    """Architecture and JPEG-tail settings.

    The three ablation switches reproduce the compared variants:
    ``residual=False`` drops the input shortcut, ``jpeg_tail=False`` drops
    the JPEG layer and ``scse=False`` replaces every SE block with identity.
    """

    depth: int = 4
    widths: tuple = (64, 128, 256, 512)
    q: int = 92
    mode: str = "cube"
    r: int = 16
    residual: bool = True
    jpeg_tail: bool = True
    scse: bool = True
    upsample: str = "bilinear"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != self.depth:
            raise ConfigError(f"need {self.depth} widths, got {len(self.widths)}")
        if not 1 <= int(self.q) <= 100:
            raise ConfigError(f"q must lie in [1, 100], got {self.q}")
        self.mode = str(RoundingMode.parse(self.mode))

    @property
    def rounding(self) -> RoundingMode:
        return RoundingMode.parse(self.mode)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class SCSEUNet(nn.Module):
    """Encoders use conv + CSE, decoders conv + SCSE; output has 3 channels."""

    def __init__(self, cfg: SIOConfig, in_channels: int = 3):
        super().__init__()
        se = (lambda c: CSEBlock(c, cfg.r)) if cfg.scse else (lambda c: nn.Identity())
        sc = (lambda c: SCSEBlock(c, cfg.r)) if cfg.scse else (lambda c: nn.Identity())
        self.depth = cfg.depth
        self.encoders = nn.ModuleList()
        cin = in_channels
        for w in cfg.widths:
            self.encoders.append(nn.Sequential(conv_block(cin, w), se(w)))
            cin = w
        bottom = cfg.widths[-1] * 2
        self.bottleneck = nn.Sequential(conv_block(cin, bottom), se(bottom))
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        cin = bottom
        for w in reversed(cfg.widths):
            self.ups.append(nn.ConvTranspose2d(cin, w, 2, stride=2))
            self.decoders.append(nn.Sequential(conv_block(2 * w, w), sc(w)))
            cin = w
        self.head = nn.Conv2d(cfg.widths[0], 3, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        m = 2 ** self.depth
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)[..., :h, :w]


class SIOModel(nn.Module):
    """``jpeg(clamp(unet(x) + x, 0, 1), q)`` with ablation switches from the config."""

    def __init__(self, config: Optional[SIOConfig] = None):
        super().__init__()
        self.config = config or SIOConfig()
        self.unet = SCSEUNet(self.config)
        if self.config.residual:
            # untrained model == pure JPEG layer
            nn.init.zeros_(self.unet.head.weight)
            nn.init.zeros_(self.unet.head.bias)

    def noise(self, x: torch.Tensor) -> torch.Tensor:
        """The U-Net output before the shortcut and JPEG tail."""
        return self.unet(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.unet(x)
        if self.config.residual:
            out = out + x
        out = out.clamp(0.0, 1.0)
        if self.config.jpeg_tail:
            out = jpeg_layer(out, self.config.q, self.config.rounding, upsample=self.config.upsample)
        return out


def sio_forward(model: SIOModel, x: torch.Tensor) -> torch.Tensor:
    return model(x)


def save_sio(model: SIOModel, path, extra: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "header": CHECKPOINT_HEADER,
            "config": model.config.to_dict(),
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_sio(path) -> SIOModel:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("header") != CHECKPOINT_HEADER:
        raise ConfigError(f"{path} is not an {CHECKPOINT_HEADER} checkpoint")
    model = SIOModel(SIOConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    return model.eval()


def frozen(model: SIOModel) -> SIOModel:
    """Eval-mode model with gradients disabled on parameters (inputs still differentiable)."""
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
