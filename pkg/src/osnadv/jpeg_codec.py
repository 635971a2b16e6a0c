"""JPEG quantization machinery and a differentiable JPEG layer.

Everything here works on ``(B, 3, H, W)`` tensors in ``[0, 1]``; internally
the pipeline runs on the ``[0, 255]`` scale with the usual ``-128`` level
shift before the block DCT.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "BASE_LUMA",
    "BASE_CHROMA",
    "ZIGZAG",
    "QuantTable",
    "RoundingMode",
    "JpegParseError",
    "round_half_away",
    "cube_round",
    "fourier_round",
    "scale_quant_table",
    "standard_tables",
    "estimate_qf",
    "extract_quant_table",
    "jpeg_layer",
    "rgb_to_ycbcr",
    "ycbcr_to_rgb",
    "approximation_error",
]

# Annex K tables (natural order).
BASE_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)

BASE_CHROMA = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.int64,
)


def _zigzag_order() -> np.ndarray:
    # ZIGZAG[k] is the natural (row-major) index of the k-th stored coefficient.
    order = sorted(
        ((r, c) for r in range(8) for c in range(8)),
        key=lambda rc: (rc[0] + rc[1], rc[0] if (rc[0] + rc[1]) % 2 else -rc[0]),
    )
    return np.array([r * 8 + c for r, c in order], dtype=np.int64)


ZIGZAG = _zigzag_order()


class JpegParseError(ValueError):
    """Raised when a byte stream is not a JPEG we can read tables from."""


@dataclass(frozen=True)
class QuantTable:
    """Luma/chroma 8x8 quantization matrices in natural order."""

    luma: np.ndarray
    chroma: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("luma", "chroma"):
            table = getattr(self, name)
            if table is None:
                continue
            table = np.asarray(table, dtype=np.int64)
            if table.shape != (8, 8):
                raise ValueError(f"{name} table must be 8x8, got {table.shape}")
            if table.min() < 1 or table.max() > 255:
                raise ValueError(f"{name} table entries must lie in [1, 255]")
            object.__setattr__(self, name, table)

    def __eq__(self, other):
        if not isinstance(other, QuantTable):
            return NotImplemented
        if not np.array_equal(self.luma, other.luma):
            return False
        if self.chroma is None or other.chroma is None:
            return self.chroma is None and other.chroma is None
        return np.array_equal(self.chroma, other.chroma)

    def __hash__(self):
        chroma = None if self.chroma is None else self.chroma.tobytes()
        return hash((self.luma.tobytes(), chroma))


@dataclass(frozen=True)
class RoundingMode:
    """How the quantizer rounds: ``exact``, ``cube`` or ``fourier`` with ``K`` terms."""

    kind: str = "cube"
    K: int = 10

    def __post_init__(self):
        if self.kind not in ("exact", "cube", "fourier"):
            raise ValueError(f"unknown rounding mode {self.kind!r}")
        if self.kind == "fourier" and self.K < 1:
            raise ValueError("Fourier rounding needs K >= 1")

    @classmethod
    def parse(cls, text: Union[str, "RoundingMode"]) -> "RoundingMode":
        """Parse ``exact``, ``cube``, ``fourier`` or ``fourier:K``."""
        if isinstance(text, RoundingMode):
            return text
        name, _, k = text.strip().lower().partition(":")
        if name == "fourier":
            return cls("fourier", int(k) if k else 10)
        if k:
            raise ValueError(f"mode {name!r} takes no parameter")
        return cls(name)

    def __str__(self):
        return f"fourier:{self.K}" if self.kind == "fourier" else self.kind

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind == "exact":
            return round_half_away(x)
        if self.kind == "cube":
            return cube_round(x)
        return fourier_round(x, self.K)


EXACT = RoundingMode("exact")
CUBE = RoundingMode("cube")


def round_half_away(x):
    """Round to nearest integer, halves away from zero (works on tensors and arrays)."""
    if isinstance(x, torch.Tensor):
        return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def cube_round(x):
    """``round(x) + (x - round(x))**3``; the inner round carries no gradient."""
    if isinstance(x, torch.Tensor):
        r = round_half_away(x).detach()
        return r + (x - r) ** 3
    r = round_half_away(x)
    return r + (np.asarray(x, dtype=float) - r) ** 3


def fourier_round(x, K: int = 10):
    """Rounding via the first ``K`` terms of the sawtooth Fourier series."""
    if K < 1:
        raise ValueError("Fourier rounding needs K >= 1")
    is_tensor = isinstance(x, torch.Tensor)
    lib = torch if is_tensor else np
    if not is_tensor:
        x = np.asarray(x, dtype=float)
    correction = 0.0
    for k in range(1, K + 1):
        correction = correction + ((-1) ** (k + 1) / k) * lib.sin(2 * math.pi * k * x)
    return x - correction / math.pi


def scale_quant_table(base: Union[QuantTable, np.ndarray], qf: int):
    """Scale a base table to quality ``qf`` with the libjpeg convention.

    Accepts either a :class:`QuantTable` (both planes scaled) or a bare 8x8
    array (returns an array).
    """
    qf = int(qf)
    if not 1 <= qf <= 100:
        raise ValueError(f"quality factor must be in [1, 100], got {qf}")
    if isinstance(base, QuantTable):
        chroma = None if base.chroma is None else scale_quant_table(base.chroma, qf)
        return QuantTable(scale_quant_table(base.luma, qf), chroma)
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf
    table = (np.asarray(base, dtype=np.int64) * scale + 50) // 100
    return np.clip(table, 1, 255)


def standard_tables(qf: int) -> QuantTable:
    """The Annex K tables scaled to ``qf``."""
    return scale_quant_table(QuantTable(BASE_LUMA, BASE_CHROMA), qf)


_LUMA_BY_QF = np.stack([scale_quant_table(BASE_LUMA, q) for q in range(1, 101)])


def estimate_qf(extracted: Union[QuantTable, np.ndarray]) -> int:
    """Quality factor whose standard luma table is L1-closest; ties go to the larger qf."""
    luma = extracted.luma if isinstance(extracted, QuantTable) else np.asarray(extracted)
    dist = np.abs(_LUMA_BY_QF - luma[None]).sum(axis=(1, 2))
    best = np.flatnonzero(dist == dist.min())
    return int(best.max()) + 1


def extract_quant_table(jpeg_bytes: bytes) -> QuantTable:
    """Read the DQT segments of a JPEG stream.

    Table slot 0 is returned as luma and slot 1 as chroma (``None`` for
    single-table files). Entries are de-zigzagged into natural order.
    """
    data = bytes(jpeg_bytes)
    if len(data) < 4 or data[0] != 0xFF or data[1] != 0xD8:
        raise JpegParseError("missing SOI marker")
    tables: dict[int, np.ndarray] = {}
    pos = 2
    while pos < len(data):
        if data[pos] != 0xFF:
            raise JpegParseError(f"expected marker at offset {pos}")
        while pos < len(data) and data[pos] == 0xFF:
            pos += 1
        if pos >= len(data):
            break
        marker = data[pos]
        pos += 1
        if marker in (0xD8, 0x01) or 0xD0 <= marker <= 0xD7:
            continue
        if marker in (0xD9, 0xDA):
            break
        if pos + 2 > len(data):
            raise JpegParseError("truncated segment header")
        length = int.from_bytes(data[pos:pos + 2], "big")
        if length < 2 or pos + length > len(data):
            raise JpegParseError("segment length runs past end of stream")
        if marker == 0xDB:
            tables.update(_parse_dqt(data[pos + 2:pos + length]))
        pos += length
    if 0 not in tables:
        raise JpegParseError("no DQT segment for table slot 0")
    return QuantTable(tables[0], tables.get(1))


def _parse_dqt(payload: bytes) -> dict[int, np.ndarray]:
    out = {}
    i = 0
    while i < len(payload):
        precision, slot = payload[i] >> 4, payload[i] & 0x0F
        i += 1
        width = 2 if precision else 1
        if i + 64 * width > len(payload):
            raise JpegParseError("truncated DQT table")
        raw = np.frombuffer(payload[i:i + 64 * width], dtype=">u2" if width == 2 else np.uint8)
        i += 64 * width
        natural = np.empty(64, dtype=np.int64)
        natural[ZIGZAG] = raw.astype(np.int64)
        out[slot] = natural.reshape(8, 8)
    return out


# --- differentiable pipeline -------------------------------------------------

_RGB2YCC = torch.tensor(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ],
    dtype=torch.float64,
)
_YCC2RGB = torch.tensor(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772, 0.0],
    ],
    dtype=torch.float64,
)


def rgb_to_ycbcr(x: torch.Tensor) -> torch.Tensor:
    """BT.601 full-range conversion on the [0, 255] scale."""
    m = _RGB2YCC.to(x.dtype).to(x.device)
    out = torch.einsum("ij,bjhw->bihw", m, x)
    offset = torch.tensor([0.0, 128.0, 128.0], dtype=x.dtype, device=x.device)
    return out + offset.view(1, 3, 1, 1)


def ycbcr_to_rgb(x: torch.Tensor) -> torch.Tensor:
    m = _YCC2RGB.to(x.dtype).to(x.device)
    offset = torch.tensor([0.0, 128.0, 128.0], dtype=x.dtype, device=x.device)
    return torch.einsum("ij,bjhw->bihw", m, x - offset.view(1, 3, 1, 1))


def _dct_matrix(dtype, device) -> torch.Tensor:
    n = torch.arange(8, dtype=torch.float64)
    k = n.view(-1, 1)
    mat = torch.cos((2 * n + 1) * k * math.pi / 16) * math.sqrt(2 / 8)
    mat[0] = mat[0] / math.sqrt(2)
    return mat.to(dtype=dtype, device=device)


def _blockify(plane: torch.Tensor) -> torch.Tensor:
    b, h, w = plane.shape
    return plane.view(b, h // 8, 8, w // 8, 8).permute(0, 1, 3, 2, 4)


def _unblockify(blocks: torch.Tensor) -> torch.Tensor:
    b, nh, nw = blocks.shape[:3]
    return blocks.permute(0, 1, 3, 2, 4).reshape(b, nh * 8, nw * 8)


def _quantize_plane(plane, table, mode, d):
    blocks = _blockify(plane - 128.0)
    coeffs = d @ blocks @ d.T
    q = torch.as_tensor(table, dtype=plane.dtype, device=plane.device)
    coeffs = mode.apply(coeffs / q) * q
    return _unblockify(d.T @ coeffs @ d) + 128.0


def jpeg_layer(
    x: torch.Tensor,
    qf: int = 92,
    mode: Union[RoundingMode, str] = CUBE,
    tables: Optional[QuantTable] = None,
    upsample: str = "bilinear",
) -> torch.Tensor:
    """JPEG round trip without entropy coding.

    ``mode`` selects the rounding (``exact`` for the true quantizer, ``cube``
    or ``fourier:K`` for smooth surrogates). ``tables`` overrides the
    standard tables scaled to ``qf``. ``upsample`` is ``nearest`` or
    ``bilinear``; the latter is the triangular filter libjpeg decoders use.
    """
    mode = RoundingMode.parse(mode)
    if not 1 <= int(qf) <= 100:
        raise ValueError(f"quality factor must be in [1, 100], got {qf}")
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError("jpeg_layer input contains non-finite values")
    tables = tables or standard_tables(qf)
    chroma = tables.chroma if tables.chroma is not None else tables.luma

    h, w = x.shape[-2:]
    ph, pw = (-h) % 16, (-w) % 16
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")

    d = _dct_matrix(x.dtype, x.device)
    ycc = rgb_to_ycbcr(x * 255.0)
    y = _quantize_plane(ycc[:, 0], tables.luma, mode, d)
    sub = F.avg_pool2d(ycc[:, 1:], 2)
    cb = _quantize_plane(sub[:, 0], chroma, mode, d)
    cr = _quantize_plane(sub[:, 1], chroma, mode, d)
    c = torch.stack([cb, cr], dim=1)
    if upsample == "nearest":
        c = c.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)
    elif upsample == "bilinear":
        c = F.interpolate(c, scale_factor=2, mode="bilinear", align_corners=False)
    else:
        raise ValueError(f"unknown chroma upsampling {upsample!r}")
    rgb = ycbcr_to_rgb(torch.cat([y.unsqueeze(1), c], dim=1)) / 255.0
    return rgb.clamp(0.0, 1.0)[..., :h, :w]


def approximation_error(images: torch.Tensor, qfs, modes) -> list[dict]:
    """Mean per-image L2 distance (0-255 scale) between each surrogate mode and exact rounding.

    Returns one ``{"qf", "mode", "mean_l2"}`` row per (qf, mode) combination.
    """
    rows = []
    with torch.no_grad():
        for qf in qfs:
            exact = jpeg_layer(images, qf, EXACT)
            for mode in modes:
                mode = RoundingMode.parse(mode)
                approx = jpeg_layer(images, qf, mode)
                err = ((approx - exact) * 255.0).reshape(len(images), -1).norm(dim=1).mean().item()
                rows.append({"qf": int(qf), "mode": str(mode), "mean_l2": err})
    return rows
