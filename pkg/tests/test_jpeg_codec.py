import io

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from osnadv.data import make_synthetic
from osnadv.jpeg_codec import (
    BASE_LUMA,
    CUBE,
    EXACT,
    ZIGZAG,
    JpegParseError,
    QuantTable,
    RoundingMode,
    approximation_error,
    cube_round,
    estimate_qf,
    extract_quant_table,
    fourier_round,
    jpeg_layer,
    rgb_to_ycbcr,
    round_half_away,
    scale_quant_table,
    standard_tables,
    ycbcr_to_rgb,
)
from reference_jpeg import reference_jpeg


def _pil_jpeg(arr, qf):
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="JPEG", quality=qf, subsampling=2)
    return buf.getvalue()


# --- rounding ------------------------------------------------------------------


def test_round_half_away_from_zero():
    v = torch.tensor([0.5, 1.5, -0.5, -1.5, 2.4, -2.6])
    assert round_half_away(v).tolist() == [1.0, 2.0, -1.0, -2.0, 2.0, -3.0]
    assert round_half_away(np.array([2.5])).tolist() == [3.0]


def test_cube_round_examples():
    assert cube_round(2.0) == pytest.approx(2.0)
    assert cube_round(0.5) == pytest.approx(1.0 - 0.125)
    assert cube_round(0.3) == pytest.approx(0.027)


def test_cube_round_gradient_is_three_r_squared():
    x = torch.tensor([0.3, 1.8, -0.2], dtype=torch.float64, requires_grad=True)
    cube_round(x).sum().backward()
    r = x.detach() - torch.round(x.detach())
    assert torch.allclose(x.grad, 3 * r**2)


def test_fourier_round_known_values():
    f = fourier_round(np.array([0.0, 1.0, 0.5]), K=10)
    assert f[0] == pytest.approx(0.0, abs=1e-12)
    assert f[1] == pytest.approx(1.0, abs=1e-12)
    # sin(k pi) terms vanish at half-integers
    assert f[2] == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError):
        fourier_round(0.1, K=0)


@given(st.floats(-50, 50, allow_nan=False))
def test_cube_round_error_bounded(x):
    assert abs(cube_round(x) - round_half_away(x)) <= 0.125 + 1e-12


def test_rounding_mode_parse():
    assert RoundingMode.parse("fourier:7") == RoundingMode("fourier", 7)
    assert str(RoundingMode.parse("FOURIER")) == "fourier:10"
    assert RoundingMode.parse("exact") == EXACT
    with pytest.raises(ValueError):
        RoundingMode.parse("cube:3")
    with pytest.raises(ValueError):
        RoundingMode.parse("banker")


# --- quantization tables ----------------------------------------------------------


def test_scale_quant_table_examples():
    assert np.array_equal(scale_quant_table(BASE_LUMA, 50), BASE_LUMA)
    assert (scale_quant_table(BASE_LUMA, 100) == 1).all()
    assert scale_quant_table(BASE_LUMA, 1).max() == 255
    # qf 25 -> scale 200 -> entries double
    assert scale_quant_table(BASE_LUMA, 25)[0, 0] == 32
    with pytest.raises(ValueError):
        scale_quant_table(BASE_LUMA, 0)
    with pytest.raises(ValueError):
        scale_quant_table(BASE_LUMA, 101)


def test_scale_quant_table_monotone_in_qf():
    tables = [scale_quant_table(BASE_LUMA, q) for q in range(1, 101)]
    for a, b in zip(tables, tables[1:]):
        assert (b <= a).all()


def test_quant_table_validation():
    with pytest.raises(ValueError):
        QuantTable(np.ones((4, 4)))
    with pytest.raises(ValueError):
        QuantTable(np.zeros((8, 8)))
    t = standard_tables(75)
    assert t == QuantTable(t.luma.copy(), t.chroma.copy())
    assert hash(t) == hash(QuantTable(t.luma.copy(), t.chroma.copy()))


def test_zigzag_is_a_permutation_with_known_prefix():
    assert sorted(ZIGZAG.tolist()) == list(range(64))
    assert ZIGZAG[:6].tolist() == [0, 1, 8, 16, 9, 2]


@pytest.mark.parametrize("qf", [5, 37, 50, 75, 92, 100])
def test_extract_and_estimate_from_pillow(qf):
    arr = (np.random.default_rng(qf).random((24, 24, 3)) * 255).astype(np.uint8)
    data = _pil_jpeg(arr, qf)
    qt = extract_quant_table(data)
    expected = standard_tables(qf)
    assert np.array_equal(qt.luma, expected.luma)
    assert np.array_equal(qt.chroma, expected.chroma)
    assert estimate_qf(qt) == qf


def test_extract_grayscale_has_no_chroma():
    buf = io.BytesIO()
    Image.fromarray(np.full((16, 16), 128, np.uint8)).save(buf, format="JPEG", quality=60)
    qt = extract_quant_table(buf.getvalue())
    assert qt.chroma is None
    assert estimate_qf(qt) == 60


def test_extract_errors():
    with pytest.raises(JpegParseError):
        extract_quant_table(b"\x89PNG\r\n\x1a\n")
    with pytest.raises(JpegParseError):
        extract_quant_table(b"\xff\xd8\xff\xd9")  # SOI then EOI, no tables


def test_extract_sixteen_bit_table():
    table = np.arange(1, 65).reshape(8, 8) * 3
    zz = table.reshape(-1)[ZIGZAG]
    payload = bytes([0x10]) + b"".join(int(v).to_bytes(2, "big") for v in zz)
    seg = b"\xff\xdb" + (len(payload) + 2).to_bytes(2, "big") + payload
    qt = extract_quant_table(b"\xff\xd8" + seg + b"\xff\xd9")
    assert np.array_equal(qt.luma, table)


def test_estimate_qf_tie_break_prefers_higher():
    # every qf from 98 to 100 that yields an all-ones-ish table: the all-ones table
    ones = np.ones((8, 8), dtype=int)
    candidates = [q for q in range(1, 101) if (scale_quant_table(BASE_LUMA, q) == 1).all()]
    assert estimate_qf(ones) == max(candidates)


# --- color transform and layer --------------------------------------------------------


def test_ycbcr_roundtrip():
    x = torch.rand(2, 3, 5, 7, dtype=torch.float64) * 255
    assert torch.allclose(ycbcr_to_rgb(rgb_to_ycbcr(x)), x, atol=1e-3)


def test_jpeg_layer_matches_reference_oracle():
    rng = np.random.default_rng(3)
    img = rng.random((20, 28, 3))  # not a multiple of 16: exercises padding and cropping
    ref = reference_jpeg(img, 70)
    out = jpeg_layer(torch.from_numpy(img.transpose(2, 0, 1))[None], 70, EXACT)[0].numpy().transpose(1, 2, 0)
    assert np.abs(ref - out).max() < 1e-9


def test_jpeg_layer_shape_range_and_constant_image():
    x = torch.rand(2, 3, 30, 18)
    y = jpeg_layer(x, 50, CUBE)
    assert y.shape == x.shape
    assert y.min() >= 0 and y.max() <= 1
    gray = torch.full((1, 3, 16, 16), 128 / 255, dtype=torch.float64)
    assert torch.allclose(jpeg_layer(gray, 10, EXACT), gray, atol=1 / 255)


def test_jpeg_layer_close_to_pillow():
    x, _ = make_synthetic(4, seed=1)
    for xi in x:
        arr = (xi.numpy().transpose(1, 2, 0) * 255).round().astype(np.uint8)
        pil = np.asarray(Image.open(io.BytesIO(_pil_jpeg(arr, 80)))).astype(float) / 255
        ours = jpeg_layer(xi[None].double(), 80, EXACT)[0].numpy().transpose(1, 2, 0)
        assert np.abs(pil - ours).mean() <= 2 / 255


def test_jpeg_layer_input_validation():
    with pytest.raises(ValueError):
        jpeg_layer(torch.rand(3, 16, 16))
    with pytest.raises(ValueError):
        jpeg_layer(torch.rand(1, 3, 16, 16), qf=0)
    bad = torch.rand(1, 3, 16, 16)
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        jpeg_layer(bad)
    with pytest.raises(ValueError):
        jpeg_layer(torch.rand(1, 3, 16, 16), upsample="lanczos")


def test_exact_mode_has_zero_gradient_almost_everywhere():
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64, requires_grad=True)
    jpeg_layer(x, 75, EXACT).sum().backward()
    # the only nonzero pieces come from the final clamp being inactive: the quantizer blocks gradient
    assert x.grad.abs().max() < 1e-9


def test_approximation_error_rows():
    imgs = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    rows = approximation_error(imgs, [50, 90], ["cube", "fourier:3"])
    assert [(r["qf"], r["mode"]) for r in rows] == [(50, "cube"), (50, "fourier:3"), (90, "cube"), (90, "fourier:3")]
    assert all(r["mean_l2"] >= 0 for r in rows)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 100))
def test_qf_roundtrip_standard_tables(qf):
    assert estimate_qf(standard_tables(qf)) in {
        q for q in range(1, 101) if np.array_equal(scale_quant_table(BASE_LUMA, q), scale_quant_table(BASE_LUMA, qf))
    }
