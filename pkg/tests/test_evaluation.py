import math

import pytest
import torch

from osnadv.evaluation import (
    EvalRecords,
    acl_from_logits,
    asr,
    bit_depth_reduce,
    error_analysis,
    evaluate_aes,
    jpeg_defense,
    parse_defense,
    random_resize_pad,
    summarize,
)


def _records(y, pred, pred_t):
    n = len(y)
    z = torch.zeros(n, 10)
    return EvalRecords(
        torch.tensor(y), torch.tensor(pred), torch.tensor(pred_t), z, z, torch.ones(n), torch.full((n,), 0.5)
    )


def test_asr_examples():
    assert asr(_records([0, 1], [1, 0], [1, 0]))[("ASR")] == 1.0
    r = asr(_records([0, 0, 0, 0], [1, 1, 1, 0], [1, 1, 0, 0]))
    assert (r["ASR"], r["ASR_prime"], r["N1"], r["N2"]) == (0.75, 0.5, 3, 2)
    r = asr(_records([2, 3], [2, 3], [2, 3]))
    assert (r["ASR"], r["ASR_prime"]) == (0.0, 0.0)
    with pytest.raises(ValueError):
        asr(_records([], [], []))


def test_summarize_adds_distortion():
    s = summarize(_records([0, 0], [1, 0], [0, 0]))
    assert s["avg_l2"] == 1.0 and s["avg_linf"] == 0.5


def test_records_validation():
    with pytest.raises(ValueError):
        _records([0, 11], [0, 0], [0, 0])
    with pytest.raises(ValueError):
        EvalRecords(torch.tensor([0]), torch.tensor([0, 1]), torch.tensor([0]), torch.zeros(1, 2), torch.zeros(1, 2), torch.zeros(1), torch.zeros(1))


def test_acl_examples():
    z = torch.zeros(3, 2)
    assert acl_from_logits(z, torch.tensor([0, 1, 0]), v=True) == pytest.approx(0.5)
    assert acl_from_logits(z, torch.tensor([0, 1, 0]), v=False) == pytest.approx(0.5)
    z = torch.tensor([[math.log(3), 0.0]])
    assert acl_from_logits(z, torch.tensor([0]), v=True) == pytest.approx(0.75)
    assert acl_from_logits(z, torch.tensor([0]), v=False) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        acl_from_logits(torch.zeros(0, 2), torch.zeros(0, dtype=torch.long))


class _Const:
    def __init__(self, label):
        self.label = label

    def classify(self, x):
        return torch.full((len(x),), self.label)


def test_error_analysis_trivial_cases():
    x = torch.rand(6, 3, 8, 8)
    y = torch.tensor([0, 1, 0, 1, 0, 1])
    ident = lambda t: t
    out = error_analysis(x, y, ident, ident, _Const(0))
    assert out["success"]["n"] == 3 and out["fail"]["n"] == 3
    for split in out.values():
        assert split["osn_noise_mse"] == 0 and split["sim_error_mse"] == 0
    # sio matches a non-trivial channel exactly
    ch = lambda t: (t * 0.9).clamp(0, 1)
    out = error_analysis(x, y, ch, ch, _Const(0))
    assert out["success"]["sim_error_mse"] == 0 and out["success"]["osn_noise_mse"] > 0
    out = error_analysis(x, torch.zeros(6, dtype=torch.long), ident, ident, _Const(0))
    assert out["success"] is None and out["fail"]["n"] == 6


def test_bit_depth_reduce():
    assert bit_depth_reduce(torch.tensor([0.5]), 1).item() == 1.0
    assert bit_depth_reduce(torch.tensor([0.49]), 1).item() == 0.0
    x = torch.round(torch.rand(2, 3, 4, 4) * 255) / 255
    assert torch.allclose(bit_depth_reduce(x, 8), x)
    assert len(torch.unique(bit_depth_reduce(torch.rand(1000), 4))) <= 16
    for bad in (0, 9):
        with pytest.raises(ValueError):
            bit_depth_reduce(x, bad)


def test_jpeg_defense_mid_gray():
    g = torch.full((3, 16, 16), 128 / 255)
    assert (jpeg_defense(g, 75) - g).abs().max() <= 1 / 255 + 1e-7
    assert jpeg_defense(torch.rand(2, 3, 16, 16)).shape == (2, 3, 16, 16)


def test_random_resize_pad():
    x = torch.rand(4, 3, 32, 32)
    a, b = random_resize_pad(x, seed=1), random_resize_pad(x, seed=1)
    assert a.shape == x.shape and torch.equal(a, b)
    assert not torch.equal(a, random_resize_pad(x, seed=2))
    # forced shrink leaves a zero border somewhere
    s = random_resize_pad(x, seed=0, low=0.7, high=0.7)
    assert (s == 0).any()


def test_parse_defense():
    assert parse_defense(None) is None and parse_defense("none") is None
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(parse_defense("bitred:4")(x), bit_depth_reduce(x, 4))
    assert torch.equal(parse_defense("jpeg:75")(x), jpeg_defense(x, 75))
    assert torch.equal(parse_defense("rrp:3")(x), random_resize_pad(x, 3))
    for bad in ("bitred:12", "jpeg:0", "blur", "jpeg:abc"):
        with pytest.raises(ValueError):
            parse_defense(bad)


def test_evaluate_aes_order(tiny_target, correct_batch):
    x, y = correct_batch
    seen = []

    def channel(t):
        seen.append("channel")
        return t

    def defense(t):
        seen.append("defense")
        return t

    rec = evaluate_aes(tiny_target, x, y, channel, clean=x, defense=defense)
    assert seen == ["channel", "defense"]
    assert asr(rec)["ASR"] == 0.0 and rec.l2.abs().max() == 0
