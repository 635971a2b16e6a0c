"""Acceptance criteria, each as one test that records a PASS/FAIL line.

The shared fixtures train the reference CNN, build mock-fb transmission
pairs and fit three surrogates (full model and two ablations). This takes a
while on a CPU; the lines are printed in the terminal summary of the run.
"""

import io
import time

import numpy as np
import pytest
import torch
from PIL import Image

from osnadv.attacks import AttackConfig, joint_ce, lagrange_loss, inverse_reparam, run_attack
from osnadv.channel import CHANNELS, build_pairs
from osnadv.data import make_synthetic
from osnadv.evaluation import (
    asr,
    bit_depth_reduce,
    error_analysis,
    evaluate_aes,
    jpeg_defense,
    random_resize_pad,
)
from osnadv.jpeg_codec import (
    EXACT,
    approximation_error,
    cube_round,
    estimate_qf,
    extract_quant_table,
    fourier_round,
    jpeg_layer,
    round_half_away,
)
from osnadv.pipeline import spearman
from osnadv.sio_net import SIOConfig, SIOModel, frozen, sio_forward
from osnadv.sio_training import TrainConfig, train_sio, validate_sim, split_indices
from osnadv.target_models import ClassifierSpec, train_reference_cnn
from reference_jpeg import reference_jpeg

pytestmark = pytest.mark.acceptance

# Desk-scale experiment settings shared by criteria 6-11.
STYLE = dict(min_contrast=0.15, max_contrast=0.6, max_noise=0.005)
CNN = dict(width=64, batch_norm=True, epochs=8, lr=3e-4, n_train=10000)
N_PAIR_IMAGES = 700
SIO_WIDTHS = (16, 32, 64, 128)
SIO_TRAIN = TrainConfig(lr=1e-3, max_epochs=40, batch_size=16, seed=0)
N_EVAL = 200
EPS, ALPHA, T_ITERS, LAM = 5 / 255, 2 / 255, 40, 0.3
CHANNEL = CHANNELS["mock-fb"]


def _record(log, num, passed, detail):
    line = f"criterion {num:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    log.append((num, bool(passed), detail))
    return passed


def _q8(x):
    return torch.round(x * 255) / 255


# --- shared desk-scale world ------------------------------------------------------------


@pytest.fixture(scope="module")
def target():
    x, y = make_synthetic(CNN["n_train"], seed=0, **STYLE)
    model, report = train_reference_cnn(
        x, y, seed=0, epochs=CNN["epochs"], lr=CNN["lr"], min_accuracy=0.8,
        spec=ClassifierSpec(width=CNN["width"], batch_norm=CNN["batch_norm"]),
    )
    return model


@pytest.fixture(scope="module")
def eval_set(target):
    x, y = make_synthetic(2 * N_EVAL, seed=99, **STYLE)
    ok = target.classify(x) == y
    x, y = x[ok][:N_EVAL], y[ok][:N_EVAL]
    assert len(x) == N_EVAL
    return x, y


@pytest.fixture(scope="module")
def pairs(target):
    x, y = make_synthetic(N_PAIR_IMAGES, seed=11, **STYLE)
    return build_pairs(CHANNEL, x, y, target, ["fgsm", "pgd", "mifgsm", "cw"], seed=0)


@pytest.fixture(scope="module")
def surrogates(pairs):
    """Full surrogate and two ablations, trained with identical settings."""
    qfs = [p.meta["est_qf"] for p in pairs]
    q = max(set(qfs), key=qfs.count)
    variants = {"full": {}, "no_jpeg_tail": {"jpeg_tail": False}, "no_residual": {"residual": False}}
    out, seconds = {}, {}
    for name, kw in variants.items():
        start = time.perf_counter()
        model, _ = train_sio(pairs, SIO_TRAIN, SIOConfig(widths=SIO_WIDTHS, q=q, **kw))
        seconds[name] = time.perf_counter() - start
        out[name] = frozen(model)
    return out, seconds


@pytest.fixture(scope="module")
def sio(surrogates):
    return surrogates[0]["full"]


def _attack(method, x, y, target, sio, cfg, robust):
    res = run_attack(method, x, y, target, sio, cfg, robust=robust, check=False)
    return _q8(res.adversarial), res


@pytest.fixture(scope="module")
def pgd_aes(target, sio, eval_set):
    x, y = eval_set
    cfg = AttackConfig(epsilon=EPS, alpha=ALPHA, T=T_ITERS)
    vanilla, _ = _attack("pgd", x, y, target, None, cfg, robust=False)
    robust, _ = _attack("pgd", x, y, target, sio, cfg.with_(lam=LAM), robust=True)
    return vanilla, robust


def _rates(target, aes, y, defense=None):
    return asr(evaluate_aes(target, aes, y, CHANNEL, defense=defense))


# --- 1. codec oracle ----------------------------------------------------------------------


def test_criterion_01_codec_oracle(acceptance_log):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for qf in (50, 75, 92):
        for _ in range(20):
            img = rng.random((64, 64, 3))
            ref = reference_jpeg(img, qf)
            out = jpeg_layer(torch.from_numpy(img.transpose(2, 0, 1)[None].copy()), qf, EXACT)
            worst = max(worst, float(np.abs(out[0].numpy().transpose(1, 2, 0) - ref).max()))
    elapsed = time.perf_counter() - start
    ok = worst <= 1 / 255 and elapsed < 60
    _record(acceptance_log, 1, ok, f"max abs error {worst * 255:.2e}/255, {elapsed:.1f}s")
    assert ok


# --- 2. rounding bounds -------------------------------------------------------------------


def test_criterion_02_rounding_bounds(acceptance_log):
    grid = np.arange(-5000, 5001) / 1000.0
    truth = round_half_away(grid)
    err = np.abs(cube_round(grid) - truth)
    peak = err.max()
    at = grid[err >= peak - 1e-9]
    half_integers = np.allclose(np.abs(at - np.floor(at)), 0.5)
    means = [np.abs(fourier_round(grid, K) - truth).mean() for K in range(1, 21)]
    decreasing = bool(np.all(np.diff(means) < 0))
    ok = abs(peak - 0.125) <= 1e-9 and half_integers and decreasing
    _record(acceptance_log, 2, ok, f"cube max {peak:.12f} at half-integers={half_integers}; "
            f"fourier mean error K=1..20 strictly decreasing={decreasing} ({means[0]:.4f} -> {means[-1]:.4f})")
    assert ok


# --- 3. approximation error trend ---------------------------------------------------------------


def test_criterion_03_cube_beats_fourier(acceptance_log):
    images, _ = make_synthetic(20, seed=7, size=64)
    rows = approximation_error(images.double(), list(range(30, 100, 10)), ["cube", "fourier:10"])
    by = {(r["qf"], r["mode"]): r["mean_l2"] for r in rows}
    bad = [q for q in range(30, 100, 10) if by[(q, "cube")] > by[(q, "fourier:10")]]
    ok = not bad
    _record(acceptance_log, 3, ok, "cube <= fourier:10 at every qf in 30..90"
            + (f"; violations at {bad}" if bad else f" (qf 30: {by[(30, 'cube')]:.1f} vs {by[(30, 'fourier:10')]:.1f})"))
    assert ok


# --- 4. gradient suite ------------------------------------------------------------------------


def _fd_check(fn, x, n_coords=40, n_dirs=4, h=1e-6, seed=0):
    """Relative error between autograd and central differences on sampled coordinates and directions."""
    x = x.detach().clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(x), x)
    g = torch.Generator().manual_seed(seed)
    flat = x.detach().reshape(-1)
    analytic, numeric = [], []
    idx = torch.randperm(flat.numel(), generator=g)[:n_coords]
    dirs = [torch.zeros_like(flat).index_fill_(0, i.reshape(1), 1.0) for i in idx]
    dirs += [torch.randn(flat.numel(), generator=g, dtype=flat.dtype) for _ in range(n_dirs)]
    with torch.no_grad():
        for d in dirs:
            d = d.reshape(x.shape)
            numeric.append(((fn(x + h * d) - fn(x - h * d)) / (2 * h)).item())
            analytic.append((grad * d).sum().item())
    a, n = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-12))


class _ToyTarget:
    def __init__(self, seed=0):
        g = torch.Generator().manual_seed(seed)
        self.w = torch.randn(4, 3 * 8 * 8, generator=g, dtype=torch.float64) * 0.2
        self.b = torch.randn(4, generator=g, dtype=torch.float64)

    def logits(self, x):
        return torch.tanh(x.reshape(len(x), -1) @ self.w.T) * 3 + self.b

    @torch.no_grad()
    def classify(self, x):
        return self.logits(x).argmax(1)


def test_criterion_04_gradient_suite(acceptance_log):
    start = time.perf_counter()
    torch.manual_seed(0)
    x = (torch.rand(1, 3, 16, 16, dtype=torch.float64) * 0.8 + 0.1)
    w_proj = torch.randn(1, 3, 16, 16, dtype=torch.float64)
    errors = {}
    errors["jpeg_layer(fourier)"] = _fd_check(lambda v: (jpeg_layer(v, 75, "fourier:10") * w_proj).sum(), x)

    model = SIOModel(SIOConfig(widths=(4, 8, 8, 16), q=80)).double().eval()
    torch.nn.init.normal_(model.unet.head.weight, std=0.05)
    errors["sio_forward"] = _fd_check(lambda v: (sio_forward(model, v) * w_proj).sum(), x)

    toy = _ToyTarget()
    xs = torch.rand(2, 3, 8, 8, dtype=torch.float64) * 0.8 + 0.1
    y = toy.classify(xs)
    blur = lambda v: torch.nn.functional.avg_pool2d(torch.nn.functional.pad(v, (1, 1, 1, 1), mode="replicate"), 3, 1)
    errors["joint_ce"] = _fd_check(lambda v: joint_ce(v, y, toy, blur, lam=0.3), xs)
    w = inverse_reparam(xs)
    cfg = AttackConfig(lam=0.3, c=0.5, k=5.0)
    w_t0 = w + 0.05 * torch.randn_like(w)
    errors["lagrange_loss"] = _fd_check(lambda v: lagrange_loss(v, w, y, toy, blur, cfg), w_t0)
    elapsed = time.perf_counter() - start
    ok = all(e < 1e-2 for e in errors.values()) and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    _record(acceptance_log, 4, ok, f"relative errors: {detail}; {elapsed:.1f}s")
    assert ok


# --- 5. QF round trip ---------------------------------------------------------------------------


def test_criterion_05_qf_roundtrip(acceptance_log):
    rng = np.random.default_rng(5)
    arr = (rng.random((32, 32, 3)) * 255).astype(np.uint8)
    misses = []
    for q in range(10, 100, 5):
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="JPEG", quality=q)
        got = estimate_qf(extract_quant_table(buf.getvalue()))
        if got != q:
            misses.append((q, got))
    ok = not misses
    _record(acceptance_log, 5, ok, "Pillow-encoded qf 10..95 recovered exactly" + (f"; misses {misses}" if misses else ""))
    assert ok


# --- 6. surrogate ablations ---------------------------------------------------------------------


def test_criterion_06_sio_ablation(acceptance_log, pairs, surrogates):
    models, seconds = surrogates
    _, val = split_indices(len(pairs), SIO_TRAIN.val_fraction, SIO_TRAIN.seed)
    val_pairs = pairs.subset(val)
    psnr = {k: validate_sim(m, val_pairs).psnr for k, m in models.items()}
    gain_tail = psnr["full"] - psnr["no_jpeg_tail"]
    gain_res = psnr["full"] - psnr["no_residual"]
    total = sum(seconds.values())
    ok = len(pairs) >= 500 and gain_tail >= 0.5 and gain_res >= 1.0 and total <= 1800
    _record(acceptance_log, 6, ok, f"{len(pairs)} pairs; noise PSNR full {psnr['full']:.2f}, no tail "
            f"{psnr['no_jpeg_tail']:.2f} (+{gain_tail:.2f}), no residual {psnr['no_residual']:.2f} "
            f"(+{gain_res:.2f}); training {total:.0f}s")
    assert ok


# --- 7. robustness trend -----------------------------------------------------------------------


def test_criterion_07_robustness_trend(acceptance_log, target, sio, eval_set, pgd_aes):
    x, y = eval_set
    vanilla, robust = pgd_aes
    v, r = _rates(target, vanilla, y), _rates(target, robust, y)
    pgd_ok = (r["ASR_prime"] >= v["ASR_prime"] + 0.15 and v["ASR"] >= 0.9 and r["ASR"] >= 0.9)
    parts = [f"PGD {v['ASR']:.3f}/{v['ASR_prime']:.3f} vs R-PGD {r['ASR']:.3f}/{r['ASR_prime']:.3f}"]

    same_dir = {}
    for method, cfg in [("fgsm", AttackConfig(epsilon=EPS, T=1)), ("mifgsm", AttackConfig(epsilon=EPS, T=5, mu=1.0))]:
        va, _ = _attack(method, x, y, target, None, cfg, robust=False)
        ra, _ = _attack(method, x, y, target, sio, cfg.with_(lam=LAM), robust=True)
        vv, rr = _rates(target, va, y), _rates(target, ra, y)
        same_dir[method] = rr["ASR_prime"] >= vv["ASR_prime"]
        parts.append(f"{method} ASR' {vv['ASR_prime']:.3f} vs {rr['ASR_prime']:.3f}")

    # R-C&W first, then the vanilla confidence margin is calibrated so Avg.l2 matches within 0.1
    cw_cfg = AttackConfig(c=1.0, T=T_ITERS, lr=0.01)
    ra, rres = _attack("cw", x, y, target, sio, cw_cfg.with_(lam=LAM, success_on="transmitted"), robust=True)
    r_l2 = float((ra - x).reshape(len(x), -1).norm(dim=1).mean())
    best = None
    for k in (0.0, 1.0, 2.0, 4.0, 8.0):
        va, _ = _attack("cw", x, y, target, None, cw_cfg.with_(k=k), robust=False)
        v_l2 = float((va - x).reshape(len(x), -1).norm(dim=1).mean())
        if best is None or abs(v_l2 - r_l2) < abs(best[1] - r_l2):
            best = (k, v_l2, va)
        if abs(v_l2 - r_l2) <= 0.1:
            break
    k, v_l2, va = best
    vv, rr = _rates(target, va, y), _rates(target, ra, y)
    matched = abs(v_l2 - r_l2) <= 0.1
    same_dir["cw"] = matched and rr["ASR_prime"] >= vv["ASR_prime"]
    parts.append(f"cw (k={k:g}) ASR' {vv['ASR_prime']:.3f} vs {rr['ASR_prime']:.3f} at l2 {v_l2:.3f}/{r_l2:.3f}")

    ok = pgd_ok and all(same_dir.values())
    _record(acceptance_log, 7, ok, "; ".join(parts))
    assert ok


# --- 8. lambda degeneracy and sweep ----------------------------------------------------------------


def test_criterion_08_lambda_degeneracy_and_sweep(acceptance_log, target, sio, eval_set, pgd_aes):
    x, y = eval_set
    identical = True
    for method, cfg in [
        ("fgsm", AttackConfig(epsilon=EPS, T=1, seed=3)),
        ("pgd", AttackConfig(epsilon=EPS, alpha=ALPHA, T=T_ITERS, seed=3)),
        ("mifgsm", AttackConfig(epsilon=EPS, T=5, seed=3)),
        ("cw", AttackConfig(T=T_ITERS, seed=3)),
    ]:
        a = run_attack(method, x[:50], y[:50], target, sio, cfg.with_(lam=1.0), robust=True, check=False)
        b = run_attack(method, x[:50], y[:50], target, None, cfg, robust=False, check=False)
        identical &= torch.equal(a.adversarial, b.adversarial)

    grid = [round(0.1 * i, 1) for i in range(1, 10)]
    cfg = AttackConfig(epsilon=EPS, alpha=ALPHA, T=T_ITERS)
    rows = []
    for lam in grid:
        if lam == LAM:
            aes = pgd_aes[1]
        else:
            aes, _ = _attack("pgd", x, y, target, sio, cfg.with_(lam=lam), robust=True)
        rows.append(_rates(target, aes, y))
    s_asr = spearman(grid, [r["ASR"] for r in rows])
    s_asrp = spearman(grid, [r["ASR_prime"] for r in rows])
    ok = identical and s_asr >= 0 and s_asrp <= 0
    trace = " ".join(f"{lam}:{r['ASR']:.2f}/{r['ASR_prime']:.2f}" for lam, r in zip(grid, rows))
    _record(acceptance_log, 8, ok, f"lambda=1 bitwise identical={identical}; spearman(lambda, ASR) {s_asr:+.3f}, "
            f"spearman(lambda, ASR') {s_asrp:+.3f} [{trace}]")
    assert ok


# --- 9. small-instance oracle ------------------------------------------------------------------------


class _Linear2D:
    def __init__(self, W, b):
        self.W, self.b = W, b

    def logits(self, x):
        return x @ self.W.T + self.b

    @torch.no_grad()
    def classify(self, x):
        return self.logits(x).argmax(1)


def test_criterion_09_linear_grid_oracle(acceptance_log):
    g = torch.Generator().manual_seed(9)
    n_inst, agree, found_grid, false_success, misses = 200, 0, 0, 0, 0
    ticks = torch.linspace(0, 1, 200, dtype=torch.float64)
    for _ in range(n_inst):
        W = torch.randn(2, 2, generator=g, dtype=torch.float64)
        b = torch.randn(2, generator=g, dtype=torch.float64) * 0.3
        t = _Linear2D(W, b)
        x = torch.rand(1, 2, generator=g, dtype=torch.float64)
        eps = float(torch.rand(1, generator=g)) * 0.5 + 0.01
        y = t.classify(x)
        lo, hi = (x[0] - eps).clamp(0, 1), (x[0] + eps).clamp(0, 1)
        gx = lo[0] + (hi[0] - lo[0]) * ticks
        gy = lo[1] + (hi[1] - lo[1]) * ticks
        pts = torch.stack(torch.meshgrid(gx, gy, indexing="ij"), -1).reshape(-1, 2)
        grid_adv = bool((t.classify(pts) != y).any())
        res = run_attack("pgd", x, y, t, None, AttackConfig(epsilon=eps, alpha=2 / 255, T=100), robust=False, check=True)
        atk = bool(res.success_clean[0])
        inside = bool(((res.adversarial - x).abs() <= eps + 1e-12).all())
        found_grid += grid_adv
        if atk and not grid_adv:
            false_success += 1
        if grid_adv and not atk:
            misses += 1
        agree += (atk == grid_adv) and inside
    ok = misses == 0 and false_success == 0 and agree == n_inst
    _record(acceptance_log, 9, ok, f"{n_inst} instances, grid finds AEs in {found_grid}; rpgd misses {misses}, "
            f"false successes {false_success}")
    assert ok


# --- 10. error-analysis ordering -------------------------------------------------------------------


def test_criterion_10_error_analysis_ordering(acceptance_log, target, sio, eval_set, pgd_aes):
    _, y = eval_set
    aes = pgd_aes[1]
    res = error_analysis(aes, y, CHANNEL, sio, target)
    s, f = res["success"], res["fail"]
    if s is None or f is None:
        ok = False
        detail = f"one split is empty (success={s}, fail={f})"
    else:
        ok = s["osn_noise_mse"] <= f["osn_noise_mse"] and s["sim_error_mse"] <= f["sim_error_mse"]
        detail = (f"success n={s['n']} noise {s['osn_noise_mse']:.3f} sim-error {s['sim_error_mse']:.3f}; "
                  f"fail n={f['n']} noise {f['osn_noise_mse']:.3f} sim-error {f['sim_error_mse']:.3f}")
    _record(acceptance_log, 10, ok, detail)
    assert ok


# --- 11. defenses --------------------------------------------------------------------------------------


def test_criterion_11_defenses(acceptance_log, target, eval_set, pgd_aes):
    _, y = eval_set
    vanilla, robust = pgd_aes
    defenses = {
        "bitred:4": lambda t: bit_depth_reduce(t, 4),
        "jpeg:75": lambda t: jpeg_defense(t, 75),
        "rrp": lambda t: random_resize_pad(t, seed=0),
    }
    parts, ok = [], True
    for name, d in defenses.items():
        v = _rates(target, vanilla, y, d)["ASR_prime"]
        r = _rates(target, robust, y, d)["ASR_prime"]
        ok &= r >= v
        parts.append(f"{name} {v:.3f} -> {r:.3f}")
    _record(acceptance_log, 11, ok, "ASR' vanilla -> robust: " + ", ".join(parts))
    assert ok
