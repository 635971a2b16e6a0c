"""Command-line entry point: ``osnadv <command> ...``.

Every command reads the optional ``--config`` YAML file; explicit flags and
``--set key.sub=value`` pairs override it. Exit codes: 0 success, 1 usage or
configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import random
import sys
from pathlib import Path

from . import pipeline as pl
from .attacks import TABLE1_DEFAULTS, run_attack
from .channel import analyze_qf, get_channel, quantize8, transmit
from .data import load_image, make_synthetic, save_png
from .evaluation import acl_from_logits, error_analysis, evaluate_aes, parse_defense, summarize
from .jpeg_codec import approximation_error, estimate_qf, extract_quant_table
from .pairs import PairDataset, ingest_pair_dirs
from .sio_net import frozen, load_sio
from .sio_training import validate_sim
from .target_models import load_classifier

log = logging.getLogger("osnadv")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --- helpers -----------------------------------------------------------------------------


def _csv_list(text):
    return [t for t in (s.strip() for s in text.split(",")) if t]


def _float_list(text):
    try:
        return [float(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _qf_range(text):
    parts = text.split(":")
    try:
        nums = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a:b or a:b:step, got {text!r}") from None
    if len(nums) == 2:
        a, b, step = nums[0], nums[1], 10
    elif len(nums) == 3:
        a, b, step = nums
    else:
        raise argparse.ArgumentTypeError(f"expected a:b or a:b:step, got {text!r}")
    if not (1 <= a <= b <= 100) or step < 1:
        raise argparse.ArgumentTypeError(f"bad quality range {text!r}")
    return list(range(a, b + 1, step))


# flag name -> dotted config key
FLAG_KEYS = {
    "seed": "seed",
    "out": "out_dir",  # transmit reads args.out directly
    "channel": "channel",
    "target": "target.checkpoint",
    "sio": "sio.checkpoint",
    "method": "attack.method",
    "lam": "attack.lam",
    "epsilon": "attack.epsilon",
    "alpha": "attack.alpha",
    "T": "attack.T",
    "mu": "attack.mu",
    "c": "attack.c",
    "success_on": "attack.success_on",
    "defense": "eval.defense",
    "n_pairs": "data.n_pairs",
    "n_eval": "data.n_eval",
    "data": "data.source",
    "epochs": "sio.train.max_epochs",
    "sio_lr": "sio.train.lr",
    "q": "sio.q",
    "widths": "sio.widths",
    "pairs_dir": "pairs.dir",
}


def _config(args) -> pl.ExperimentConfig:
    overrides = list(args.set or [])
    scale = getattr(args, "eps_scale", 255.0)
    if scale <= 0:
        raise pl.ConfigError("--eps-scale must be positive")
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if flag == "widths":
            value = [int(w) for w in _csv_list(value)]
        if flag in ("epsilon", "alpha"):
            value = value * 255.0 / scale
        overrides.append(_nest(key.split("."), value))
    if getattr(args, "attacks", None):
        overrides.append({"pairs": {"attacks": _csv_list(args.attacks)}})
    if getattr(args, "vanilla", False) and getattr(args, "robust", False):
        raise pl.ConfigError("--vanilla and --robust are mutually exclusive")
    if getattr(args, "vanilla", False):
        overrides.append({"attack": {"robust": False}})
    if getattr(args, "robust", False):
        overrides.append({"attack": {"robust": True}})
    return pl.ExperimentConfig.load(args.config, overrides)


def _nest(parts, value):
    for p in reversed(parts):
        value = {p: value}
    return value


def _write_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=float))
    return path


def _write_csv(rows, path, fields):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return path


def _skip(man: pl.Manifest, name, digest, force) -> bool:
    if not force and man.fresh(name, digest):
        print(f"{name}: up to date (config hash {digest}); use --force to rebuild")
        return True
    return False


def _target(cfg):
    return pl.stage_target(cfg)


def _sio_or_none(cfg):
    ck = cfg["sio"]["checkpoint"]
    if not ck:
        return None
    if not Path(ck).exists():
        raise pl.ConfigError(f"sio checkpoint {ck} does not exist")
    return frozen(load_sio(ck))


# --- commands ------------------------------------------------------------------------------


def cmd_train_target(args):
    cfg = _config(args)
    if args.target_epochs is not None:
        cfg = cfg.with_overrides({"target": {"epochs": args.target_epochs}})
    model = pl.stage_target(cfg, force=args.force)
    x, y = pl.load_split(cfg, "eval")
    print(json.dumps({"eval_accuracy": model.accuracy(x, y), "checkpoint": str(cfg.out_dir / "target" / "cnn.pt")}))


def cmd_gen_aes(args):
    cfg = _config(args)
    out = Path(args.out_dir or cfg.out_dir / "gen_aes")
    man = pl.Manifest(out)
    digest = pl.config_hash({"t": pl._target_hash(cfg), "attacks": cfg["pairs"]["attacks"], "n": cfg["data"]["n_pairs"]})
    if _skip(man, "gen-aes", digest, args.force):
        return
    target = _target(cfg)
    x, y = pl.load_split(cfg, "pairs")
    rng = random.Random(pl.derive_seed(cfg["seed"], "gen-aes"))
    methods = cfg["pairs"]["attacks"]
    choice = [rng.choice(methods) for _ in range(len(x))]
    ok = target.classify(x) == y
    names, advs, labels, attacks = [], [], [], []
    for m in dict.fromkeys(methods):
        idx = [i for i in range(len(x)) if choice[i] == m and ok[i]]
        if not idx:
            continue
        res = run_attack(m, x[idx], y[idx], target, None, TABLE1_DEFAULTS[m], robust=False, check=False)
        for j, i in enumerate(idx):
            names.append(f"{i:05d}.png")
            advs.append(quantize8(res.adversarial[j]))
            labels.append(int(y[i]))
            attacks.append(m)
    pl.write_labeled_dir(advs, labels, out, names)
    _write_json(dict(zip(names, attacks)), out / "attacks.json")
    man.record("gen-aes", digest, [out / pl.LABELS_FILE])
    print(f"wrote {len(names)} AEs to {out}")


def cmd_transmit(args):
    cfg = _config(args)
    spec = get_channel(cfg["channel"])
    if not args.out:
        raise pl.ConfigError("transmit needs --out DIR")
    src, dst = Path(args.input), Path(args.out)
    if not src.is_dir():
        raise pl.ConfigError(f"input directory {src} does not exist")
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise pl.ConfigError(f"no images in {src}")
    man = pl.Manifest(dst)
    digest = pl.config_hash({"channel": spec.id, "files": [(p.name, p.stat().st_size, p.stat().st_mtime_ns) for p in files]})
    if _skip(man, "transmit", digest, args.force):
        return
    (dst / "jpeg").mkdir(parents=True, exist_ok=True)
    for p in files:
        img, data = transmit(spec, load_image(p))
        save_png(img, dst / f"{p.stem}.png")
        (dst / "jpeg" / f"{p.stem}.jpg").write_bytes(data)
    if (src / pl.LABELS_FILE).exists():
        (dst / pl.LABELS_FILE).write_text((src / pl.LABELS_FILE).read_text())
    man.record("transmit", digest, [dst / "jpeg"])
    print(f"transmitted {len(files)} images through {spec.id} into {dst}")


def cmd_build_pairs(args):
    cfg = _config(args)
    if args.from_dirs:
        up, down = args.from_dirs
        ds = ingest_pair_dirs(up, down, channel_id=cfg["channel"])
        out = Path(args.out_dir or cfg.out_dir / "pairs" / "ingested")
        ds.save(out)
        print(f"ingested {len(ds)} pairs into {out}")
        return
    target = _target(cfg)
    ds = pl.stage_pairs(cfg, target, force=args.force)
    print(f"{len(ds)} pairs in {cfg.out_dir / 'pairs' / cfg['channel']}")


def cmd_train_sio(args):
    cfg = _config(args)
    if args.time_budget is not None:
        cfg = cfg.with_overrides({"sio": {"train": {"time_budget": args.time_budget}}})
    if cfg["sio"]["checkpoint"]:
        raise pl.ConfigError("train-sio writes a new surrogate; drop --sio / sio.checkpoint")
    if cfg["pairs"]["dir"]:
        pairs = PairDataset.load(cfg["pairs"]["dir"])
    else:
        pairs = pl.stage_pairs(cfg, _target(cfg))
    sio = pl.stage_sio(cfg, pairs, force=args.force)
    metrics = pl.stage_eval_sio(cfg, sio, pairs)
    print(json.dumps({"checkpoint": str(cfg.out_dir / "sio" / "sio.pt"), "validation": metrics}))


def cmd_eval_sio(args):
    cfg = _config(args)
    sio = _sio_or_none(cfg)
    if sio is None:
        raise pl.ConfigError("eval-sio needs --sio CKPT")
    pdir = cfg["pairs"]["dir"]
    if not pdir:
        raise pl.ConfigError("eval-sio needs --pairs DIR")
    metrics = validate_sim(sio, PairDataset.load(pdir)).to_dict()
    out = _write_json(metrics, Path(args.out_dir or cfg.out_dir / "eval_sio") / "sim_metrics.json")
    _write_csv([metrics], out.with_suffix(".csv"), ["psnr", "ssim", "mse", "n"])
    print(json.dumps(metrics))


def cmd_attack(args):
    cfg = _config(args)
    a = cfg["attack"]
    tag = f"{a['method']}-{'robust' if a['robust'] else 'vanilla'}-lam{a['lam']}"
    out = Path(args.out_dir or (args.out if args.out else cfg.out_dir / "aes" / tag))
    man = pl.Manifest(out)
    digest = pl.config_hash({"t": pl._target_hash(cfg) if not cfg["target"]["checkpoint"] else cfg["target"]["checkpoint"],
                             "sio": cfg["sio"]["checkpoint"], "attack": a, "data": cfg["data"], "seed": cfg["seed"]})
    if _skip(man, "attack", digest, args.force):
        return
    needs_sio = a["robust"] and float(a["lam"]) < 1.0
    sio = _sio_or_none(cfg)
    if needs_sio and sio is None:
        raise pl.ConfigError("robust attack with lam < 1 needs --sio CKPT (or use --vanilla)")
    target = _target(cfg)
    aes, x, y, res = pl.stage_attack(cfg, target, sio)
    pl.write_labeled_dir(aes, y, out)
    pl.write_labeled_dir(x, y, out / "clean")
    rows = [{"file": f"{i:05d}.png", "label": int(y[i]), "success_clean": bool(res.success_clean[i]),
             "l2": float(res.l2[i]), "linf": float(res.linf[i])} for i in range(len(y))]
    _write_csv(rows, out / "attack_log.csv", ["file", "label", "success_clean", "l2", "linf"])
    with open(out / "results.jsonl", "w") as fh:
        for i, r in enumerate(rows):
            fh.write(json.dumps({"path": r["file"], "y": r["label"], "success_clean": r["success_clean"],
                                 "l2": r["l2"], "linf": r["linf"], "iters": int(res.iterations_used[i])}) + "\n")
    man.record("attack", digest, [out / pl.LABELS_FILE, out / "clean" / pl.LABELS_FILE])
    print(json.dumps({"out": str(out), "n": len(y), "ASR": float(res.success_clean.float().mean()),
                      "avg_l2": float(res.l2.mean())}))


def cmd_evaluate(args):
    cfg = _config(args)
    if not args.aes:
        raise pl.ConfigError("evaluate needs --aes DIR")
    aes_dir = Path(args.aes)
    aes, y = pl.read_labeled_dir(aes_dir)
    clean = pl.read_labeled_dir(aes_dir / "clean")[0] if (aes_dir / "clean" / pl.LABELS_FILE).exists() else None
    spec = cfg.classifier_spec()
    if spec.checkpoint is None:
        raise pl.ConfigError("evaluate needs --target CKPT")
    if not Path(spec.checkpoint).exists():
        raise pl.ConfigError(f"target checkpoint {spec.checkpoint} does not exist")
    target = load_classifier(spec)
    channel = get_channel(cfg["channel"])
    defense = parse_defense(cfg["eval"]["defense"], seed=pl.derive_seed(cfg["seed"], "defense"))
    transmitted = channel(aes)
    shown = defense(transmitted) if defense else transmitted
    rec = evaluate_aes(target, aes, y, lambda _: shown, clean=clean)
    row = summarize(rec)
    row["ACL_true"] = acl_from_logits(rec.logits_transmitted, y, True)
    row["ACL_other"] = acl_from_logits(rec.logits_transmitted, y, False)
    report = {"metrics": row, "channel": channel.id, "defense": cfg["eval"]["defense"], "aes": str(aes_dir)}
    sio = _sio_or_none(cfg)
    if sio is not None:
        report["error_analysis"] = error_analysis(aes, y, channel, sio, target, transmitted=transmitted)
    out = Path(args.out_dir or cfg.out_dir / "evaluate")
    _write_json(report, out / "metrics.json")
    _write_csv([row], out / "metrics.csv", ["ASR", "ASR_prime", "avg_l2", "ACL_true", "ACL_other", "N"])
    _write_csv(list(rec.rows()), out / "per_image.csv", ["index", "y", "pred", "pred_transmitted", "l2", "linf"])
    print(json.dumps(row))


def cmd_sweep_lambda(args):
    cfg = _config(args)
    grid = args.grid if args.grid is not None else cfg["sweep"]["grid"]
    out = Path(args.out_dir or cfg.out_dir / "sweep")
    man = pl.Manifest(out)
    digest = pl.config_hash({"cfg": cfg.values, "grid": grid})
    if _skip(man, "sweep-lambda", digest, args.force):
        return
    res = pl.sweep_lambda(cfg, grid, out_dir=out)
    man.record("sweep-lambda", digest, [out / "lambda_sweep.csv"])
    print(f"spearman(lambda, ASR) = {res['spearman_asr']:.3f}; spearman(lambda, ASR') = {res['spearman_asr_prime']:.3f}")
    for r in res["rows"]:
        print(f"{r['lambda']:.2f}  ASR {r['asr']:.3f}  ASR' {r['asr_prime']:.3f}  L2 {r['avg_l2']:.3f}")


def cmd_estimate_qf(args):
    for f in args.files:
        try:
            qf = estimate_qf(extract_quant_table(Path(f).read_bytes()))
        except OSError as exc:
            raise pl.ConfigError(f"cannot read {f}: {exc}") from None
        print(f"{f}\t{qf}")


def cmd_approx_error(args):
    modes = _csv_list(args.modes)
    images, _ = make_synthetic(args.n, seed=args.seed if args.seed is not None else 0, size=args.size)
    rows = approximation_error(images.double(), args.qf_range, modes)
    out = Path(args.out_dir or "approx_error")
    path = _write_csv(rows, out / "approx_error.csv", ["qf", "mode", "mean_l2"])
    from .plotting import plot_approx_error

    plot_approx_error(rows, out / "approx_error.png")
    w = csv.DictWriter(sys.stdout, fieldnames=["qf", "mode", "mean_l2"])
    w.writeheader()
    w.writerows(rows)
    log.info("wrote %s", path)


def cmd_analyze_qf(args):
    res = analyze_qf(args.directory)
    out = Path(args.out_dir or Path(args.directory) / "qf_analysis")
    _write_json(res.to_dict(), out / "qf_analysis.json")
    _write_csv([{"qf": q, "count": n} for q, n in sorted(res.counts.items())], out / "qf_histogram.csv", ["qf", "count"])
    from .plotting import plot_qf_histogram

    plot_qf_histogram(res.counts, out / "qf_histogram.png")
    print(json.dumps(res.to_dict()))


def cmd_run(args):
    cfg = _config(args)
    report = pl.run_pipeline(cfg, force=args.force)
    print(json.dumps(report["metrics"]))


# --- parser --------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="run directory (config out_dir)")
    common.add_argument("--force", action="store_true", help="rebuild artifacts even if up to date")
    common.add_argument("-v", "--verbose", action="store_true")

    def add(sub, name, fn, help_, *flags):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(fn=fn)
        for f in flags:
            f(p)
        return p

    def channel(p):
        p.add_argument("--channel", help="mock-fb, mock-alt or jpeg:QF")

    def target(p):
        p.add_argument("--target", help="classifier checkpoint")

    def sio(p):
        p.add_argument("--sio", help="surrogate checkpoint")

    def outdir(p):
        p.add_argument("--out-dir", dest="out_dir", help="directory for this command's outputs")

    def attack_flags(p):
        p.add_argument("--method", choices=["fgsm", "pgd", "mifgsm", "cw"])
        p.add_argument("--lam", "--lambda", dest="lam", type=float)
        p.add_argument("--epsilon", "--eps", dest="epsilon", type=float, help="budget, on the --eps-scale scale")
        p.add_argument("--alpha", type=float, help="step size, on the --eps-scale scale")
        p.add_argument("--eps-scale", dest="eps_scale", type=float, default=255.0,
                       help="scale of --eps/--alpha: 255 (default) or 1 for the [0, 1] range")
        p.add_argument("--T", type=int)
        p.add_argument("--mu", type=float)
        p.add_argument("--c", type=float)
        p.add_argument("--success-on", dest="success_on", choices=["clean", "transmitted"])
        p.add_argument("--vanilla", action="store_true", help="drop the surrogate term")
        p.add_argument("--robust", action="store_true", help="keep the surrogate term (the default)")
        p.add_argument("--n-eval", dest="n_eval", type=int)
        p.add_argument("--data", help="synthetic, dir:PATH or cifar:ROOT")

    def pair_flags(p):
        p.add_argument("--attacks", help="comma-separated attack mix")
        p.add_argument("--n", dest="n_pairs", type=int)

    def sio_train_flags(p):
        p.add_argument("--pairs", dest="pairs_dir")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", dest="sio_lr", type=float)
        p.add_argument("--q", type=int)
        p.add_argument("--widths", help="comma-separated stage widths")
        p.add_argument("--time-budget", dest="time_budget", type=float, help="seconds")

    parser = _Parser(prog="osnadv", description="Adversarial examples that survive lossy image channels.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    add(sub, "train-target", cmd_train_target, "train the reference CNN",
        lambda p: p.add_argument("--target-epochs", type=int))
    add(sub, "gen-aes", cmd_gen_aes, "generate vanilla training AEs", pair_flags, target, outdir)
    p = add(sub, "transmit", cmd_transmit, "send a directory of images through a channel", channel)
    p.add_argument("--in", dest="input", required=True)
    p = add(sub, "build-pairs", cmd_build_pairs, "attack, transmit and store training pairs", channel, pair_flags, target, outdir)
    p.add_argument("--from-dirs", nargs=2, metavar=("UPLOADED", "DOWNLOADED"), help="ingest existing pairs")
    add(sub, "train-sio", cmd_train_sio, "fit the surrogate channel", channel, target, sio_train_flags)
    p = add(sub, "eval-sio", cmd_eval_sio, "noise PSNR/SSIM/MSE of a surrogate", sio, outdir)
    p.add_argument("--pairs", dest="pairs_dir")
    add(sub, "attack", cmd_attack, "craft AEs on the evaluation set", attack_flags, target, sio, channel, outdir)
    p = add(sub, "evaluate", cmd_evaluate, "ASR/ASR'/ACL of AEs after a channel", channel, target, sio, outdir)
    p.add_argument("--aes", required=True)
    p.add_argument("--defense", help="bitred:B, jpeg:QF or rrp")
    p = add(sub, "sweep-lambda", cmd_sweep_lambda, "ASR and ASR' across lambda", attack_flags, target, sio, channel, outdir)
    p.add_argument("--grid", type=_float_list)
    add(sub, "run", cmd_run, "full pipeline", attack_flags, channel, target, sio, pair_flags)

    jt = sub.add_parser("jpeg-tools", help="JPEG utilities")
    jsub = jt.add_subparsers(dest="tool", required=True, parser_class=_Parser)
    p = jsub.add_parser("estimate-qf", parents=[common], help="quality factor of JPEG files")
    p.add_argument("files", nargs="+")
    p.set_defaults(fn=cmd_estimate_qf)
    p = jsub.add_parser("approx-error", parents=[common], help="surrogate rounding error vs exact")
    p.add_argument("--qf-range", type=_qf_range, default=_qf_range("30:90:10"))
    p.add_argument("--modes", default="cube,fourier:10")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    outdir(p)
    p.set_defaults(fn=cmd_approx_error)

    p = add(sub, "analyze-qf", cmd_analyze_qf, "QF histogram of a JPEG directory", outdir)
    p.add_argument("directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"osnadv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (pl.ConfigError, UsageError) as exc:
        print(f"osnadv: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pl.StageError as exc:
        print(f"osnadv: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FileNotFoundError, ValueError) as exc:
        print(f"osnadv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"osnadv: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
