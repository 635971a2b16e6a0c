"""Experiment configuration, artifact bookkeeping and the end-to-end stages.

A run directory collects every artifact together with ``manifest.json``,
which records the hash of the configuration slice that produced each one.
A stage whose recorded hash matches is skipped unless ``force`` is set.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import torch
import yaml
from scipy.stats import spearmanr

from . import data as data_mod
from .attacks import AttackConfig, run_attack
from .channel import build_pairs, get_channel, transmit_batch
from .evaluation import acl_from_logits, error_analysis, evaluate_aes, parse_defense, summarize
from .pairs import PairDataset
from .sio_net import SIOConfig, frozen, load_sio, save_sio
from .sio_training import TrainConfig, split_indices, train_sio, validate_sim
from .target_models import ClassifierSpec, load_classifier, train_reference_cnn

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration (CLI exit code 1)."""


class StageError(RuntimeError):
    """A pipeline stage failed (CLI exit code 2)."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out_dir": "runs/default",
    "channel": "mock-fb",
    "data": {
        "source": "synthetic",
        "n_target_train": 10000,
        "n_pairs": 700,
        "n_eval": 200,
        "style": {"min_contrast": 0.3, "max_noise": 0.04},
    },
    "target": {
        "architecture": "refcnn",
        "checkpoint": None,
        "num_classes": 10,
        "input_size": 32,
        "width": 32,
        "batch_norm": True,
        "epochs": 8,
        "lr": 3e-4,
        "min_accuracy": 0.8,
    },
    "pairs": {"attacks": ["fgsm", "pgd", "mifgsm", "cw"], "dir": None},
    "sio": {
        "checkpoint": None,
        "widths": [64, 128, 256, 512],
        "q": 92,
        "mode": "cube",
        "r": 16,
        "residual": True,
        "jpeg_tail": True,
        "scse": True,
        "train": {"lr": 1e-4, "max_epochs": 100, "batch_size": 32, "plateau_patience": 10, "time_budget": None},
    },
    "attack": {
        "method": "pgd",
        "robust": True,
        "epsilon": 5,
        "alpha": 2,
        "T": 40,
        "mu": 1.0,
        "lam": 0.3,
        "c": 1.0,
        "k": 0.0,
        "lr": 0.01,
        "success_on": "clean",
        "momentum_norm": "grad",
        "rebase": "origin",
    },
    "eval": {"defense": None, "error_analysis": True},
    "sweep": {"grid": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]},
}


# --- config handling -------------------------------------------------------------------


def _merge(base: dict, over: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[k], dict) and not (k == "style"):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be a mapping")
            out[k] = _merge(out[k], v, key + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str):
    """``a.b.c=value`` with the value parsed as YAML (so numbers, lists and null work)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value in {text!r}: {exc}") from None
    nested: Any = value
    for part in reversed(key.strip().split(".")):
        nested = {part: nested}
    return nested


@dataclass
class ExperimentConfig:
    """Nested experiment settings. Attack budgets (``epsilon``, ``alpha``) are on the 0-255 scale."""

    values: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, path=None, overrides: Sequence = ()) -> "ExperimentConfig":
        values = copy.deepcopy(DEFAULTS)
        if path is not None:
            try:
                with open(path) as fh:
                    loaded = yaml.safe_load(fh) or {}
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            except yaml.YAMLError as exc:
                raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
            if not isinstance(loaded, dict):
                raise ConfigError(f"config {path} must be a mapping")
            values = _merge(values, loaded)
        for o in overrides:
            values = _merge(values, parse_override(o) if isinstance(o, str) else o)
        cfg = cls(values)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def get(self, dotted: str):
        node = self.values
        for part in dotted.split("."):
            node = node[part]
        return node

    def with_overrides(self, *overrides) -> "ExperimentConfig":
        values = self.values
        for o in overrides:
            values = _merge(values, parse_override(o) if isinstance(o, str) else o)
        cfg = ExperimentConfig(values)
        cfg.validate()
        return cfg

    def dump(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            yaml.safe_dump(self.values, fh, sort_keys=False)

    @property
    def out_dir(self) -> Path:
        return Path(self.values["out_dir"])

    def validate(self) -> None:
        v = self.values
        try:
            get_channel(v["channel"])
            self.attack_config()
            self.sio_config()
            self.train_config()
            parse_defense(v["eval"]["defense"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if v["attack"]["method"] not in ("fgsm", "pgd", "mifgsm", "cw"):
            raise ConfigError(f"unknown attack method {v['attack']['method']!r}")
        for m in v["pairs"]["attacks"]:
            if m not in ("fgsm", "pgd", "mifgsm", "cw"):
                raise ConfigError(f"unknown attack {m!r} in pairs.attacks")
        if not v["pairs"]["attacks"]:
            raise ConfigError("pairs.attacks must not be empty")
        for name in ("n_target_train", "n_pairs", "n_eval"):
            if int(v["data"][name]) < 1:
                raise ConfigError(f"data.{name} must be positive")

    def attack_config(self, **changes) -> AttackConfig:
        a = dict(self.values["attack"], **changes)
        return AttackConfig(
            epsilon=float(a["epsilon"]) / 255.0,
            alpha=None if a["alpha"] is None else float(a["alpha"]) / 255.0,
            T=int(a["T"]),
            mu=float(a["mu"]),
            lam=float(a["lam"]),
            c=float(a["c"]),
            k=float(a["k"]),
            lr=float(a["lr"]),
            seed=derive_seed(self.values["seed"], "attack"),
            success_on=a["success_on"],
            momentum_norm=a["momentum_norm"],
            rebase=a["rebase"],
        )

    def sio_config(self) -> SIOConfig:
        s = self.values["sio"]
        return SIOConfig(
            depth=len(s["widths"]),
            widths=tuple(s["widths"]),
            q=int(s["q"]),
            mode=s["mode"],
            r=int(s["r"]),
            residual=bool(s["residual"]),
            jpeg_tail=bool(s["jpeg_tail"]),
            scse=bool(s["scse"]),
        )

    def train_config(self) -> TrainConfig:
        t = self.values["sio"]["train"]
        return TrainConfig(
            lr=float(t["lr"]),
            max_epochs=int(t["max_epochs"]),
            batch_size=int(t["batch_size"]),
            plateau_patience=int(t["plateau_patience"]),
            seed=derive_seed(self.values["seed"], "train-sio"),
        )

    def classifier_spec(self) -> ClassifierSpec:
        t = self.values["target"]
        return ClassifierSpec(
            architecture=t["architecture"],
            num_classes=int(t["num_classes"]),
            input_size=int(t["input_size"]),
            checkpoint=t["checkpoint"],
            width=int(t["width"]),
            batch_norm=bool(t["batch_norm"]),
        )


def derive_seed(master: int, stage: str) -> int:
    """Stable per-stage seed from the master seed."""
    digest = hashlib.sha256(f"{int(master)}:{stage}".encode()).hexdigest()
    return int(digest[:8], 16)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# --- artifact manifest -----------------------------------------------------------------


class Manifest:
    """``manifest.json`` in a run directory: artifact name -> {hash, paths, time}."""

    def __init__(self, root):
        self.root = Path(root)
        self.path = self.root / "manifest.json"
        self.entries = json.loads(self.path.read_text()) if self.path.exists() else {}

    def fresh(self, name: str, digest: str) -> bool:
        e = self.entries.get(name)
        return bool(e) and e["hash"] == digest and all((self.root / p).exists() for p in e["paths"])

    def record(self, name: str, digest: str, paths: Sequence) -> None:
        rel = [str(Path(p).resolve().relative_to(self.root.resolve())) for p in paths]
        self.entries[name] = {"hash": digest, "paths": rel, "created": time.strftime("%Y-%m-%dT%H:%M:%S")}
        self.root.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.entries, indent=2, sort_keys=True))


# --- datasets ------------------------------------------------------------------------


def load_split(cfg: ExperimentConfig, split: str):
    """Images and labels for ``target`` (classifier training), ``pairs`` or ``eval``."""
    d = cfg["data"]
    n = {"target": d["n_target_train"], "pairs": d["n_pairs"], "eval": d["n_eval"]}[split]
    source = d["source"]
    if source == "synthetic":
        return data_mod.make_synthetic(int(n), seed=derive_seed(cfg["seed"], f"data-{split}"), **d["style"])
    if source.startswith("dir:"):
        x, y = read_labeled_dir(source[4:])
    elif source.startswith("cifar:"):
        x, y = data_mod.load_cifar10_batches(source[6:], train=split == "target")
    else:
        raise ConfigError(f"unknown data source {source!r}")
    gen = torch.Generator().manual_seed(derive_seed(cfg["seed"], f"data-{split}"))
    idx = torch.randperm(len(x), generator=gen)[: int(n)]
    return x[idx], y[idx]


LABELS_FILE = "labels.csv"


def write_labeled_dir(x, y, directory, names=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = names or [f"{i:05d}.png" for i in range(len(x))]
    with open(directory / LABELS_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "label"])
        for name, xi, yi in zip(names, x, y):
            data_mod.save_png(xi, directory / name)
            w.writerow([name, int(yi)])
    return directory


def read_labeled_dir(directory):
    """PNG images listed in ``labels.csv`` (columns ``file,label``)."""
    directory = Path(directory)
    path = directory / LABELS_FILE
    if not path.exists():
        raise ConfigError(f"{directory} has no {LABELS_FILE}")
    xs, ys = [], []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            xs.append(data_mod.load_image(directory / row["file"]))
            ys.append(int(row["label"]))
    if not xs:
        raise ConfigError(f"{path} lists no images")
    return torch.stack(xs), torch.tensor(ys, dtype=torch.long)


# --- stages ----------------------------------------------------------------------------


def _stage(name):
    def wrap(fn):
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except (ConfigError, StageError):
                raise
            except Exception as exc:  # noqa: BLE001 - rewrapped with the stage name
                raise StageError(name, exc) from exc

        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run

    return wrap


def _target_hash(cfg):
    return config_hash({"target": cfg["target"], "data": cfg["data"], "seed": cfg["seed"]})


@_stage("train-target")
def stage_target(cfg: ExperimentConfig, force=False):
    spec = cfg.classifier_spec()
    if spec.checkpoint is not None:
        if not Path(spec.checkpoint).exists():
            raise ConfigError(f"target checkpoint {spec.checkpoint} does not exist")
        return load_classifier(spec)
    root = cfg.out_dir
    man = Manifest(root)
    ckpt = root / "target" / "cnn.pt"
    digest = _target_hash(cfg)
    if not force and man.fresh("target", digest):
        log.info("target classifier up to date, loading %s", ckpt)
        return load_classifier(ClassifierSpec(**{**spec.__dict__, "checkpoint": str(ckpt)}))
    x, y = load_split(cfg, "target")
    t = cfg["target"]
    model, report = train_reference_cnn(
        x, y, seed=derive_seed(cfg["seed"], "train-target"), spec=spec, epochs=int(t["epochs"]),
        lr=float(t["lr"]), min_accuracy=t["min_accuracy"], checkpoint=str(ckpt),
    )
    (root / "target" / "train_report.json").write_text(
        json.dumps({"val_accuracy": report.val_accuracy, "train_accuracy": report.train_accuracy,
                    "epochs": report.epochs, "seconds": report.seconds, "history": report.history}, indent=2)
    )
    man.record("target", digest, [ckpt])
    return model


def _pairs_hash(cfg):
    return config_hash({"t": _target_hash(cfg), "pairs": cfg["pairs"], "channel": cfg["channel"],
                        "n": cfg["data"]["n_pairs"]})


@_stage("build-pairs")
def stage_pairs(cfg: ExperimentConfig, target, force=False) -> PairDataset:
    if cfg["pairs"]["dir"]:
        return PairDataset.load(cfg["pairs"]["dir"])
    root = cfg.out_dir
    man = Manifest(root)
    pdir = root / "pairs" / cfg["channel"]
    digest = _pairs_hash(cfg)
    if not force and man.fresh("pairs", digest):
        return PairDataset.load(pdir)
    x, y = load_split(cfg, "pairs")
    ds = build_pairs(get_channel(cfg["channel"]), x, y, target, cfg["pairs"]["attacks"],
                     seed=derive_seed(cfg["seed"], "build-pairs"))
    if len(ds) < 2:
        raise RuntimeError(f"only {len(ds)} pairs were produced")
    man.record("pairs", digest, [ds.save(pdir)])
    return ds


def _sio_hash(cfg):
    return config_hash({"p": _pairs_hash(cfg) if not cfg["pairs"]["dir"] else cfg["pairs"]["dir"],
                        "sio": {k: v for k, v in cfg["sio"].items() if k != "checkpoint"}})


@_stage("train-sio")
def stage_sio(cfg: ExperimentConfig, pairs: Optional[PairDataset], force=False):
    if cfg["sio"]["checkpoint"]:
        if not Path(cfg["sio"]["checkpoint"]).exists():
            raise ConfigError(f"sio checkpoint {cfg['sio']['checkpoint']} does not exist")
        return frozen(load_sio(cfg["sio"]["checkpoint"]))
    root = cfg.out_dir
    man = Manifest(root)
    ckpt, log_csv = root / "sio" / "sio.pt", root / "sio" / "train_log.csv"
    digest = _sio_hash(cfg)
    if not force and man.fresh("sio", digest):
        return frozen(load_sio(ckpt))
    if pairs is None:
        raise ConfigError("training the surrogate needs a pair dataset")
    budget = cfg["sio"]["train"]["time_budget"]
    model, tlog = train_sio(pairs, cfg.train_config(), cfg.sio_config(), log_path=log_csv,
                            time_budget=None if budget is None else float(budget))
    save_sio(model, ckpt, extra={"best_epoch": tlog.best_epoch, "best_val": tlog.best_val})
    from .plotting import plot_training_curve

    plot_training_curve(tlog.rows, root / "sio" / "training_curve.png")
    man.record("sio", digest, [ckpt, log_csv])
    return frozen(model)


@_stage("eval-sio")
def stage_eval_sio(cfg: ExperimentConfig, sio, pairs: PairDataset) -> dict:
    _, val = split_indices(len(pairs), cfg.train_config().val_fraction, cfg.train_config().seed)
    metrics = validate_sim(sio, pairs.subset(val)).to_dict()
    out = cfg.out_dir / "sio" / "sim_metrics.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(metrics, indent=2))
    return metrics


def _eval_set(cfg, target):
    x, y = load_split(cfg, "eval")
    ok = target.classify(x) == y
    if not ok.any():
        raise RuntimeError("the target misclassifies every evaluation image")
    return x[ok], y[ok]


@_stage("attack")
def stage_attack(cfg: ExperimentConfig, target, sio, x=None, y=None, **attack_changes):
    """Attack the correctly classified evaluation images; returns ``(aes, x, y, result)``."""
    if x is None:
        x, y = _eval_set(cfg, target)
    a = cfg["attack"]
    robust = bool(a["robust"])
    acfg = cfg.attack_config(**attack_changes)
    if robust and acfg.lam < 1.0 and sio is None:
        raise ConfigError("robust attack with lam < 1 needs a surrogate (sio.checkpoint or train-sio)")
    res = run_attack(a["method"], x, y, target, sio if robust else None, acfg, robust=robust, check=False)
    # the uploaded AE is what a PNG can store
    aes = torch.round(res.adversarial * 255) / 255
    return aes, x, y, res


@_stage("evaluate")
def stage_evaluate(cfg: ExperimentConfig, target, aes, x, y, sio=None) -> dict:
    channel = get_channel(cfg["channel"])
    transmitted, _ = transmit_batch(channel, aes)
    defense = parse_defense(cfg["eval"]["defense"], seed=derive_seed(cfg["seed"], "defense"))
    shown = defense(transmitted) if defense else transmitted
    rec = evaluate_aes(target, aes, y, lambda _: shown, clean=x)
    row = summarize(rec)
    row["ACL_true"] = acl_from_logits(rec.logits_transmitted, y, True)
    row["ACL_other"] = acl_from_logits(rec.logits_transmitted, y, False)
    report = {"metrics": row, "channel": channel.id, "defense": cfg["eval"]["defense"]}
    if sio is not None and cfg["eval"]["error_analysis"]:
        report["error_analysis"] = error_analysis(aes, y, channel, sio, target, transmitted=transmitted)
    return report


REPORT_COLUMNS = ["method", "robust", "lam", "ASR", "ASR_prime", "avg_l2", "ACL_true", "ACL_other", "N"]


def write_report(report: dict, directory) -> dict:
    """``report.json``, a one-row ``report.csv`` and a markdown table."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "report.json").write_text(json.dumps(report, indent=2, default=float))
    row = {**report.get("attack", {}), **report["metrics"]}
    with open(directory / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
        w.writeheader()
        w.writerow(row)
    lines = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
    lines.append("| " + " | ".join(_fmt(row.get(c)) for c in REPORT_COLUMNS) + " |")
    (directory / "report.md").write_text("\n".join(lines) + "\n")
    return row


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return "" if v is None else str(v)


def run_pipeline(cfg: ExperimentConfig, force=False) -> dict:
    """Target -> pairs -> surrogate -> attack -> evaluation; writes ``report/``."""
    a = cfg["attack"]
    needs_sio = bool(a["robust"]) and float(a["lam"]) < 1.0
    if needs_sio and cfg["sio"]["checkpoint"] and not Path(cfg["sio"]["checkpoint"]).exists():
        raise ConfigError(f"sio checkpoint {cfg['sio']['checkpoint']} does not exist")
    if cfg["target"]["checkpoint"] and not Path(cfg["target"]["checkpoint"]).exists():
        raise ConfigError(f"target checkpoint {cfg['target']['checkpoint']} does not exist")
    cfg.dump(cfg.out_dir / "config.yaml")
    torch.manual_seed(cfg["seed"])
    target = stage_target(cfg, force=force)
    pairs = None
    if not cfg["sio"]["checkpoint"]:
        pairs = stage_pairs(cfg, target, force=force)
    sio = stage_sio(cfg, pairs, force=force)
    report: dict = {}
    if pairs is not None:
        report["sim_metrics"] = stage_eval_sio(cfg, sio, pairs)
    aes, x, y, _ = stage_attack(cfg, target, sio)
    report.update(stage_evaluate(cfg, target, aes, x, y, sio))
    report["attack"] = {"method": a["method"], "robust": bool(a["robust"]), "lam": float(a["lam"])}
    report["config_hash"] = config_hash(cfg.values)
    write_report(report, cfg.out_dir / "report")
    return report


# --- lambda sweep ------------------------------------------------------------------------


def spearman(a, b) -> float:
    """Spearman rank correlation; a constant series has no trend and yields 0."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    return float(spearmanr(a, b).statistic)


SWEEP_COLUMNS = ["lambda", "asr", "asr_prime", "avg_l2"]


def sweep_lambda(cfg: ExperimentConfig, grid: Sequence[float], target=None, sio=None, x=None, y=None,
                 out_dir=None) -> dict:
    """Run the configured robust attack for each lambda; returns rows plus Spearman trends."""
    grid = [float(g) for g in grid]
    if not grid:
        raise ConfigError("lambda grid is empty")
    if any(not 0.0 < g <= 1.0 for g in grid):
        raise ConfigError("every lambda must lie in (0, 1]")
    if target is None:
        target = stage_target(cfg)
    if sio is None and any(g < 1.0 for g in grid):
        pairs = None if cfg["sio"]["checkpoint"] else stage_pairs(cfg, target)
        sio = stage_sio(cfg, pairs)
    if x is None:
        x, y = _eval_set(cfg, target)
    channel = get_channel(cfg["channel"])
    robust_cfg = cfg.with_overrides({"attack": {"robust": True}})
    rows = []
    for lam in grid:
        aes, _, _, _ = stage_attack(robust_cfg, target, sio, x=x, y=y, lam=lam)
        rec = evaluate_aes(target, aes, y, lambda a: transmit_batch(channel, a)[0], clean=x)
        s = summarize(rec)
        rows.append({"lambda": lam, "asr": s["ASR"], "asr_prime": s["ASR_prime"], "avg_l2": s["avg_l2"]})
        log.info("lambda %.2f: ASR %.3f ASR' %.3f", lam, s["ASR"], s["ASR_prime"])
    result = {
        "rows": rows,
        "spearman_asr": spearman([r["lambda"] for r in rows], [r["asr"] for r in rows]),
        "spearman_asr_prime": spearman([r["lambda"] for r in rows], [r["asr_prime"] for r in rows]),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "lambda_sweep.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
            w.writeheader()
            w.writerows(rows)
        (out_dir / "lambda_sweep.json").write_text(json.dumps(result, indent=2))
        from .plotting import plot_lambda_sweep

        plot_lambda_sweep(rows, out_dir / "lambda_sweep.png")
    return result
