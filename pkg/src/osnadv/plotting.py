"""Figures written next to the CSV/JSON outputs (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_lambda_sweep(rows, path):
    lam = [r["lambda"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(lam, [100 * r["asr"] for r in rows], "o-", label="ASR")
    ax.plot(lam, [100 * r["asr_prime"] for r in rows], "s-", label="ASR'")
    ax.set_xlabel("lambda")
    ax.set_ylabel("success rate (%)")
    ax.set_ylim(0, 105)
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_approx_error(rows, path):
    """Mean L2 error of each rounding surrogate against exact JPEG, per quality factor."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mode in dict.fromkeys(r["mode"] for r in rows):
        pts = sorted((r["qf"], r["mean_l2"]) for r in rows if r["mode"] == mode)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", label=mode)
    ax.set_xlabel("quality factor")
    ax.set_ylabel("mean L2 error")
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_qf_histogram(counts: dict, path):
    qs = sorted(int(q) for q in counts)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    total = sum(counts.values())
    ax.bar(qs, [counts.get(q, counts.get(str(q), 0)) / total for q in qs], width=0.8)
    ax.set_xlabel("estimated quality factor")
    ax.set_ylabel("fraction of files")
    ax.set_xlim(0, 101)
    return _save(fig, path)


def plot_training_curve(rows, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if rows:
        ep = [r["epoch"] for r in rows]
        ax.plot(ep, [r["train_loss"] for r in rows], label="train")
        ax.plot(ep, [r["val_loss"] for r in rows], label="validation")
        ax.legend()
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean per-image L2")
    ax.grid(alpha=0.3)
    return _save(fig, path)
