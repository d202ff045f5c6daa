"""Report figures rendered alongside the delimited outputs.

Everything goes through the Agg backend so headless runs work, and
savefig strips metadata so figure bytes stay reproducible.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE_KW = {"dpi": 110, "metadata": {"Software": None}}


def save_loss_curve(log: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    epochs = [e["epoch"] for e in log]
    ax.plot(epochs, [e["total"] for e in log], label="total", lw=2)
    for key in ("v2t", "tri", "eam", "struct", "seg"):
        ax.plot(epochs, [e[key] for e in log], label=key, lw=1, alpha=0.7)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def _roc_points(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-scores, kind="mergesort")
    y = labels[order]
    tps = np.cumsum(y)
    fps = np.cumsum(1 - y)
    tpr = np.r_[0.0, tps / max(tps[-1], 1)]
    fpr = np.r_[0.0, fps / max(fps[-1], 1)]
    return fpr, tpr


def save_roc(scores, labels, path, title: str) -> None:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    fpr, tpr = _roc_points(scores, labels)
    ax.plot(fpr, tpr, lw=2)
    ax.plot([0, 1], [0, 1], "k--", lw=1, alpha=0.5)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title, fontsize=10)
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_heatmap(m_star: np.ndarray, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(np.asarray(m_star), vmin=0.0, vmax=1.0, cmap="inferno")
    ax.set_title(title, fontsize=9)
    ax.axis("off")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_eval_figures(report, out_dir) -> list[Path]:
    """ROC curves for the report; returns the written figure paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    labels = np.array([r["label"] for r in report.rows])
    logits = np.array([r["logit"] for r in report.rows])
    if len(set(labels.tolist())) == 2:
        p = out_dir / "roc_image.png"
        save_roc(logits, labels, p, f"image-level ROC (AUC={report.i_auc:.4f})")
        written.append(p)
    fig, ax = plt.subplots(figsize=(6, 4))
    colors = ["tab:blue" if lbl == 0 else "tab:red" for lbl in labels]
    ax.bar(range(len(logits)), logits, color=colors)
    ax.set_xlabel("query index")
    ax.set_ylabel("image logit")
    ax.set_title("per-image logits (red = anomalous)", fontsize=10)
    fig.tight_layout()
    p = out_dir / "image_logits.png"
    fig.savefig(p, **_SAVE_KW)
    plt.close(fig)
    written.append(p)
    return written
