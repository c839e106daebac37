"""Report figures. Rendered off-screen with the Agg backend."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .records import HIGHER  # noqa: E402

COLORS = {"benign": "#4477aa", "malicious": "#cc6677", "unknown": "#999999"}
# no timestamps or version strings, so reruns give identical files
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def roc_points(scores, positive, direction=HIGHER):
    """False/true positive rates swept over every distinct threshold."""
    s = np.asarray(scores, dtype=float)
    if direction != HIGHER:
        s = -s
    y = np.asarray(positive, dtype=bool)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tps = np.cumsum(y)
    fps = np.cumsum(~y)
    last = np.r_[np.diff(s) != 0, True]
    tpr = np.r_[0.0, tps[last] / max(y.sum(), 1)]
    fpr = np.r_[0.0, fps[last] / max((~y).sum(), 1)]
    return fpr, tpr


def plot_roc(scores, positive, direction, auc, path, title="ROC"):
    fpr, tpr = roc_points(scores, positive, direction)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(fpr, tpr, color="k", lw=1.5, label=f"AUC = {auc:.3f}")
    ax.plot([0, 1], [0, 1], ls=":", color="0.6", lw=1)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_title(title)
    ax.legend(loc="lower right", frameon=False)
    _save(fig, path)


def plot_scores(scores, labels, threshold, path, xlabel="score"):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    finite = scores[np.isfinite(scores)]
    bins = np.histogram_bin_edges(finite, bins=30) if finite.size else 10
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for lab in ("benign", "malicious", "unknown"):
        sel = scores[(labels == lab) & np.isfinite(scores)]
        if sel.size:
            ax.hist(sel, bins=bins, alpha=0.6, color=COLORS[lab], label=f"{lab} ({sel.size})")
    if np.isfinite(threshold):
        ax.axvline(threshold, color="k", ls="--", lw=1, label="threshold")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.legend(frameon=False, fontsize=8)
    _save(fig, path)


def plot_latent(table, path, title="latent space"):
    fig, ax = plt.subplots(figsize=(4.5, 4))
    labels = [row[1] for row in table]
    for lab in ("benign", "malicious", "unknown"):
        pts = np.array([(z1, z2) for _, l, z1, z2 in table if l == lab])
        if len(pts):
            ax.scatter(pts[:, 0], pts[:, 1], s=8, alpha=0.7, color=COLORS[lab], label=lab, linewidths=0)
    ax.set_xlabel("z1")
    ax.set_ylabel("z2")
    ax.set_title(title)
    if labels:
        ax.legend(frameon=False, fontsize=8)
    _save(fig, path)


def plot_history(train_loss, val_loss, path):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    epochs = np.arange(1, len(train_loss) + 1)
    ax.plot(epochs, train_loss, lw=1, label="train")
    if np.any(np.isfinite(val_loss)):
        ax.plot(epochs, val_loss, lw=1, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("negative ELBO")
    ax.legend(frameon=False)
    _save(fig, path)
