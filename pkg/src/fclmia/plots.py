"""Static figures (PNG and SVG) with reproducible file contents."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "fclmia"

FORMATS = ("png", "svg")
_META = {"png": {"Software": None}, "svg": {"Date": None, "Creator": None}}


def _save(fig, stem, formats=FORMATS):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    out = []
    for fmt in formats:
        path = stem.with_suffix(f".{fmt}")
        fig.savefig(path, format=fmt, metadata=_META[fmt], dpi=100)
        out.append(path)
    plt.close(fig)
    return out


def line_plot(stem, x, series, xlabel, ylabel, title=None, formats=FORMATS):
    """One line per entry of ``series`` (label -> values)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, ys in series.items():
        ax.plot(x, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, stem, formats)


def overfit_plot(stem, trace, formats=FORMATS):
    fig, (a, b) = plt.subplots(1, 2, figsize=(10, 4))
    a.plot(trace.rounds, trace.member_loss, marker="o", label="member")
    a.plot(trace.rounds, trace.nonmember_loss, marker="o", label="non-member")
    a.set_xlabel("round")
    a.set_ylabel("mean loss")
    b.plot(trace.rounds, trace.member_cos, marker="o", label="member")
    b.plot(trace.rounds, trace.nonmember_cos, marker="o", label="non-member")
    b.set_xlabel("round")
    b.set_ylabel("mean view cosine")
    for ax in (a, b):
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    return _save(fig, stem, formats)


def threshold_plot(stem, curve, best_t, formats=FORMATS):
    fig, ax = plt.subplots(figsize=(6, 4))
    if curve:
        ts, accs = zip(*curve)
        ax.plot(ts, accs)
    ax.axvline(best_t, color="k", ls="--", lw=1, label=f"best T = {best_t:.4g}")
    ax.set_xlabel("threshold on loss increase")
    ax.set_ylabel("accuracy")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, stem, formats)


def scatter3d(stem, features, labels, axis_labels=("max cosine", "loss", "max probability"), formats=FORMATS):
    """Member / non-member clouds of three-feature rows."""
    fig = plt.figure(figsize=(6, 5))
    ax = fig.add_subplot(projection="3d")
    for value, name, color in ((1, "member", "tab:red"), (0, "non-member", "tab:blue")):
        pts = features[labels == value]
        ax.scatter(pts[:, 0], pts[:, 1], pts[:, 2], s=8, c=color, label=name)
    ax.set_xlabel(axis_labels[0])
    ax.set_ylabel(axis_labels[1])
    ax.set_zlabel(axis_labels[2])
    ax.legend()
    fig.tight_layout()
    return _save(fig, stem, formats)
