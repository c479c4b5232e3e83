"""Report figures: per-frame attention maps and training curves."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_attention(maps: np.ndarray, path, title: str | None = None, flows: np.ndarray | None = None):
    """Grid of ``T`` attention maps ``(T, R, R)``; optional flow arrows on top."""
    t = len(maps)
    cols = min(t, 6)
    rows = int(np.ceil(t / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(1.8 * cols, 1.9 * rows), squeeze=False)
    vmax = float(maps.max()) or 1.0
    for k, ax in enumerate(axes.ravel()):
        ax.set_axis_off()
        if k >= t:
            continue
        ax.imshow(maps[k], cmap="magma", vmin=0, vmax=vmax, interpolation="nearest")
        if flows is not None:
            step = max(1, flows.shape[1] // 8)
            yy, xx = np.mgrid[0:flows.shape[1]:step, 0:flows.shape[2]:step]
            ax.quiver(xx, yy, flows[k, ::step, ::step, 0], -flows[k, ::step, ::step, 1],
                      color="cyan", scale=None, width=0.01)
        ax.set_title(f"t={k + 1}", fontsize=8)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metrics(rows: list[dict], path):
    """Loss, test accuracy, domain accuracy and quadrant mass per epoch."""
    ep = [r["epoch"] for r in rows]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
    a1.plot(ep, [r["train_loss"] for r in rows], "k.-")
    a1.set_xlabel("epoch")
    a1.set_ylabel("train loss")
    for key, style in (("test_acc", "b.-"), ("domain_acc", "r.-"), ("attn_quadrant_mass", "g.-")):
        a2.plot(ep, [r[key] for r in rows], style, label=key)
    a2.axhline(0.25, color="0.6", lw=0.8, ls=":")
    a2.set_ylim(0, 1.05)
    a2.set_xlabel("epoch")
    a2.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
