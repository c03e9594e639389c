"""Figures written next to the CLI's delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def training_curves(rows: list[dict], path) -> Path:
    """Loss and accuracy per epoch from metrics CSV rows."""
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(7, 2.6))
        for split, style in (("train", "-"), ("val", "--")):
            sel = [r for r in rows if r["split"] == split]
            if not sel:
                continue
            ep = [int(r["epoch"]) for r in sel]
            ax_loss.plot(ep, [float(r["loss"]) for r in sel], style, label=split)
            ax_acc.plot(ep, [float(r["acc"]) for r in sel], style, label=split)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("cross-entropy")
        ax_acc.set_xlabel("epoch")
        ax_acc.set_ylabel("top-1 accuracy")
        ax_acc.set_ylim(0, 1.02)
        ax_acc.legend(frameon=False)
        return _save(fig, path)


def flops_per_layer(report, path, baseline=None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.6))
        layers = range(len(report.per_layer))
        if baseline is not None:
            ax.bar(layers, [m / 1e9 for m in baseline.per_layer], color="0.85", label="no merge")
        ax.bar(layers, [m / 1e9 for m in report.per_layer], width=0.55, label="schedule")
        ax.set_xlabel("layer")
        ax.set_ylabel("GMACs")
        ax.set_title(f"total {report.total / 1e9:.2f} G", fontsize=9)
        ax.legend(frameon=False)
        return _save(fig, path)


def flops_sweep(sweep: dict, path, baseline_total=None) -> Path:
    """Total GMACs against merge layer."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.6))
        layers = sorted(sweep)
        ax.plot(layers, [sweep[l].total / 1e9 for l in layers], "o-")
        if baseline_total:
            ax.axhline(baseline_total / 1e9, color="0.5", ls=":", label="no merge")
            ax.legend(frameon=False)
        ax.set_xlabel("merge layer")
        ax.set_ylabel("total GMACs")
        return _save(fig, path)


def group_map_figure(groups, path, image=None) -> Path:
    from .groupmap import palette
    from .merging import relabel_groups

    groups = relabel_groups(groups)
    with plt.rc_context(STYLE):
        ncols = 2 if image is not None else 1
        fig, axes = plt.subplots(1, ncols, figsize=(2.6 * ncols, 2.6), squeeze=False)
        if image is not None:
            axes[0, 0].imshow(image, cmap="gray", vmin=0, vmax=1)
            axes[0, 0].set_title("input", fontsize=9)
        axes[0, -1].imshow(palette(int(groups.max()) + 1)[groups])
        axes[0, -1].set_title(f"{int(groups.max()) + 1} groups", fontsize=9)
        for ax in axes.ravel():
            ax.set_xticks([])
            ax.set_yticks([])
        return _save(fig, path)
