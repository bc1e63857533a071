"""Delimited reports and matplotlib figures written next to run outputs."""

import csv
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image


def write_csv(path, rows, fieldnames=None):
    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    if fieldnames is None:
        fieldnames = []
        for row in rows:
            for key in row:
                if key not in fieldnames:
                    fieldnames.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, restval="")
        writer.writeheader()
        writer.writerows(rows)


def save_image(path, img):
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def save_loss_curves(history, path, keys=("total", "rgb", "eikonal", "mask",
                                          "depth", "normal")):
    steps = [h["step"] for h in history]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key in keys:
        vals = [h.get(key) for h in history]
        if any(v is not None for v in vals):
            ax.plot(steps, vals, label=key, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title("training losses")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_psnr_curve(history, path):
    pts = [(h["step"], h["holdout_psnr"]) for h in history
           if "holdout_psnr" in h and np.isfinite(h["holdout_psnr"])]
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    axes[0].plot([h["step"] for h in history], [h["loss"] for h in history],
                 linewidth=1.2)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("L2 loss")
    axes[0].set_yscale("log")
    axes[0].set_title("training loss")
    if pts:
        axes[1].plot(*zip(*pts), marker="o", linewidth=1.2)
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("held-out PSNR (dB)")
    axes[1].set_title("validation")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metric_figure(report, path):
    psnrs = [p for p in report.psnr_per_view if np.isfinite(p)]
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    axes[0].bar(range(len(report.psnr_per_view)),
                [p if np.isfinite(p) else 0.0 for p in report.psnr_per_view],
                color="#3a7ca5")
    axes[0].set_xlabel("view")
    axes[0].set_ylabel("PSNR (dB)")
    if psnrs:
        axes[0].axhline(np.mean(psnrs), color="k", linestyle="--", linewidth=1)
    axes[1].bar(range(len(report.ssim_per_view)), report.ssim_per_view,
                color="#8f5f9f")
    axes[1].set_xlabel("view")
    axes[1].set_ylabel("SSIM")
    axes[1].set_ylim(0, 1.05)
    fig.suptitle("per-view image quality")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
