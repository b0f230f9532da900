"""Figure rendering: training curves, 2-D sample panels, trajectory strips."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .io import ArtifactError, read_metrics, read_pgm, read_samples


@dataclass
class FigureJob:
    kind: str  # curves | gmm-panels | trajectory-strip
    inputs: list
    out: str
    grid: int | None = None
    sample: int = 0


def render(job: FigureJob) -> str:
    if job.kind == "curves":
        return render_curves(job.inputs[0], job.out)
    if job.kind == "gmm-panels":
        return render_gmm_panels(job.inputs, job.out, grid=job.grid)
    if job.kind == "trajectory-strip":
        count = render_trajectory_strip(job.inputs[0], job.out, sample=job.sample)
        return job.out if count else job.out
    raise ArtifactError(f"unknown figure kind: {job.kind}")


def render_curves(metrics_path, out_png) -> str:
    """Bound and training loss against the step counter."""
    table = read_metrics(metrics_path)
    fig, ax = plt.subplots(figsize=(6, 4), dpi=120)
    bound = table.columns["bound"]
    loss = table.columns["loss"]
    keep = ~np.isnan(bound)
    ax.plot(table.steps[keep], bound[keep], marker="o", ms=3, label="bound")
    keep_l = ~np.isnan(loss)
    if keep_l.any():
        ax.plot(table.steps[keep_l], loss[keep_l], alpha=0.6, label="loss")
    switch = [s for s, ph in zip(table.steps, table.phases) if ph == "reinforce"]
    if switch and any(ph == "relaxed" for ph in table.phases):
        ax.axvline(switch[0], color="gray", ls="--", lw=1, label="phase switch")
    ax.set_xlabel("step")
    ax.set_ylabel("nats")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(out_png)
    plt.close(fig)
    return out_png


def render_gmm_panels(samples_paths, out_png, grid=None) -> str:
    """One 2-D histogram tile per samples CSV (ordered left to right)."""
    tiles = [read_samples(p) for p in samples_paths]
    n = len(tiles)
    fig, axes = plt.subplots(1, n, figsize=(3 * n, 3), dpi=120, squeeze=False)
    for ax, xs, path in zip(axes[0], tiles, samples_paths):
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
        ax.set_title(os.path.basename(str(path)), fontsize=8)
        if xs.shape[0] == 0:
            continue  # blank panel with axis labels
        if xs.shape[1] != 2:
            raise ArtifactError(f"{path}: panels need 2 columns, got {xs.shape[1]}")
        side = grid or int(xs.max()) + 1
        hist = np.zeros((side, side))
        np.add.at(hist, (xs[:, 0], xs[:, 1]), 1.0)
        ax.imshow(hist.T, origin="lower", cmap="viridis")
    fig.tight_layout()
    fig.savefig(out_png)
    plt.close(fig)
    return out_png


_TRAJ_RE = re.compile(r"traj-s(\d+)-t(\d+)\.pgm$")


def trajectory_files(pgm_dir, sample: int) -> list:
    """PGM dumps for one sample, ordered from the noise end to the data end."""
    found = []
    for name in os.listdir(pgm_dir):
        m = _TRAJ_RE.match(name)
        if m and int(m.group(1)) == sample:
            found.append((int(m.group(2)), os.path.join(pgm_dir, name)))
    if not found:
        raise ArtifactError(f"{pgm_dir}: no trajectory PGMs for sample {sample}")
    return [p for _, p in sorted(found, key=lambda kv: -kv[0])]


def render_trajectory_strip(pgm_dir, out_png, sample: int = 0) -> int:
    """Tile one sample's states left to right; returns the tile count."""
    paths = trajectory_files(pgm_dir, sample)
    imgs = [read_pgm(p) for p in paths]
    n = len(imgs)
    fig, axes = plt.subplots(1, n, figsize=(1.6 * n, 1.8), dpi=120, squeeze=False)
    for i, (ax, img) in enumerate(zip(axes[0], imgs)):
        ax.imshow(img, cmap="gray", vmin=0, vmax=255)
        ax.set_title(f"t={n - 1 - i}", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out_png)
    plt.close(fig)
    return n
