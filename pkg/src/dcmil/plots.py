"""Static figures: KM curves, histograms, saliency overlays, indicator heatmaps."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .metrics import km_estimate  # noqa: E402


def _step(curve):
    xs = np.concatenate([[0.0], np.repeat(curve.event_times, 2)])
    ys = np.concatenate([[1.0, 1.0], np.repeat(curve.survival_probs, 2)[:-1]])
    return xs, ys


def plot_km(times, events, high_group, path, p_value=None, title="Kaplan-Meier"):
    times, events = np.asarray(times, float), np.asarray(events, int)
    high = np.asarray(high_group, bool)
    fig, ax = plt.subplots(figsize=(5, 4))
    for mask, label, color in ((~high, "low risk", "tab:blue"), (high, "high risk", "tab:red")):
        if mask.any():
            xs, ys = _step(km_estimate(times[mask], events[mask]))
            ax.plot(xs, ys, color=color, label=f"{label} (n={mask.sum()})")
    if p_value is not None and np.isfinite(p_value):
        ax.text(0.02, 0.05, f"logrank p = {p_value:.3g}", transform=ax.transAxes)
    ax.set_xlabel("time (months)")
    ax.set_ylabel("survival probability")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_uncertainty(stds, correct, threshold, path):
    stds, correct = np.asarray(stds, float), np.asarray(correct, bool)
    fig, ax = plt.subplots(figsize=(5, 4))
    bins = np.linspace(0, max(stds.max(), 1e-6), 25)
    ax.hist(stds[correct], bins=bins, alpha=0.6, color="tab:red", label="correct")
    ax.hist(stds[~correct], bins=bins, alpha=0.6, color="tab:blue", label="incorrect")
    if threshold is not None:
        ax.axvline(threshold, color="k", linestyle=":", label=f"threshold {threshold:.3g}")
    ax.set_xlabel("MC-dropout std")
    ax.set_ylabel("instances")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_distance_histogram(counts, edges, path, title=""):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="k")
    ax.set_xlabel("distance to reference")
    ax.set_ylabel("instances")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def grid_heatmap(coords, values, path, title="", cmap="viridis"):
    coords = np.asarray(coords, int)
    shape = coords.max(axis=0) + 1
    img = np.full(shape, np.nan)
    img[coords[:, 0], coords[:, 1]] = values
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(img, cmap=cmap)
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_saliency_overlay(tile, mask_values, path):
    """Grey tile with non-salient tokens tinted blue."""
    tile = np.asarray(tile, float)
    m = np.asarray(mask_values, float)
    up = np.kron(m, np.ones((tile.shape[0] // m.shape[0], tile.shape[1] // m.shape[1])))
    grey = (tile * 255).astype(np.uint8)
    rgb = np.stack([grey, grey, grey], axis=-1).astype(float)
    rgb[up == 0] = 0.5 * rgb[up == 0] + 0.5 * np.array([40, 80, 200])
    Image.fromarray(rgb.astype(np.uint8), mode="RGB").save(Path(path))
