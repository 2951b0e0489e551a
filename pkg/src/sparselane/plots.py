"""Static plot emission: lane overlays, refinement traces, stability series."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .lanes import sample_lane_points


def _pred_xy(pred, num=60):
    lane = pred.to_poly_lane() if hasattr(pred, "to_poly_lane") else pred
    ys = np.linspace(lane.y_start, lane.y_end, num)
    return sample_lane_points(lane, ys)


def plot_lane_overlay(preds, gts, out_path, conf_threshold=0.5):
    """Top view (x over y) and side view (z over y) of predictions vs gt."""
    fig, (ax_top, ax_side) = plt.subplots(1, 2, figsize=(12, 5))
    for lane in gts:
        pts = np.asarray(lane.points)
        ax_top.plot(pts[:, 1], pts[:, 0], "g-", lw=2, alpha=0.7)
        ax_side.plot(pts[:, 1], pts[:, 2], "g-", lw=2, alpha=0.7)
    for pred in preds:
        if getattr(pred, "confidence", 1.0) < conf_threshold:
            continue
        pts = _pred_xy(pred)
        ax_top.plot(pts[:, 1], pts[:, 0], "r--", lw=1.5)
        ax_side.plot(pts[:, 1], pts[:, 2], "r--", lw=1.5)
    ax_top.set_xlabel("y [m]")
    ax_top.set_ylabel("x [m]")
    ax_top.set_title("top view (green gt, red pred)")
    ax_side.set_xlabel("y [m]")
    ax_side.set_ylabel("z [m]")
    ax_side.set_title("side view")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def plot_refinement_traces(preds, gts, out_dir, conf_threshold=0.5) -> list[Path]:
    """One image per decoder layer showing that layer's refined anchor sets."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kept = [p for p in preds if p.confidence >= conf_threshold and p.aux_anchors]
    if not kept:
        kept = [p for p in preds if p.aux_anchors]
    if not kept:
        raise ValueError("predictions carry no per-layer anchor sets to plot")
    num_layers = len(kept[0].aux_anchors)
    paths = []
    for layer in range(num_layers):
        fig, ax = plt.subplots(figsize=(7, 5))
        for lane in gts:
            pts = np.asarray(lane.points)
            ax.plot(pts[:, 1], pts[:, 0], "g-", lw=2, alpha=0.6)
        for pred in kept:
            anchors = np.asarray(pred.aux_anchors[layer])
            ax.plot(anchors[:, 1], anchors[:, 0], "b.-", ms=3, lw=0.8, alpha=0.8)
        ax.set_xlabel("y [m]")
        ax.set_ylabel("x [m]")
        ax.set_title(f"refined anchor sets after decoder layer {layer}")
        path = out_dir / f"refinement_layer_{layer}.png"
        fig.tight_layout()
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_stability_series(stability: dict, out_path):
    """Per-sequence lateral-disparity series with the F_stab annotation."""
    per_seq = stability.get("per_sequence", [])
    if not per_seq:
        raise ValueError("stability report holds no sequences")
    fig, ax = plt.subplots(figsize=(8, 5))
    for entry in per_seq:
        series = entry["dist_series"]
        ax.plot(range(len(series)), series, marker="o", ms=3,
                label=f"{entry['sequence_id']} (F_stab={entry['f_stab']:.4f})")
    ax.set_xlabel("frame")
    ax.set_ylabel("mean |x| disparity [m]")
    ax.set_title("per-frame lateral disparity")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
