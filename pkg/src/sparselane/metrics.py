"""Metric suites: F-score with near/far X/Z errors, top-view IoU plus
unilateral Chamfer distance, and the per-video stability measure.

A prediction matches a ground truth when at least ``coverage_fraction`` of
the y-grid positions covered by both have point-wise Euclidean distance
(in the x-z plane at shared y) below ``max_point_distance``; assignment is
one-to-one by minimum total distance among candidate pairs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from . import kernels
from .lanes import GroundTruthLane, PolyLane, resample_at_y, sample_lane_points

BIG = 1e9


@dataclass
class EvalConfig:
    max_point_distance: float = 1.5
    coverage_fraction: float = 0.75
    near_far_split: float = 40.0
    confidence_threshold: float = 0.5
    once_iou_threshold: float = 0.3
    once_cd_threshold: float = 0.3
    once_lane_width: float = 0.3
    once_cell_size: float = 0.1
    y_min: float = 3.0
    y_max: float = 103.0
    num_y: int = 40

    def __post_init__(self):
        if self.max_point_distance <= 0 or not (0 < self.coverage_fraction <= 1):
            raise ValueError("thresholds must be positive and coverage in (0, 1]")
        if self.once_iou_threshold <= 0 or self.once_cd_threshold <= 0:
            raise ValueError("ONCE thresholds must be positive")

    @property
    def y_grid(self) -> np.ndarray:
        return np.linspace(self.y_min, self.y_max, self.num_y)


@dataclass
class StabilityReport:
    dist_series: list  # per-frame mean |x| disparity over matched lanes
    f_stab: float  # population std of the series
    num_frames: int
    skipped_frames: list  # frames with zero matches, excluded from the series


def _as_sampled(lane, grid: np.ndarray):
    """Normalize any lane representation to (xz (N, 2), covered (N,), category)."""
    if isinstance(lane, GroundTruthLane):
        xz, covered = resample_at_y(lane.points, grid, clamp_boundary=lane.boundary)
        return xz, covered, lane.category
    if hasattr(lane, "to_poly_lane"):
        lane = lane.to_poly_lane()
    if isinstance(lane, PolyLane):
        pts = sample_lane_points(lane, grid)
        covered = (grid >= lane.y_start) & (grid <= lane.y_end)
        return pts[:, [0, 2]], covered, lane.category
    raise TypeError(f"cannot evaluate lane of type {type(lane)!r}")


def _confidence(lane) -> float:
    return float(getattr(lane, "confidence", 1.0))


def match_frame(preds, gts, cfg: EvalConfig):
    """One-to-one matching of a single frame's lanes under the F-score rule.

    Returns (pairs, pred_sampled, gt_sampled) where pairs is a list of
    (gt_index, pred_index, joint_mask).
    """
    grid = cfg.y_grid
    ps = [_as_sampled(p, grid) for p in preds]
    gs = [_as_sampled(g, grid) for g in gts]
    cost = np.full((len(gs), len(ps)), BIG)
    for gi, (gxz, gcov, _) in enumerate(gs):
        for pi, (pxz, pcov, _) in enumerate(ps):
            joint = gcov & pcov
            if not joint.any():
                continue
            dist = np.linalg.norm(pxz[joint] - gxz[joint], axis=1)
            if (dist < cfg.max_point_distance).mean() >= cfg.coverage_fraction:
                cost[gi, pi] = dist.mean()
    pairs = []
    if cost.size:
        rows, cols = linear_sum_assignment(cost)
        for gi, pi in zip(rows, cols):
            if cost[gi, pi] < BIG:
                joint = gs[gi][1] & ps[pi][1]
                pairs.append((int(gi), int(pi), joint))
    return pairs, ps, gs


def openlane_evaluate(pred_frames, gt_frames, cfg: EvalConfig) -> dict:
    """F-score protocol over per-frame prediction/ground-truth lists.

    Predictions are confidence-thresholded first.  Errors are averaged over
    matched pairs inside the near ([y_min, split)) and far ([split, y_max])
    bands; bands with no contributing pairs report null.
    """
    if len(pred_frames) != len(gt_frames):
        raise ValueError("prediction and ground-truth frame counts differ")
    grid = cfg.y_grid
    near = grid < cfg.near_far_split
    tp = n_pred = n_gt = cat_hit = 0
    errs = {"x_near": [], "x_far": [], "z_near": [], "z_far": []}
    for preds, gts in zip(pred_frames, gt_frames):
        preds = [p for p in preds if _confidence(p) >= cfg.confidence_threshold]
        pairs, ps, gs = match_frame(preds, gts, cfg)
        tp += len(pairs)
        n_pred += len(preds)
        n_gt += len(gts)
        for gi, pi, joint in pairs:
            gxz, _, gcat = gs[gi]
            pxz, _, pcat = ps[pi]
            if gcat == pcat:
                cat_hit += 1
            adiff = np.abs(pxz - gxz)
            for band, sel in (("near", near), ("far", ~near)):
                m = joint & sel
                if m.any():
                    errs[f"x_{band}"].append(adiff[m, 0].mean())
                    errs[f"z_{band}"].append(adiff[m, 1].mean())
    meta = {}
    if n_gt == 0 and n_pred == 0:
        precision = recall = f1 = 1.0
        meta["note"] = "empty ground truth and predictions; F1 defined as 1.0"
    else:
        precision = tp / n_pred if n_pred else 0.0
        recall = tp / n_gt if n_gt else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    mean_or_none = lambda v: float(np.mean(v)) if v else None
    return {
        "F1": f1,
        "precision": precision,
        "recall": recall,
        "x_err_near": mean_or_none(errs["x_near"]),
        "x_err_far": mean_or_none(errs["x_far"]),
        "z_err_near": mean_or_none(errs["z_near"]),
        "z_err_far": mean_or_none(errs["z_far"]),
        "category_accuracy": cat_hit / tp if tp else None,
        "matched": tp,
        "num_pred": n_pred,
        "num_gt": n_gt,
        "meta": meta,
    }


def _topview_polyline(lane, cfg: EvalConfig) -> np.ndarray:
    """Lane as a dense (x, y) polyline for the top-view protocol."""
    if isinstance(lane, GroundTruthLane):
        return lane.points[:, :2]
    if hasattr(lane, "to_poly_lane"):
        lane = lane.to_poly_lane()
    ys = np.arange(lane.y_start, lane.y_end + 1e-9, 0.5)
    if len(ys) < 2:
        ys = np.array([lane.y_start, lane.y_end])
    pts = sample_lane_points(lane, ys)
    return pts[:, :2]


def topview_iou(poly_a: np.ndarray, poly_b: np.ndarray, lane_width: float,
                cell_size: float) -> float:
    """IoU of two stroked polylines rasterized on a shared top-view grid."""
    allp = np.concatenate([poly_a, poly_b])
    margin = lane_width + cell_size
    x0, y0 = allp.min(axis=0) - margin
    x1, y1 = allp.max(axis=0) + margin
    w = max(int(np.ceil((x1 - x0) / cell_size)) + 1, 2)
    h = max(int(np.ceil((y1 - y0) / cell_size)) + 1, 2)
    half_cells = (lane_width / 2.0) / cell_size
    masks = []
    for poly in (poly_a, poly_b):
        grid_pts = (poly - np.array([x0, y0])) / cell_size
        dist = kernels.stroke_field((h, w), [grid_pts], cutoff=half_cells + 1.0)
        masks.append(dist <= half_cells)
    union = (masks[0] | masks[1]).sum()
    if union == 0:
        return 0.0
    return float((masks[0] & masks[1]).sum() / union)


def _dense_points_3d(lane, step: float = 0.5) -> np.ndarray:
    if isinstance(lane, GroundTruthLane):
        pts = lane.points
        ys = np.arange(pts[0, 1], pts[-1, 1] + 1e-9, step)
        xz, _ = resample_at_y(pts, ys)
        return np.stack([xz[:, 0], ys, xz[:, 1]], axis=1)
    if hasattr(lane, "to_poly_lane"):
        lane = lane.to_poly_lane()
    ys = np.arange(lane.y_start, lane.y_end + 1e-9, step)
    if len(ys) < 2:
        ys = np.array([lane.y_start, lane.y_end])
    return sample_lane_points(lane, ys)


def unilateral_chamfer(pred_points: np.ndarray, gt_points: np.ndarray) -> float:
    """Mean distance from predicted points to their nearest ground-truth point."""
    tree = cKDTree(gt_points)
    d, _ = tree.query(pred_points)
    return float(d.mean())


def once_evaluate(pred_frames, gt_frames, cfg: EvalConfig) -> dict:
    """Two-stage top-view protocol: IoU gating then Chamfer acceptance."""
    if len(pred_frames) != len(gt_frames):
        raise ValueError("prediction and ground-truth frame counts differ")
    tp = n_pred = n_gt = 0
    cds = []
    for preds, gts in zip(pred_frames, gt_frames):
        preds = [p for p in preds if _confidence(p) >= cfg.confidence_threshold]
        n_pred += len(preds)
        n_gt += len(gts)
        if not preds or not gts:
            continue
        polys_p = [_topview_polyline(p, cfg) for p in preds]
        polys_g = [_topview_polyline(g, cfg) for g in gts]
        cost = np.full((len(gts), len(preds)), BIG)
        for gi, pg in enumerate(polys_g):
            for pi, pp in enumerate(polys_p):
                iou = topview_iou(pg, pp, cfg.once_lane_width, cfg.once_cell_size)
                if iou > cfg.once_iou_threshold:
                    cost[gi, pi] = 1.0 - iou
        rows, cols = linear_sum_assignment(cost)
        for gi, pi in zip(rows, cols):
            if cost[gi, pi] >= BIG:
                continue
            cd = unilateral_chamfer(_dense_points_3d(preds[pi]), _dense_points_3d(gts[gi]))
            if cd < cfg.once_cd_threshold:
                tp += 1
                cds.append(cd)
    meta = {}
    if n_gt == 0 and n_pred == 0:
        precision = recall = f1 = 1.0
        meta["note"] = "empty ground truth and predictions; F1 defined as 1.0"
    else:
        precision = tp / n_pred if n_pred else 0.0
        recall = tp / n_gt if n_gt else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "F1": f1,
        "precision": precision,
        "recall": recall,
        "mean_CD_error": float(np.mean(cds)) if cds else None,
        "matched": tp,
        "num_pred": n_pred,
        "num_gt": n_gt,
        "meta": meta,
    }


def stability_evaluate(pred_frames, gt_frames, cfg: EvalConfig) -> StabilityReport:
    """Per-sequence stability: population std of the per-frame mean lateral
    disparity over matched lanes (frames with zero matches are skipped)."""
    if len(pred_frames) < 2:
        raise ValueError("stability needs at least 2 frames")
    series = []
    skipped = []
    for t, (preds, gts) in enumerate(zip(pred_frames, gt_frames)):
        preds = [p for p in preds if _confidence(p) >= cfg.confidence_threshold]
        pairs, ps, gs = match_frame(preds, gts, cfg)
        terms = []
        for gi, pi, joint in pairs:
            terms.extend(np.abs(ps[pi][0][joint, 0] - gs[gi][0][joint, 0]))
        if terms:
            series.append(float(np.mean(terms)))
        else:
            skipped.append(t)
    f_stab = float(np.std(series)) if series else 0.0
    return StabilityReport(series, f_stab, len(pred_frames), skipped)


def write_report(report: dict, out_json: str | Path, out_csv: str | Path | None = None):
    out_json = Path(out_json)
    out_json.parent.mkdir(parents=True, exist_ok=True)
    with open(out_json, "w") as fh:
        json.dump(report, fh, indent=2)
    if out_csv is not None:
        flat = {k: v for k, v in report.items() if not isinstance(v, (dict, list))}
        with open(out_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(flat))
            writer.writeheader()
            writer.writerow({k: ("" if v is None else v) for k, v in flat.items()})
