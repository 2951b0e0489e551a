"""Bipartite curve matching and the training losses.

Matching minimizes, over injective assignments of (padded) ground truths to
predictions, the per-pair cost

    D = -a1 * p(c) + 1[c=1] * a2 * |L_gt - L|_1 + 1[c=1] * a3 * |b_gt - b|_1,

with the classification term linear in the probability.  Training swaps the
linear term for -a1 * log p (eps-guarded) and adds deep supervision of each
layer's refined anchor set plus an auxiliary segmentation BCE; the total is
the unweighted sum of the three parts.  Point terms are L1 over (x, z) at
the fixed y grid, averaged over the positions covered by the ground-truth
boundary so the scale does not depend on the anchor count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .lanes import GroundTruthLane, PolyLane, resample_at_y, sample_lane_points


@dataclass
class LossConfig:
    alpha1: float = 2.0  # classification
    alpha2: float = 5.0  # curve points
    alpha3: float = 2.0  # curve boundary
    alpha4: float = 2.0  # anchor-set points (deep supervision)
    alpha5: float = 2.0  # anchor-set boundary (deep supervision)
    seg_pos_weight: float = 5.0
    log_eps: float = 1e-12

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3", "alpha4", "alpha5", "seg_pos_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class MatchResult:
    """Injective assignment of padded ground truths to predictions."""

    gt_to_pred: np.ndarray  # (L_q,) pred index per padded gt slot
    num_real: int
    total_cost: float
    pair_costs: list  # per real gt: dict(classification, point, boundary)

    def real_pairs(self):
        return [(g, int(self.gt_to_pred[g])) for g in range(self.num_real)]


def prepare_targets(gt_lanes: list[GroundTruthLane], y_grid: np.ndarray,
                    device=None, dtype=torch.float32) -> dict:
    """Resample ground-truth lanes onto the fixed y grid.

    Returns tensors: points (G, N, 2) of (x, z), mask (G, N) coverage under
    each lane's own boundary, boundary (G, 2) in meters, category (G,).
    """
    pts, masks, bounds, cats = [], [], [], []
    for lane in gt_lanes:
        values, covered = resample_at_y(lane.points, y_grid, clamp_boundary=lane.boundary)
        if not covered.any():
            continue  # lane entirely outside the sampling grid
        pts.append(values)
        masks.append(covered)
        lo = max(lane.boundary[0], float(y_grid[0]))
        hi = min(lane.boundary[1], float(y_grid[-1]))
        bounds.append((lo, hi))
        cats.append(lane.category)
    g = len(pts)
    n = len(y_grid)
    out = {
        "points": torch.as_tensor(np.array(pts).reshape(g, n, 2), dtype=dtype),
        "mask": torch.as_tensor(np.array(masks, dtype=bool).reshape(g, n)),
        "boundary": torch.as_tensor(np.array(bounds).reshape(g, 2), dtype=dtype),
        "category": torch.as_tensor(np.array(cats, dtype=np.int64).reshape(g)),
    }
    if device is not None:
        out = {k: v.to(device) for k, v in out.items()}
    return out


def _point_term(pred_xz, gt_points, gt_mask):
    """Mean L1 over gt-covered grid positions; pred_xz (..., N, 2)."""
    diff = (pred_xz - gt_points).abs().sum(dim=-1)
    m = gt_mask.to(diff.dtype)
    return (diff * m).sum(dim=-1) / m.sum(dim=-1).clamp(min=1.0)


def _boundary_term(pred_bounds, gt_bounds):
    return (pred_bounds - gt_bounds).abs().sum(dim=-1)


def cost_matrix(conf_prob, curve_points, pred_bounds, targets, cfg: LossConfig,
                num_queries: int) -> torch.Tensor:
    """(L_q, L_q) matching costs; rows are padded gt slots, columns preds."""
    g = targets["points"].shape[0]
    if g > num_queries:
        raise ValueError(f"{g} ground-truth lanes exceed the {num_queries} queries")
    bg = -cfg.alpha1 * (1.0 - conf_prob)  # (Q,)
    rows = bg.unsqueeze(0).expand(num_queries, num_queries).clone()
    if g:
        point = _point_term(curve_points.unsqueeze(0),
                            targets["points"].unsqueeze(1),
                            targets["mask"].unsqueeze(1))  # (G, Q)
        bound = _boundary_term(pred_bounds.unsqueeze(0),
                               targets["boundary"].unsqueeze(1))
        rows[:g] = -cfg.alpha1 * conf_prob + cfg.alpha2 * point + cfg.alpha3 * bound
    return rows


def solve_assignment(cost: np.ndarray) -> tuple[np.ndarray, float]:
    if not np.all(np.isfinite(cost)):
        raise ValueError("matching cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(rows)
    return cols[order], float(cost[rows, cols].sum())


def match_output(conf_logits, curve_points, y_start, y_end, targets,
                 cfg: LossConfig) -> MatchResult:
    """Hungarian matching of one sample's predictions to its ground truths."""
    with torch.no_grad():
        q = conf_logits.shape[0]
        prob = torch.sigmoid(conf_logits)
        bounds = torch.stack([y_start, y_end], dim=-1)
        cost = cost_matrix(prob, curve_points, bounds, targets, cfg, q)
        assign, total = solve_assignment(cost.double().cpu().numpy())
        g = targets["points"].shape[0]
        pair_costs = []
        for gt_idx in range(g):
            pred_idx = int(assign[gt_idx])
            point = _point_term(curve_points[pred_idx], targets["points"][gt_idx],
                                targets["mask"][gt_idx])
            bound = _boundary_term(bounds[pred_idx], targets["boundary"][gt_idx])
            pair_costs.append({
                "classification": float(-cfg.alpha1 * prob[pred_idx]),
                "point": float(cfg.alpha2 * point),
                "boundary": float(cfg.alpha3 * bound),
            })
        return MatchResult(assign, g, total, pair_costs)


def pairwise_cost(pred: PolyLane, gt: GroundTruthLane | None, cfg: LossConfig,
                  y_grid: np.ndarray) -> float:
    """Matching cost of a single (prediction, ground truth) pair.

    ``gt=None`` stands for a padded non-lane entry, where only the
    classification term applies.
    """
    p = float(pred.confidence)
    if gt is None or not getattr(gt, "is_lane", 1):
        return -cfg.alpha1 * (1.0 - p)
    pts = sample_lane_points(pred, y_grid)
    gt_xz, covered = resample_at_y(gt.points, y_grid, clamp_boundary=gt.boundary)
    diff = np.abs(pts[:, [0, 2]] - gt_xz).sum(axis=1)
    point = diff[covered].mean() if covered.any() else 0.0
    lo = max(gt.boundary[0], float(y_grid[0]))
    hi = min(gt.boundary[1], float(y_grid[-1]))
    bound = abs(pred.y_start - lo) + abs(pred.y_end - hi)
    return float(-cfg.alpha1 * p + cfg.alpha2 * point + cfg.alpha3 * bound)


def hungarian_match(preds: list[PolyLane], gts: list[GroundTruthLane],
                    cfg: LossConfig, y_grid: np.ndarray) -> MatchResult:
    """Object-level matching surface over PolyLane predictions."""
    q = len(preds)
    if len(gts) > q:
        raise ValueError(f"{len(gts)} ground truths exceed {q} predictions")
    cost = np.empty((q, q))
    for gi in range(q):
        gt = gts[gi] if gi < len(gts) else None
        for pi, pred in enumerate(preds):
            cost[gi, pi] = pairwise_cost(pred, gt, cfg, y_grid)
    assign, total = solve_assignment(cost)
    pair_costs = [{"total": float(cost[gi, assign[gi]])} for gi in range(len(gts))]
    return MatchResult(assign, len(gts), total, pair_costs)


def curve_loss(conf_logits, curve_points, y_start, y_end, targets,
               match: MatchResult, cfg: LossConfig) -> torch.Tensor:
    """Final-layer prediction loss under a frozen assignment."""
    q = conf_logits.shape[0]
    prob = torch.sigmoid(conf_logits)
    g = match.num_real
    assign = torch.as_tensor(match.gt_to_pred, device=conf_logits.device)
    is_lane = torch.zeros(q, dtype=torch.bool, device=conf_logits.device)
    is_lane[assign[:g]] = True
    p_correct = torch.where(is_lane, prob, 1.0 - prob)
    loss = -cfg.alpha1 * torch.log(p_correct.clamp(min=cfg.log_eps)).sum()
    if g:
        pred_idx = assign[:g]
        point = _point_term(curve_points[pred_idx], targets["points"][:g],
                            targets["mask"][:g]).sum()
        bounds = torch.stack([y_start, y_end], dim=-1)[pred_idx]
        bound = _boundary_term(bounds, targets["boundary"][:g]).sum()
        loss = loss + cfg.alpha2 * point + cfg.alpha3 * bound
    return loss


def query_loss(aux_anchors, aux_range, y_range, targets, match: MatchResult,
               cfg: LossConfig) -> torch.Tensor:
    """Deep supervision of every layer's refined anchor set and range."""
    layers = aux_anchors.shape[0]
    g = match.num_real
    if g == 0:
        return aux_anchors.sum() * 0.0
    pred_idx = torch.as_tensor(match.gt_to_pred[:g], device=aux_anchors.device)
    y_lo, y_hi = y_range
    loss = aux_anchors.sum() * 0.0
    for l in range(layers):
        anchors_xz = aux_anchors[l, pred_idx][:, :, [0, 2]]
        point = _point_term(anchors_xz, targets["points"][:g], targets["mask"][:g]).sum()
        bounds = y_lo + aux_range[l, pred_idx] * (y_hi - y_lo)
        bound = _boundary_term(bounds, targets["boundary"][:g]).sum()
        loss = loss + cfg.alpha4 * point + cfg.alpha5 * bound
    return loss


def seg_targets(seg_mask: torch.Tensor, logits_shape) -> torch.Tensor:
    """Downsample a full-resolution binary mask to the seg-head stride by
    max pooling (a coarse cell is lane iff any of its pixels is)."""
    h, w = seg_mask.shape[-2:]
    lh, lw = logits_shape[-2:]
    if h % lh or w % lw or h // lh != w // lw:
        raise ValueError(f"mask {h}x{w} incompatible with logits {lh}x{lw}")
    stride = h // lh
    return F.max_pool2d(seg_mask.float().unsqueeze(1), stride)


def seg_loss(seg_logits: torch.Tensor, seg_mask: torch.Tensor,
             cfg: LossConfig) -> torch.Tensor:
    """Per-pixel BCE with a positive-class weight; mask is full resolution."""
    target = seg_targets(seg_mask, seg_logits.shape)
    if target.shape != seg_logits.shape:
        raise ValueError(f"seg target {tuple(target.shape)} vs logits {tuple(seg_logits.shape)}")
    pos_weight = seg_logits.new_tensor(cfg.seg_pos_weight)
    return F.binary_cross_entropy_with_logits(seg_logits, target, pos_weight=pos_weight)


def total_loss(output, targets: list[dict], seg_masks: torch.Tensor,
               cfg: LossConfig, y_range, matches: list[MatchResult] | None = None):
    """Batch loss: L_curve + L_query + L_seg, averaged over the batch.

    ``matches`` freezes the assignment (gradient-check contract); when None
    it is recomputed from the final-layer predictions and reused for all
    auxiliary layers.
    """
    b = output.conf_logits.shape[0]
    if matches is None:
        matches = [
            match_output(output.conf_logits[i], output.curve_points[i],
                         output.y_start[i], output.y_end[i], targets[i], cfg)
            for i in range(b)
        ]
    l_curve = sum(
        curve_loss(output.conf_logits[i], output.curve_points[i],
                   output.y_start[i], output.y_end[i], targets[i], matches[i], cfg)
        for i in range(b)) / b
    l_query = sum(
        query_loss(output.aux_anchors[:, i], output.aux_range[:, i], y_range,
                   targets[i], matches[i], cfg)
        for i in range(b)) / b
    l_seg = seg_loss(output.seg_logits, seg_masks, cfg)
    return {
        "total": l_curve + l_query + l_seg,
        "curve": l_curve,
        "query": l_query,
        "seg": l_seg,
        "matches": matches,
    }
