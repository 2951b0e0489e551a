"""Temporal propagation of curve queries and anchor point sets.

Four fusion variants, selected by config:

  anchors             replace initial anchor sets with ego-compensated
                      stored ones
  query_sa            temporal self-attention with stored queries as
                      keys/values
  topk_query          concatenate the Top-K highest-confidence stored
                      queries, then temporal self-attention over the set
  topk_query_anchors  as topk_query, plus the selected queries carry their
                      ego-compensated anchor sets

Every variant reduces exactly to the single-frame model when memory is
empty or Top-K is zero.  Stored tensors are detached: training treats
historical queries as constants.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .geometry import EgoMotion
from .network.decoder import ModelConfig, QueryState, range_from_logits, range_to_logits
from .network.layers import MultiHeadAttention, inverse_sigmoid

VARIANTS = ("none", "anchors", "query_sa", "topk_query", "topk_query_anchors")


@dataclass
class FusionConfig:
    variant: str = "none"
    top_k: int = 6
    history_len: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"fusion.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.top_k < 0 or self.history_len < 1:
            raise ValueError("top_k must be >= 0 and history_len >= 1")


@dataclass
class MemoryEntry:
    content: torch.Tensor  # (Q', D), detached
    anchors: np.ndarray  # (Q', N, 3) meters, in its own frame
    ranges: np.ndarray  # (Q', 2) normalized (s, e)
    confidence: np.ndarray  # (Q',)
    slots: np.ndarray  # (Q',) home slot of each query in [0, num_queries)
    motion: np.ndarray  # 4x4 transform from this entry's frame to the latest


class TemporalMemory:
    """Per-stream ring buffer of past frames, oldest to newest."""

    def __init__(self, history_len: int):
        self.history_len = history_len
        self.entries: list[MemoryEntry] = []

    def __len__(self):
        return len(self.entries)

    def clear(self):
        self.entries = []

    def update(self, content: torch.Tensor, anchors: np.ndarray, ranges: np.ndarray,
               confidence: np.ndarray, slots: np.ndarray, ego_motion: EgoMotion):
        """Push the current frame's state after its forward pass.

        Stored motions are pre-composed with the new motion so every entry
        keeps its transform to the latest pushed frame.
        """
        for e in self.entries:
            e.motion = ego_motion.transform @ e.motion
        self.entries.append(MemoryEntry(
            content=content.detach(),
            anchors=np.asarray(anchors, dtype=np.float64),
            ranges=np.asarray(ranges, dtype=np.float64),
            confidence=np.asarray(confidence, dtype=np.float64),
            slots=np.asarray(slots, dtype=np.int64),
            motion=np.eye(4),
        ))
        while len(self.entries) > self.history_len:
            self.entries.pop(0)


def propagate_anchor_set(anchors: np.ndarray, rng: tuple[float, float],
                         motion: np.ndarray, cfg: ModelConfig
                         ) -> tuple[np.ndarray, tuple[float, float]]:
    """Ego-transform an anchor point set and re-sample it onto the fixed
    y grid; the range is carried through the transform and everything is
    clamped into the world box."""
    pts = np.asarray(anchors, dtype=np.float64)
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    moved = (hom @ np.asarray(motion).T)[:, :3]
    order = np.argsort(moved[:, 1], kind="stable")
    moved = moved[order]

    y_lo, y_hi = cfg.y_range
    span = y_hi - y_lo
    y_grid = np.linspace(y_lo, y_hi, cfg.num_anchor_points)
    x = np.interp(y_grid, moved[:, 1], moved[:, 0])
    z = np.interp(y_grid, moved[:, 1], moved[:, 2])
    x = np.clip(x, cfg.x_range[0], cfg.x_range[1])
    z = np.clip(z, cfg.z_range[0], cfg.z_range[1])
    new_points = np.stack([x, y_grid, z], axis=1)

    # carry the active range through the transform via its boundary points
    s, e = rng
    old_y = pts[:, 1]
    bounds = []
    for frac in (s, e):
        yb = y_lo + frac * span
        xb = np.interp(yb, old_y, pts[:, 0])
        zb = np.interp(yb, old_y, pts[:, 2])
        b = np.array([xb, yb, zb, 1.0]) @ np.asarray(motion).T
        bounds.append(b[1])
    new_s = (min(bounds) - y_lo) / span
    new_e = (max(bounds) - y_lo) / span
    new_s = float(np.clip(new_s, 0.0, 1.0))
    new_e = float(np.clip(new_e, 0.0, 1.0))
    if new_e - new_s < 1e-3:  # degenerate after clamping: fall back to default
        new_s, new_e = cfg.init_range
    return new_points, (new_s, new_e)


def _anchors_to_logits(points: np.ndarray, rng: tuple[float, float],
                       cfg: ModelConfig, like: torch.Tensor):
    """Convert propagated meters back into the decoder's sigmoid-space state."""
    x01 = (points[:, 0] - cfg.x_range[0]) / (cfg.x_range[1] - cfg.x_range[0])
    z01 = (points[:, 2] - cfg.z_range[0]) / (cfg.z_range[1] - cfg.z_range[0])
    as_t = lambda a: torch.as_tensor(a, dtype=like.dtype, device=like.device)
    x_logit = inverse_sigmoid(as_t(x01))
    z_logit = inverse_sigmoid(as_t(z01))
    ls, lg = range_to_logits(as_t(np.array(rng[0])), as_t(np.array(rng[1])))
    return x_logit, z_logit, ls, lg


def select_topk(memory: TemporalMemory, k: int):
    """Indices of the K highest-confidence stored queries over all entries.

    Ties break stably by ascending (entry, query) index.  Returns a list of
    (entry_index, query_index).
    """
    flat = []
    for ei, e in enumerate(memory.entries):
        for qi in range(len(e.confidence)):
            flat.append((ei, qi, e.confidence[qi]))
    if k > len(flat):
        warnings.warn(f"top_k={k} exceeds {len(flat)} stored queries; taking all")
        k = len(flat)
    order = sorted(range(len(flat)), key=lambda i: -flat[i][2])  # stable sort
    return [(flat[i][0], flat[i][1]) for i in order[:k]]


class TemporalFusion(nn.Module):
    """Applies the configured fusion variant before the first decoder layer."""

    def __init__(self, model_cfg: ModelConfig, fusion_cfg: FusionConfig):
        super().__init__()
        self.model_cfg = model_cfg
        self.cfg = fusion_cfg
        if fusion_cfg.variant in ("query_sa", "topk_query", "topk_query_anchors"):
            self.attn = MultiHeadAttention(model_cfg.dim, model_cfg.num_heads)
        else:
            self.attn = None

    def apply(self, memories: list[TemporalMemory], state: QueryState,
              motions: list[EgoMotion], anchor_embed) -> tuple[QueryState, np.ndarray]:
        """Fuse per-stream memories into the batched initial state.

        Returns the fused state plus the home-slot array for the fused query
        set (needed when pushing the frame back into memory).
        """
        cfg = self.model_cfg
        b, q = state.content.shape[:2]
        base_slots = np.arange(q, dtype=np.int64)
        variant = self.cfg.variant
        if variant == "none" or all(len(m) == 0 for m in memories):
            return state, np.tile(base_slots, (b, 1))

        if variant == "anchors":
            return self._fuse_anchors(memories, state, motions), np.tile(base_slots, (b, 1))
        if variant == "query_sa":
            return self._fuse_query_sa(memories, state), np.tile(base_slots, (b, 1))
        if variant in ("topk_query", "topk_query_anchors"):
            return self._fuse_topk(memories, state, motions, anchor_embed,
                                   with_anchors=variant == "topk_query_anchors")
        raise AssertionError(variant)

    # variant (a)
    def _fuse_anchors(self, memories, state: QueryState, motions):
        cfg = self.model_cfg
        xs, zs, ss, gs = [], [], [], []
        for i, m in enumerate(memories):
            entry = m.entries[-1]
            if len(entry.slots) != state.content.shape[1]:
                raise ValueError("anchor replacement needs matching query counts")
            motion = motions[i].transform @ entry.motion
            ex, ez, es, eg = [], [], [], []
            for qi in range(len(entry.slots)):
                pts, rng = propagate_anchor_set(entry.anchors[qi], tuple(entry.ranges[qi]),
                                                motion, cfg)
                xl, zl, ls, lg = _anchors_to_logits(pts, rng, cfg, state.content)
                ex.append(xl)
                ez.append(zl)
                es.append(ls)
                eg.append(lg)
            xs.append(torch.stack(ex))
            zs.append(torch.stack(ez))
            ss.append(torch.stack(es))
            gs.append(torch.stack(eg))
        return QueryState(content=state.content, x_logit=torch.stack(xs),
                          z_logit=torch.stack(zs), range_s=torch.stack(ss),
                          range_gap=torch.stack(gs))

    # variant (b)
    def _fuse_query_sa(self, memories, state: QueryState):
        outs = []
        for i, m in enumerate(memories):
            cur = state.content[i:i + 1]
            if len(m) == 0:
                outs.append(cur)
                continue
            kv = torch.cat([e.content for e in m.entries], dim=0).unsqueeze(0)
            kv = kv.to(cur.dtype)
            outs.append(cur + self.attn(cur, kv, kv))
        return QueryState(content=torch.cat(outs), x_logit=state.x_logit,
                          z_logit=state.z_logit, range_s=state.range_s,
                          range_gap=state.range_gap)

    # variants (c) and (d)
    def _fuse_topk(self, memories, state: QueryState, motions,
                   anchor_embed, with_anchors: bool):
        cfg = self.model_cfg
        k = self.cfg.top_k
        if k == 0:
            b, q = state.content.shape[:2]
            return state, np.tile(np.arange(q, dtype=np.int64), (b, 1))
        picks = [select_topk(m, k) for m in memories]
        k_eff = min(len(p) for p in picks)
        if k_eff == 0:
            b, q = state.content.shape[:2]
            return state, np.tile(np.arange(q, dtype=np.int64), (b, 1))

        contents, xs, zs, ss, gs, slot_rows = [], [], [], [], [], []
        for i, (m, pick) in enumerate(zip(memories, picks)):
            pick = pick[:k_eff]
            extra_c, ex, ez, es, eg, slots = [], [], [], [], [], []
            for ei, qi in pick:
                entry = m.entries[ei]
                home = int(entry.slots[qi]) % cfg.num_queries
                slots.append(home)
                extra_c.append(entry.content[qi])
                if with_anchors:
                    motion = motions[i].transform @ entry.motion
                    pts, rng = propagate_anchor_set(entry.anchors[qi],
                                                    tuple(entry.ranges[qi]), motion, cfg)
                    xl, zl, ls, lg = _anchors_to_logits(pts, rng, cfg, state.content)
                else:
                    # propagated queries reuse their home slot's learnable anchors
                    xl = anchor_embed.x_logit[home].to(state.x_logit.dtype)
                    zl = anchor_embed.z_logit[home].to(state.z_logit.dtype)
                    ls = anchor_embed.range_s[home].to(state.range_s.dtype)
                    lg = anchor_embed.range_gap[home].to(state.range_gap.dtype)
                ex.append(xl)
                ez.append(zl)
                es.append(ls)
                eg.append(lg)
            contents.append(torch.cat([state.content[i],
                                       torch.stack(extra_c).to(state.content.dtype)]))
            xs.append(torch.cat([state.x_logit[i], torch.stack(ex)]))
            zs.append(torch.cat([state.z_logit[i], torch.stack(ez)]))
            ss.append(torch.cat([state.range_s[i], torch.stack(es)]))
            gs.append(torch.cat([state.range_gap[i], torch.stack(eg)]))
            slot_rows.append(np.concatenate([np.arange(cfg.num_queries, dtype=np.int64),
                                             np.array(slots, dtype=np.int64)]))
        content = torch.stack(contents)
        fused = content + self.attn(content, content, content)
        new_state = QueryState(content=fused, x_logit=torch.stack(xs),
                               z_logit=torch.stack(zs), range_s=torch.stack(ss),
                               range_gap=torch.stack(gs))
        return new_state, np.stack(slot_rows)
