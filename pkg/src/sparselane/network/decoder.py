"""Curve Transformer decoder with dynamic anchor point sets.

Each query carries a content embedding plus N ordered 3D anchor points at
fixed longitudinal positions and a normalized (start, end) range.  Every
layer runs self-attention over query contents, samples multi-scale image
features around the projected anchor points (context sampling + curve
cross-attention), and refines the lateral/height coordinates and the range
in sigmoid space with heads shared across layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .layers import MLP, MultiHeadAttention, bilinear_gather, inverse_sigmoid, sinusoidal_embed


@dataclass
class ModelConfig:
    num_layers: int = 6
    num_queries: int = 16
    num_heads: int = 4
    num_sample_points: int = 4  # K offsets per anchor point per head/level
    dim: int = 64
    num_anchor_points: int = 40
    poly_order: int = 3
    pe_dim: int = 16
    pe_base: float = 10000.0
    ffn_dim: int = 256
    in_channels: int = 1
    x_range: tuple[float, float] = (-30.0, 30.0)
    y_range: tuple[float, float] = (3.0, 103.0)
    z_range: tuple[float, float] = (-10.0, 10.0)
    range_restriction: bool = True
    self_attention: bool = True
    coeffs_from_anchors: bool = False
    init_range: tuple[float, float] = (0.05, 0.95)
    stem_channels: tuple[int, int, int] = (16, 32, 48)
    stage_channels: tuple[int, int, int, int] = (48, 64, 96, 128)

    @property
    def strides(self):
        return (8, 16, 32, 64)

    @property
    def num_levels(self):
        return len(self.strides)


@dataclass
class QueryState:
    """Runtime decoding state of a query set.

    Anchor lateral/height coordinates and the range live in sigmoid space:
    meters = lo + sigmoid(logit) * (hi - lo), s = sigmoid(range_s), and
    e = s + (1 - s) * sigmoid(range_gap) so s < e holds by construction.
    """

    content: torch.Tensor  # (B, Q, D)
    x_logit: torch.Tensor  # (B, Q, N)
    z_logit: torch.Tensor  # (B, Q, N)
    range_s: torch.Tensor  # (B, Q)
    range_gap: torch.Tensor  # (B, Q)

    @property
    def num_queries(self):
        return self.content.shape[1]


def range_from_logits(range_s, range_gap):
    s = torch.sigmoid(range_s)
    e = s + (1.0 - s) * torch.sigmoid(range_gap)
    return s, e


def range_to_logits(s, e, eps=1e-6):
    s = s.clamp(eps, 1.0 - 2 * eps)
    gap = ((e - s) / (1.0 - s)).clamp(eps, 1.0 - eps)
    return inverse_sigmoid(s), inverse_sigmoid(gap)


class AnchorEmbedding(nn.Module):
    """Learnable initial curve queries: contents, anchor points and ranges.

    Anchor x and z start from a standard normal draw in meters; y is pinned
    to the fixed longitudinal grid.
    """

    def __init__(self, cfg: ModelConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        q, n = cfg.num_queries, cfg.num_anchor_points
        self.content = nn.Parameter(torch.randn(q, cfg.dim, generator=generator) * 0.1)
        x = torch.randn(q, n, generator=generator)
        z = torch.randn(q, n, generator=generator)
        x01 = ((x - cfg.x_range[0]) / (cfg.x_range[1] - cfg.x_range[0])).clamp(0.01, 0.99)
        z01 = ((z - cfg.z_range[0]) / (cfg.z_range[1] - cfg.z_range[0])).clamp(0.01, 0.99)
        self.x_logit = nn.Parameter(inverse_sigmoid(x01))
        self.z_logit = nn.Parameter(inverse_sigmoid(z01))
        s = torch.full((q,), cfg.init_range[0])
        e = torch.full((q,), cfg.init_range[1])
        ls, lg = range_to_logits(s, e)
        self.range_s = nn.Parameter(ls)
        self.range_gap = nn.Parameter(lg)

    def initial_state(self, batch_size: int) -> QueryState:
        expand = lambda t: t.unsqueeze(0).expand(batch_size, *t.shape)
        return QueryState(
            content=expand(self.content),
            x_logit=expand(self.x_logit),
            z_logit=expand(self.z_logit),
            range_s=expand(self.range_s),
            range_gap=expand(self.range_gap),
        )


class PositionalEmbed(nn.Module):
    """Sinusoid-then-MLP embedding of an anchor point set (params shared
    across all decoder layers)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        in_dim = 3 * cfg.num_anchor_points * cfg.pe_dim
        self.mlp = MLP(in_dim, cfg.dim, cfg.dim, depth=2)

    def forward(self, anchors01: torch.Tensor) -> torch.Tensor:
        # anchors01: (B, Q, N, 3) normalized to [0, 1]
        pe = sinusoidal_embed(anchors01, self.cfg.pe_dim, self.cfg.pe_base)
        # Concat(PE({x}), PE({y}), PE({z})): coordinate-major layout
        pe = pe.permute(0, 1, 3, 2, 4).flatten(-3)
        return self.mlp(pe)


class AnchorGeometry(nn.Module):
    """Fixed y grid plus conversions between logits, meters and [0, 1]."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.num_anchor_points
        y = torch.linspace(cfg.y_range[0], cfg.y_range[1], n)
        t = torch.arange(n, dtype=torch.float32) / max(n - 1, 1)
        self.register_buffer("y_grid", y)
        self.register_buffer("t_grid", t)
        vander = torch.stack([t ** r for r in range(cfg.poly_order + 1)], dim=1)
        self.register_buffer("vandermonde", vander)  # (N, R+1)
        self.register_buffer("vander_pinv", torch.linalg.pinv(vander))

    def anchors01(self, state: QueryState) -> torch.Tensor:
        b, q, n = state.x_logit.shape
        x01 = torch.sigmoid(state.x_logit)
        z01 = torch.sigmoid(state.z_logit)
        t = self.t_grid.to(x01.dtype).expand(b, q, n)
        return torch.stack([x01, t, z01], dim=-1)

    def anchors_meters(self, state: QueryState) -> torch.Tensor:
        a01 = self.anchors01(state)
        cfg = self.cfg
        lo = a01.new_tensor([cfg.x_range[0], cfg.y_range[0], cfg.z_range[0]])
        hi = a01.new_tensor([cfg.x_range[1], cfg.y_range[1], cfg.z_range[1]])
        return lo + a01 * (hi - lo)

    def active_mask(self, state: QueryState) -> torch.Tensor:
        """Sampling mask from the per-query range; inclusive start,
        exclusive end on the normalized grid (all ones when range
        restriction is disabled)."""
        b, q, n = state.x_logit.shape
        t = self.t_grid.to(state.range_s.dtype).expand(b, q, n)
        if not self.cfg.range_restriction:
            return torch.ones_like(t, dtype=torch.bool)
        s, e = range_from_logits(state.range_s, state.range_gap)
        mask = (t >= s.unsqueeze(-1)) & (t < e.unsqueeze(-1))
        # never let a query lose every sampling point: keep the point
        # nearest to the range midpoint alive
        empty = ~mask.any(dim=-1)
        if empty.any():
            mid = ((s + e) / 2).unsqueeze(-1)
            nearest = (t - mid).abs().argmin(dim=-1, keepdim=True)
            keep = torch.zeros_like(mask)
            keep.scatter_(-1, nearest, True)
            mask = torch.where(empty.unsqueeze(-1), keep, mask)
        return mask


def project_anchors(anchors_m: torch.Tensor, rig_t: dict) -> tuple[torch.Tensor, torch.Tensor]:
    """Pinhole-project anchor points given per-sample rig tensors.

    anchors_m: (B, Q, N, 3) in ground meters.  Returns image-plane (u, v)
    (B, Q, N, 2) and an in-front-of-camera flag (B, Q, N); behind-camera
    depths are clamped so coordinates stay finite.
    """
    b = anchors_m.shape[0]
    rot = rig_t["g2c"][:, :3, :3]
    trans = rig_t["g2c"][:, :3, 3]
    cam = torch.einsum("bij,bqnj->bqni", rot, anchors_m) + trans[:, None, None, :]
    zc = cam[..., 2]
    in_front = zc > 1e-6
    z_safe = zc.clamp(min=1e-6)
    u = rig_t["fx"].view(b, 1, 1) * cam[..., 0] / z_safe + rig_t["cx"].view(b, 1, 1)
    v = rig_t["fy"].view(b, 1, 1) * cam[..., 1] / z_safe + rig_t["cy"].view(b, 1, 1)
    return torch.stack([u, v], dim=-1), in_front


def level_coords(uv: torch.Tensor, stride: int) -> torch.Tensor:
    """Map image-pixel coordinates to a feature level's pixel grid
    (pixel-center aligned)."""
    return (uv + 0.5) / stride - 0.5


class ContextSampling(nn.Module):
    """Predict sampling offsets from image context plus the query.

    The reference feature is the validity-masked average of bilinear samples
    at the projected anchor points over all levels (epsilon-guarded); the
    offset head sees Concat(reference, content) so offsets depend on what
    the image actually shows, not on the query alone.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        out = cfg.num_heads * cfg.num_levels * cfg.num_anchor_points * cfg.num_sample_points * 2
        self.offset_mlp = MLP(2 * cfg.dim, 2 * cfg.dim, out, depth=2)
        self.eps = 1e-6
        self._reset_offsets()

    def _reset_offsets(self):
        # zero weights plus a radial bias pattern per (head, sample point),
        # mirroring deformable-attention initialization
        last = self.offset_mlp.layers[-1]
        nn.init.zeros_(last.weight)
        cfg = self.cfg
        m = torch.arange(cfg.num_heads, dtype=torch.float32)
        angles = m * (2.0 * torch.pi / cfg.num_heads)
        base = torch.stack([angles.cos(), angles.sin()], dim=-1)  # (M, 2)
        bias = base[:, None, None, None, :].repeat(
            1, cfg.num_levels, cfg.num_anchor_points, cfg.num_sample_points, 1)
        scale = torch.arange(1, cfg.num_sample_points + 1, dtype=torch.float32)
        bias = bias * scale[None, None, None, :, None]
        with torch.no_grad():
            last.bias.copy_(bias.flatten())

    def reference_feature(self, pyramid, coords_img, sigma):
        """Masked multi-level average of features at projected anchors.

        coords_img: (B, Q, N, 2) image-pixel coords; sigma: (B, Q, N, L)
        validity per level.  Returns (B, Q, D).
        """
        b, q, n, _ = coords_img.shape
        num = 0.0
        den = 0.0
        for l, feat in enumerate(pyramid):
            stride = self.cfg.strides[l]
            cl = level_coords(coords_img, stride).view(b, q * n, 2)
            sampled = bilinear_gather(feat, cl).view(b, q, n, -1)
            sl = sigma[..., l].to(sampled.dtype).unsqueeze(-1)
            num = num + (sampled * sl).sum(dim=2)
            den = den + sl.sum(dim=2)
        return num / (den + self.eps)

    def forward(self, content, reference):
        cfg = self.cfg
        off = self.offset_mlp(torch.cat([reference, content], dim=-1))
        b, q = off.shape[:2]
        return off.view(b, q, cfg.num_heads, cfg.num_levels,
                        cfg.num_anchor_points, cfg.num_sample_points, 2)


class CurveCrossAttention(nn.Module):
    """Deformable-style attention over multi-scale maps at the anchor points.

    Attention weights are softmax-normalized to sum to 1 per head over all
    (level, point, sample) slots; slots whose anchor point is deactivated by
    the range restriction or invisible in that level are masked out exactly.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        slots = cfg.num_levels * cfg.num_anchor_points * cfg.num_sample_points
        self.weight_proj = nn.Linear(cfg.dim, cfg.num_heads * slots)
        self.value_proj = nn.Linear(cfg.dim, cfg.dim)
        self.out_proj = nn.Linear(cfg.dim, cfg.dim)
        nn.init.zeros_(self.weight_proj.weight)
        nn.init.zeros_(self.weight_proj.bias)
        self.last_attention = None  # (B, Q, M, L, N, K) after softmax

    def forward(self, query_embed, pyramid, coords_img, offsets, sigma):
        cfg = self.cfg
        b, q, n, _ = coords_img.shape
        m, lv, k = cfg.num_heads, cfg.num_levels, cfg.num_sample_points
        hd = cfg.dim // m

        logits = self.weight_proj(query_embed).view(b, q, m, lv, n, k)
        slot_mask = sigma.permute(0, 1, 3, 2)[:, :, None, :, :, None]  # (B,Q,1,L,N,1)
        logits = logits.masked_fill(~slot_mask.expand_as(logits), float("-inf"))
        any_valid = sigma.flatten(2).any(dim=-1)  # (B, Q)
        # fully-masked queries get uniform weights over a zeroed output
        safe_logits = torch.where(any_valid[:, :, None, None, None, None],
                                  logits, torch.zeros_like(logits))
        attn = torch.softmax(safe_logits.flatten(3), dim=-1).view(b, q, m, lv, n, k)
        self.last_attention = attn

        out = 0.0
        for l, feat in enumerate(pyramid):
            value = self.value_proj.weight @ feat.flatten(2) + self.value_proj.bias[None, :, None]
            h_l, w_l = feat.shape[-2:]
            value = value.view(b, m, hd, h_l, w_l).flatten(0, 1)  # (B*M, hd, H, W)
            base = level_coords(coords_img, self.cfg.strides[l])  # (B, Q, N, 2)
            loc = base[:, None, :, :, None, :] + offsets[:, :, :, l].permute(0, 2, 1, 3, 4, 5)
            # loc: (B, M, Q, N, K, 2) -> (B*M, Q*N*K, 2)
            loc = loc.reshape(b * m, q * n * k, 2)
            sampled = bilinear_gather(value, loc).view(b, m, q, n, k, hd)
            w = attn[:, :, :, l].permute(0, 2, 1, 3, 4)  # (B, M, Q, N, K)
            out = out + (sampled * w.unsqueeze(-1)).sum(dim=(3, 4))
        out = out.permute(0, 2, 1, 3).reshape(b, q, cfg.dim)
        out = out * any_valid.to(out.dtype).unsqueeze(-1)
        return self.out_proj(out)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.self_attention:
            self.self_attn = MultiHeadAttention(cfg.dim, cfg.num_heads)
            self.norm_sa = nn.LayerNorm(cfg.dim)
        self.context = ContextSampling(cfg)
        self.cross_attn = CurveCrossAttention(cfg)
        self.norm_ca = nn.LayerNorm(cfg.dim)
        self.ffn = MLP(cfg.dim, cfg.ffn_dim, cfg.dim, depth=2)
        self.norm_ffn = nn.LayerNorm(cfg.dim)

    def forward(self, state: QueryState, pos, pyramid, coords_img, sigma, refine_head,
                geometry: AnchorGeometry, pos_embed: PositionalEmbed):
        content = state.content
        if self.cfg.self_attention:
            qk = content + pos
            content = self.norm_sa(content + self.self_attn(qk, qk, content))

        reference = self.context.reference_feature(pyramid, coords_img, sigma)
        offsets = self.context(content, reference)
        ca = self.cross_attn(content + pos, pyramid, coords_img, offsets, sigma)
        content = self.norm_ca(content + ca)
        content = self.norm_ffn(content + self.ffn(content))

        n = self.cfg.num_anchor_points
        deltas = refine_head(content)
        new_state = QueryState(
            content=content,
            x_logit=state.x_logit + deltas[..., :n],
            z_logit=state.z_logit + deltas[..., n:2 * n],
            range_s=state.range_s + deltas[..., 2 * n],
            range_gap=state.range_gap + deltas[..., 2 * n + 1],
        )
        new_pos = pos_embed(geometry.anchors01(new_state))
        return new_state, new_pos
