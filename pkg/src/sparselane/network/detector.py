"""Full detector: backbone + curve decoder + prediction head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .. import lanes as lane_lib
from .backbone import ConvBackbone
from .decoder import (AnchorEmbedding, AnchorGeometry, DecoderLayer, ModelConfig,
                      PositionalEmbed, QueryState, level_coords, project_anchors,
                      range_from_logits)


@dataclass
class LanePrediction:
    """One decoded lane: confidence, boundary, polynomial coefficients in
    raw y (meters), plus the per-layer refined anchor sets and ranges kept
    for deep supervision and refinement-trace plots."""

    confidence: float
    y_start: float
    y_end: float
    coeffs_x: np.ndarray
    coeffs_z: np.ndarray
    category: int = 1
    anchors: np.ndarray | None = None  # final (N, 3) meters
    aux_anchors: list | None = None  # per decoder layer, (N, 3) meters
    aux_ranges: list | None = None  # per decoder layer, (s, e)

    def to_poly_lane(self) -> lane_lib.PolyLane:
        return lane_lib.PolyLane(self.confidence, self.y_start, self.y_end,
                                 self.coeffs_x, self.coeffs_z, category=self.category)


@dataclass
class ModelOutput:
    conf_logits: torch.Tensor  # (B, Q)
    coeffs_x: torch.Tensor  # (B, Q, R+1), unit-y basis
    coeffs_z: torch.Tensor  # (B, Q, R+1)
    curve_points: torch.Tensor  # (B, Q, N, 2): (x, z) at the fixed y grid
    range_s: torch.Tensor  # (B, Q) normalized
    range_e: torch.Tensor  # (B, Q)
    y_start: torch.Tensor  # (B, Q) meters
    y_end: torch.Tensor  # (B, Q)
    anchors: torch.Tensor  # (B, Q, N, 3) final, meters
    aux_anchors: torch.Tensor  # (layers, B, Q, N, 3) meters
    aux_range: torch.Tensor  # (layers, B, Q, 2) normalized (s, e)
    seg_logits: torch.Tensor  # (B, 1, H/8, W/8)
    content: torch.Tensor  # (B, Q, D)
    state: QueryState


def rig_tensors(rigs, device=None, dtype=torch.float32) -> dict:
    """Stack per-sample camera rigs into batched tensors."""
    g2c = torch.stack([torch.as_tensor(r.ground_to_camera, dtype=dtype) for r in rigs])
    mk = lambda vals: torch.tensor(vals, dtype=dtype)
    out = {
        "g2c": g2c,
        "fx": mk([r.fx for r in rigs]),
        "fy": mk([r.fy for r in rigs]),
        "cx": mk([r.cx for r in rigs]),
        "cy": mk([r.cy for r in rigs]),
    }
    if device is not None:
        out = {k: v.to(device) for k, v in out.items()}
    return out


class CurveLaneDetector(nn.Module):
    def __init__(self, cfg: ModelConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.backbone = ConvBackbone(cfg.in_channels, cfg.dim, cfg.stem_channels,
                                     cfg.stage_channels)
        self.geometry = AnchorGeometry(cfg)
        self.pos_embed = PositionalEmbed(cfg)
        self.anchor_embed = AnchorEmbedding(cfg, generator)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.num_layers))
        # shared-parameter heads: one (dx, dz, ds, de) refinement linear for
        # all layers, zero-initialized so the initial anchors pass through
        self.refine_head = nn.Linear(cfg.dim, 2 * cfg.num_anchor_points + 2)
        nn.init.zeros_(self.refine_head.weight)
        nn.init.zeros_(self.refine_head.bias)
        self.conf_head = nn.Linear(cfg.dim, 1)
        self.coeff_head = nn.Linear(cfg.dim, 2 * (cfg.poly_order + 1))
        nn.init.zeros_(self.coeff_head.weight)
        nn.init.zeros_(self.coeff_head.bias)

    def initial_state(self, batch_size: int) -> QueryState:
        return self.anchor_embed.initial_state(batch_size)

    def _sigma(self, coords_img, in_front, active, pyramid):
        flags = []
        for l, feat in enumerate(pyramid):
            h_l, w_l = feat.shape[-2:]
            cl = level_coords(coords_img, self.cfg.strides[l])
            ok = (in_front
                  & (cl[..., 0] >= 0) & (cl[..., 0] <= w_l - 1)
                  & (cl[..., 1] >= 0) & (cl[..., 1] <= h_l - 1))
            flags.append(ok & active)
        return torch.stack(flags, dim=-1)  # (B, Q, N, L)

    def decode(self, pyramid, rig_t, state: QueryState) -> tuple[QueryState, list]:
        pos = self.pos_embed(self.geometry.anchors01(state))
        aux = []
        for layer in self.layers:
            anchors_m = self.geometry.anchors_meters(state)
            coords_img, in_front = project_anchors(anchors_m, rig_t)
            active = self.geometry.active_mask(state)
            sigma = self._sigma(coords_img, in_front, active, pyramid)
            state, pos = layer(state, pos, pyramid, coords_img, sigma,
                               self.refine_head, self.geometry, self.pos_embed)
            s, e = range_from_logits(state.range_s, state.range_gap)
            aux.append((self.geometry.anchors_meters(state), torch.stack([s, e], dim=-1)))
        return state, aux

    def forward(self, images: torch.Tensor, rig_t: dict,
                state: QueryState | None = None) -> ModelOutput:
        """images: (B, C, H, W); rig_t from :func:`rig_tensors`.

        ``state`` overrides the learned initial queries (temporal fusion
        hands in propagated ones)."""
        pyramid, seg_logits = self.backbone(images)
        if state is None:
            state = self.initial_state(images.shape[0])
        state, aux = self.decode(pyramid, rig_t, state)

        content = state.content
        conf_logits = self.conf_head(content).squeeze(-1)
        anchors_m = self.geometry.anchors_meters(state)
        if self.cfg.coeffs_from_anchors:
            pinv = self.geometry.vander_pinv.to(content.dtype)
            coeffs_x = torch.einsum("rn,bqn->bqr", pinv, anchors_m[..., 0])
            coeffs_z = torch.einsum("rn,bqn->bqr", pinv, anchors_m[..., 2])
        else:
            co = self.coeff_head(content)
            coeffs_x, coeffs_z = co.chunk(2, dim=-1)
        vander = self.geometry.vandermonde.to(content.dtype)
        curve_x = torch.einsum("nr,bqr->bqn", vander, coeffs_x)
        curve_z = torch.einsum("nr,bqr->bqn", vander, coeffs_z)

        s, e = range_from_logits(state.range_s, state.range_gap)
        y_lo, y_hi = self.cfg.y_range
        span = y_hi - y_lo
        return ModelOutput(
            conf_logits=conf_logits,
            coeffs_x=coeffs_x,
            coeffs_z=coeffs_z,
            curve_points=torch.stack([curve_x, curve_z], dim=-1),
            range_s=s,
            range_e=e,
            y_start=y_lo + s * span,
            y_end=y_lo + e * span,
            anchors=anchors_m,
            aux_anchors=torch.stack([a for a, _ in aux]),
            aux_range=torch.stack([r for _, r in aux]),
            seg_logits=seg_logits,
            content=content,
            state=state,
        )

    def to_lane_predictions(self, output: ModelOutput) -> list[list[LanePrediction]]:
        """Convert a batched output to per-sample prediction lists (numpy)."""
        y_lo, y_hi = self.cfg.y_range
        conf = torch.sigmoid(output.conf_logits).detach().cpu().numpy()
        cx = output.coeffs_x.detach().cpu().numpy()
        cz = output.coeffs_z.detach().cpu().numpy()
        ys = output.y_start.detach().cpu().numpy()
        ye = output.y_end.detach().cpu().numpy()
        anchors = output.anchors.detach().cpu().numpy()
        aux_a = output.aux_anchors.detach().cpu().numpy()
        aux_r = output.aux_range.detach().cpu().numpy()
        batch = []
        for b in range(conf.shape[0]):
            preds = []
            for q in range(conf.shape[1]):
                preds.append(LanePrediction(
                    confidence=float(conf[b, q]),
                    y_start=float(ys[b, q]),
                    y_end=float(ye[b, q]),
                    coeffs_x=lane_lib.coeffs_unit_to_y(cx[b, q], y_lo, y_hi),
                    coeffs_z=lane_lib.coeffs_unit_to_y(cz[b, q], y_lo, y_hi),
                    anchors=anchors[b, q],
                    aux_anchors=[aux_a[l, b, q] for l in range(aux_a.shape[0])],
                    aux_ranges=[tuple(aux_r[l, b, q]) for l in range(aux_r.shape[0])],
                ))
            batch.append(preds)
        return batch
