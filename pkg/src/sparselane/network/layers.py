"""Small building blocks shared across the decoder."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class MLP(nn.Module):
    """Plain ReLU MLP; depth counts linear layers."""

    def __init__(self, in_dim, hidden_dim, out_dim, depth=2):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (depth - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class MultiHeadAttention(nn.Module):
    """Standard multi-head attention with separate q/k/v inputs.

    Kept hand-rolled so the whole forward stays transparent for the 64-bit
    finite-difference checks.
    """

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, q, k, v):
        # q: (B, Nq, D); k, v: (B, Nk, D)
        b, nq, _ = q.shape
        nk = k.shape[1]
        hd = self.dim // self.heads
        qh = self.q_proj(q).view(b, nq, self.heads, hd).transpose(1, 2)
        kh = self.k_proj(k).view(b, nk, self.heads, hd).transpose(1, 2)
        vh = self.v_proj(v).view(b, nk, self.heads, hd).transpose(1, 2)
        attn = torch.softmax(qh @ kh.transpose(-1, -2) / hd ** 0.5, dim=-1)
        out = (attn @ vh).transpose(1, 2).reshape(b, nq, self.dim)
        return self.out_proj(out)


def sinusoidal_embed(values: torch.Tensor, dim: int, base: float = 10000.0) -> torch.Tensor:
    """Interleaved (sin, cos) embedding of scalars in [0, 1].

    values: (...,) -> (..., dim); value 0 maps to (0, 1, 0, 1, ...).
    """
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = base ** (-2.0 * torch.arange(half, dtype=values.dtype, device=values.device) / dim)
    ang = values[..., None] * freqs * (2.0 * torch.pi)
    out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)
    return out.flatten(-2)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    x = x.clamp(min=eps, max=1.0 - eps)
    return torch.log(x) - torch.log1p(-x)


def bilinear_gather(feat: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Differentiable bilinear sampling with zero padding.

    feat: (B, C, H, W); coords: (B, S, 2) as (u, v) in pixel units of the
    grid.  Corners falling outside the grid contribute zero, so values decay
    bilinearly to zero beyond the border (deformable-attention convention).
    Returns (B, S, C).
    """
    b, c, h, w = feat.shape
    u = coords[..., 0]
    v = coords[..., 1]
    u0 = torch.floor(u)
    v0 = torch.floor(v)
    du = u - u0
    dv = v - v0

    feats = feat.flatten(2)  # (B, C, H*W)
    out = 0.0
    for iu, wu in ((u0, 1.0 - du), (u0 + 1.0, du)):
        for iv, wv in ((v0, 1.0 - dv), (v0 + 1.0, dv)):
            inside = (iu >= 0) & (iu <= w - 1) & (iv >= 0) & (iv <= h - 1)
            idx = (iv.clamp(0, h - 1) * w + iu.clamp(0, w - 1)).long()
            vals = torch.gather(feats, 2, idx.unsqueeze(1).expand(b, c, -1))
            weight = (wu * wv * inside.to(feat.dtype)).unsqueeze(1)
            out = out + vals * weight
    return out.transpose(1, 2)
