"""CDR -> epitope cross-attention scored by Lorentz-hyperboloid distances, and the gated bottleneck."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

ACOSH_MIN = 1.0 + 1e-7
ACOSH_MAX = 1e7


def minkowski_inner(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return -x[..., 0] * y[..., 0] + (x[..., 1:] * y[..., 1:]).sum(-1)


def lift_to_hyperboloid(v: torch.Tensor, c: float = 1.0) -> torch.Tensor:
    """(x0, v) with x0 = sqrt(1/c + |v|^2), a point of {<x, x>_L = -1/c}."""
    if c <= 0:
        raise ValueError("curvature must be positive")
    x0 = torch.sqrt(1.0 / c + (v * v).sum(-1, keepdim=True))
    return torch.cat([x0, v], dim=-1)


def lorentz_distance(q: torch.Tensor, k: torch.Tensor, c: float = 1.0) -> torch.Tensor:
    """Geodesic distance arccosh(-c <q, k>_L) / sqrt(c) between hyperboloid points.

    The arccosh argument is clamped to [1 + 1e-7, 1e7] for the gradient; below
    the lower clamp a cancellation-free value is returned with zero gradient,
    so coincident points give distance 0.
    """
    z = -c * minkowski_inner(q, k)
    clamped = z.clamp(ACOSH_MIN, ACOSH_MAX)
    d = torch.acosh(clamped)
    near = z < ACOSH_MIN
    if near.any():
        # arccosh(1 + delta) = 2 asinh(sqrt(delta / 2)), with delta from the Minkowski norm of q - k,
        # avoids the cancellation in z - 1 so coincident points give exactly 0
        diff = (q - k).detach()
        delta = (0.5 * c * minkowski_inner(diff, diff)).clamp(min=0.0)
        d = torch.where(near, 2.0 * torch.asinh(torch.sqrt(0.5 * delta)), d)
    return d / math.sqrt(c)


class HyperbolicCrossAttention(nn.Module):
    """Multi-head attention with scores -d_H(q_i, k_j) / sqrt(D/H); values stay Euclidean."""

    def __init__(self, d_model: int, heads: int = 4, curvature: float = 1.0):
        super().__init__()
        if d_model % heads:
            raise ValueError("heads must divide d_model")
        if curvature <= 0:
            raise ValueError("curvature must be positive")
        self.heads, self.dh, self.c = heads, d_model // heads, curvature
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)

    def _split(self, x):
        return x.view(x.shape[0], self.heads, self.dh).transpose(0, 1)  # (H, n, dh)

    def scores(self, q, k):
        qh = lift_to_hyperboloid(q, self.c)[:, :, None, :]
        kh = lift_to_hyperboloid(k, self.c)[:, None, :, :]
        return -lorentz_distance(qh, kh, self.c) / math.sqrt(self.dh)

    def forward(self, h_cdr, h_epi, mask=None):
        """``mask[i, j]`` marks allowed (CDR, epitope) pairs; returns (output, weights)."""
        if h_epi.shape[0] == 0:
            raise ValueError("cross-attention needs at least one epitope residue")
        q, k, v = self._split(self.q_proj(h_cdr)), self._split(self.k_proj(h_epi)), self._split(self.v_proj(h_epi))
        s = self.scores(q, k)  # (H, L, E)
        if mask is not None:
            s = s.masked_fill(~mask[None], float("-inf"))
        attn = torch.softmax(s, dim=-1)
        out = torch.einsum("hle,hed->hld", attn, v)
        return out.transpose(0, 1).reshape(h_cdr.shape[0], -1), attn


class EuclideanCrossAttention(HyperbolicCrossAttention):
    """Scaled dot-product variant, used when hyperbolic attention is ablated."""

    def scores(self, q, k):
        return torch.einsum("hld,hed->hle", q, k) / math.sqrt(self.dh)


class GatedBottleneck(nn.Module):
    """h~ = alpha (h * sigmoid(W_g o + b_g)) + (1 - alpha) h with alpha = sigmoid(alpha_logit) 2 alpha0."""

    def __init__(self, d_model: int, alpha0: float = 0.5):
        super().__init__()
        self.gate = nn.Linear(d_model, d_model)
        self.alpha_logit = nn.Parameter(torch.zeros(()))
        self.alpha0 = alpha0

    @property
    def alpha(self) -> torch.Tensor:
        return torch.sigmoid(self.alpha_logit) * 2.0 * self.alpha0

    def forward(self, h_cdr, o):
        g = torch.sigmoid(self.gate(o))
        a = self.alpha
        h_tilde = a * (h_cdr * g) + (1.0 - a) * h_cdr
        return torch.cat([h_tilde, o], dim=-1)
