"""Mixture-density sequence head with adjacent-position Potts couplings refined by gated BP."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

N_AA = 20


def symmetrize(J: torch.Tensor) -> torch.Tensor:
    return 0.5 * (J + J.transpose(-1, -2))


def adjacency(L: int, segment: torch.Tensor | None, device=None) -> torch.Tensor:
    """valid[i] is True when positions i and i+1 are neighbours (same CDR span)."""
    if L < 2:
        return torch.zeros(0, dtype=torch.bool, device=device)
    if segment is None:
        return torch.ones(L - 1, dtype=torch.bool, device=device)
    return segment[1:] == segment[:-1]


def bp_refine(logits: torch.Tensor, coupling: torch.Tensor, gates: torch.Tensor,
              rounds: int = 2, segment: torch.Tensor | None = None) -> torch.Tensor:
    """Gated belief-propagation refinement along a chain.

    ``logits``: (..., L, 20); ``coupling``: (..., 20, 20), already symmetric;
    ``gates``: (L,).  Each round takes one belief snapshot b = softmax(logits),
    sends m = b J to both neighbours and adds g_i (m_{i-1} + m_{i+1}) to the
    logits of position i.  Chain ends and span boundaries receive nothing.
    """
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    L = logits.shape[-2]
    valid = adjacency(L, segment, logits.device)
    if L < 2 or not valid.any():
        return logits
    v = valid.to(logits.dtype)[:, None]
    g = gates[:, None]
    for _ in range(rounds):
        m = torch.softmax(logits, dim=-1) @ coupling
        zero = torch.zeros_like(m[..., :1, :])
        from_left = torch.cat([zero, m[..., :-1, :] * v], dim=-2)
        from_right = torch.cat([m[..., 1:, :] * v, zero], dim=-2)
        logits = logits + g * (from_left + from_right)
    return logits


def pairwise_energy(beliefs: torch.Tensor, coupling: torch.Tensor, segment: torch.Tensor | None = None,
                    item: torch.Tensor | None = None, n_items: int | None = None) -> torch.Tensor:
    """Mean of b_i^T J b_{i+1} over adjacent pairs.

    Without ``item`` the result has the leading shape of ``beliefs`` minus the
    last two axes; with ``item`` (per-position owner index) it gains a trailing
    axis of length ``n_items``.  Groups without adjacent pairs score 0.
    """
    L = beliefs.shape[-2]
    valid = adjacency(L, segment, beliefs.device)
    lead = beliefs.shape[:-2]
    if item is None:
        if L < 2 or not valid.any():
            return beliefs.new_zeros(lead)
        pair = torch.einsum("...la,...ab,...lb->...l", beliefs[..., :-1, :], coupling, beliefs[..., 1:, :])
        return (pair * valid).sum(-1) / valid.sum()
    n_items = int(n_items if n_items is not None else item.max() + 1)
    if L < 2:
        return beliefs.new_zeros(*lead, n_items)
    pair = torch.einsum("...la,...ab,...lb->...l", beliefs[..., :-1, :], coupling, beliefs[..., 1:, :])
    owner = item[:-1]
    w = valid.to(beliefs.dtype)
    sums = beliefs.new_zeros(*lead, n_items).index_add_(-1, owner, pair * w)
    counts = beliefs.new_zeros(n_items).index_add_(0, owner, w)
    return sums / counts.clamp(min=1.0)


@dataclass
class MixturePrediction:
    component_logits: torch.Tensor  # (K, L, 20), after BP
    mixing: torch.Tensor  # (L, K)
    couplings: torch.Tensor  # (K, 20, 20) symmetric
    gates: torch.Tensor  # (L,)

    @property
    def beliefs(self) -> torch.Tensor:
        return torch.softmax(self.component_logits, dim=-1)

    @property
    def mixture_dist(self) -> torch.Tensor:
        return torch.einsum("lk,kla->la", self.mixing, self.beliefs)

    @property
    def n_components(self) -> int:
        return self.component_logits.shape[0]


class MdnPottsHead(nn.Module):
    def __init__(self, d_in: int = 768, d_hidden: int = 384, n_components: int = 4,
                 dropout: float = 0.1, bp_rounds: int = 2, gate_hidden: int = 64):
        super().__init__()
        if n_components < 1:
            raise ValueError("need at least one mixture component")
        self.d_in, self.K, self.rounds = d_in, n_components, bp_rounds
        self.trunk = nn.Sequential(nn.LayerNorm(d_in), nn.Linear(d_in, d_hidden), nn.SiLU(), nn.Dropout(dropout))
        self.heads = nn.Linear(d_hidden, n_components * N_AA)
        self.mix = nn.Linear(d_hidden, n_components)
        self.coupling = nn.Parameter(torch.randn(n_components, N_AA, N_AA) * 0.01)
        self.gate = nn.Sequential(nn.Linear(d_hidden, gate_hidden), nn.SiLU(), nn.Linear(gate_hidden, 1))

    def forward(self, features: torch.Tensor, segment: torch.Tensor | None = None) -> MixturePrediction:
        if features.shape[-1] != self.d_in:
            raise ValueError(f"feature width {features.shape[-1]} != head input width {self.d_in}")
        z = self.trunk(features)
        L = z.shape[0]
        raw = self.heads(z).view(L, self.K, N_AA).transpose(0, 1)
        J = symmetrize(self.coupling)
        gates = torch.sigmoid(self.gate(z)).squeeze(-1)
        logits = bp_refine(raw, J, gates, self.rounds, segment)
        mixing = torch.softmax(self.mix(z), dim=-1)
        return MixturePrediction(logits, mixing, J, gates)


def greedy_decode(pred: MixturePrediction) -> torch.Tensor:
    """Per position: best mixing component, then its argmax amino acid (lowest index on ties)."""
    k_star = _first_argmax(pred.mixing)
    chosen = pred.component_logits[k_star, torch.arange(len(k_star))]
    return _first_argmax(chosen)


def _first_argmax(x: torch.Tensor) -> torch.Tensor:
    # torch.argmax does not promise the first index on ties for every backend
    best = x.max(dim=-1, keepdim=True).values
    idx = torch.arange(x.shape[-1], device=x.device).expand_as(x)
    return torch.where(x == best, idx, x.shape[-1]).min(dim=-1).values
