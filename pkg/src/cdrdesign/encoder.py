"""Relation-aware EGNN encoder with virtual nodes.

Each layer computes messages from [h_i, h_j, Gram(dx_i, dx_j), e_ij], aggregates
them per edge type through type-specific projections, and moves every node by
a per-type mean of gated CA-CA displacements (the same shift is applied to all
four backbone atoms of the node).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .graph import COMP_SLICE, DENSE_COLUMNS, EDGE_FEATURE_DIM, N_EDGE_TYPES, framework_dropout

GRAM_SCALE = 0.01  # A^2 -> nm^2
CA = 1


def gram_feature(dx_i: torch.Tensor, dx_j: torch.Tensor) -> torch.Tensor:
    """Flattened (..., 4, 4) matrix of dot products <dx_i[a], dx_j[b]>, row-major."""
    g = torch.einsum("...ac,...bc->...ab", dx_i, dx_j)
    return g.reshape(*g.shape[:-2], 16)


class EGNNLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int, d_edge: int = EDGE_FEATURE_DIM, coord_hidden: int = 16):
        super().__init__()
        self.d_out = d_out
        self.coord_hidden = coord_hidden
        self.msg = nn.Sequential(
            nn.Linear(2 * d_in + 16 + d_edge, d_out), nn.SiLU(),
            nn.Linear(d_out, d_out), nn.SiLU())
        self.type_proj = nn.Parameter(torch.randn(N_EDGE_TYPES, d_out, d_out) / (4.0 * d_out ** 0.5))
        self.node = nn.Sequential(
            nn.LayerNorm(d_in + d_out), nn.Linear(d_in + d_out, d_out), nn.SiLU(), nn.Linear(d_out, d_out))
        self.skip = nn.Identity() if d_in == d_out else nn.Linear(d_in, d_out, bias=False)
        # per-type coordinate gates, evaluated for all types at once and gathered by edge type
        self.coord_in = nn.Linear(d_out, N_EDGE_TYPES * coord_hidden)
        self.coord_out = nn.Parameter(torch.randn(N_EDGE_TYPES, coord_hidden) * 1e-3)
        self.coord_bias = nn.Parameter(torch.zeros(N_EDGE_TYPES))

    def coord_gates(self, m: torch.Tensor, etype: torch.Tensor) -> torch.Tensor:
        hid = F.silu(self.coord_in(m)).view(-1, N_EDGE_TYPES, self.coord_hidden)
        all_types = torch.einsum("etg,tg->et", hid, self.coord_out) + self.coord_bias
        return all_types.gather(1, etype[:, None]).squeeze(1)

    def forward(self, h, X, edge_index, edge_type, edge_feat, zero_gates: bool = False):
        n = h.shape[0]
        i, j = edge_index[:, 0], edge_index[:, 1]
        ca = X[:, CA]
        dx_i = X[i] - ca[j][:, None, :]
        dx_j = X[j] - ca[i][:, None, :]
        gram = gram_feature(dx_i, dx_j) * GRAM_SCALE
        m = self.msg(torch.cat([h[i], h[j], gram, edge_feat], dim=-1))

        slot = i * N_EDGE_TYPES + edge_type
        agg = h.new_zeros(n * N_EDGE_TYPES, self.d_out).index_add_(0, slot, m)
        agg = torch.einsum("ntd,tdo->no", agg.view(n, N_EDGE_TYPES, self.d_out), self.type_proj)
        h_new = self.skip(h) + self.node(torch.cat([h, agg], dim=-1))

        if zero_gates:
            return h_new, X
        gate = self.coord_gates(m, edge_type)
        delta = (ca[i] - ca[j]) * gate[:, None]
        sums = X.new_zeros(n * N_EDGE_TYPES, 3).index_add_(0, slot, delta)
        counts = torch.bincount(slot, minlength=n * N_EDGE_TYPES).clamp(min=1).to(X.dtype)
        shift = (sums / counts[:, None]).view(n, N_EDGE_TYPES, 3).sum(dim=1)
        return h_new, X + shift[:, None, :]


class InputEncoder(nn.Module):
    """Dual-path residue encoder: dense and complementarity features fused to ``d``."""

    def __init__(self, d: int, sparse_hidden: int = 16):
        super().__init__()
        n_dense = len(DENSE_COLUMNS)
        n_sparse = COMP_SLICE.stop - COMP_SLICE.start
        self.register_buffer("dense_cols", torch.as_tensor(DENSE_COLUMNS), persistent=False)
        self.dense = nn.Sequential(nn.Linear(n_dense, d), nn.SiLU(), nn.Linear(d, d), nn.SiLU())
        self.sparse = nn.Sequential(nn.Linear(n_sparse, sparse_hidden), nn.SiLU(),
                                    nn.Linear(sparse_hidden, sparse_hidden), nn.SiLU())
        self.fuse = nn.Linear(d + sparse_hidden, d)
        self.epitope = nn.Parameter(torch.zeros(d))

    def forward(self, feats, epitope_mask):
        dense = self.dense(feats[:, self.dense_cols])
        sparse = self.sparse(feats[:, COMP_SLICE])
        h = self.fuse(torch.cat([dense, sparse], dim=-1))
        return h + epitope_mask[:, None].to(h.dtype) * self.epitope


@dataclass
class EncoderState:
    h: torch.Tensor  # (N, d_hidden)
    Z: torch.Tensor  # (N, 4, 3)


class Encoder(nn.Module):
    def __init__(self, d_embed: int = 128, d_hidden: int = 256, n_layers: int = 5,
                 share_layers: bool = False, coord_hidden: int = 16):
        super().__init__()
        self.d_embed, self.d_hidden = d_embed, d_hidden
        self.inputs = InputEncoder(d_embed)
        self.global_emb = nn.Parameter(torch.randn(3, d_embed) * 0.1)
        self.virtual_emb = nn.Parameter(torch.randn(3, d_embed) * 0.1)
        self.virtual_edge = nn.Parameter(torch.randn(2, EDGE_FEATURE_DIM) * 0.1)  # types 8, 9
        layers = []
        shared = None
        for k in range(n_layers):
            d_in = d_embed if k == 0 else d_hidden
            if share_layers and k > 0:
                shared = shared or EGNNLayer(d_in, d_hidden, coord_hidden=coord_hidden)
                layers.append(shared)
            else:
                layers.append(EGNNLayer(d_in, d_hidden, coord_hidden=coord_hidden))
        self.layers = nn.ModuleList(layers)

    def embed(self, batch) -> torch.Tensor:
        residue = batch.residue_mask
        h = batch.node_features.new_zeros(batch.n_nodes, self.d_embed)
        h[residue] = self.inputs(batch.node_features[residue], batch.epitope_mask[residue])
        h[batch.global_mask] = self.global_emb[batch.node_slot[batch.global_mask]]
        h[batch.virtual_mask] = self.virtual_emb[batch.node_slot[batch.virtual_mask]]
        return h

    def edge_features(self, batch) -> torch.Tensor:
        vn = batch.edge_type >= 8
        e = batch.edge_features.clone()
        e[vn] = self.virtual_edge[batch.edge_type[vn] - 8]
        return e

    def forward(self, batch, fw_dropout: float = 0.0, generator=None, n_layers: int | None = None,
                zero_gates: bool = False) -> EncoderState:
        h = self.embed(batch)
        if self.training and fw_dropout > 0:
            h = framework_dropout(h, batch.framework_hc_mask, fw_dropout, generator)
        X = batch.node_coords
        e = self.edge_features(batch)
        layers = self.layers if n_layers is None else self.layers[:n_layers]
        for layer in layers:
            h, X = layer(h, X, batch.edge_index, batch.edge_type, e, zero_gates=zero_gates)
        return EncoderState(h, X)
