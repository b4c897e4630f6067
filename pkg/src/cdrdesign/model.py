"""Full co-design network: encoder, CDR-to-epitope attention, fusion and mixture head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import torch
import torch.nn as nn

from .data import PLM_DIM, GraphBatch
from .encoder import Encoder
from .hyperbolic import EuclideanCrossAttention, GatedBottleneck, HyperbolicCrossAttention
from .mdn import N_AA, MdnPottsHead, MixturePrediction


@dataclass(frozen=True)
class ModelConfig:
    d_embed: int = 128
    d_hidden: int = 256
    n_layers: int = 5
    share_layers: bool = False
    coord_hidden: int = 16
    heads: int = 4
    curvature: float = 1.0
    alpha0: float = 0.5
    hyperbolic: bool = True
    use_plm: bool = True
    plm_dim: int = PLM_DIM
    plm_proj: int = 256
    mdn_hidden: int = 384
    n_components: int = 4
    dropout: float = 0.1
    bp_rounds: int = 2
    cls_dim: int = 128
    knn_k: int = 8
    radial_intra: float = 8.0
    radial_inter: float = 12.0

    def __post_init__(self):
        for k in ("d_embed", "d_hidden", "heads", "mdn_hidden", "n_components", "cls_dim", "knn_k"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.n_layers < 0 or self.bp_rounds < 0:
            raise ValueError("n_layers and bp_rounds must be >= 0")
        if self.d_hidden % self.heads:
            raise ValueError("heads must divide d_hidden")
        if self.curvature <= 0:
            raise ValueError("curvature must be positive")

    @property
    def fused_width(self) -> int:
        return 2 * self.d_hidden + (self.plm_proj if self.use_plm else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


# Reduced widths for single-core CPU experiments; structure is unchanged.
DESK = ModelConfig(d_embed=32, d_hidden=64, n_layers=3, plm_proj=32, mdn_hidden=96, cls_dim=32)


@dataclass
class ModelOutput:
    pred: MixturePrediction  # over all CDR positions of the batch
    cdr_atoms: torch.Tensor  # (L_total, 4, 3)
    antigen_emb: torch.Tensor  # (B, cls_dim)
    attention: torch.Tensor  # (H, L_total, E_total)


def pool(x: torch.Tensor, item: torch.Tensor, n_items: int) -> torch.Tensor:
    sums = x.new_zeros(n_items, x.shape[-1]).index_add_(0, item, x)
    counts = torch.bincount(item, minlength=n_items).clamp(min=1).to(x.dtype)
    return sums / counts[:, None]


class CoDesignModel(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.d_embed, cfg.d_hidden, cfg.n_layers, cfg.share_layers, cfg.coord_hidden)
        attn = HyperbolicCrossAttention if cfg.hyperbolic else EuclideanCrossAttention
        self.attend = attn(cfg.d_hidden, cfg.heads, cfg.curvature)
        self.bottleneck = GatedBottleneck(cfg.d_hidden, cfg.alpha0)
        self.plm_proj = nn.Linear(cfg.plm_dim, cfg.plm_proj) if cfg.use_plm else None
        self.head = MdnPottsHead(cfg.fused_width, cfg.mdn_hidden, cfg.n_components, cfg.dropout, cfg.bp_rounds)
        # antigen-classification pieces: amino-acid table, soft-sequence MLP, antigen projection
        self.aa_embeddings = nn.Parameter(torch.randn(N_AA, cfg.cls_dim) * 0.1)
        self.cls_mlp = nn.Sequential(nn.Linear(cfg.cls_dim, cfg.cls_dim), nn.SiLU(), nn.Linear(cfg.cls_dim, cfg.cls_dim))
        self.antigen_proj = nn.Linear(cfg.d_hidden, cfg.cls_dim)

    def forward(self, batch: GraphBatch, fw_dropout: float = 0.0, generator=None, zero_gates: bool = False) -> ModelOutput:
        state = self.encoder(batch, fw_dropout=fw_dropout, generator=generator, zero_gates=zero_gates)
        h_cdr = state.h[batch.cdr_nodes]
        h_epi = state.h[batch.epitope_nodes]
        same_item = batch.cdr_item[:, None] == batch.epitope_item[None, :]
        o, attn = self.attend(h_cdr, h_epi, same_item)
        fused = self.bottleneck(h_cdr, o)
        if self.plm_proj is not None:
            if batch.plm is None:
                raise ValueError("model expects language-model features but the batch has none")
            fused = torch.cat([fused, self.plm_proj(batch.plm)], dim=-1)
        pred = self.head(fused, segment=batch.cdr_segment)
        antigen = pool(state.h[batch.antigen_nodes], batch.antigen_item, batch.n_items)
        return ModelOutput(pred, state.Z[batch.cdr_nodes], self.antigen_proj(antigen), attn)

    def soft_sequence_embedding(self, dist: torch.Tensor, item: torch.Tensor, n_items: int) -> torch.Tensor:
        """c_b = MLP(mean over item b's positions of p_j E_AA)."""
        return self.cls_mlp(pool(dist @ self.aa_embeddings, item, n_items))
