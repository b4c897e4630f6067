"""Ragged batching of per-complex graphs and the per-residue language-model features."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .complex_model import Complex, encode_sequence
from .graph import KIND_GLOBAL, KIND_VIRTUAL, HeteroGraph, build_graph, sinusoidal

PLM_DIM = 1280
PLM_STUB_SEED = 1729
MASK_TOKEN = 20


class PlmError(ValueError):
    pass


def _stub_projection(dim: int) -> np.ndarray:
    rng = np.random.default_rng(PLM_STUB_SEED)
    return rng.normal(0.0, 1.0 / np.sqrt(21 + 16), size=(21 + 16, dim))


_STUB_CACHE: dict[int, np.ndarray] = {}


def plm_stub(cx: Complex, dim: int = PLM_DIM) -> np.ndarray:
    """Stand-in for language-model features: fixed seeded projection of masked one-hots plus position.

    CDR residues get the mask token, so the stub never sees the design target.
    """
    if dim not in _STUB_CACHE:
        _STUB_CACHE[dim] = _stub_projection(dim)
    idx = encode_sequence(cx.heavy.seq)
    idx[cx.cdr_indices] = MASK_TOKEN
    onehot = np.zeros((len(idx), 21))
    onehot[np.arange(len(idx)), idx] = 1.0
    pos = sinusoidal(np.arange(len(idx), dtype=np.float64), 16)
    return np.tanh(np.concatenate([onehot, pos], axis=1) @ _STUB_CACHE[dim])


def load_plm(cx: Complex, plm_dir: str | Path | None, dim: int = PLM_DIM) -> tuple[np.ndarray, bool]:
    """Per-heavy-residue features from ``<plm_dir>/<id>.npy``; falls back to the stub.

    Returns (matrix, is_stub).
    """
    if plm_dir is not None:
        path = Path(plm_dir) / f"{cx.id}.npy"
        if path.exists():
            mat = np.load(path)
            if mat.shape != (len(cx.heavy), dim):
                raise PlmError(f"{path}: expected shape {(len(cx.heavy), dim)}, got {mat.shape}")
            if not np.isfinite(mat).all():
                raise PlmError(f"{path}: non-finite entries")
            return mat.astype(np.float64), False
    return plm_stub(cx, dim), True


@dataclass
class Example:
    complex: Complex
    graph: HeteroGraph
    plm: np.ndarray | None  # (n_heavy, PLM_DIM)
    plm_is_stub: bool = True


def make_example(cx: Complex, mode: str = "train", knn_k: int = 8, radial_intra: float = 8.0,
                 radial_inter: float = 12.0, plm_dir=None, use_plm: bool = True) -> Example:
    g = build_graph(cx, mode, knn_k, radial_intra, radial_inter)
    plm, stub = load_plm(cx, plm_dir) if use_plm else (None, False)
    return Example(cx, g, plm, stub)


@dataclass
class GraphBatch:
    ids: list
    n_nodes: int
    node_features: torch.Tensor
    node_coords: torch.Tensor
    edge_index: torch.Tensor
    edge_type: torch.Tensor
    edge_features: torch.Tensor
    residue_mask: torch.Tensor
    global_mask: torch.Tensor
    virtual_mask: torch.Tensor
    node_slot: torch.Tensor  # 0..2 within global / virtual groups, -1 for residues
    framework_hc_mask: torch.Tensor
    epitope_mask: torch.Tensor
    cdr_nodes: torch.Tensor
    cdr_item: torch.Tensor
    cdr_segment: torch.Tensor  # unique across the batch so BP never crosses items or spans
    cdr_target: torch.Tensor  # 0-based amino-acid tokens
    true_cdr_atoms: torch.Tensor
    epitope_nodes: torch.Tensor
    epitope_item: torch.Tensor
    antigen_nodes: torch.Tensor
    antigen_item: torch.Tensor
    plm: torch.Tensor | None  # rows for CDR positions only

    @property
    def n_items(self) -> int:
        return len(self.ids)

    def to(self, dtype: torch.dtype) -> "GraphBatch":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v.to(dtype) if torch.is_tensor(v) and v.is_floating_point() else v
        return GraphBatch(**kw)

    def cdr_slices(self):
        """Per item, the slice of batch CDR positions it owns."""
        counts = torch.bincount(self.cdr_item, minlength=self.n_items).tolist()
        out, start = [], 0
        for c in counts:
            out.append(slice(start, start + c))
            start += c
        return out


def collate(examples, dtype: torch.dtype = torch.float32) -> GraphBatch:
    if not examples:
        raise ValueError("empty batch")
    cols = {k: [] for k in ("feat", "coords", "eidx", "etype", "efeat", "kind", "fw", "epi", "cdr",
                            "cdr_item", "seg", "tgt", "true", "epin", "epi_item", "agn", "ag_item", "plm")}
    offset, seg_offset = 0, 0
    use_plm = examples[0].plm is not None
    for b, ex in enumerate(examples):
        g, cx = ex.graph, ex.complex
        if (ex.plm is not None) != use_plm:
            raise ValueError("mixed PLM availability within a batch")
        cols["feat"].append(g.node_features)
        cols["coords"].append(g.node_coords)
        cols["eidx"].append(g.edge_index + offset)
        cols["etype"].append(g.edge_type)
        cols["efeat"].append(g.edge_features)
        cols["kind"].append(g.node_kind)
        cols["fw"].append(g.framework_hc_mask)
        cols["epi"].append(g.epitope_mask)
        cols["cdr"].append(g.cdr_nodes + offset)
        cols["cdr_item"].append(np.full(len(g.cdr_nodes), b))
        cols["seg"].append(g.cdr_segment + seg_offset)
        seg_offset += int(g.cdr_segment.max()) + 1 if len(g.cdr_segment) else 0
        cols["tgt"].append(encode_sequence(cx.cdr_seq))
        cols["true"].append(cx.heavy.atoms[cx.cdr_indices])
        cols["epin"].append(g.epitope_nodes + offset)
        cols["epi_item"].append(np.full(len(g.epitope_nodes), b))
        ag = np.flatnonzero(g.antigen_mask)
        cols["agn"].append(ag + offset)
        cols["ag_item"].append(np.full(len(ag), b))
        if use_plm:
            cols["plm"].append(ex.plm[cx.cdr_indices])
        offset += g.n_nodes

    kind = np.concatenate(cols["kind"])
    glob, virt = kind == KIND_GLOBAL, kind == KIND_VIRTUAL
    slot = np.full(len(kind), -1)
    slot[glob] = np.tile(np.arange(3), glob.sum() // 3)
    slot[virt] = np.tile(np.arange(3), virt.sum() // 3)

    def f(x):
        return torch.as_tensor(np.concatenate(x), dtype=dtype)

    def i(x):
        return torch.as_tensor(np.concatenate(x).astype(np.int64))

    def m(x):
        return torch.as_tensor(np.concatenate(x).astype(bool))

    return GraphBatch(
        ids=[ex.complex.id for ex in examples], n_nodes=offset,
        node_features=f(cols["feat"]), node_coords=f(cols["coords"]),
        edge_index=i(cols["eidx"]), edge_type=i(cols["etype"]), edge_features=f(cols["efeat"]),
        residue_mask=torch.as_tensor(~(glob | virt)), global_mask=torch.as_tensor(glob),
        virtual_mask=torch.as_tensor(virt), node_slot=torch.as_tensor(slot, dtype=torch.int64),
        framework_hc_mask=m(cols["fw"]), epitope_mask=m(cols["epi"]),
        cdr_nodes=i(cols["cdr"]), cdr_item=i(cols["cdr_item"]), cdr_segment=i(cols["seg"]),
        cdr_target=i(cols["tgt"]), true_cdr_atoms=f(cols["true"]),
        epitope_nodes=i(cols["epin"]), epitope_item=i(cols["epi_item"]),
        antigen_nodes=i(cols["agn"]), antigen_item=i(cols["ag_item"]),
        plm=f(cols["plm"]) if use_plm else None)
