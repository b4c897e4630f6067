"""Heterogeneous residue graph with ten typed edge sets.

Node order: heavy residues, light residues, antigen residues, three global
segment tokens (heavy, light, antigen), three virtual nodes (epitope, CDR,
whole complex).  An edge ``(i, j)`` of type ``t`` means ``j`` is in the
type-``t`` neighbourhood of ``i``; messages flow from ``j`` to ``i``.

Edge types:
  0 intra-chain radial (CA < 8 A)        5 sequential |i-j| = 2 (antibody chains)
  1 global <-> residues of its segment   6 inter-chain radial (CA < 12 A)
  2 global <-> global                    7 inter-chain K nearest
  3 sequential |i-j| = 1 (antibody)      8 virtual <-> epitope
  4 intra-chain K nearest                9 virtual <-> CDR

The same residue pair may appear under several types (the graph is a typed
multigraph); within one type each directed pair appears once.

The model never sees native CDR identities or coordinates: CDR amino-acid slots
are zeroed and CDR backbones are re-initialised from the flanking framework
anchors in both ``train`` and ``infer`` mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .complex_model import CA, Complex

N_EDGE_TYPES = 10
N_GLOBAL = 3
N_VIRTUAL = 3
KIND_HEAVY, KIND_LIGHT, KIND_ANTIGEN, KIND_GLOBAL, KIND_VIRTUAL = range(5)
ANTIBODY_KINDS = (KIND_HEAVY, KIND_LIGHT)
POSITIONAL_TYPES = (0, 3, 4, 5)  # types whose relative-position block is populated
VIRTUAL_TYPES = (8, 9)

# node feature layout
POS_DIM, BOND_DIM, ANGLE_DIM, FRAME_DIM, AA_DIM, COMP_DIM, SEG_DIM = 16, 48, 12, 9, 20, 4, 3
_widths = [POS_DIM, BOND_DIM, ANGLE_DIM, FRAME_DIM, AA_DIM, COMP_DIM, SEG_DIM]
_offsets = np.cumsum([0] + _widths)
POS_SLICE, BOND_SLICE, ANGLE_SLICE, FRAME_SLICE, AA_SLICE, COMP_SLICE, SEG_SLICE = (
    slice(int(a), int(b)) for a, b in zip(_offsets[:-1], _offsets[1:]))
NODE_FEATURE_DIM = int(_offsets[-1])  # 112
DENSE_COLUMNS = np.r_[0:COMP_SLICE.start, SEG_SLICE]  # everything but complementarity

# edge feature layout
EDGE_TYPE_DIM, RELPOS_DIM, PAIR_RBF_DIM, QUAT_DIM, EDGE_DIR_DIM = 8, 16, 64, 4, 12
_eoff = np.cumsum([0, EDGE_TYPE_DIM, RELPOS_DIM, PAIR_RBF_DIM, QUAT_DIM, EDGE_DIR_DIM])
ETYPE_SLICE, RELPOS_SLICE, PAIR_RBF_SLICE, QUAT_SLICE, EDGE_DIR_SLICE = (
    slice(int(a), int(b)) for a, b in zip(_eoff[:-1], _eoff[1:]))
EDGE_FEATURE_DIM = int(_eoff[-1])  # 104

RBF_CENTERS = np.linspace(0.0, 20.0, 16)
RBF_SIGMA = RBF_CENTERS[1] - RBF_CENTERS[0]

# Kyte-Doolittle hydropathy, alphabetical order
HYDROPATHY = np.array([1.8, 2.5, -3.5, -3.5, 2.8, -0.4, -3.2, 4.5, -3.9, 3.8,
                       1.9, -3.5, -1.6, -3.5, -4.5, -0.8, -0.7, 4.2, -0.9, -1.3]) / 4.5


class GraphError(ValueError):
    pass


def rbf(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    return np.exp(-((d[..., None] - RBF_CENTERS) ** 2) / (2 * RBF_SIGMA ** 2))


def sinusoidal(x: np.ndarray, dim: int = 16) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    freqs = 1.0 / 10000.0 ** (np.arange(dim // 2) * 2.0 / dim)
    ang = x[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _unit(v: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), eps)


def local_frames(atoms: np.ndarray) -> np.ndarray:
    """Right-handed frames from (N, CA, C); columns e1 along CA->C, e2 in the N-CA-C plane."""
    e1 = _unit(atoms[:, 2] - atoms[:, 1])
    u2 = atoms[:, 0] - atoms[:, 1]
    e2 = _unit(u2 - np.sum(u2 * e1, axis=-1, keepdims=True) * e1)
    e3 = np.cross(e1, e2)
    return np.stack([e1, e2, e3], axis=-1)


def _dihedral(p0, p1, p2, p3):
    b0, b1, b2 = p0 - p1, p2 - p1, p3 - p2
    b1n = _unit(b1)
    v = b0 - np.sum(b0 * b1n, -1, keepdims=True) * b1n
    w = b2 - np.sum(b2 * b1n, -1, keepdims=True) * b1n
    x = np.sum(v * w, -1)
    y = np.sum(np.cross(b1n, v) * w, -1)
    return np.arctan2(y, x)


def _angle(p0, p1, p2):
    a, b = _unit(p0 - p1), _unit(p2 - p1)
    return np.arccos(np.clip(np.sum(a * b, -1), -1.0, 1.0))


def initial_cdr_atoms(heavy_atoms: np.ndarray, spans) -> np.ndarray:
    """Heavy-chain atoms with every CDR span re-initialised from its framework anchors.

    CA atoms are spaced evenly on the segment between the flanking anchor CAs;
    N, C and O sit at the mean anchor offset from CA.
    """
    atoms = np.array(heavy_atoms, dtype=np.float64, copy=True)
    n = len(atoms)
    cdr = np.zeros(n, dtype=bool)
    for s, e in spans:
        cdr[s:e] = True
    for s, e in sorted(spans):
        anchors = [i for i in (s - 1, e) if 0 <= i < n and not cdr[i]]
        if not anchors:
            fw = np.flatnonzero(~cdr)
            anchors = [int(fw[0])] if len(fw) else []
        if not anchors:
            atoms[s:e] = heavy_atoms.mean(axis=0)
            continue
        left = atoms[anchors[0], CA]
        right = atoms[anchors[-1], CA]
        offset = np.mean([atoms[a] - atoms[a, CA] for a in anchors], axis=0)
        frac = np.arange(1, e - s + 1) / (e - s + 1)
        ca = left + frac[:, None] * (right - left)
        atoms[s:e] = ca[:, None, :] + offset[None]
    return atoms


@dataclass
class HeteroGraph:
    complex_id: str
    node_kind: np.ndarray  # (N,)
    node_chain: np.ndarray  # (N,) 0 heavy, 1 light, 2 antigen, -1 otherwise
    node_resid: np.ndarray  # (N,) index within chain, -1 otherwise
    node_features: np.ndarray  # (N, 112); zero rows for global / virtual nodes
    node_coords: np.ndarray  # (N, 4, 3) model-view coordinates
    edge_index: np.ndarray  # (E, 2)
    edge_type: np.ndarray  # (E,)
    edge_features: np.ndarray  # (E, 104); types 8/9 rows are placeholders
    cdr_mask: np.ndarray
    epitope_mask: np.ndarray
    framework_hc_mask: np.ndarray
    antigen_mask: np.ndarray
    cdr_nodes: np.ndarray  # node ids of CDR positions, in CDR order
    cdr_segment: np.ndarray  # span ordinal per CDR position
    epitope_nodes: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.node_kind)

    def edges(self, t: int) -> set[tuple[int, int]]:
        return {tuple(p) for p in self.edge_index[self.edge_type == t].tolist()}

    def relabel(self, perm: np.ndarray) -> "HeteroGraph":
        """Graph with node ``perm[k]`` moved to position ``k``."""
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return HeteroGraph(
            self.complex_id, self.node_kind[perm], self.node_chain[perm], self.node_resid[perm],
            self.node_features[perm], self.node_coords[perm], inv[self.edge_index], self.edge_type,
            self.edge_features, self.cdr_mask[perm], self.epitope_mask[perm],
            self.framework_hc_mask[perm], self.antigen_mask[perm], inv[self.cdr_nodes],
            self.cdr_segment, inv[self.epitope_nodes])

    def transformed(self, rot: np.ndarray, trans: np.ndarray) -> "HeteroGraph":
        g = HeteroGraph(**self.__dict__)
        g.node_coords = self.node_coords @ rot.T + trans
        return g


def _residue_layout(cx: Complex):
    chains = [cx.heavy, cx.light, cx.antigen]
    kinds = np.concatenate([np.full(len(c), k) for k, c in enumerate(chains)]).astype(np.int64)
    resid = np.concatenate([np.arange(len(c)) for c in chains]).astype(np.int64)
    heavy_atoms = initial_cdr_atoms(cx.heavy.atoms, list(cx.cdr_spans.values()))
    atoms = np.concatenate([heavy_atoms, cx.light.atoms, cx.antigen.atoms]).reshape(-1, 4, 3)
    seq = cx.heavy.seq + cx.light.seq + cx.antigen.seq
    return kinds, resid, atoms, seq


def encode_node_features(cx: Complex, mode: str = "train") -> np.ndarray:
    """Per-residue raw features (heavy, light, antigen order), shape (n_res, 112)."""
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    kinds, resid, atoms, seq = _residue_layout(cx)
    n = len(kinds)
    nh = len(cx.heavy)
    is_cdr = np.zeros(n, dtype=bool)
    is_cdr[cx.cdr_indices] = True
    is_epi = np.zeros(n, dtype=bool)
    is_epi[nh + len(cx.light) + np.asarray(cx.epitope, dtype=int)] = True

    feats = np.zeros((n, NODE_FEATURE_DIM))
    feats[:, POS_SLICE] = sinusoidal(resid, POS_DIM)
    bonds = np.stack([
        np.linalg.norm(atoms[:, 0] - atoms[:, 1], axis=-1),
        np.linalg.norm(atoms[:, 1] - atoms[:, 2], axis=-1),
        np.linalg.norm(atoms[:, 2] - atoms[:, 3], axis=-1),
    ], axis=1)
    feats[:, BOND_SLICE] = rbf(bonds).reshape(n, -1)

    frames = local_frames(atoms)
    # neighbours within the same chain
    has_prev = np.zeros(n, dtype=bool)
    has_next = np.zeros(n, dtype=bool)
    has_prev[1:] = kinds[1:] == kinds[:-1]
    has_next[:-1] = kinds[:-1] == kinds[1:]
    prev = np.roll(atoms, 1, axis=0)
    nxt = np.roll(atoms, -1, axis=0)
    N_, A_, C_ = atoms[:, 0], atoms[:, 1], atoms[:, 2]
    angles = np.stack([
        _dihedral(prev[:, 2], N_, A_, C_),  # phi
        _dihedral(N_, A_, C_, nxt[:, 0]),  # psi
        _dihedral(A_, C_, nxt[:, 0], nxt[:, 1]),  # omega
        _angle(N_, A_, C_),
        _angle(A_, C_, nxt[:, 0]),
        _angle(prev[:, 2], N_, A_),
    ], axis=1)
    valid = np.stack([has_prev, has_next, has_next, np.ones(n, bool), has_next, has_prev], axis=1)
    sc = np.concatenate([np.sin(angles), np.cos(angles)], axis=1) * np.tile(valid, 2)
    feats[:, ANGLE_SLICE] = sc

    rot_t = np.transpose(frames, (0, 2, 1))
    d_prev = np.einsum("nij,nj->ni", rot_t, _unit(prev[:, 1] - A_)) * has_prev[:, None]
    d_next = np.einsum("nij,nj->ni", rot_t, _unit(nxt[:, 1] - A_)) * has_next[:, None]
    d_o = np.einsum("nij,nj->ni", rot_t, _unit(atoms[:, 3] - A_))
    feats[:, FRAME_SLICE] = np.concatenate([d_prev, d_next, d_o], axis=1)

    tokens = np.array(["ACDEFGHIKLMNPQRSTVWY".index(a) for a in seq], dtype=np.int64)
    onehot = np.eye(20)[tokens]
    onehot[is_cdr] = 0.0
    feats[:, AA_SLICE] = onehot

    ab = kinds != KIND_ANTIGEN
    ag = ~ab
    dmat = np.linalg.norm(A_[:, None] - A_[None], axis=-1)
    other = np.where(ab[:, None], ag[None, :], ab[None, :])
    min_other = np.where(other, dmat, np.inf).min(axis=1)
    min_other = np.where(np.isfinite(min_other), min_other, 20.0 * 5)
    hyd = HYDROPATHY[tokens] * (~is_cdr)
    feats[:, COMP_SLICE] = np.stack([min_other / 20.0, is_epi, is_cdr, hyd], axis=1)
    feats[:, SEG_SLICE] = np.eye(3)[kinds]
    return feats


def _knn(dmat: np.ndarray, allowed: np.ndarray, k: int):
    pairs = []
    for i in range(len(dmat)):
        cand = np.flatnonzero(allowed[i])
        if len(cand) == 0:
            continue
        # quantize so exact geometric ties (common in template backbones) break by index, not by rounding noise
        order = cand[np.argsort(np.round(dmat[i, cand], 6), kind="stable")[:k]]
        pairs.extend((i, int(j)) for j in order)
    return pairs


def _pairs(mask: np.ndarray):
    i, j = np.nonzero(mask)
    return list(zip(i.tolist(), j.tolist()))


def build_graph(cx: Complex, mode: str = "train", knn_k: int = 8,
                radial_intra: float = 8.0, radial_inter: float = 12.0) -> HeteroGraph:
    if len(cx.antigen) < 2:
        raise GraphError(f"complex {cx.id!r}: need at least 2 antigen residues")
    if knn_k < 1:
        raise GraphError("knn_k must be >= 1")
    kinds, resid, atoms, _ = _residue_layout(cx)
    feats = encode_node_features(cx, mode)
    n_res = len(kinds)
    nh, nl = len(cx.heavy), len(cx.light)

    cdr_nodes = cx.cdr_indices.copy()
    epi_nodes = nh + nl + np.asarray(cx.epitope, dtype=np.int64)

    # global and virtual node coordinates: per-atom centroids
    def centroid(idx):
        return atoms[idx].mean(axis=0) if len(idx) else atoms.mean(axis=0)

    seg_nodes = [np.flatnonzero(kinds == k) for k in range(3)]
    glob_coords = np.stack([centroid(s) for s in seg_nodes])
    virt_coords = np.stack([centroid(epi_nodes), centroid(cdr_nodes), atoms.mean(axis=0)])
    coords = np.concatenate([atoms, glob_coords, virt_coords])
    n = n_res + N_GLOBAL + N_VIRTUAL
    g0 = n_res
    v0 = n_res + N_GLOBAL

    node_kind = np.concatenate([kinds, np.full(N_GLOBAL, KIND_GLOBAL), np.full(N_VIRTUAL, KIND_VIRTUAL)])
    node_chain = np.concatenate([kinds, np.arange(3), np.full(N_VIRTUAL, -1)])
    node_resid = np.concatenate([resid, np.full(N_GLOBAL + N_VIRTUAL, -1)])
    node_features = np.zeros((n, NODE_FEATURE_DIM))
    node_features[:n_res] = feats

    ca = atoms[:, CA]
    dmat = np.linalg.norm(ca[:, None] - ca[None], axis=-1)
    eye = np.eye(n_res, dtype=bool)
    same = (kinds[:, None] == kinds[None, :]) & ~eye
    diff = kinds[:, None] != kinds[None, :]
    antibody = np.isin(kinds, ANTIBODY_KINDS)
    seqdist = np.abs(resid[:, None] - resid[None, :])
    ab_same = same & antibody[:, None]

    typed: list[list[tuple[int, int]]] = [[] for _ in range(N_EDGE_TYPES)]
    typed[0] = _pairs(same & (dmat < radial_intra))
    typed[3] = _pairs(ab_same & (seqdist == 1))
    typed[4] = _knn(dmat, same, knn_k)
    typed[5] = _pairs(ab_same & (seqdist == 2))
    typed[6] = _pairs(diff & (dmat < radial_inter))
    typed[7] = _knn(dmat, diff, knn_k)
    for k in range(3):
        for r in seg_nodes[k].tolist():
            typed[1] += [(g0 + k, r), (r, g0 + k)]
    typed[2] = [(g0 + a, g0 + b) for a in range(3) for b in range(3) if a != b]
    for v in range(N_VIRTUAL):
        for r in epi_nodes.tolist():
            typed[8] += [(v0 + v, r), (r, v0 + v)]
        for r in cdr_nodes.tolist():
            typed[9] += [(v0 + v, r), (r, v0 + v)]

    edge_index = np.array([p for t in range(N_EDGE_TYPES) for p in sorted(typed[t])],
                          dtype=np.int64).reshape(-1, 2)
    edge_type = np.concatenate([np.full(len(typed[t]), t) for t in range(N_EDGE_TYPES)]).astype(np.int64)

    framework = np.zeros(n, dtype=bool)
    framework[cx.framework] = True
    cdr_mask = np.zeros(n, dtype=bool)
    cdr_mask[cdr_nodes] = True
    epi_mask = np.zeros(n, dtype=bool)
    epi_mask[epi_nodes] = True

    graph = HeteroGraph(
        complex_id=cx.id, node_kind=node_kind, node_chain=node_chain, node_resid=node_resid,
        node_features=node_features, node_coords=coords, edge_index=edge_index, edge_type=edge_type,
        edge_features=np.zeros((len(edge_type), EDGE_FEATURE_DIM)), cdr_mask=cdr_mask,
        epitope_mask=epi_mask, framework_hc_mask=framework, antigen_mask=node_kind == KIND_ANTIGEN,
        cdr_nodes=cdr_nodes, cdr_segment=cx.span_ids(), epitope_nodes=epi_nodes)
    graph.edge_features = encode_edge_features(graph)
    return graph


def canonical_quaternion(q: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Fix the q / -q ambiguity: the first component with |q_a| > tol is made positive."""
    big = np.abs(q) > tol
    first = np.argmax(big, axis=1)
    lead = q[np.arange(len(q)), first]
    return q * np.where(lead < 0, -1.0, 1.0)[:, None]


def encode_edge_features(graph: HeteroGraph) -> np.ndarray:
    """104-wide edge features: [type 8 | rel. position 16 | pair RBF 64 | quaternion 4 | directions 12]."""
    src_i, src_j = graph.edge_index[:, 0], graph.edge_index[:, 1]
    t = graph.edge_type
    E = len(t)
    out = np.zeros((E, EDGE_FEATURE_DIM))
    if E == 0:
        return out
    standard = t < EDGE_TYPE_DIM
    out[np.flatnonzero(standard), t[standard]] = 1.0

    positional = np.isin(t, POSITIONAL_TYPES)
    offset = graph.node_resid[src_j] - graph.node_resid[src_i]
    out[:, RELPOS_SLICE] = sinusoidal(offset, RELPOS_DIM) * positional[:, None]

    X = graph.node_coords
    xi, xj = X[src_i], X[src_j]
    d = np.linalg.norm(xi - xj[:, CA:CA + 1], axis=-1)  # (E, 4): atom a of i to CA of j
    out[:, PAIR_RBF_SLICE] = rbf(d).reshape(E, -1) * standard[:, None]

    residue = graph.node_kind < KIND_GLOBAL
    rr = residue[src_i] & residue[src_j]
    if np.any(rr):
        frames = local_frames(X.reshape(-1, 4, 3))
        Ri, Rj = frames[src_i[rr]], frames[src_j[rr]]
        rel = np.einsum("eji,ejk->eik", Ri, Rj)  # R_i^T R_j
        q = Rotation.from_matrix(rel).as_quat()  # x, y, z, w
        q = np.concatenate([q[:, 3:], q[:, :3]], axis=1)
        q = canonical_quaternion(q)
        out[np.flatnonzero(rr), QUAT_SLICE] = q
        dirs = _unit(xj[rr][:, CA:CA + 1] - xi[rr])  # (e, 4, 3)
        local = np.einsum("eji,eaj->eai", Ri, dirs)
        out[np.flatnonzero(rr), EDGE_DIR_SLICE] = local.reshape(-1, 12)
    return out


def framework_dropout(x, framework_mask, p: float, rng=None):
    """Zero each framework row of ``x`` independently with probability ``p``.

    Works on numpy arrays (``rng``: numpy Generator) and torch tensors
    (``rng``: torch.Generator or None).
    """
    if not 0.0 <= p < 1.0:
        raise ValueError("p must lie in [0, 1)")
    if p == 0.0:
        return x
    if isinstance(x, np.ndarray):
        rng = rng if rng is not None else np.random.default_rng()
        drop = (rng.random(len(x)) < p) & np.asarray(framework_mask, dtype=bool)
        return np.where(drop[:, None], 0.0, x)
    import torch
    u = torch.rand(x.shape[0], generator=rng, dtype=torch.float64)
    drop = (u < p) & framework_mask.to(torch.bool)
    return x.masked_fill(drop[:, None], 0.0)
