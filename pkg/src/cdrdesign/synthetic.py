"""Seed-deterministic toy antibody-antigen complexes with a tunable antigen -> CDR signal.

Geometry: the heavy chain is a fixed two-strand framework template whose strands
end in two anchor residues; the CDR-H3 loop is a circular arc between the
anchors bulging towards the antigen, an idealised alpha helix placed above the
loop apex.  Each antigen class has its own epitope alphabet and its own preferred
set of five CDR amino acids.  Each CDR position follows the class profile with
probability ``dependence`` and a glycine/tyrosine-heavy background otherwise.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .complex_model import ALPHABET, Chain, Complex, save_complexes

# Class c prefers CDR_PROFILE_POOL[5c:5c+5]; G and Y are kept for the background.
CDR_PROFILE_POOL = "ACDEFHIKLMNPQRSTVWGY"
EPITOPE_ALPHABETS = ("DEKR", "FWYL", "STNQ", "AGPV")
MAX_CLASSES = 4

BACKGROUND = {
    "G": 0.16, "Y": 0.15, "S": 0.09, "A": 0.07, "D": 0.07, "R": 0.05, "T": 0.05,
    "V": 0.04, "F": 0.04, "W": 0.04, "L": 0.04, "N": 0.03, "E": 0.03, "I": 0.03,
    "P": 0.03, "K": 0.02, "Q": 0.02, "H": 0.02, "M": 0.01, "C": 0.01,
}
BACKGROUND_PROBS = np.array([BACKGROUND[a] for a in ALPHABET])

FRAMEWORK_LEFT = "QVQLVESGGGLVQPGGSLRLSCAAS"
FRAMEWORK_RIGHT = "WGQGTLVTVSSASTKGPSVFPLAPS"
LIGHT_TEMPLATE = "DIQMTQSPSSLSASVGDRVTITC"

CA_SPACING = 3.8
N_CA, CA_C, C_O = 1.46, 1.52, 1.23
HELIX_RADIUS, HELIX_RISE, HELIX_TWIST = 2.3, 1.5, np.deg2rad(100.0)


@dataclass(frozen=True)
class GenConfig:
    n_complexes: int = 16
    cdr_length: tuple[int, int] = (6, 12)  # inclusive
    antigen_length: tuple[int, int] = (16, 24)  # inclusive
    n_antigen_classes: int = 2
    dependence: float = 0.9
    noise: float = 0.3
    seed: int = 0
    framework_length: int = 6  # per side of the loop
    epitope_size: int = 8
    anchor_gap: float = 5.5
    antigen_clearance: float = 6.0  # helix axis height above the loop apex
    light_length: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.dependence <= 1.0:
            raise ValueError("dependence must lie in [0, 1]")
        if min(self.cdr_length) < 3 or min(self.antigen_length) < 3:
            raise ValueError("CDR and antigen lengths must be >= 3")
        if self.cdr_length[0] > self.cdr_length[1] or self.antigen_length[0] > self.antigen_length[1]:
            raise ValueError("length ranges must be (min, max)")
        if not 1 <= self.n_antigen_classes <= MAX_CLASSES:
            raise ValueError(f"n_antigen_classes must be in [1, {MAX_CLASSES}]")
        if self.framework_length < 2:
            raise ValueError("framework_length must be >= 2")
        if not 1 <= self.epitope_size <= self.antigen_length[0]:
            raise ValueError("epitope_size must be in [1, min antigen length]")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")


def class_profile(c: int) -> str:
    return CDR_PROFILE_POOL[5 * c: 5 * c + 5]


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def backbone_from_trace(ca: np.ndarray) -> np.ndarray:
    """Place N, C, O around a CA trace with ideal bond lengths."""
    n = len(ca)
    prev = np.empty_like(ca)
    nxt = np.empty_like(ca)
    prev[1:], nxt[:-1] = ca[:-1], ca[1:]
    if n == 1:
        prev[0], nxt[0] = ca[0] - [1.0, 0, 0], ca[0] + [1.0, 0, 0]
    else:
        prev[0] = 2 * ca[0] - ca[1]
        nxt[-1] = 2 * ca[-1] - ca[-2]
    t = _unit(nxt - prev)
    w = 0.5 * (prev + nxt) - ca
    w = w - np.sum(w * t, axis=-1, keepdims=True) * t
    small = np.linalg.norm(w, axis=-1) < 1e-6
    if np.any(small):
        ref = np.where(np.abs(t[small, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
        w[small] = ref - np.sum(ref * t[small], axis=-1, keepdims=True) * t[small]
    nrm = _unit(w)
    b = np.cross(t, nrm)
    atoms = np.empty((n, 4, 3))
    atoms[:, 1] = ca
    atoms[:, 0] = ca + N_CA * _unit(-0.8 * t - 0.5 * nrm + 0.3 * b)
    atoms[:, 2] = ca + CA_C * _unit(0.8 * t - 0.5 * nrm - 0.3 * b)
    atoms[:, 3] = atoms[:, 2] + C_O * _unit(0.3 * t - 0.2 * nrm + 0.93 * b)
    return atoms


def _strand(n: int, x: float, start_y: float, step: float, z0: float = 0.0) -> np.ndarray:
    k = np.arange(n)
    return np.stack([np.full(n, x), start_y + step * k, z0 + 0.9 * (-1.0) ** k], axis=1)


def loop_arc(left: np.ndarray, right: np.ndarray, n_loop: int, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """CA positions of an n_loop residue arc from ``left`` to ``right`` (anchors excluded)."""
    chord_vec = right - left
    chord = np.linalg.norm(chord_vec)
    arc = CA_SPACING * (n_loop + 1)
    if arc <= chord + 1e-9:
        raise ValueError(f"infeasible loop: {n_loop} residues cannot span an anchor gap of {chord:.2f} A")
    ratio = arc / chord
    theta = brentq(lambda th: th / (2.0 * np.sin(th / 2.0)) - ratio, 1e-9, 2 * np.pi - 1e-9)
    radius = arc / theta
    u = chord_vec / chord
    up = np.asarray(up, dtype=float)
    nvec = _unit(up - np.dot(up, u) * u)
    centre = 0.5 * (left + right) - nvec * radius * np.cos(theta / 2.0)
    start = np.arctan2(radius * np.cos(theta / 2.0), -chord / 2.0)
    k = np.arange(1, n_loop + 1)
    ang = start - theta * k / (n_loop + 1)
    pts = centre + radius * (np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * nvec)
    pts[:, 2] += 0.7 * (-1.0) ** k
    return pts


def _one_complex(index: int, cfg: GenConfig, seed_seq: np.random.SeedSequence):
    rng = np.random.default_rng(seed_seq)
    nf = cfg.framework_length
    cls = int(rng.integers(cfg.n_antigen_classes))
    n_loop = int(rng.integers(cfg.cdr_length[0], cfg.cdr_length[1] + 1))
    n_ag = int(rng.integers(cfg.antigen_length[0], cfg.antigen_length[1] + 1))

    # heavy chain: strand up to the left anchor, loop, strand down from the right anchor
    left = _strand(nf, -cfg.anchor_gap / 2, -3.3 * nf, 3.3)
    right = _strand(nf, cfg.anchor_gap / 2, -3.3, -3.3)
    loop_ca = loop_arc(left[-1], right[0], n_loop)
    heavy_ca = np.concatenate([left, loop_ca, right])
    heavy_atoms = backbone_from_trace(heavy_ca)
    loop = slice(nf, nf + n_loop)
    heavy_atoms[loop] += rng.normal(0.0, cfg.noise, size=heavy_atoms[loop].shape)

    profile = np.array([ALPHABET.index(a) for a in class_profile(cls)])
    follow = rng.random(n_loop) < cfg.dependence
    from_profile = profile[rng.integers(5, size=n_loop)]
    from_background = rng.choice(20, size=n_loop, p=BACKGROUND_PROBS)
    cdr = "".join(ALPHABET[i] for i in np.where(follow, from_profile, from_background))
    heavy_seq = FRAMEWORK_LEFT[-nf:] + cdr + FRAMEWORK_RIGHT[:nf]

    # antigen: helix along x above the loop apex
    apex_y = loop_ca[:, 1].max()
    k = np.arange(n_ag)
    phase = rng.uniform(0, 2 * np.pi)
    shift = rng.uniform(-2.0, 2.0)
    ang = phase + HELIX_TWIST * k
    ag_ca = np.stack([
        shift + HELIX_RISE * (k - (n_ag - 1) / 2.0),
        apex_y + cfg.antigen_clearance + HELIX_RADIUS * np.cos(ang),
        HELIX_RADIUS * np.sin(ang),
    ], axis=1)
    ag_atoms = backbone_from_trace(ag_ca) + rng.normal(0.0, cfg.noise, size=(n_ag, 4, 3))
    anchor_mid = 0.5 * (heavy_atoms[nf - 1, 1] + heavy_atoms[nf + n_loop, 1])
    dist = np.linalg.norm(ag_atoms[:, 1] - anchor_mid, axis=1)
    epitope = tuple(sorted(np.argsort(dist, kind="stable")[: cfg.epitope_size].tolist()))
    ep_alpha = EPITOPE_ALPHABETS[cls]
    ag_seq = [ALPHABET[i] for i in rng.integers(20, size=n_ag)]
    for j in epitope:
        ag_seq[j] = ep_alpha[int(rng.integers(len(ep_alpha)))]

    if cfg.light_length > 0:
        n_l = cfg.light_length
        light_ca = _strand(n_l, 0.0, -4.0, -3.3, z0=-9.0)
        light = Chain((LIGHT_TEMPLATE * (n_l // len(LIGHT_TEMPLATE) + 1))[:n_l], backbone_from_trace(light_ca))
    else:
        light = Chain.empty()

    cx = Complex(
        id=f"syn{index:05d}",
        heavy=Chain(heavy_seq, heavy_atoms),
        light=light,
        antigen=Chain("".join(ag_seq), ag_atoms),
        epitope=epitope,
        cdr_spans={"H3": (nf, nf + n_loop)},
    )
    return cx, cls


def generate(cfg: GenConfig, workers: int = 1) -> tuple[list[Complex], dict[str, int]]:
    """Generate ``cfg.n_complexes`` complexes and their antigen class labels."""
    cfg.validate()
    # fail fast on infeasible geometry for the shortest loop
    loop_arc(np.array([-cfg.anchor_gap / 2, -3.3, 0.9]), np.array([cfg.anchor_gap / 2, -3.3, 0.9]),
             cfg.cdr_length[0])
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_complexes)
    args = [(i, cfg, s) for i, s in enumerate(seeds)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_one_complex_star, args))
    else:
        results = [_one_complex(*a) for a in args]
    complexes = [r[0] for r in results]
    labels = {r[0].id: r[1] for r in results}
    return complexes, labels


def _one_complex_star(a):
    return _one_complex(*a)


def labels_path_for(jsonl_path) -> Path:
    p = Path(jsonl_path)
    return p.with_name(p.stem + ".labels.csv")


def write_dataset(path, complexes, labels) -> Path:
    save_complexes(path, complexes)
    lp = labels_path_for(path)
    with open(lp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "class"])
        for c in complexes:
            w.writerow([c.id, labels[c.id]])
    return lp


def read_labels(path) -> dict[str, int]:
    with open(path, newline="") as fh:
        return {row["id"]: int(row["class"]) for row in csv.DictReader(fh)}
