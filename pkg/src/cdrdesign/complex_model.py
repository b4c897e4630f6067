"""Antibody-antigen complexes, contact sets and the JSON Lines interchange format.

Amino acids are indexed 1..20 in alphabetical order of their one-letter codes
(``ALPHABET``).  Model-side tensors use the 0-based token ``aa - 1``.
Backbone atoms are stored per residue as a 4x3 block in the order N, CA, C, O.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

ALPHABET = "ACDEFGHIKLMNPQRSTVWY"
AA_TO_INDEX = {a: i + 1 for i, a in enumerate(ALPHABET)}
BACKBONE_ATOMS = ("N", "CA", "C", "O")
CA = 1
DEFAULT_CONTACT_CUTOFF = 8.0
CDR_NAMES = ("H1", "H2", "H3")


class ComplexError(ValueError):
    """Raised when a complex violates one of its invariants or fails to parse."""


def aa_index(letter: str) -> int:
    """1-based amino-acid index of a one-letter code."""
    try:
        return AA_TO_INDEX[letter]
    except KeyError:
        raise ComplexError(f"unknown amino acid code {letter!r}") from None


def encode_sequence(seq: str) -> np.ndarray:
    """0-based token array for a one-letter sequence."""
    return np.array([aa_index(a) - 1 for a in seq], dtype=np.int64)


def decode_tokens(tokens: Iterable[int]) -> str:
    return "".join(ALPHABET[int(t)] for t in tokens)


class Residue(NamedTuple):
    aa: int  # 1..20
    atoms: np.ndarray  # (4, 3), N CA C O


@dataclass(frozen=True)
class Chain:
    seq: str
    atoms: np.ndarray  # (n, 4, 3) float64

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=np.float64).reshape(-1, 4, 3)
        object.__setattr__(self, "atoms", atoms)

    def __len__(self) -> int:
        return len(self.seq)

    def __getitem__(self, i: int) -> Residue:
        return Residue(aa_index(self.seq[i]), self.atoms[i])

    @property
    def ca(self) -> np.ndarray:
        return self.atoms[:, CA]

    @classmethod
    def empty(cls) -> "Chain":
        return cls("", np.zeros((0, 4, 3)))


@dataclass(frozen=True)
class Complex:
    id: str
    heavy: Chain
    light: Chain
    antigen: Chain
    epitope: tuple[int, ...]
    cdr_spans: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "epitope", tuple(int(i) for i in self.epitope))
        spans = {k: (int(v[0]), int(v[1])) for k, v in self.cdr_spans.items()}
        object.__setattr__(self, "cdr_spans", spans)
        self.validate()

    def validate(self) -> None:
        def fail(fieldname, msg):
            raise ComplexError(f"complex {self.id!r}: invalid {fieldname}: {msg}")

        for name in ("heavy", "light", "antigen"):
            chain = getattr(self, name)
            if chain.atoms.shape != (len(chain.seq), 4, 3):
                fail(name, f"atoms shape {chain.atoms.shape} does not match sequence length {len(chain.seq)}")
            if not np.all(np.isfinite(chain.atoms)):
                fail(name, "non-finite coordinates")
            bad = set(chain.seq) - set(ALPHABET)
            if bad:
                fail(name, f"unknown amino acid codes {sorted(bad)}")
        if len(self.heavy) == 0:
            fail("heavy", "empty heavy chain")
        n_ag = len(self.antigen)
        for i in self.epitope:
            if not 0 <= i < n_ag:
                fail("epitope", f"index {i} outside antigen of length {n_ag}")
        if len(set(self.epitope)) != len(self.epitope):
            fail("epitope", "duplicate indices")
        if not self.cdr_spans:
            fail("cdr_spans", "no CDR spans given")
        covered = np.zeros(len(self.heavy), dtype=int)
        for name, (start, end) in self.cdr_spans.items():
            if not 0 <= start < end <= len(self.heavy):
                fail("cdr_spans", f"{name} span [{start}, {end}) empty or out of bounds")
            covered[start:end] += 1
        if np.any(covered > 1):
            fail("cdr_spans", "overlapping spans")

    @property
    def cdr_indices(self) -> np.ndarray:
        """Heavy-chain indices of all CDR positions, spans in start order."""
        spans = sorted(self.cdr_spans.values())
        return np.concatenate([np.arange(s, e) for s, e in spans]).astype(np.int64)

    @property
    def framework(self) -> np.ndarray:
        mask = np.ones(len(self.heavy), dtype=bool)
        mask[self.cdr_indices] = False
        return np.flatnonzero(mask)

    @property
    def cdr_seq(self) -> str:
        return "".join(self.heavy.seq[i] for i in self.cdr_indices)

    def span_ids(self) -> np.ndarray:
        """Per CDR position, the ordinal of the span it belongs to."""
        spans = sorted(self.cdr_spans.values())
        return np.concatenate([np.full(e - s, k) for k, (s, e) in enumerate(spans)]).astype(np.int64)

    def with_heavy(self, seq: str | None = None, atoms: np.ndarray | None = None) -> "Complex":
        heavy = Chain(seq if seq is not None else self.heavy.seq,
                      atoms if atoms is not None else self.heavy.atoms)
        return Complex(self.id, heavy, self.light, self.antigen, self.epitope, self.cdr_spans)

    def transformed(self, rot: np.ndarray, trans: np.ndarray) -> "Complex":
        """Apply x -> R x + t to every coordinate."""
        def move(chain):
            return Chain(chain.seq, chain.atoms @ rot.T + trans)
        return Complex(self.id, move(self.heavy), move(self.light), move(self.antigen),
                       self.epitope, self.cdr_spans)


@dataclass(frozen=True)
class ContactSet:
    pairs: frozenset  # of (cdr_index, antigen_index)
    cutoff: float

    def __len__(self) -> int:
        return len(self.pairs)

    def antigen_residues(self) -> set[int]:
        return {j for _, j in self.pairs}

    def cdr_residues(self) -> set[int]:
        return {k for k, _ in self.pairs}


def contacts(cdr_coords, antigen_coords, cutoff: float = DEFAULT_CONTACT_CUTOFF) -> ContactSet:
    """All (k, j) with ||x_k - x_j|| < cutoff."""
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    a = np.asarray(cdr_coords, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(antigen_coords, dtype=np.float64).reshape(-1, 3)
    if a.size == 0 or b.size == 0:
        return ContactSet(frozenset(), cutoff)
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    ks, js = np.nonzero(d < cutoff)
    return ContactSet(frozenset(zip(ks.tolist(), js.tolist())), cutoff)


# ---------------------------------------------------------------------------
# JSON Lines


def _chain_to_json(chain: Chain):
    if len(chain) == 0:
        return None
    return {"seq": chain.seq, "atoms": chain.atoms.tolist()}


def _chain_from_json(obj) -> Chain:
    if obj is None:
        return Chain.empty()
    return Chain(obj["seq"], np.array(obj["atoms"], dtype=np.float64).reshape(-1, 4, 3))


def complex_to_json(c: Complex) -> str:
    obj = {
        "id": c.id,
        "heavy": _chain_to_json(c.heavy),
        "light": _chain_to_json(c.light),
        "antigen": _chain_to_json(c.antigen),
        "epitope": list(c.epitope),
        "cdr_spans": {k: list(v) for k, v in sorted(c.cdr_spans.items())},
    }
    return json.dumps(obj)


def complex_from_json(line: str) -> Complex:
    obj = json.loads(line)
    missing = {"id", "heavy", "antigen", "epitope", "cdr_spans"} - set(obj)
    if missing:
        raise ComplexError(f"complex {obj.get('id')!r}: missing fields {sorted(missing)}")
    if obj["heavy"] is None or obj["antigen"] is None:
        raise ComplexError(f"complex {obj['id']!r}: heavy and antigen chains are required")
    try:
        return Complex(
            id=str(obj["id"]),
            heavy=_chain_from_json(obj["heavy"]),
            light=_chain_from_json(obj.get("light")),
            antigen=_chain_from_json(obj["antigen"]),
            epitope=tuple(obj["epitope"]),
            cdr_spans={k: tuple(v) for k, v in obj["cdr_spans"].items()},
        )
    except ComplexError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ComplexError(f"complex {obj.get('id')!r}: malformed record ({e})") from e


def load_complexes(path) -> list[Complex]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(complex_from_json(line))
            except json.JSONDecodeError as e:
                raise ComplexError(f"{path}:{lineno}: parse error: {e.msg}") from e
    return out


def save_complexes(path, complexes: Iterable[Complex]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for c in complexes:
            fh.write(complex_to_json(c) + "\n")
