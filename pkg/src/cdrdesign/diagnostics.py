"""Sequence, structure and interface metrics, conditioning diagnostics and the positional-marginal oracle."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .complex_model import ALPHABET, DEFAULT_CONTACT_CUTOFF, Complex, contacts, encode_sequence

N_BINS = 10
PROB_FLOOR = 1e-12
GY = (ALPHABET.index("G"), ALPHABET.index("Y"))


# ---------------------------------------------------------------------------
# sequence recovery


def aar(pred: str, true: str) -> float:
    if len(pred) != len(true):
        raise ValueError(f"length mismatch: {len(pred)} vs {len(true)}")
    if not true:
        raise ValueError("empty sequence")
    return sum(a == b for a, b in zip(pred, true)) / len(true)


def caar(pred: str, true: str, contact_positions) -> float | None:
    """Recovery restricted to contact positions; None when there are none."""
    if len(pred) != len(true):
        raise ValueError(f"length mismatch: {len(pred)} vs {len(true)}")
    pos = sorted(set(contact_positions))
    if not pos:
        return None
    return sum(pred[k] == true[k] for k in pos) / len(pos)


def perplexity(dists, trues) -> float:
    """exp of the mean negative log-likelihood over every position of every sequence."""
    nll, n = 0.0, 0
    for p, s in zip(dists, trues):
        p = np.asarray(p, dtype=np.float64)
        idx = encode_sequence(s)
        if p.shape != (len(idx), 20):
            raise ValueError(f"distribution shape {p.shape} does not match sequence length {len(idx)}")
        nll -= np.log(np.maximum(p[np.arange(len(idx)), idx], PROB_FLOOR)).sum()
        n += len(idx)
    if n == 0:
        raise ValueError("no positions")
    return float(math.exp(nll / n))


# ---------------------------------------------------------------------------
# interface


@dataclass
class InterfaceMetrics:
    rmsd: float
    fnat: float
    irmsd: float | None
    dockq: float
    epif1: float
    n_native_contacts: int


def dockq_score(fnat: float, irmsd: float, rmsd: float) -> float:
    return (fnat + 1.0 / (1.0 + (irmsd / 1.5) ** 2) + 1.0 / (1.0 + (rmsd / 8.5) ** 2)) / 3.0


def f1(pred: set, true: set) -> float:
    if not pred and not true:
        return 1.0
    tp = len(pred & true)
    if tp == 0:
        return 0.0
    prec, rec = tp / len(pred), tp / len(true)
    return 2 * prec * rec / (prec + rec)


def interface_metrics(pred_cdr_ca, true_cdr_ca, antigen_ca, cutoff: float = DEFAULT_CONTACT_CUTOFF) -> InterfaceMetrics:
    """Metrics in the shared antigen/framework frame, without superposition.

    fnat is 1 when there are no native contacts; iRMSD is then None and DockQ
    uses the CDR RMSD in its place.
    """
    pred = np.asarray(pred_cdr_ca, dtype=np.float64)
    true = np.asarray(true_cdr_ca, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    sq = ((pred - true) ** 2).sum(-1)
    rmsd = float(np.sqrt(sq.mean()))
    native = contacts(true, antigen_ca, cutoff)
    model = contacts(pred, antigen_ca, cutoff)
    if len(native):
        fnat = len(native.pairs & model.pairs) / len(native)
        iface = sorted(native.cdr_residues())
        irmsd = float(np.sqrt(sq[iface].mean()))
    else:
        fnat, irmsd = 1.0, None
    dq = dockq_score(fnat, irmsd if irmsd is not None else rmsd, rmsd)
    return InterfaceMetrics(rmsd, fnat, irmsd, dq, f1(model.antigen_residues(), native.antigen_residues()), len(native))


# ---------------------------------------------------------------------------
# conditioning diagnostics


def aa_frequencies(seqs) -> np.ndarray:
    counts = np.zeros(20)
    for s in seqs:
        counts += np.bincount(encode_sequence(s), minlength=20)
    if counts.sum() == 0:
        raise ValueError("no residues")
    return counts / counts.sum()


def entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=axis)


def effective_vocabulary(seqs) -> float:
    return float(np.exp(entropy(aa_frequencies(seqs))))


def position_bins(length: int, n_bins: int = N_BINS) -> np.ndarray:
    """Fractional-position bin of each index: floor(i / (L - 1) * n_bins), capped at n_bins - 1."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if length == 1:
        return np.zeros(1, dtype=np.int64)
    frac = np.arange(length) / (length - 1)
    return np.minimum((frac * n_bins).astype(np.int64), n_bins - 1)


def positional_counts(seqs, n_bins: int = N_BINS) -> np.ndarray:
    counts = np.zeros((n_bins, 20))
    for s in seqs:
        np.add.at(counts, (position_bins(len(s), n_bins), encode_sequence(s)), 1.0)
    return counts


def positional_frequencies(seqs, n_bins: int = N_BINS) -> np.ndarray:
    """Row-normalized bin x amino-acid frequency table; empty bins fall back to the pooled frequency."""
    counts = positional_counts(seqs, n_bins)
    pooled = counts.sum(0) / counts.sum()
    tot = counts.sum(1, keepdims=True)
    return np.where(tot > 0, counts / np.maximum(tot, 1.0), pooled)


def entropy_ratio(pred_seqs, true_seqs, n_bins: int = N_BINS) -> float:
    h_pred = entropy(positional_frequencies(pred_seqs, n_bins)).mean()
    h_true = entropy(positional_frequencies(true_seqs, n_bins)).mean()
    return float(h_pred / h_true) if h_true > 0 else math.nan


def gy_ratio(pred_seqs, true_seqs) -> float:
    fp, ft = aa_frequencies(pred_seqs), aa_frequencies(true_seqs)
    denom = ft[list(GY)].sum()
    return float(fp[list(GY)].sum() / denom) if denom > 0 else math.nan


def unique_fraction(seqs) -> float:
    seqs = list(seqs)
    if not seqs:
        raise ValueError("empty sequence set")
    return len(set(seqs)) / len(seqs)


def kmers(seq: str, k: int):
    return [seq[i:i + k] for i in range(len(seq) - k + 1)]


@dataclass
class MotifStats:
    unique_bigrams: int
    unique_trigrams: int
    top20_trigram_coverage: float


def motif_stats(pred_seqs, true_seqs, top: int = 20) -> MotifStats:
    bi = {m for s in pred_seqs for m in kmers(s, 2)}
    tri = {m for s in pred_seqs for m in kmers(s, 3)}
    true_tri = Counter(m for s in true_seqs for m in kmers(s, 3))
    # ties broken alphabetically so the top list is deterministic
    ranked = sorted(true_tri.items(), key=lambda kv: (-kv[1], kv[0]))[:top]
    coverage = sum(m in tri for m, _ in ranked) / top if ranked else math.nan
    return MotifStats(len(bi), len(tri), coverage)


def enrichment(seqs, contact_masks) -> np.ndarray:
    """Per amino acid: frequency at contact positions / frequency overall (NaN where undefined)."""
    all_counts, contact_counts = np.zeros(20), np.zeros(20)
    for s, mask in zip(seqs, contact_masks):
        idx = encode_sequence(s)
        mask = np.asarray(mask, dtype=bool)
        all_counts += np.bincount(idx, minlength=20)
        contact_counts += np.bincount(idx[mask], minlength=20)
    if all_counts.sum() == 0 or contact_counts.sum() == 0:
        return np.full(20, np.nan)
    f_all = all_counts / all_counts.sum()
    f_con = contact_counts / contact_counts.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(f_all > 0, f_con / f_all, np.nan)


def spearman(x, y) -> float | None:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    ok = np.isfinite(x) & np.isfinite(y)
    if ok.sum() < 3 or np.ptp(x[ok]) == 0 or np.ptp(y[ok]) == 0:
        return None
    return float(stats.spearmanr(x[ok], y[ok]).statistic)


def enrichment_correlation(pred_seqs, true_seqs, contact_masks) -> float | None:
    """Spearman r between predicted and native interface enrichment; contact positions come from the native structure."""
    return spearman(enrichment(pred_seqs, contact_masks), enrichment(true_seqs, contact_masks))


def substitution_matrix(pred_seqs, true_seqs) -> np.ndarray:
    """S[a, b] = number of positions with native a and predicted b."""
    S = np.zeros((20, 20))
    for p, t in zip(pred_seqs, true_seqs):
        if len(p) != len(t):
            raise ValueError("length mismatch")
        np.add.at(S, (encode_sequence(t), encode_sequence(p)), 1.0)
    return S


def pwm_correlation(pred_seqs, true_seqs, n_bins: int = N_BINS) -> float | None:
    """Pearson r between the substitution counts and those expected from positional frequencies alone.

    Expected[a, b] = sum over positions i of pbar_i(a) pbar_i(b), with pbar the
    native positional frequency table: the pattern of a predictor that draws
    from the table regardless of context.
    """
    S = substitution_matrix(pred_seqs, true_seqs)
    table = positional_frequencies(true_seqs, n_bins)
    E = np.zeros((20, 20))
    for t in true_seqs:
        rows = table[position_bins(len(t), n_bins)]
        E += rows.T @ rows
    x, y = S.ravel(), E.ravel()
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(stats.pearsonr(x, y).statistic)


# ---------------------------------------------------------------------------
# positional-marginal oracle


@dataclass
class MarginalOracle:
    table: np.ndarray  # (n_bins, 20) empirical frequencies
    n_bins: int = N_BINS

    @classmethod
    def fit(cls, seqs, n_bins: int = N_BINS) -> "MarginalOracle":
        seqs = list(seqs)
        if not seqs:
            raise ValueError("empty training set")
        return cls(positional_frequencies(seqs, n_bins), n_bins)

    @property
    def mode(self) -> np.ndarray:
        return self.table.argmax(axis=1)  # lowest index on ties

    def predict(self, length: int) -> str:
        return "".join(ALPHABET[a] for a in self.mode[position_bins(length, self.n_bins)])

    def distribution(self, length: int) -> np.ndarray:
        return self.table[position_bins(length, self.n_bins)]

    def aar(self, seqs) -> float:
        """Position-pooled recovery of the mode lookup."""
        hits = total = 0
        for s in seqs:
            hits += sum(a == b for a, b in zip(self.predict(len(s)), s))
            total += len(s)
        return hits / total

    def mean_positional_entropy(self, seqs) -> float:
        """Position-weighted mean entropy of the table rows visited by ``seqs``."""
        h = entropy(self.table)
        tot = n = 0.0
        for s in seqs:
            tot += h[position_bins(len(s), self.n_bins)].sum()
            n += len(s)
        return tot / n


def cross_entropy(table: np.ndarray, seqs, n_bins: int = N_BINS) -> float:
    """Mean per-position CE of a positional predictor ``table`` (n_bins x 20) on ``seqs``."""
    nll = n = 0.0
    for s in seqs:
        b, a = position_bins(len(s), n_bins), encode_sequence(s)
        nll -= np.log(np.maximum(table[b, a], PROB_FLOOR)).sum()
        n += len(s)
    return nll / n


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    per_complex: list
    aggregate: dict
    meta: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, default=_json_default))

    def to_csv(self, path, run: str = "run") -> None:
        row = {"run": run, **{k: v for k, v in self.aggregate.items() if not isinstance(v, (dict, list))}}
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(row))
            wr.writeheader()
            wr.writerow(row)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def score_complex(cx: Complex, p, cutoff: float = DEFAULT_CONTACT_CUTOFF):
    """Per-complex metric row and the native contact mask over CDR positions."""
    true_seq = cx.cdr_seq
    true_ca = cx.heavy.atoms[cx.cdr_indices, 1]
    pred_ca = np.asarray(p.coords)[:, 1]
    native = contacts(true_ca, cx.antigen.ca, cutoff)
    contact_pos = sorted(native.cdr_residues())
    im = interface_metrics(pred_ca, true_ca, cx.antigen.ca, cutoff)
    row = {"id": cx.id, "aar": aar(p.sequence, true_seq), "caar": caar(p.sequence, true_seq, contact_pos),
           "ppl": perplexity([p.mixture], [true_seq]), **asdict(im)}
    mask = np.zeros(len(true_seq), dtype=bool)
    mask[contact_pos] = True
    return row, mask


def _score_star(args):
    return score_complex(*args)


def evaluate(predictions, complexes, train_seqs=None, meta: dict | None = None,
             cutoff: float = DEFAULT_CONTACT_CUTOFF, workers: int = 1) -> MetricsReport:
    """Score predictions (objects with id, sequence, coords (L,4,3), mixture) against native complexes."""
    truth = {c.id: c for c in complexes}
    preds = {p.id: p for p in predictions}
    orphans = sorted(set(preds) ^ set(truth))
    if orphans:
        raise KeyError(f"ids present on only one side: {orphans[:10]}" + (" ..." if len(orphans) > 10 else ""))
    ids = sorted(truth)
    jobs = [(truth[i], preds[i], cutoff) for i in ids]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            scored = list(pool.map(_score_star, jobs, chunksize=16))
    else:
        scored = [score_complex(*j) for j in jobs]
    rows = [r for r, _ in scored]
    masks = [m for _, m in scored]
    pred_seqs = [preds[i].sequence for i in ids]
    true_seqs = [truth[i].cdr_seq for i in ids]
    dists = [preds[i].mixture for i in ids]

    with_contacts = [r for r in rows if r["n_native_contacts"] > 0]
    ms = motif_stats(pred_seqs, true_seqs)
    agg = {
        "n_complexes": len(rows),
        "aar": _mean(r["aar"] for r in rows),
        "caar": _mean(r["caar"] for r in rows),
        "n_caar": sum(r["caar"] is not None for r in rows),
        "ppl": perplexity(dists, true_seqs),
        "rmsd": _mean(r["rmsd"] for r in rows),
        "fnat": _mean(r["fnat"] for r in with_contacts),
        "n_no_native_contacts": len(rows) - len(with_contacts),
        "irmsd": _mean(r["irmsd"] for r in rows),
        "dockq": _mean(r["dockq"] for r in rows),
        "epif1": _mean(r["epif1"] for r in rows),
        "unique_fraction": unique_fraction(pred_seqs),
        "entropy_ratio": entropy_ratio(pred_seqs, true_seqs),
        "gy_ratio": gy_ratio(pred_seqs, true_seqs),
        "effective_vocabulary": effective_vocabulary(pred_seqs),
        "unique_bigrams": ms.unique_bigrams,
        "unique_trigrams": ms.unique_trigrams,
        "top20_trigram_coverage": ms.top20_trigram_coverage,
        "enrichment_correlation": enrichment_correlation(pred_seqs, true_seqs, masks),
        "pwm_correlation": pwm_correlation(pred_seqs, true_seqs),
    }
    if train_seqs is not None:
        oracle = MarginalOracle.fit(train_seqs)
        agg["marginal_aar"] = oracle.aar(true_seqs)
    meta = {"ppl_distribution": "mixture", "contact_cutoff": cutoff, "position_bins": N_BINS, **(meta or {})}
    return MetricsReport(rows, agg, meta)


@dataclass
class Specialization:
    usage: np.ndarray  # positions won per component (argmax of the mixing weights)
    top2: tuple
    profiles: np.ndarray  # (2, n_bins) argmax amino acid per bin, -1 where the component is never selected
    pooled_mode: np.ndarray  # (n_bins,)
    differ_from_each_other: float
    differ_from_pooled: tuple  # per component

    @property
    def both_defined(self) -> np.ndarray:
        return (self.profiles >= 0).all(axis=0)


def component_specialization(predictions, pooled_mode, n_bins: int = N_BINS) -> Specialization:
    """Per-bin argmax profiles of the two most-selected mixture components.

    A component's profile at a bin is the argmax of its mean distribution over
    the positions in that bin where it wins the mixing weights.
    """
    K = predictions[0].components.shape[0]
    sums = np.zeros((K, n_bins, 20))
    usage = np.zeros(K, dtype=np.int64)
    for p in predictions:
        k_star = np.asarray(p.mixing).argmax(axis=1)
        bins = position_bins(len(k_star), n_bins)
        for i, (k, b) in enumerate(zip(k_star, bins)):
            sums[k, b] += p.components[k, i]
            usage[k] += 1
    top2 = tuple(int(k) for k in np.argsort(-usage, kind="stable")[:2])
    if K == 1:
        top2 = (0, 0)
    profiles = np.where(sums[list(top2)].sum(-1) > 0, sums[list(top2)].argmax(-1), -1)
    pooled_mode = np.asarray(pooled_mode)
    defined = (profiles >= 0).all(axis=0)
    differ = float((defined & (profiles[0] != profiles[1])).mean())
    vs_pooled = tuple(float(((profiles[c] >= 0) & (profiles[c] != pooled_mode)).mean()) for c in range(2))
    return Specialization(usage, top2, profiles, pooled_mode, differ, vs_pooled)


@dataclass
class TruthPrediction:
    id: str
    sequence: str
    coords: np.ndarray
    mixture: np.ndarray


def predictions_from_truth(complexes) -> list[TruthPrediction]:
    """Native sequences and coordinates dressed as predictions (one-hot mixtures)."""
    out = []
    for cx in complexes:
        idx = encode_sequence(cx.cdr_seq)
        mix = np.zeros((len(idx), 20))
        mix[np.arange(len(idx)), idx] = 1.0
        out.append(TruthPrediction(cx.id, cx.cdr_seq, cx.heavy.atoms[cx.cdr_indices], mix))
    return out
