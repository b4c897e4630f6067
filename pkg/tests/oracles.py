"""Slow, loop-based reimplementations used as independent references."""

import math


def dist(a, b):
    return math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))


def contact_pairs(cdr, antigen, cutoff=8.0):
    out = set()
    for k in range(len(cdr)):
        for j in range(len(antigen)):
            if dist(cdr[k], antigen[j]) < cutoff:
                out.add((k, j))
    return out


def interface(pred, true, antigen, cutoff=8.0):
    """(rmsd, fnat, irmsd, dockq, epif1) computed with explicit loops."""
    n = len(true)
    sq = [sum((float(pred[k][c]) - float(true[k][c])) ** 2 for c in range(3)) for k in range(n)]
    rmsd = math.sqrt(sum(sq) / n)
    native = contact_pairs(true, antigen, cutoff)
    model = contact_pairs(pred, antigen, cutoff)
    if native:
        hit = 0
        for p in native:
            if p in model:
                hit += 1
        fnat = hit / len(native)
        iface = []
        for k, _ in native:
            if k not in iface:
                iface.append(k)
        irmsd = math.sqrt(sum(sq[k] for k in iface) / len(iface))
    else:
        fnat, irmsd = 1.0, None
    slot = irmsd if irmsd is not None else rmsd
    dockq = (fnat + 1 / (1 + (slot / 1.5) ** 2) + 1 / (1 + (rmsd / 8.5) ** 2)) / 3
    e_pred = {j for _, j in model}
    e_true = {j for _, j in native}
    if not e_pred and not e_true:
        f1 = 1.0
    else:
        tp = len(e_pred & e_true)
        f1 = 2 * tp / (len(e_pred) + len(e_true))
    return rmsd, fnat, irmsd, dockq, f1


def effective_vocabulary(seqs):
    counts = {}
    total = 0
    for s in seqs:
        for a in s:
            counts[a] = counts.get(a, 0) + 1
            total += 1
    h = 0.0
    for c in counts.values():
        p = c / total
        h -= p * math.log(p)
    return math.exp(h)


def ngram_set(seqs, k):
    out = set()
    for s in seqs:
        for i in range(len(s) - k + 1):
            out.add(s[i:i + k])
    return out


def top_trigram_coverage(pred_seqs, true_seqs, top=20):
    counts = {}
    for s in true_seqs:
        for i in range(len(s) - 2):
            counts[s[i:i + 3]] = counts.get(s[i:i + 3], 0) + 1
    ranked = sorted(counts, key=lambda m: (-counts[m], m))[:top]
    have = ngram_set(pred_seqs, 3)
    return sum(1 for m in ranked if m in have) / top
