import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdrdesign.complex_model import ALPHABET
from cdrdesign.diagnostics import (MarginalOracle, aar, caar, component_specialization, cross_entropy, dockq_score,
                                   effective_vocabulary, enrichment_correlation, entropy_ratio, evaluate, gy_ratio,
                                   interface_metrics, motif_stats, perplexity, position_bins, positional_frequencies,
                                   predictions_from_truth, pwm_correlation, spearman, unique_fraction)
from cdrdesign.trainer import Prediction
from cdrdesign.verify import ceiling_check, project_to_simplex

import oracles

letters = st.text(alphabet=ALPHABET, min_size=3, max_size=12)


def test_aar_extremes_and_mismatch():
    assert aar("ACD", "ACD") == 1.0 and aar("ACD", "EFG") == 0.0
    with pytest.raises(ValueError):
        aar("AC", "ACD")


def test_aar_random_baseline():
    rng = np.random.default_rng(0)
    a = "".join(rng.choice(list(ALPHABET), 1000))
    b = "".join(rng.choice(list(ALPHABET), 1000))
    assert abs(aar(a, b) - 0.05) < 0.015


def test_caar_none_without_contacts():
    assert caar("AC", "AD", []) is None
    assert caar("AC", "AD", [0, 1]) == 0.5


def test_perplexity_cases():
    onehot = np.eye(20)[[0, 3]]
    assert perplexity([onehot], ["AE"]) == pytest.approx(1.0)
    assert perplexity([np.full((2, 20), 0.05)], ["AE"]) == pytest.approx(20.0)
    p = np.full((2, 20), 0.0)
    p[0, 0], p[1, 0] = 0.5, 0.25
    assert perplexity([p], ["AA"]) == pytest.approx(math.sqrt(8))
    assert perplexity([np.zeros((1, 20))], ["A"]) == pytest.approx(1e12)


def test_interface_identity():
    rng = np.random.default_rng(1)
    true = rng.uniform(0, 6, (5, 3))
    m = interface_metrics(true, true, rng.uniform(0, 6, (4, 3)))
    assert (m.rmsd, m.fnat, m.irmsd, m.dockq, m.epif1) == (0.0, 1.0, 0.0, 1.0, 1.0)


def test_interface_translated_far_away():
    rng = np.random.default_rng(2)
    true = rng.uniform(0, 6, (5, 3))
    m = interface_metrics(true + [100.0, 0, 0], true, rng.uniform(0, 6, (4, 3)))
    assert m.fnat == 0.0 and m.epif1 == 0.0


def test_interface_no_native_contacts():
    true = np.zeros((3, 3))
    m = interface_metrics(true + 0.5, true, np.full((2, 3), 50.0))
    assert m.fnat == 1.0 and m.irmsd is None
    assert m.dockq == pytest.approx(dockq_score(1.0, m.rmsd, m.rmsd))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_interface_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    true = rng.uniform(0, 10, (6, 3))
    pred = true + rng.normal(0, 0.1, true.shape)
    ag = rng.uniform(0, 10, (7, 3))
    m = interface_metrics(pred, true, ag)
    ref = oracles.interface(pred, true, ag)
    for got, want in zip((m.rmsd, m.fnat, m.irmsd, m.dockq, m.epif1), ref):
        assert (got is None and want is None) or abs(got - want) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.floats(0, 10), st.floats(0, 10), st.floats(0, 5))
def test_dockq_monotone(fnat, irmsd, rmsd, extra):
    assert dockq_score(fnat, irmsd + extra, rmsd) <= dockq_score(fnat, irmsd, rmsd) + 1e-15
    assert dockq_score(fnat, irmsd, rmsd + extra) <= dockq_score(fnat, irmsd, rmsd) + 1e-15
    assert 0.0 <= dockq_score(fnat, irmsd, rmsd) <= 1.0


def test_effective_vocabulary_cases():
    assert effective_vocabulary(["GGGG"]) == pytest.approx(1.0)
    assert effective_vocabulary([ALPHABET]) == pytest.approx(20.0)
    assert effective_vocabulary(["AC", "AC"]) == pytest.approx(2.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(letters, min_size=1, max_size=8), st.randoms())
def test_effective_vocabulary_order_and_duplication(seqs, rnd):
    ev = effective_vocabulary(seqs)
    shuffled = list(seqs)
    rnd.shuffle(shuffled)
    assert effective_vocabulary(shuffled) == pytest.approx(ev)
    assert effective_vocabulary(seqs + seqs) == pytest.approx(ev)
    assert ev == pytest.approx(oracles.effective_vocabulary(seqs))
    assert 1.0 - 1e-12 <= ev <= 20.0 + 1e-12


def test_unique_fraction_and_gy():
    assert unique_fraction(["AA", "AA", "CC", "DD"]) == 0.75
    assert gy_ratio(["GGYY"], ["GYAA"]) == pytest.approx(2.0)


def test_entropy_ratio_identity():
    seqs = ["ACDEFG", "GHIKLM", "AAAYYY"]
    assert entropy_ratio(seqs, seqs) == pytest.approx(1.0)
    assert entropy_ratio(["AAAAAA"] * 3, seqs) == 0.0


def test_motif_single_sequence():
    m = motif_stats(["AAAA"], ["AAAA"])
    assert (m.unique_bigrams, m.unique_trigrams) == (1, 1)


def test_motif_coverage_of_identical_sets():
    seqs = ["".join(np.random.default_rng(s).choice(list(ALPHABET), 9)) for s in range(30)]
    assert motif_stats(seqs, seqs).top20_trigram_coverage == 1.0


def test_motif_counts_match_hash_sets():
    rng = np.random.default_rng(7)
    pred = ["".join(rng.choice(list("ACDEGY"), rng.integers(2, 10))) for _ in range(50)]
    true = ["".join(rng.choice(list("ACDEGY"), rng.integers(3, 10))) for _ in range(50)]
    m = motif_stats(pred, true)
    assert m.unique_bigrams == len(oracles.ngram_set(pred, 2))
    assert m.unique_trigrams == len(oracles.ngram_set(pred, 3))
    assert m.top20_trigram_coverage == oracles.top_trigram_coverage(pred, true)


def test_spearman_cases():
    assert spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)
    assert spearman([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert spearman([1, 2], [1, 2]) is None
    assert spearman([1, np.nan, 2, 3], [2, 5, 1, 3]) == pytest.approx(spearman([1, 2, 3], [2, 1, 3]))


def test_enrichment_correlation_identity():
    seqs = ["ACDEFGHIKL", "YYGGACDSST", "KLMNPQRSTV"]
    masks = [np.arange(10) % 2 == 0] * 3
    assert enrichment_correlation(seqs, seqs, masks) == pytest.approx(1.0)


def test_pwm_correlation_high_for_mode_copying():
    rng = np.random.default_rng(0)
    true = ["".join(rng.choice(list("GYAS"), 8, p=[.4, .3, .2, .1])) for _ in range(80)]
    oracle = MarginalOracle.fit(true)
    pred = [oracle.predict(len(s)) for s in true]
    r = pwm_correlation(pred, true)
    assert r is not None and r > 0.5


def test_position_bins():
    assert position_bins(1).tolist() == [0]
    assert position_bins(11).tolist() == list(range(10)) + [9]
    assert position_bins(2).tolist() == [0, 9]


def test_oracle_identical_training_set():
    seqs = ["ACDEFGHIK"] * 5
    assert MarginalOracle.fit(seqs).aar(seqs) == 1.0


def test_oracle_two_disagreeing_sequences():
    seqs = ["AAAAAAAAAAA", "CCCCCCCCCCC"]
    o = MarginalOracle.fit(seqs)
    assert np.allclose(o.table[:, 0], 0.5) and np.allclose(o.table[:, 1], 0.5)
    assert cross_entropy(o.table, seqs) == pytest.approx(math.log(2), abs=1e-12)


def test_empty_bins_fall_back_to_pooled():
    table = positional_frequencies(["AC"])
    assert np.allclose(table[5], [0.5, 0.5] + [0] * 18)


@settings(max_examples=15, deadline=None)
@given(st.lists(letters, min_size=2, max_size=30), st.integers(0, 1000))
def test_oracle_is_the_ce_optimum(seqs, seed):
    gap, beaten, oracle = ceiling_check(seqs, n_perturb=20, seed=seed)
    assert gap < 1e-10 and beaten == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_simplex_projection(seed):
    v = np.random.default_rng(seed).normal(size=(3, 20))
    p = project_to_simplex(v)
    assert np.all(p >= 0) and np.allclose(p.sum(1), 1.0)
    q = np.random.default_rng(seed + 1).dirichlet(np.ones(20), 3)
    assert np.allclose(project_to_simplex(q), q)


# reports


def test_truth_scores_perfectly(small_set):
    cx = small_set[0]
    rep = evaluate(predictions_from_truth(cx), cx)
    assert rep.aggregate["aar"] == 1.0 and rep.aggregate["dockq"] == 1.0 and rep.aggregate["ppl"] == pytest.approx(1.0)
    assert rep.meta["ppl_distribution"] == "mixture"


def test_single_complex_aggregate_equals_row(small_set):
    cx = small_set[0][:1]
    rng = np.random.default_rng(0)
    p = predictions_from_truth(cx)[0]
    p.coords = p.coords + rng.normal(0, 0.5, p.coords.shape)
    rep = evaluate([p], cx)
    row = rep.per_complex[0]
    for k in ("aar", "rmsd", "fnat", "irmsd", "dockq", "epif1", "ppl"):
        assert rep.aggregate[k] == pytest.approx(row[k])


def test_orphans_listed(small_set):
    cx = small_set[0]
    with pytest.raises(KeyError, match=cx[-1].id):
        evaluate(predictions_from_truth(cx[:-1]), cx)


def test_report_files(tmp_path, small_set):
    cx = small_set[0]
    rep = evaluate(predictions_from_truth(cx), cx, train_seqs=[c.cdr_seq for c in cx])
    rep.to_json(tmp_path / "r.json")
    rep.to_csv(tmp_path / "r.csv")
    obj = json.loads((tmp_path / "r.json").read_text())
    assert len(obj["per_complex"]) == len(cx) and "marginal_aar" in obj["aggregate"]
    assert (tmp_path / "r.csv").read_text().startswith("run,")


def test_parallel_scoring_matches_serial(small_set):
    cx = small_set[0]
    preds = predictions_from_truth(cx)
    a = evaluate(preds, cx).aggregate
    b = evaluate(preds, cx, workers=2).aggregate
    assert a == b


def test_specialization_statistic():
    # component 0 always prefers A, component 1 always prefers H; each wins half the items
    preds = []
    for n in range(4):
        L, k = 10, n % 2
        comps = np.full((2, L, 20), 0.01)
        comps[0, :, ALPHABET.index("A")] = 0.9
        comps[1, :, ALPHABET.index("H")] = 0.9
        mixing = np.zeros((L, 2))
        mixing[:, k] = 1.0
        preds.append(Prediction(f"p{n}", "A" * L, np.zeros((L, 4, 3)), comps[k], mixing, k, comps))
    pooled = np.full(10, ALPHABET.index("A"))
    s = component_specialization(preds, pooled)
    assert s.differ_from_each_other == 1.0
    assert sorted(s.differ_from_pooled) == [0.0, 1.0]
