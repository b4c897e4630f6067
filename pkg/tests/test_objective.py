import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cdrdesign.mdn import MixturePrediction, pairwise_energy
from cdrdesign.objective import (AnnealSchedule, LossWeights, NonFiniteLossError, amcl_weights, antigen_cls_loss,
                                 component_losses, coord_loss, gdpp_loss, info_nce, mixing_loss, retrieval_accuracy,
                                 sequence_loss, shadow_epitope, shadow_loss, tau_at, total_loss)
from cdrdesign.verify import fd_relative_error, random_motions

D64 = torch.float64


# weights and schedule

def test_default_weights():
    w = LossWeights()
    assert (w.alpha, w.delta, w.epsilon, w.lambda_cls, w.lambda_pair, w.fw_dropout_p) == (1.301, 0.664, 0.05, 0.2, 0.3, 0.3)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(alpha=-1.0)


@pytest.mark.parametrize("kw", [{"tau_start": 0.1, "tau_end": 0.2}, {"tau_end": 0.0}, {"anneal_epochs": 0}])
def test_bad_schedule_rejected(kw):
    with pytest.raises(ValueError):
        AnnealSchedule(**kw)


def test_tau_endpoints_and_midpoint():
    assert tau_at(0) == 2.0
    assert tau_at(20) == pytest.approx(0.1, abs=1e-12)
    assert tau_at(10) == pytest.approx(0.4472, abs=1e-4)
    assert tau_at(10) == pytest.approx(2.0 * math.sqrt(0.05), abs=1e-12)
    assert tau_at(35) == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(ValueError):
        tau_at(-1)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 19.5))
def test_tau_monotone(t):
    assert tau_at(t + 0.5) < tau_at(t)


# aMCL

def test_amcl_uniform_on_equal_losses():
    assert torch.allclose(amcl_weights(torch.full((4,), 2.3), 0.7), torch.full((4,), 0.25))


def test_amcl_two_losses_hand_value():
    w = amcl_weights(torch.tensor([1.0, 2.0], dtype=D64), 1.0)
    e1, e2 = math.exp(-1), math.exp(-2)
    assert torch.allclose(w, torch.tensor([e1 / (e1 + e2), e2 / (e1 + e2)], dtype=D64))
    assert w[0].item() == pytest.approx(0.7311, abs=1e-4)


def test_amcl_zero_temperature_limit():
    w = amcl_weights(torch.tensor([3.0, 0.5, 2.0], dtype=D64), 1e-6)
    assert torch.equal(w, torch.tensor([0.0, 1.0, 0.0], dtype=D64))


def test_amcl_weights_are_constants():
    losses = torch.tensor([1.0, 2.0], requires_grad=True)
    assert not amcl_weights(losses, 1.0).requires_grad


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=6), st.floats(0.05, 5), st.floats(-100, 100))
def test_amcl_simplex_and_shift_invariance(losses, tau, shift):
    l = torch.tensor(losses, dtype=D64)
    w = amcl_weights(l, tau)
    assert torch.all(w >= 0) and abs(w.sum().item() - 1) < 1e-12
    assert torch.allclose(amcl_weights(l + shift, tau), w, atol=1e-9)


# sequence loss

def _pred(logits, J=None):
    K, L, _ = logits.shape
    J = torch.zeros(K, 20, 20, dtype=logits.dtype) if J is None else J
    return MixturePrediction(logits, torch.full((L, K), 1.0 / K, dtype=logits.dtype), J, torch.ones(L))


def test_single_component_is_ce_plus_energy():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(1, 5, 20, generator=g, dtype=D64)
    J = torch.randn(1, 20, 20, generator=g, dtype=D64)
    J = (J + J.transpose(1, 2)) / 2
    y = torch.randint(0, 20, (5,), generator=g)
    loss, _, _ = sequence_loss(_pred(logits, J), y, tau=0.5)
    ce = torch.nn.functional.cross_entropy(logits[0], y)
    e = pairwise_energy(torch.softmax(logits[0], -1), J[0])
    assert loss.item() == pytest.approx((ce + 0.3 * e).item(), abs=1e-12)


def test_perfect_component_zero_loss():
    y = torch.tensor([2, 7, 7])
    logits = torch.full((1, 3, 20), -1e4, dtype=D64)
    logits[0, torch.arange(3), y] = 0.0
    assert component_losses(logits, torch.zeros(1, 20, 20, dtype=D64), y).item() == pytest.approx(0.0, abs=1e-12)


def test_two_component_composition():
    y = torch.tensor([0, 1, 2, 3])
    # component logits engineered to give CE 0.5 and 3.0 with zero coupling
    def logits_for(ce):
        p = math.exp(-ce)
        rest = (1 - p) / 19
        row = torch.full((20,), math.log(rest), dtype=D64)
        out = row.repeat(4, 1)
        out[torch.arange(4), y] = math.log(p)
        return out
    logits = torch.stack([logits_for(0.5), logits_for(3.0)])
    loss, losses, w = sequence_loss(_pred(logits), y, tau=0.1, lambda_pair=0.0)
    assert torch.allclose(losses, torch.tensor([0.5, 3.0], dtype=D64))
    expect = amcl_weights(torch.tensor([0.5, 3.0], dtype=D64), 0.1)
    assert loss.item() == pytest.approx(0.5 * expect[0].item() + 3.0 * expect[1].item(), abs=1e-6)


def test_per_item_losses_match_separate_evaluation():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(3, 7, 20, generator=g, dtype=D64)
    J = torch.randn(3, 20, 20, generator=g, dtype=D64)
    J = (J + J.transpose(1, 2)) / 2
    y = torch.randint(0, 20, (7,), generator=g)
    item = torch.tensor([0, 0, 0, 1, 1, 1, 1])
    per = component_losses(logits, J, y, 0.3, segment=item, item=item, n_items=2)
    assert per.shape == (2, 3)
    assert torch.allclose(per[0], component_losses(logits[:, :3], J, y[:3]))
    assert torch.allclose(per[1], component_losses(logits[:, 3:], J, y[3:]))
    loss, _, w = sequence_loss(_pred(logits, J), y, 0.5, 0.3, item, item, 2)
    assert loss.item() == pytest.approx(((w * per).sum(1).mean()).item())


def test_mixing_loss_targets_weights():
    w = torch.tensor([[0.0, 1.0]])
    good = mixing_loss(torch.tensor([[0.01, 0.99]]), w)
    bad = mixing_loss(torch.tensor([[0.99, 0.01]]), w)
    assert good < bad


# GDPP

def test_gdpp_zero_on_identical_inputs():
    t = torch.nn.functional.one_hot(torch.tensor([1, 4, 4]), 20).double()
    assert gdpp_loss(t, t).item() == pytest.approx(0.0, abs=1e-20)


def test_gdpp_two_by_two_closed_form():
    P = torch.full((2, 20), 1 / 20, dtype=D64)
    T = torch.nn.functional.one_hot(torch.tensor([0, 1]), 20).double()
    eps = 1e-4
    # P P^T = 1/20 * ones(2, 2): eigenvalues {2/20, 0}; T T^T = I: eigenvalues {1, 1}
    pred = sorted([2 / 20 + eps, eps], reverse=True)
    true = [1 + eps, 1 + eps]
    expect = sum((a - b) ** 2 for a, b in zip(pred, true))
    assert gdpp_loss(P, T, eps).item() == pytest.approx(expect, abs=1e-12)
    # brute-force eigen oracle in numpy
    ev = lambda m: np.sort(np.linalg.eigvalsh(m))[::-1]
    ref = np.sum((ev(P.numpy() @ P.numpy().T + eps * np.eye(2)) - ev(T.numpy() @ T.numpy().T + eps * np.eye(2))) ** 2)
    assert gdpp_loss(P, T, eps).item() == pytest.approx(ref, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8))
def test_gdpp_row_permutation_invariant(seed, L):
    g = torch.Generator().manual_seed(seed)
    P = torch.softmax(torch.randn(L, 20, generator=g, dtype=D64), -1)
    T = torch.nn.functional.one_hot(torch.randint(0, 20, (L,), generator=g), 20).double()
    perm = torch.randperm(L, generator=g)
    assert gdpp_loss(P[perm], T[perm]).item() == pytest.approx(gdpp_loss(P, T).item(), abs=1e-10)


def test_gdpp_failure_names_item():
    P = torch.full((2, 20), float("nan"), dtype=D64)
    with pytest.raises(RuntimeError, match="cx42"):
        gdpp_loss(P, torch.zeros(2, 20, dtype=D64), name="cx42")


# InfoNCE

def test_info_nce_zero_embeddings_is_log_b():
    for B in (2, 5, 9):
        assert info_nce(torch.zeros(B, 3, dtype=D64), torch.randn(B, 3, dtype=D64)).item() == pytest.approx(math.log(B))


def test_info_nce_perfect_retrieval_limit():
    c = torch.tensor([[50.0, 0.0], [0.0, 50.0]], dtype=D64)
    assert info_nce(c, torch.eye(2, dtype=D64)).item() < 1e-20


def test_single_item_batch_is_zero():
    mlp = torch.nn.Identity()
    out = antigen_cls_loss([torch.rand(3, 20)], torch.randn(1, 4), torch.randn(20, 4), mlp)
    assert out.item() == 0.0


def test_collapsed_predictions_retrieve_at_chance():
    rng = torch.Generator().manual_seed(0)
    B, trials = 8, 400
    E = torch.randn(20, 6, generator=rng, dtype=D64)
    mlp = torch.nn.Linear(6, 6).double()
    dist = torch.softmax(torch.randn(5, 20, generator=rng, dtype=D64), -1)
    from cdrdesign.objective import soft_sequence_embedding
    c = soft_sequence_embedding(dist, E, mlp).detach().expand(B, -1)
    hits = 0.0
    for _ in range(trials):
        a = torch.randn(B, 6, generator=rng, dtype=D64)
        hits += retrieval_accuracy(c, a) * B
    # identical rows pick the same column every time: exactly one hit per batch
    assert hits / (trials * B) == pytest.approx(1 / B)


def test_cls_gradient_reaches_distributions():
    logits = torch.randn(3, 4, 20, dtype=D64, requires_grad=True)
    loss = antigen_cls_loss(list(torch.softmax(logits, -1)), torch.randn(3, 5, dtype=D64), torch.randn(20, 5, dtype=D64),
                            torch.nn.Linear(5, 5).double())
    loss.backward()
    assert logits.grad.abs().sum() > 0


# coordinates and shadow

def test_smooth_l1_values():
    z = torch.zeros(1, dtype=D64)
    assert coord_loss(torch.tensor([0.5], dtype=D64), z).item() == pytest.approx(0.125)
    assert coord_loss(torch.tensor([2.0], dtype=D64), z).item() == pytest.approx(1.5)
    x = torch.randn(4, 4, 3)
    assert coord_loss(x, x).item() == 0.0
    with pytest.raises(ValueError):
        coord_loss(torch.zeros(2, 3), torch.zeros(3, 3))


def test_shadow_identity_and_empty():
    x = torch.randn(4, 3, dtype=D64)
    assert shadow_loss(x, x, torch.randn(3, 3, dtype=D64)).item() == 0.0
    assert shadow_loss(x + 1, x, torch.zeros(0, 3, dtype=D64)).item() == 0.0


def test_shadow_collinear_shift():
    true = torch.tensor([[0.0, 0.0, 0.0]], dtype=D64)
    epi = torch.tensor([[5.0, 0.0, 0.0]], dtype=D64)
    pred = true + torch.tensor([[-1.7, 0.0, 0.0]], dtype=D64)
    assert shadow_loss(pred, true, epi).item() == pytest.approx(1.7)


def test_shadow_double_loop():
    rng = np.random.default_rng(0)
    p, t, e = rng.normal(size=(5, 3)) * 4, rng.normal(size=(5, 3)) * 4, rng.normal(size=(3, 3)) * 4
    brute = sum(abs(np.linalg.norm(p[k] - e[j]) - np.linalg.norm(t[k] - e[j])) for k in range(5) for j in range(3)) / 15
    assert shadow_loss(*(torch.as_tensor(a) for a in (p, t, e))).item() == pytest.approx(brute, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_shadow_rigid_motion_invariant(seed):
    g = torch.Generator().manual_seed(seed)
    p, t, e = (torch.randn(n, 3, generator=g, dtype=D64) * 4 for n in (4, 4, 3))
    R, s = (torch.as_tensor(a) for a in random_motions(1, seed)[0])
    moved = shadow_loss(p @ R.T + s, t @ R.T + s, e @ R.T + s).item()
    assert moved == pytest.approx(shadow_loss(p, t, e).item(), abs=1e-10)


def test_shadow_epitope_cutoff():
    true = torch.zeros(1, 3, dtype=D64)
    epi = torch.tensor([[7.9, 0, 0], [8.0, 0, 0]], dtype=D64)
    assert shadow_epitope(true, epi).shape[0] == 1


# total

def test_total_unit_terms():
    unit = {k: torch.tensor(1.0, dtype=D64) for k in ("seq", "coord", "shadow", "gdpp", "cls")}
    total, breakdown = total_loss(unit)
    assert abs(total.item() - 3.215) < 1e-9
    assert set(breakdown) == set(unit)


def test_total_zero_terms():
    assert total_loss({k: 0.0 for k in ("seq", "coord", "shadow", "gdpp", "cls")})[0].item() == 0.0


def test_zero_cls_weight_drops_term():
    terms = {"seq": 1.0, "cls": 5.0}
    assert total_loss(terms, LossWeights(lambda_cls=0.0))[0].item() == 1.0


def test_non_finite_term_named():
    with pytest.raises(NonFiniteLossError, match="shadow"):
        total_loss({"seq": torch.tensor(1.0), "shadow": torch.tensor(float("nan"))})


def test_total_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(3)
    # one component: the aMCL weight is the constant 1, so FD sees the same function as backprop
    logits = torch.randn(1, 4, 20, generator=g, dtype=D64, requires_grad=True)
    coords = torch.randn(4, 3, generator=g, dtype=D64, requires_grad=True)
    true = torch.randn(4, 3, generator=g, dtype=D64)
    epi = torch.randn(3, 3, generator=g, dtype=D64)
    y = torch.randint(0, 20, (4,), generator=g)
    J = torch.randn(1, 20, 20, generator=g, dtype=D64) * 0.3
    J = (J + J.transpose(1, 2)) / 2
    onehot = torch.nn.functional.one_hot(y, 20).double()

    def fn():
        pred = _pred(logits, J)
        seq, _, _ = sequence_loss(pred, y, 0.7)
        terms = {"seq": seq, "coord": coord_loss(coords, true), "shadow": shadow_loss(coords, true, epi),
                 "gdpp": gdpp_loss(torch.softmax(logits[0], -1), onehot)}
        return total_loss(terms)[0]
    assert fd_relative_error(fn, [logits, coords]) < 1e-4
