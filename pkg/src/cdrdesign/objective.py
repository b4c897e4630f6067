"""Loss terms, aMCL weighting and the assembled training objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .mdn import pairwise_energy

GDPP_JITTER = 1e-4
HUBER_BETA = 1.0
SHADOW_CUTOFF = 8.0


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.301  # coordinates
    delta: float = 0.664  # shadow paratope
    epsilon: float = 0.05  # GDPP
    lambda_cls: float = 0.2
    lambda_pair: float = 0.3
    fw_dropout_p: float = 0.3

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative")


@dataclass(frozen=True)
class AnnealSchedule:
    tau_start: float = 2.0
    tau_end: float = 0.1
    anneal_epochs: int = 20

    def __post_init__(self):
        if not self.tau_start > self.tau_end > 0:
            raise ValueError("need tau_start > tau_end > 0")
        if self.anneal_epochs < 1:
            raise ValueError("anneal_epochs must be >= 1")


def tau_at(epoch: float, schedule: AnnealSchedule = AnnealSchedule()) -> float:
    """Exponential interpolation from tau_start to tau_end, then held at tau_end."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    frac = min(epoch / schedule.anneal_epochs, 1.0)
    return schedule.tau_start * (schedule.tau_end / schedule.tau_start) ** frac


def amcl_weights(losses: torch.Tensor, tau: float) -> torch.Tensor:
    """Boltzmann weights softmax(-loss / tau) over the last axis, detached from the graph."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    x = -losses.detach() / tau
    x = x - x.max(dim=-1, keepdim=True).values
    e = torch.exp(x)
    return e / e.sum(dim=-1, keepdim=True)


def component_losses(component_logits, couplings, target, lambda_pair: float = 0.3,
                     segment=None, item=None, n_items: int | None = None) -> torch.Tensor:
    """Per-component CE + lambda_pair * pairwise energy: shape (K,) or (n_items, K)."""
    logp = torch.log_softmax(component_logits, dim=-1)  # (K, L, 20)
    nll = -logp.gather(-1, target.expand(logp.shape[0], -1)[..., None]).squeeze(-1)  # (K, L)
    beliefs = logp.exp()
    if item is None:
        ce = nll.mean(-1)
        e_pair = pairwise_energy(beliefs, couplings, segment)
        return ce + lambda_pair * e_pair
    n_items = int(n_items if n_items is not None else item.max() + 1)
    counts = torch.bincount(item, minlength=n_items).clamp(min=1).to(nll.dtype)
    ce = nll.new_zeros(nll.shape[0], n_items).index_add_(1, item, nll) / counts
    e_pair = pairwise_energy(beliefs, couplings, segment, item, n_items)
    return (ce + lambda_pair * e_pair).T


def sequence_loss(pred, target, tau: float, lambda_pair: float = 0.3, segment=None,
                  item=None, n_items: int | None = None):
    """aMCL sequence loss: sum_k w_k l_k with detached Boltzmann weights.

    Returns (scalar loss, per-component losses, weights); with ``item`` the
    per-item losses are averaged over items.
    """
    losses = component_losses(pred.component_logits, pred.couplings, target, lambda_pair,
                              segment, item, n_items)
    w = amcl_weights(losses, tau)
    total = (w * losses).sum(-1)
    return total.mean() if total.dim() else total, losses, w


def mixing_loss(mixing: torch.Tensor, weights: torch.Tensor, item: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-entropy of per-position mixing weights against the (detached) aMCL assignment."""
    target = weights if item is None else weights[item]
    return -(target.detach() * torch.log(mixing.clamp_min(1e-12))).sum(-1).mean()


def gdpp_loss(p_active: torch.Tensor, target_onehot: torch.Tensor, eps_jitter: float = GDPP_JITTER,
              name: str | None = None) -> torch.Tensor:
    """Squared L2 distance between descending eigenvalue spectra of P P^T + eps I and T T^T + eps I."""
    L = p_active.shape[0]
    eye = torch.eye(L, dtype=p_active.dtype, device=p_active.device)
    k_pred = p_active @ p_active.T + eps_jitter * eye
    k_true = target_onehot.to(p_active.dtype) @ target_onehot.to(p_active.dtype).T + eps_jitter * eye
    label = name or "batch item"
    if not (torch.isfinite(k_pred).all() and torch.isfinite(k_true).all()):
        raise RuntimeError(f"GDPP eigendecomposition failed for {label}: non-finite kernel")
    try:
        ev_pred = torch.linalg.eigvalsh(k_pred)
        ev_true = torch.linalg.eigvalsh(k_true)
    except RuntimeError as e:  # torch.linalg.LinAlgError subclasses RuntimeError
        raise RuntimeError(f"GDPP eigendecomposition failed for {label}: {e}") from e
    # eigvalsh sorts ascending for both, so the pairing matches descending order
    return ((ev_pred - ev_true) ** 2).sum()


def soft_sequence_embedding(pred_dist: torch.Tensor, aa_embeddings: torch.Tensor, mlp) -> torch.Tensor:
    """c = mlp(mean_j p[j] E_AA)."""
    return mlp((pred_dist @ aa_embeddings).mean(dim=0))


def antigen_cls_loss(pred_dists, antigen_embeddings: torch.Tensor, aa_embeddings: torch.Tensor, mlp):
    """InfoNCE over the batch with the item's own antigen as the positive; 0 for B = 1."""
    B = len(pred_dists)
    if B < 2:
        return antigen_embeddings.new_zeros(())
    c = torch.stack([soft_sequence_embedding(p, aa_embeddings, mlp) for p in pred_dists])
    return info_nce(c, antigen_embeddings)


def info_nce(c: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    scores = c @ a.T
    labels = torch.arange(c.shape[0], device=c.device)
    return F.cross_entropy(scores, labels)


def retrieval_accuracy(c: torch.Tensor, a: torch.Tensor) -> float:
    scores = c @ a.T
    return (scores.argmax(dim=1) == torch.arange(c.shape[0])).double().mean().item()


def coord_loss(pred: torch.Tensor, target: torch.Tensor, beta: float = HUBER_BETA) -> torch.Tensor:
    """Smooth-L1 averaged over all coordinates."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return F.smooth_l1_loss(pred, target, beta=beta, reduction="mean")


def shadow_epitope(true_cdr_ca: torch.Tensor, epitope_ca: torch.Tensor, cutoff: float = SHADOW_CUTOFF):
    """Epitope CA coordinates within ``cutoff`` of any true CDR CA."""
    if epitope_ca.shape[0] == 0:
        return epitope_ca
    d = torch.cdist(epitope_ca, true_cdr_ca)
    return epitope_ca[(d < cutoff).any(dim=1)]


def shadow_loss(pred_cdr_ca: torch.Tensor, true_cdr_ca: torch.Tensor, epitope_ca: torch.Tensor) -> torch.Tensor:
    """Mean |d(pred_k, x_j) - d(true_k, x_j)| over CDR positions k and epitope residues j."""
    if epitope_ca.shape[0] == 0:
        return pred_cdr_ca.sum() * 0.0
    d_pred = (pred_cdr_ca[:, None, :] - epitope_ca[None]).norm(dim=-1)
    d_true = (true_cdr_ca[:, None, :] - epitope_ca[None]).norm(dim=-1)
    return (d_pred - d_true).abs().mean()


TERMS = ("seq", "coord", "shadow", "gdpp", "cls")


def total_loss(terms: dict, weights: LossWeights = LossWeights()):
    """L_seq + alpha L_coord + delta L_shadow + epsilon L_GDPP + lambda_cls L_cls.

    ``terms`` maps names in TERMS (missing ones count as 0) to scalars; any
    extra entry is added with weight 1.  Returns (total, breakdown of weighted terms).
    """
    scale = {"seq": 1.0, "coord": weights.alpha, "shadow": weights.delta,
             "gdpp": weights.epsilon, "cls": weights.lambda_cls}
    breakdown = {}
    total = 0.0
    for name, value in terms.items():
        v = value if torch.is_tensor(value) else torch.tensor(float(value), dtype=torch.float64)
        if not torch.isfinite(v).all():
            raise NonFiniteLossError(f"non-finite loss term {name!r}: {v.item()}")
        w = scale.get(name, 1.0)
        breakdown[name] = w * v
        total = total + w * v
    if not torch.is_tensor(total):
        total = torch.tensor(total, dtype=torch.float64)
    return total, breakdown

