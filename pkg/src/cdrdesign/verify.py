"""Property checks runnable without a trained checkpoint: equivariance, gradients, the CE ceiling, loss identities."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .data import collate
from .diagnostics import MarginalOracle, cross_entropy
from .hyperbolic import HyperbolicCrossAttention, lift_to_hyperboloid, lorentz_distance
from .mdn import MdnPottsHead
from .model import DESK, CoDesignModel, ModelConfig
from .objective import (AnnealSchedule, LossWeights, amcl_weights, antigen_cls_loss, gdpp_loss, info_nce,
                        shadow_loss, tau_at, total_loss)
from .synthetic import GenConfig, generate
from .trainer import prepare


@dataclass
class Check:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: {self.value:.3e} (tol {self.tolerance:.1e}) {self.detail}".rstrip()


def check(name, value, tol, detail="", le=True) -> Check:
    ok = bool(value <= tol) if le else bool(value >= tol)
    return Check(name, float(value), tol, ok, detail)


def random_motions(n: int, seed: int = 0, scale: float = 20.0):
    """``n`` proper rotations with translations drawn uniformly from [-scale, scale]^3."""
    rng = np.random.default_rng(seed)
    rots = Rotation.random(n, random_state=rng).as_matrix()
    trans = rng.uniform(-scale, scale, size=(n, 3))
    return list(zip(rots, trans))


# ---------------------------------------------------------------------------
# equivariance


def equivariance_errors(complexes, cfg: ModelConfig = DESK, n_motions: int = 50, seed: int = 0,
                        dtype=torch.float64):
    """Worst coordinate and logit deviations over rigid motions of whole complexes.

    Graphs are rebuilt from the moved complex, so features, edges and the
    encoder are all exercised.  Each motion moves every complex at once.
    """
    torch.manual_seed(seed)
    model = CoDesignModel(cfg).to(dtype).eval()
    base = prepare(complexes, cfg)
    with torch.no_grad():
        ref = model(collate(base, dtype))
        coord_err = logit_err = 0.0
        for rot, t in random_motions(n_motions, seed):
            moved = prepare([c.transformed(rot, t) for c in complexes], cfg)
            out = model(collate(moved, dtype))
            R = torch.as_tensor(rot, dtype=dtype)
            expect = ref.cdr_atoms @ R.T + torch.as_tensor(t, dtype=dtype)
            coord_err = max(coord_err, (out.cdr_atoms - expect).abs().max().item())
            logit_err = max(logit_err, (out.pred.component_logits - ref.pred.component_logits).abs().max().item())
    return coord_err, logit_err


# ---------------------------------------------------------------------------
# finite differences


def fd_relative_error(fn, params, n_samples: int = 8, step: float = 1e-6, seed: int = 0, floor: float = 1e-6):
    """Max over sampled entries of |analytic - central FD| / max(|analytic|, |FD|, floor)."""
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    fn().backward()
    worst = 0.0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            grad = p.grad.view(-1)
            idx = rng.choice(flat.numel(), size=min(n_samples, flat.numel()), replace=False)
            for i in idx:
                old = flat[i].item()
                flat[i] = old + step
                up = fn().item()
                flat[i] = old - step
                down = fn().item()
                flat[i] = old
                num = (up - down) / (2 * step)
                ana = grad[i].item()
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst


def gradient_errors(seed: int = 0) -> dict:
    """Worst relative FD error for each differentiable building block, float64 micro-instances."""
    g = torch.Generator().manual_seed(seed)
    dt = torch.float64
    out = {}

    # Lorentz distance between lifted points, with one nearly coincident pair near the clamp
    u = torch.randn(5, 6, generator=g, dtype=dt).requires_grad_()
    v = torch.randn(5, 6, generator=g, dtype=dt)
    v[0] = u.detach()[0] + 1e-3
    out["lorentz_distance"] = fd_relative_error(
        lambda: lorentz_distance(lift_to_hyperboloid(u), lift_to_hyperboloid(v)).sum(), [u])

    torch.manual_seed(seed)
    attn = HyperbolicCrossAttention(8, heads=2).to(dt)
    h_cdr, h_epi = torch.randn(3, 8, generator=g, dtype=dt), torch.randn(4, 8, generator=g, dtype=dt)
    out["hyperbolic_attention"] = fd_relative_error(lambda: attn(h_cdr, h_epi)[0].mean(), list(attn.parameters()))

    head = MdnPottsHead(d_in=12, d_hidden=10, n_components=2, dropout=0.0).to(dt)
    with torch.no_grad():
        head.coupling.normal_(0.0, 0.5, generator=g)
    feats = torch.randn(4, 12, generator=g, dtype=dt)
    out["bp_coupling"] = fd_relative_error(lambda: -torch.log(head(feats).mixture_dist[0, 3]), [head.coupling])

    x = torch.randn(5, 20, generator=g, dtype=dt).requires_grad_()
    target = torch.nn.functional.one_hot(torch.randint(0, 20, (5,), generator=g), 20).to(dt)
    out["gdpp"] = fd_relative_error(lambda: gdpp_loss(torch.softmax(x, -1), target), [x])

    mlp = torch.nn.Sequential(torch.nn.Linear(6, 6), torch.nn.Tanh(), torch.nn.Linear(6, 6)).to(dt)
    aa = torch.randn(20, 6, generator=g, dtype=dt).requires_grad_()
    ag = torch.randn(3, 6, generator=g, dtype=dt).requires_grad_()
    logits = [torch.randn(n, 20, generator=g, dtype=dt).requires_grad_() for n in (3, 4, 5)]
    out["info_nce"] = fd_relative_error(
        lambda: antigen_cls_loss([torch.softmax(z, -1) for z in logits], ag, aa, mlp),
        [aa, ag, *logits, *mlp.parameters()])

    pred = torch.randn(4, 3, generator=g, dtype=dt).mul(3).requires_grad_()
    true = torch.randn(4, 3, generator=g, dtype=dt).mul(3)
    epi = torch.randn(5, 3, generator=g, dtype=dt).mul(3)
    out["shadow"] = fd_relative_error(lambda: shadow_loss(pred, true, epi), [pred])
    return out


# ---------------------------------------------------------------------------
# cross-entropy ceiling


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex."""
    v = np.atleast_2d(v)
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    k = np.arange(1, v.shape[1] + 1)
    rho = (u - css / k > 0).sum(axis=1)
    theta = css[np.arange(len(v)), rho - 1] / rho
    return np.maximum(v - theta[:, None], 0.0)


def ceiling_check(seqs, n_perturb: int = 100, scale: float = 0.02, seed: int = 0):
    """(|oracle CE - mean positional entropy|, number of perturbations that beat the oracle, oracle)."""
    oracle = MarginalOracle.fit(seqs)
    ce = cross_entropy(oracle.table, seqs)
    gap = abs(ce - oracle.mean_positional_entropy(seqs))
    rng = np.random.default_rng(seed)
    beaten = 0
    for _ in range(n_perturb):
        pert = project_to_simplex(oracle.table + scale * rng.standard_normal(oracle.table.shape))
        if cross_entropy(pert, seqs) < ce:
            beaten += 1
    return gap, beaten, oracle


# ---------------------------------------------------------------------------
# loss identities


def loss_identities() -> dict:
    w = LossWeights()
    unit = {k: torch.tensor(1.0, dtype=torch.float64) for k in ("seq", "coord", "shadow", "gdpp", "cls")}
    s = AnnealSchedule()
    eq = amcl_weights(torch.full((4,), 1.7, dtype=torch.float64), 0.3)
    B = 6
    onehot = torch.nn.functional.one_hot(torch.arange(5) % 20, 20).double()
    return {
        "total_unit": abs(total_loss(unit, w)[0].item() - 3.215),
        "tau_start": abs(tau_at(0, s) - 2.0),
        "tau_end": abs(tau_at(20, s) - 0.1),
        "tau_mid": abs(tau_at(10, s) - 2.0 * math.sqrt(0.05)),
        "amcl_uniform": (eq - 0.25).abs().max().item(),
        "gdpp_identical": abs(gdpp_loss(onehot, onehot).item()),
        "info_nce_zero": abs(info_nce(torch.zeros(B, 4, dtype=torch.float64),
                                      torch.randn(B, 4, dtype=torch.float64)).item() - math.log(B)),
    }


def run_all(seed: int = 0, n_complexes: int = 4, n_motions: int = 5) -> list[Check]:
    checks = []
    cx, _ = generate(GenConfig(n_complexes=n_complexes, seed=seed))
    c_err, l_err = equivariance_errors(cx, DESK, n_motions, seed)
    checks.append(check("equivariance.coordinates", c_err, 1e-8, f"{n_complexes} complexes x {n_motions} motions"))
    checks.append(check("equivariance.logits", l_err, 1e-8))
    for name, err in gradient_errors(seed).items():
        checks.append(check(f"gradient.{name}", err, 1e-4))
    train, _ = generate(GenConfig(n_complexes=200, seed=seed + 1, dependence=0.9))
    gap, beaten, _ = ceiling_check([c.cdr_seq for c in train], seed=seed)
    checks.append(check("ceiling.ce_equals_entropy", gap, 1e-10))
    checks.append(check("ceiling.perturbations_beating_oracle", beaten, 0))
    for name, err in loss_identities().items():
        checks.append(check(f"identity.{name}", err, 1e-9 if name != "tau_mid" else 1e-6))
    return checks
