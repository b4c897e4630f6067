"""Constructed desk-scale experiments: ceiling, ceiling-breaking and conditioning diagnostics."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .diagnostics import MarginalOracle, component_specialization, effective_vocabulary, unique_fraction
from .model import DESK, ModelConfig
from .objective import AnnealSchedule, LossWeights, retrieval_accuracy
from .synthetic import GenConfig, generate
from .trainer import TrainConfig, batches, infer, prepare, train


@dataclass(frozen=True)
class Protocol:
    n_train: int = 1000
    n_val: int = 100
    n_test: int = 200
    seed: int = 11
    dependence: float = 0.9
    n_classes: int = 2
    lr: float = 1e-3
    gamma: float = 0.955
    batch_size: int = 8
    max_epochs: int = 14
    patience: int = 4
    anneal_epochs: int = 10
    train_seed: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, gamma=self.gamma, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, seed=self.train_seed)


@dataclass
class Split:
    train: list
    val: list
    test: list
    oracle: MarginalOracle

    @property
    def oracle_test_aar(self) -> float:
        return self.oracle.aar([c.cdr_seq for c in self.test])


def make_split(p: Protocol = Protocol()) -> Split:
    """Train, validation and test sets drawn from one seeded stream; the oracle is fit on train only."""
    n = p.n_train + p.n_test + p.n_val
    cx, _ = generate(GenConfig(n_complexes=n, seed=p.seed, dependence=p.dependence, n_antigen_classes=p.n_classes))
    tr, te, va = cx[:p.n_train], cx[p.n_train:p.n_train + p.n_test], cx[p.n_train + p.n_test:]
    return Split(tr, va, te, MarginalOracle.fit([c.cdr_seq for c in tr]))


@dataclass
class RunSummary:
    k: int
    test_aar: float
    unique: float
    ev: float
    specialization: object
    retrieval_mean: float
    retrieval_se: float
    retrieval_batch: int
    epochs: int
    seconds: float
    history: list = field(default_factory=list)
    predictions: list = field(default_factory=list)

    def line(self) -> str:
        return (f"K={self.k}: test AAR {self.test_aar:.4f}, unique {self.unique:.1%}, EV {self.ev:.2f}, "
                f"retrieval {self.retrieval_mean:.3f} +- {self.retrieval_se:.3f} (B={self.retrieval_batch}), "
                f"{self.epochs} epochs, {self.seconds:.0f} s")


def pooled_aar(predictions, complexes) -> float:
    hits = sum(sum(a == b for a, b in zip(p.sequence, c.cdr_seq)) for p, c in zip(predictions, complexes))
    return hits / sum(len(c.cdr_seq) for c in complexes)


def retrieval_stats(model, examples, batch_size: int = 8):
    """Mean and standard error of per-batch antigen retrieval from soft sequences; full batches only."""
    accs = []
    model.eval()
    with torch.no_grad():
        for batch in batches(examples, batch_size):
            if batch.n_items < batch_size:
                continue
            out = model(batch)
            c = model.soft_sequence_embedding(out.pred.mixture_dist, batch.cdr_item, batch.n_items)
            accs.append(retrieval_accuracy(c, out.antigen_emb))
    if not accs:
        raise ValueError(f"retrieval needs at least one full batch of {batch_size}")
    accs = np.asarray(accs)
    se = accs.std(ddof=1) / math.sqrt(len(accs)) if len(accs) > 1 else math.inf
    return float(accs.mean()), float(se)


def run(split: Split, k: int, p: Protocol = Protocol(), plain_ce: bool = False, model_cfg: ModelConfig = DESK,
        on_epoch=None) -> RunSummary:
    """Train one configuration under the protocol and summarize it on the test set.

    ``plain_ce`` switches off the classification and GDPP terms, which with
    ``k=1`` leaves a cross-entropy sequence model with the structural losses.
    """
    cfg = model_cfg.replace(n_components=k)
    weights = LossWeights(lambda_cls=0.0, epsilon=0.0) if plain_ce else LossWeights()
    t0 = time.perf_counter()
    result = train(prepare(split.train, cfg), prepare(split.val, cfg), cfg, p.train_config(), weights,
                   AnnealSchedule(anneal_epochs=p.anneal_epochs), on_epoch=on_epoch)
    test = prepare(split.test, cfg)
    preds = infer(result.model, test, p.batch_size)
    seqs = [q.sequence for q in preds]
    r_mean, r_se = retrieval_stats(result.model, test, p.batch_size)
    return RunSummary(k, pooled_aar(preds, split.test), unique_fraction(seqs), effective_vocabulary(seqs),
                      component_specialization(preds, split.oracle.mode), r_mean, r_se, p.batch_size,
                      len(result.history), time.perf_counter() - t0, result.history, preds)
