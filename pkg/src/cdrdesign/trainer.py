"""Training loop with annealed aMCL, framework dropout, clipping and early stopping; greedy inference."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from safetensors.torch import load_file, save_file

from .complex_model import decode_tokens
from .data import Example, GraphBatch, collate, make_example
from .mdn import greedy_decode
from .model import CoDesignModel, ModelConfig
from .objective import (AnnealSchedule, LossWeights, NonFiniteLossError, antigen_cls_loss, coord_loss,
                        gdpp_loss, mixing_loss, sequence_loss, shadow_epitope, shadow_loss, tau_at, total_loss)

log = logging.getLogger(__name__)

CA = 1
LOG_TERMS = ("seq", "coord", "shadow", "gdpp", "cls", "mix")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2.2e-4
    gamma: float = 0.955
    batch_size: int = 8
    max_epochs: int = 50
    patience: int = 10
    grad_clip: float = 0.5
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for k in ("lr", "gamma", "batch_size", "max_epochs", "patience", "grad_clip"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


def prepare(complexes, cfg: ModelConfig, mode: str = "train", plm_dir=None) -> list[Example]:
    """Build graphs (and language-model rows) once per complex."""
    return [make_example(cx, mode, cfg.knn_k, cfg.radial_intra, cfg.radial_inter, plm_dir, cfg.use_plm)
            for cx in complexes]


def batches(examples, batch_size: int, order=None, dtype=torch.float32):
    idx = np.arange(len(examples)) if order is None else order
    for s in range(0, len(idx), batch_size):
        yield collate([examples[i] for i in idx[s:s + batch_size]], dtype)


def loss_terms(model: CoDesignModel, batch: GraphBatch, tau: float, weights: LossWeights = LossWeights(),
               fw_dropout: float = 0.0, generator=None):
    """Forward pass and every loss term; returns (terms, model output, aMCL weights)."""
    out = model(batch, fw_dropout=fw_dropout, generator=generator)
    pred, n_items = out.pred, batch.n_items
    seq, _, w = sequence_loss(pred, batch.cdr_target, tau, weights.lambda_pair, batch.cdr_segment,
                              batch.cdr_item, n_items)
    terms = {"seq": seq}
    terms["coord"] = coord_loss(out.cdr_atoms, batch.true_cdr_atoms)

    slices = batch.cdr_slices()
    true_ca = batch.true_cdr_atoms[:, CA]
    pred_ca = out.cdr_atoms[:, CA]
    epi_ca = batch.node_coords[batch.epitope_nodes, CA]
    shadows = []
    for b, sl in enumerate(slices):
        shadow_set = shadow_epitope(true_ca[sl], epi_ca[batch.epitope_item == b])
        shadows.append(shadow_loss(pred_ca[sl], true_ca[sl], shadow_set))
    terms["shadow"] = torch.stack(shadows).mean()

    if weights.epsilon > 0:
        if model.training:
            active = w.argmax(dim=1)
        else:
            active = torch.stack([pred.mixing[sl].mean(0).argmax() for sl in slices])
        beliefs = pred.beliefs
        onehot = F.one_hot(batch.cdr_target, 20)
        terms["gdpp"] = torch.stack([
            gdpp_loss(beliefs[active[b], sl], onehot[sl], name=batch.ids[b]) for b, sl in enumerate(slices)]).mean()
    if weights.lambda_cls > 0:
        dist = pred.mixture_dist
        terms["cls"] = antigen_cls_loss([dist[sl] for sl in slices], out.antigen_emb,
                                        model.aa_embeddings, model.cls_mlp)
    if pred.n_components > 1:
        terms["mix"] = mixing_loss(pred.mixing, w, batch.cdr_item)
    return terms, out, w


def config_fingerprint(*cfgs) -> str:
    blob = json.dumps([asdict(c) for c in cfgs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path, model: CoDesignModel, optimizer=None, meta: dict | None = None, generator=None) -> None:
    tensors = {f"model.{k}": v.detach().contiguous() for k, v in model.state_dict().items()}
    if optimizer is not None:
        for i, st in optimizer.state_dict()["state"].items():
            for k, v in st.items():
                tensors[f"optim.{i}.{k}"] = torch.as_tensor(v).contiguous()
    tensors["rng.torch"] = torch.get_rng_state()
    if generator is not None:
        tensors["rng.dropout"] = generator.get_state()
    header = dict(meta or {})
    header["model_config"] = model.cfg.to_dict()
    save_file(tensors, str(path), metadata={"meta": json.dumps(header)})


def read_checkpoint(path):
    from safetensors import safe_open
    with safe_open(str(path), framework="pt") as fh:
        meta = json.loads(fh.metadata()["meta"])
    return load_file(str(path)), meta


def load_model(path, dtype=torch.float32) -> tuple[CoDesignModel, dict]:
    tensors, meta = read_checkpoint(path)
    model = CoDesignModel(ModelConfig(**meta["model_config"]))
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    own = model.state_dict()
    bad = [k for k in own if k not in state or own[k].shape != state[k].shape]
    if bad:
        raise ValueError(f"checkpoint {path} does not match the model configuration: {bad[:5]}")
    model.load_state_dict(state)
    return model.to(dtype).eval(), meta


def restore_optimizer(optimizer, tensors) -> None:
    sd = optimizer.state_dict()
    for key, v in tensors.items():
        if key.startswith("optim."):
            _, i, name = key.split(".", 2)
            sd["state"].setdefault(int(i), {})[name] = v
    optimizer.load_state_dict(sd)


@dataclass
class TrainResult:
    model: CoDesignModel
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    stopped_early: bool = False
    checkpoint: Path | None = None


def _mean_terms(acc: dict, n: int) -> dict:
    return {k: v / max(n, 1) for k, v in acc.items()}


def evaluate(model, examples, tau: float, weights: LossWeights, batch_size: int = 8):
    """Mean total loss and per-term means with dropout disabled."""
    model.eval()
    acc, total, n = {k: 0.0 for k in LOG_TERMS}, 0.0, 0
    with torch.no_grad():
        for batch in batches(examples, batch_size):
            terms, _, _ = loss_terms(model, batch, tau, weights)
            t, parts = total_loss(terms, weights)
            total += t.item()
            for k, v in parts.items():
                acc[k] += v.item()
            n += 1
    return total / max(n, 1), _mean_terms(acc, n)


def train(train_examples, val_examples, model_cfg: ModelConfig = ModelConfig(), cfg: TrainConfig = TrainConfig(),
          weights: LossWeights = LossWeights(), schedule: AnnealSchedule = AnnealSchedule(), out_dir=None,
          verbose: bool = False, on_epoch=None) -> TrainResult:
    """Fit a model; keeps the lowest-validation-loss weights and stops after ``patience`` idle epochs."""
    if not train_examples:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    model = CoDesignModel(model_cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    shuffle = np.random.default_rng(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=cfg.gamma)
    fingerprint = config_fingerprint(model_cfg, cfg, weights, schedule)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model)
    best_state, idle = None, 0
    header = ["epoch", "tau", "lr", "fw_dropout_p", "train_loss", "val_loss", "seconds"] + [f"train_{k}" for k in LOG_TERMS]

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        tau = tau_at(epoch, schedule)
        lr = opt.param_groups[0]["lr"]
        model.train()
        acc, total, n = {k: 0.0 for k in LOG_TERMS}, 0.0, 0
        for batch in batches(train_examples, cfg.batch_size, shuffle.permutation(len(train_examples))):
            terms, _, _ = loss_terms(model, batch, tau, weights, weights.fw_dropout_p, gen)
            try:
                loss, parts = total_loss(terms, weights)
            except NonFiniteLossError as e:
                raise NonFiniteLossError(f"epoch {epoch}, batch {batch.ids}: {e}") from e
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            total += loss.item()
            for k, v in parts.items():
                acc[k] += v.item()
            n += 1
        sched.step()
        train_loss = total / n
        val_loss, _ = evaluate(model, val_examples or train_examples, tau, weights, cfg.batch_size)
        row = {"epoch": epoch, "tau": tau, "lr": lr, "fw_dropout_p": weights.fw_dropout_p,
               "train_loss": train_loss, "val_loss": val_loss, "seconds": time.perf_counter() - t0}
        row.update({f"train_{k}": v for k, v in _mean_terms(acc, n).items()})
        result.history.append(row)
        if on_epoch is not None:
            on_epoch(epoch, model, row)
        if verbose:
            log.info("epoch %d tau %.3f train %.4f val %.4f", epoch, tau, train_loss, val_loss)

        if val_loss < result.best_val:
            result.best_val, result.best_epoch, idle = val_loss, epoch, 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if out_dir is not None:
                meta = {"epoch": epoch, "best_val": val_loss, "fingerprint": fingerprint,
                        "train_config": asdict(cfg), "loss_weights": asdict(weights),
                        "schedule": asdict(schedule), "numpy_rng": shuffle.bit_generator.state}
                result.checkpoint = out_dir / "checkpoint.safetensors"
                save_checkpoint(result.checkpoint, model, opt, meta, gen)
        else:
            idle += 1
        if out_dir is not None:
            with open(out_dir / "train_log.csv", "w", newline="") as fh:
                wr = csv.DictWriter(fh, fieldnames=header)
                wr.writeheader()
                wr.writerows(result.history)
        if idle >= cfg.patience:
            result.stopped_early = epoch + 1 < cfg.max_epochs
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result


@dataclass
class Prediction:
    id: str
    sequence: str
    coords: np.ndarray  # (L, 4, 3) CDR backbone
    mixture: np.ndarray  # (L, 20)
    mixing: np.ndarray  # (L, K)
    top_component: int
    components: np.ndarray | None = None  # (K, L, 20) component beliefs, kept in memory only

    def to_json(self) -> dict:
        return {"id": self.id, "sequence": self.sequence, "coords": self.coords.tolist(),
                "mixture_dist": self.mixture.tolist(), "mixing": self.mixing.tolist(),
                "top_component": self.top_component}

    @classmethod
    def from_json(cls, obj: dict) -> "Prediction":
        mixing = np.asarray(obj.get("mixing", [[1.0]] * len(obj["sequence"])), dtype=np.float64)
        return cls(obj["id"], obj["sequence"], np.asarray(obj["coords"], dtype=np.float64).reshape(-1, 4, 3),
                   np.asarray(obj["mixture_dist"], dtype=np.float64), mixing, int(obj.get("top_component", 0)))


def infer(model: CoDesignModel, examples, batch_size: int = 8, dtype=torch.float32) -> list[Prediction]:
    """Greedy, deterministic decoding of every example's CDRs."""
    model = model.to(dtype).eval()
    out = []
    with torch.no_grad():
        for batch in batches(examples, batch_size, dtype=dtype):
            res = model(batch)
            tokens = greedy_decode(res.pred)
            dist = res.pred.mixture_dist
            for b, sl in enumerate(batch.cdr_slices()):
                mix = res.pred.mixing[sl]
                out.append(Prediction(batch.ids[b], decode_tokens(tokens[sl].tolist()),
                                      res.cdr_atoms[sl].double().numpy(), dist[sl].double().numpy(),
                                      mix.double().numpy(), int(mix.mean(0).argmax()),
                                      res.pred.beliefs[:, sl].double().numpy()))
    return out
