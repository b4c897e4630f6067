"""Command-line entry point: generate, train, infer, diagnose, verify."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .complex_model import ComplexError, load_complexes
from .model import DESK, ModelConfig
from .objective import AnnealSchedule, LossWeights
from .synthetic import GenConfig

OUT_ENV = "CDRDESIGN_OUT"
ABLATIONS = {
    "no_hyp_attn": "hyperbolic_attention",
    "no_cls_loss": "antigen_cls_loss",
    "no_gdpp": "gdpp_loss",
    "no_plm": "plm_features",
    "no_fw_dropout": "framework_dropout",
}


class UsageError(Exception):
    pass


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def read_config(path) -> dict:
    """Sectioned JSON config; a run manifest is accepted too (its ``config`` entry is used)."""
    if path is None:
        return {}
    obj = json.loads(Path(path).read_text())
    return obj.get("config", obj) if "command" in obj else obj


def resolve(cls, section: dict, overrides: dict, base=None):
    """Dataclass instance with precedence: explicit flag > config section > ``base`` / defaults."""
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys in config: {sorted(unknown)}")
    values = asdict(base) if base is not None else {}
    values.update(section)
    values.update({k: v for k, v in overrides.items() if v is not None and k in names})
    for k, v in values.items():
        if isinstance(v, list):
            values[k] = tuple(v)
    return cls(**values)


def write_manifest(path: Path, command: str, config: dict, seed, artifacts: dict, **extra) -> Path:
    manifest = {"command": command, "version": __version__, "seed": seed, "config": config,
                "artifacts": {k: str(v) for k, v in artifacts.items()}, **extra}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    from .synthetic import generate, labels_path_for, write_dataset
    conf = read_config(args.config)
    out = args.out or conf.get("paths", {}).get("out")
    if out is None:
        raise UsageError("generate: --out is required")
    gen = resolve(GenConfig, conf.get("generate", {}), {
        "n_complexes": args.n, "seed": args.seed, "dependence": args.rho, "n_antigen_classes": args.classes,
        "noise": args.noise, "cdr_length": tuple(args.cdr_len) if args.cdr_len else None})
    complexes, labels = generate(gen, workers=args.workers)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, complexes, labels)
    write_manifest(out.with_name(out.stem + ".manifest.json"), "generate",
                   {"generate": asdict(gen), "paths": {"out": str(out)}}, gen.seed,
                   {"complexes": out, "labels": labels_path_for(out)}, workers=args.workers)
    print(f"wrote {len(complexes)} complexes to {out}")
    return 0


def _train_configs(args, conf):
    ab = {k: bool(getattr(args, k, False)) or bool(conf.get("ablations", {}).get(k, False)) for k in ABLATIONS}
    base_model = DESK if (args.desk or conf.get("desk")) else ModelConfig()
    model_over = {"n_components": args.k}
    if ab["no_hyp_attn"]:
        model_over["hyperbolic"] = False
    if ab["no_plm"]:
        model_over["use_plm"] = False
    model_cfg = resolve(ModelConfig, conf.get("model", {}), model_over, base_model)
    from .trainer import TrainConfig
    train_cfg = resolve(TrainConfig, conf.get("train", {}), {
        "lr": args.lr, "batch_size": args.batch_size, "max_epochs": args.epochs, "patience": args.patience,
        "seed": args.seed})
    loss_over = {}
    if ab["no_cls_loss"]:
        loss_over["lambda_cls"] = 0.0
    if ab["no_gdpp"]:
        loss_over["epsilon"] = 0.0
    if ab["no_fw_dropout"]:
        loss_over["fw_dropout_p"] = 0.0
    weights = resolve(LossWeights, conf.get("loss", {}), loss_over)
    schedule = resolve(AnnealSchedule, conf.get("schedule", {}), {"anneal_epochs": args.anneal_epochs})
    return model_cfg, train_cfg, weights, schedule, ab


def cmd_train(args) -> int:
    from .trainer import prepare, train
    conf = read_config(args.config)
    paths = conf.get("paths", {})
    train_path = args.train or paths.get("train")
    if train_path is None:
        raise UsageError("train: --train is required")
    val_path = args.val or paths.get("val")
    plm_dir = args.plm_dir or paths.get("plm_dir")
    out_dir = Path(args.out_dir or paths.get("out_dir") or default_out_dir() / "train")
    if args.patience is None and args.epochs is not None and "patience" not in conf.get("train", {}):
        args.patience = min(10, args.epochs)
    model_cfg, train_cfg, weights, schedule, ab = _train_configs(args, conf)

    train_cx = load_complexes(train_path)
    val_cx = load_complexes(val_path) if val_path else []
    tr = prepare(train_cx, model_cfg, plm_dir=plm_dir)
    va = prepare(val_cx, model_cfg, plm_dir=plm_dir)
    stub = any(e.plm_is_stub for e in tr + va) if model_cfg.use_plm else False
    result = train(tr, va, model_cfg, train_cfg, weights, schedule, out_dir=out_dir, verbose=True)
    disabled = [ABLATIONS[k] for k, on in ab.items() if on]
    if model_cfg.n_components == 1:
        disabled.append("mixture_components")
    config = {"model": asdict(model_cfg), "train": asdict(train_cfg), "loss": asdict(weights),
              "schedule": asdict(schedule), "ablations": ab,
              "paths": {"train": str(train_path), "val": str(val_path) if val_path else None,
                        "plm_dir": str(plm_dir) if plm_dir else None, "out_dir": str(out_dir)}}
    write_manifest(out_dir / "manifest.json", "train", config, train_cfg.seed,
                   {"checkpoint": result.checkpoint, "log": out_dir / "train_log.csv"},
                   disabled_components=disabled, plm_stub=stub, best_epoch=result.best_epoch,
                   best_val_loss=result.best_val, epochs_run=len(result.history), stopped_early=result.stopped_early)
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs; best epoch {result.best_epoch} val {result.best_val:.4f}; "
          f"last train {last['train_loss']:.4f}; checkpoint {result.checkpoint}")
    return 0


def cmd_infer(args) -> int:
    from .trainer import infer, load_model, prepare
    conf = read_config(args.config)
    paths = conf.get("paths", {})
    ckpt = args.checkpoint or paths.get("checkpoint")
    data = args.data or paths.get("data")
    if ckpt is None or data is None:
        raise UsageError("infer: --checkpoint and --data are required")
    out = Path(args.out or paths.get("out") or default_out_dir() / "predictions.jsonl")
    plm_dir = args.plm_dir or paths.get("plm_dir")
    model, meta = load_model(ckpt)
    complexes = load_complexes(data)
    examples = prepare(complexes, model.cfg, mode="infer", plm_dir=plm_dir)
    preds = infer(model, examples, batch_size=args.batch_size)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_json()) + "\n")
    stub = any(e.plm_is_stub for e in examples) if model.cfg.use_plm else False
    write_manifest(out.with_name(out.stem + ".manifest.json"), "infer",
                   {"paths": {"checkpoint": str(ckpt), "data": str(data), "out": str(out),
                              "plm_dir": str(plm_dir) if plm_dir else None}},
                   meta.get("train_config", {}).get("seed"), {"predictions": out},
                   plm_stub=stub, checkpoint_fingerprint=meta.get("fingerprint"))
    print(f"wrote {len(preds)} predictions to {out}")
    return 0


def read_predictions(path):
    from .trainer import Prediction
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(Prediction.from_json(json.loads(line)))
                except (json.JSONDecodeError, KeyError, ValueError) as e:
                    raise ComplexError(f"{path}:{n}: bad prediction record: {e}") from e
    return out


def cmd_diagnose(args) -> int:
    from .diagnostics import evaluate
    conf = read_config(args.config)
    paths = conf.get("paths", {})
    pred_path = args.predictions or paths.get("predictions")
    truth_path = args.truth or paths.get("truth")
    if pred_path is None or truth_path is None:
        raise UsageError("diagnose: --predictions and --truth are required")
    train_path = args.train or paths.get("train")
    out_dir = Path(args.out_dir or paths.get("out_dir") or default_out_dir() / "diagnose")
    preds = read_predictions(pred_path)
    truth = load_complexes(truth_path)
    train_seqs = [c.cdr_seq for c in load_complexes(train_path)] if train_path else None
    pred_manifest = Path(pred_path).with_name(Path(pred_path).stem + ".manifest.json")
    meta = {}
    if pred_manifest.exists():
        meta["plm_stub"] = json.loads(pred_manifest.read_text()).get("plm_stub")
    report = evaluate(preds, truth, train_seqs, meta=meta, workers=args.workers)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_json(out_dir / "report.json")
    report.to_csv(out_dir / "report.csv", run=args.run_name)
    write_manifest(out_dir / "manifest.json", "diagnose",
                   {"paths": {"predictions": str(pred_path), "truth": str(truth_path),
                              "train": str(train_path) if train_path else None, "out_dir": str(out_dir)}},
                   None, {"report_json": out_dir / "report.json", "report_csv": out_dir / "report.csv"},
                   workers=args.workers)
    agg = report.aggregate
    print(" ".join(f"{k}={agg[k]:.4f}" for k in ("aar", "ppl", "rmsd", "fnat", "dockq", "effective_vocabulary")
                   if isinstance(agg.get(k), float)))
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all
    checks = run_all(seed=args.seed)
    for c in checks:
        print(c.line())
    return 0 if all(c.passed for c in checks) else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cdrdesign", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic complex set")
    g.add_argument("--out", help="output JSONL path (labels CSV and manifest are written alongside)")
    g.add_argument("--n", type=int, help="number of complexes")
    g.add_argument("--seed", type=int)
    g.add_argument("--rho", type=float, help="probability a CDR position follows its class profile")
    g.add_argument("--classes", type=int, help="number of antigen classes")
    g.add_argument("--noise", type=float, help="coordinate noise in Angstrom")
    g.add_argument("--cdr-len", type=int, nargs=2, metavar=("MIN", "MAX"))
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--config")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit a model")
    t.add_argument("--train")
    t.add_argument("--val")
    t.add_argument("--out-dir")
    t.add_argument("--config")
    t.add_argument("--plm-dir", help="directory of <id>.npy language-model matrices")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--anneal-epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--k", type=int, help="number of mixture components")
    t.add_argument("--desk", action="store_true", help="reduced widths for CPU runs")
    for flag in ABLATIONS:
        t.add_argument("--" + flag.replace("_", "-"), dest=flag, action="store_true")
    t.add_argument("--workers", type=int, default=1, help="accepted for symmetry; training is single-stream")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="greedy decoding with a checkpoint")
    i.add_argument("--checkpoint")
    i.add_argument("--data")
    i.add_argument("--out")
    i.add_argument("--plm-dir")
    i.add_argument("--batch-size", type=int, default=8)
    i.add_argument("--config")
    i.set_defaults(func=cmd_infer)

    d = sub.add_parser("diagnose", help="score predictions against native complexes")
    d.add_argument("--predictions")
    d.add_argument("--truth")
    d.add_argument("--train", help="training set for the positional-marginal oracle")
    d.add_argument("--out-dir")
    d.add_argument("--run-name", default="run")
    d.add_argument("--workers", type=int, default=1)
    d.add_argument("--config")
    d.set_defaults(func=cmd_diagnose)

    v = sub.add_parser("verify", help="run the property suite on a random-init model")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        ap.error(str(e))  # exits with status 2
    except (ComplexError, ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
