"""Train briefly under each ablation flag through the CLI and tabulate what the manifests record.

    python scripts/ablation_smoke.py --workdir runs/ablations --epochs 2
"""

import argparse
import json
from pathlib import Path

from cdrdesign.cli import ABLATIONS, main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="runs/ablations")
    ap.add_argument("--n", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    work = Path(args.workdir)
    data = work / "train.jsonl"
    cli(["generate", "--n", str(args.n), "--seed", str(args.seed), "--out", str(data)])
    variants = {"full": []}
    variants.update({k: [f"--{k.replace('_', '-')}"] for k in ABLATIONS})
    variants["k1"] = ["--k", "1"]
    rows = []
    for name, flags in variants.items():
        out = work / name
        code = cli(["train", "--train", str(data), "--out-dir", str(out), "--desk", "--epochs", str(args.epochs),
                    "--seed", str(args.seed), *flags])
        man = json.loads((out / "manifest.json").read_text())
        rows.append((name, code, man["epochs_run"], man["best_val_loss"], ",".join(man["disabled_components"]) or "-"))
    print(f"{'variant':<14} {'exit':>4} {'epochs':>6} {'best val':>9}  disabled")
    for name, code, ep, val, dis in rows:
        print(f"{name:<14} {code:>4} {ep:>6} {val:>9.4f}  {dis}")


if __name__ == "__main__":
    main()
