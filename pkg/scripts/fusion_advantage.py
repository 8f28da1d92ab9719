"""Per-seed test MAE for full / w/o CA / w/o Gate / text-only against the text-only floor.

    python3 scripts/fusion_advantage.py --seeds 5 --out runs/fusion_advantage.csv
"""
import argparse
import csv
import dataclasses
import time

import numpy as np

from pgfnet.data import text_only_floor
from pgfnet.experiments import RunConfig, load_dataset, train_model
from pgfnet.metrics import evaluate
from pgfnet.model import AblationFlags

VARIANTS = {"full": {}, "w/o CA": {"ablation": AblationFlags(use_cross_attention=False)},
            "w/o Gate": {"ablation": AblationFlags(use_gate=False)}, "text-only": {"fusion_start": 2}}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    base = RunConfig()
    split = load_dataset(base)
    floor, se = text_only_floor(base.data)
    print(f"text-only floor {floor:.4f} (SE {se:.1e})")
    rows = []
    for seed in range(args.seeds):
        for name, overrides in VARIANTS.items():
            run = dataclasses.replace(base, seed=seed, model=base.model.replace(**overrides))
            start = time.perf_counter()
            model, history, _ = train_model(run, split)
            rows.append({"variant": name, "seed": seed, "test_mae": evaluate(model, split.test).mae,
                         "epochs": len(history), "seconds": round(time.perf_counter() - start, 1)})
            print(rows[-1], flush=True)
    for name in VARIANTS:
        vals = [r["test_mae"] for r in rows if r["variant"] == name]
        print(f"{name:10s} mean {np.mean(vals):.4f} sd {np.std(vals, ddof=1):.4f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
