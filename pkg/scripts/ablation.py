"""Seven-variant ablation on the default planted dataset; same as ``pgfnet ablate``.

    python3 scripts/ablation.py --seeds 3 --jobs 1 --out runs/ablation
"""
import argparse
from pathlib import Path

from pgfnet.experiments import RunConfig, run_ablation, summarize, write_csv


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(RunConfig(), args.seeds, args.jobs)
    write_csv(rows, out / "ablation.csv")
    table = summarize(rows)
    write_csv(table, out / "ablation_summary.csv")
    for r in table:
        print(f"{r['variant']:22s} params {r['trainable_params']:6d}  val {r['val_mae']:.4f}  "
              f"test {r['test_mae']:.4f} +/- {r['test_mae_std']:.4f}  corr {r['test_corr']:.3f}")


if __name__ == "__main__":
    main()
