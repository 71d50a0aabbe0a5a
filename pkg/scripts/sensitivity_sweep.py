"""Metric curves over the task weight lambda (d fixed at 16) and the embedding size d.

Writes lambda.csv and d.csv under --out. Same computation as `ecogrow sweep`,
but on a freshly generated synthetic panel so it needs no data directory.
"""

import argparse
import csv
from dataclasses import replace
from pathlib import Path

import numpy as np

from ecogrow.config import SWEEP_DIMS, SWEEP_LAMBDAS
from ecogrow.pipeline import prepare, run_variant
from ecogrow.synth import SyntheticSpec, generate
from ecogrow.training import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--gen-seed", type=int, default=0)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--epochs", type=int, default=250)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()

    panel = generate(SyntheticSpec(seed=args.gen_seed))
    prep = prepare(panel, panel.years[-2])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = TrainConfig(epochs=args.epochs)
    for label, key, values in (("lambda", "lam", SWEEP_LAMBDAS), ("d", "d", SWEEP_DIMS)):
        with open(out / f"{label}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([label, "rmse", "mae", "r2"])
            for v in values:
                res = [run_variant(prep, replace(base, seed=s, **{key: v}), "new_companies_next_year")[0]
                       for s in args.seeds]
                row = [float(np.mean([getattr(r, m) for r in res])) for m in ("mean_rmse", "mean_mae", "mean_r2")]
                w.writerow([v, *row])
                print(f"{label}={v}: rmse {row[0]:.2f} mae {row[1]:.2f} r2 {row[2]:.4f}")


if __name__ == "__main__":
    main()
