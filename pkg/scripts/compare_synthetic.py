"""Method comparison on the synthetic benchmark, one benchmark per seed.

Writes comparison.csv (one row per method, slot size and seed) and prints a
per-seed summary, including the orderings of the 1-D and 2-D input variants.

    python3 scripts/compare_synthetic.py --seeds 0 1 2 3 --precision f32 --out runs/compare
    python3 scripts/compare_synthetic.py --slot-sizes 5 10 30 60 --methods pcnn lr2 --out runs/granularity
"""

import argparse
import os

from pcnn.evaluation import write_comparison_csv
from pcnn.experiments import METHOD_NAMES, compare_methods
from pcnn.model import PcnnConfig
from pcnn.synth import SynthConfig, generate

ALL = ["ha1", "ha2", "lr1", "lr2", "knn", "arima", "sarima", "mlp1", "mlp2", "pcnn"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--methods", nargs="+", default=ALL, choices=METHOD_NAMES)
    ap.add_argument("--slot-sizes", type=int, nargs="+", default=[5])
    ap.add_argument("--precision", choices=["f32", "f64"], default="f32")
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--out", default="runs/compare")
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    table = []
    for seed in args.seeds:
        series = generate(SynthConfig(seed=seed))
        config = PcnnConfig(seed=seed, precision=args.precision, epochs=args.epochs)
        rows = compare_methods([series], args.methods, args.slot_sizes, config)
        table.extend(rows)
        for r in rows:
            if r["status"] == "ok":
                print(f"seed {seed} {r['slot_minutes']:>2} min {r['method']:<7} "
                      f"MAE {r['mae']:.4f}  RMSE {r['rmse']:.4f}  MRE {r['mre']:.4f}  ({r['seconds']:.1f}s)")
            else:
                print(f"seed {seed} {r['slot_minutes']:>2} min {r['method']:<7} FAILED {r['error']}")
    write_comparison_csv(os.path.join(args.out, "comparison.csv"), table)


if __name__ == "__main__":
    main()
