"""Run every ablation axis on the shipped synthetic dataset and write one CSV per axis.

    python scripts/run_ablation.py --out runs/ablation --epochs 30 --workers 1
"""

import argparse

from lapa import ModelConfig, SyntheticSpec, generate
from lapa.ablate import AXES, read_csv, run_axis


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/ablation")
    parser.add_argument("--axis", action="append", choices=list(AXES))
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args()

    d = generate(SyntheticSpec(seed=7))
    data = {"train": d.train, "val": d.val, "test": d.test, "vocab": d.vocab, "graph": d.graph}
    base = ModelConfig(epochs=args.epochs, seed=args.seed)
    for axis in args.axis or list(AXES):
        rows = run_axis(axis, base, data, out_dir=args.out, workers=args.workers)
        print(f"== {axis}")
        for r in rows:
            print(f"  {r['setting']:<22} open {r['open_acc']:6.2f} closed {r['closed_acc']:6.2f} "
                  f"overall {r['overall_acc']:6.2f} params {r['n_params']}")
    if "theta_beta" in (args.axis or list(AXES)):
        print("== theta (rows) x beta (columns), overall accuracy")
        grid = read_csv(f"{args.out}/theta_beta_grid.csv")
        for row in [dict(zip(grid[0], grid[0])), *grid]:
            print("  " + "  ".join(f"{v:>10}" for v in row.values()))


if __name__ == "__main__":
    main()
