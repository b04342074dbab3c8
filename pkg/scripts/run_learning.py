"""Train the default config on the shipped synthetic dataset and print the per-epoch trace.

    python scripts/run_learning.py --out runs/learning
"""

import argparse
import json
from pathlib import Path

from lapa import ModelConfig, SyntheticSpec, generate, train


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/learning")
    parser.add_argument("--epochs", type=int, default=200)
    parser.add_argument("--target", type=float, default=90.0, help="stop at this val accuracy; 0 runs every epoch")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--noise", type=float, default=0.0)
    args = parser.parse_args()

    d = generate(SyntheticSpec(seed=7, noise=args.noise))
    data = {"train": d.train, "val": d.val, "test": d.test, "vocab": d.vocab, "graph": d.graph}
    config = ModelConfig(epochs=args.epochs, target_val_acc=args.target, seed=args.seed)

    def progress(e):
        print(f"epoch {e.epoch:3d} loss {e.loss:.5f} val {e.val_overall:.2f}", flush=True)

    model, report = train(config, data, on_epoch=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.toml")
    model.save(out / "checkpoint.npz")
    report.save(out / "report.json")
    print(json.dumps(report.metrics, indent=1))
    print(f"{len(report.epochs)} epochs, {report.wall_time:.1f}s -> {out}")


if __name__ == "__main__":
    main()
