"""Command line: gen-data, train, eval, gradcheck, ablate.

Exit codes: 0 success, 1 validation error (bad flags, config, data or
checkpoint), 2 numeric failure (gradient check over tolerance, non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from .config import ConfigError, ModelConfig
from .data import DataError, SyntheticSpec, generate, load_dataset, write_dataset
from .knowledge import GraphError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("lapa")


class ValidationFailure(Exception):
    pass


def _config(args, default: ModelConfig | None = None) -> ModelConfig:
    config = ModelConfig.load(args.config) if args.config else (default or ModelConfig())
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    return config.replace(**changes).validate()


def _data(path) -> dict:
    if path is None:
        raise ValidationFailure("--data DIR is required")
    return load_dataset(path)


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(
        n_train=args.train,
        n_val=args.val,
        n_test=args.test,
        organs=args.organs,
        diseases=args.diseases,
        seed=args.seed if args.seed is not None else 7,
        image_size=args.image_size,
        noise=args.noise,
    )
    data = generate(spec)
    out = write_dataset(data, args.out, spec)
    print(f"wrote {len(data.train)}/{len(data.val)}/{len(data.test)} samples, {len(data.vocab)} answers to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import check_data, train

    config = _config(args)
    data = _data(args.data)
    check_data(config, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.toml")

    def progress(entry):
        cs = "" if entry.cs is None else f" cs {entry.cs:.4f}"
        val = "" if entry.val_overall is None else f" val {entry.val_overall:.2f}"
        print(f"epoch {entry.epoch:3d} loss {entry.loss:.5f} bce {entry.bce:.5f}{cs}{val}", flush=True)

    model, report = train(config, data, on_epoch=None if args.quiet else progress)
    model.save(out / "checkpoint.npz")
    report.save(out / "report.json")
    print(json.dumps(report.metrics, indent=1))
    print(f"config {report.config_hash}, {report.n_parameters} parameters, {report.wall_time:.1f}s -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .model import LaPA

    if args.checkpoint is None:
        raise ValidationFailure("--checkpoint PATH is required")
    expected = ModelConfig.load(args.config) if args.config else None
    model = LaPA.load(args.checkpoint, expected_config=expected)
    data = _data(args.data)
    if not data.get(args.split):
        raise ValidationFailure(f"split {args.split!r} is missing from {args.data}")
    report = model.evaluate(data[args.split])
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .train import gradcheck_model, tiny_gradcheck_setup

    config = _config(args, ModelConfig.tiny())
    start = time.perf_counter()
    model, samples = tiny_gradcheck_setup(config, seed=args.data_seed)
    groups, _ = gradcheck_model(
        model, samples, h=args.h, tol=args.tol, max_entries=None if args.all else args.max_entries
    )
    elapsed = time.perf_counter() - start
    print(f"{'group':<12}{'checked':>9}{'max rel err':>14}  result")
    for g in groups:
        print(f"{g.group:<12}{g.checked:>9}{g.max_rel_error:>14.3e}  {'pass' if g.passed else 'FAIL'}")
    ok = all(g.passed for g in groups)
    print(f"tol {args.tol:g}, h {args.h:g}, {elapsed:.1f}s: {'all groups pass' if ok else 'gradient check FAILED'}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps([asdict(g) for g in groups], indent=1) + "\n", encoding="utf-8")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    from .ablate import cells, run_axis

    axes = args.axis or ["modules"]
    for axis in axes:
        cells(axis)  # unknown axis -> ConfigError before any training
    config = _config(args)
    data = _data(args.data)
    for axis in axes:
        rows = run_axis(axis, config, data, out_dir=args.out, workers=args.workers, split=args.split)
        print(f"{axis}: {len(rows)} cells -> {Path(args.out) / (axis + '.csv')}")
        for r in rows:
            print(f"  {r['setting']:<22} overall {r['overall_acc']:6.2f}  params {r['n_params']}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lapa", description="Latent-prompt medical VQA at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="generator seed (default 7)")
    p.add_argument("--organs", type=int, default=4)
    p.add_argument("--diseases", type=int, default=8)
    p.add_argument("--train", type=int, default=512)
    p.add_argument("--val", type=int, default=128)
    p.add_argument("--test", type=int, default=128)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian pixel noise sigma in [0, 0.2]")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model, write checkpoint and report")
    p.add_argument("--config", help="flat TOML config (defaults if omitted)")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--quiet", action="store_true", help="no per-epoch lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", help="checkpoint.npz from train")
    p.add_argument("--config", help="refuse the checkpoint unless its config hash matches this file")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--out", help="also write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss on a tiny model")
    p.add_argument("--config", help="tiny config (defaults to the built-in tiny preset)")
    p.add_argument("--seed", type=int, default=None, help="model seed")
    p.add_argument("--data-seed", type=int, default=3, help="seed of the two-sample batch")
    p.add_argument("--tol", type=float, default=1e-5, help="max relative error per group")
    p.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--max-entries", type=int, default=12, help="coordinates probed per tensor")
    p.add_argument("--all", action="store_true", help="probe every coordinate (slow)")
    p.add_argument("--out", help="write the per-group table as JSON")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run ablation axes and write one CSV per axis")
    p.add_argument("--axis", action="append", help="modules, prompt_size, eta, theta_beta, fusion_order (repeatable)")
    p.add_argument("--config", help="base config")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--split", default="test", choices=["val", "test"])
    p.add_argument("--workers", type=int, default=1, help="parallel cell processes")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    from .model import CheckpointError

    try:
        return args.func(args)
    except (ConfigError, DataError, GraphError, CheckpointError, ValidationFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
