"""Ablation grid: module toggles, prompt size, loss weight, combination weights, fusion order.

Every axis expands into a list of cells; a cell is a label plus config
overrides applied on top of a base config.  Cells are trained with the same
seed and data and reported one CSV row each, in axis order.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Sequence

from .config import ConfigError, ModelConfig
from .train import train

log = logging.getLogger(__name__)

# module rows, from the baseline (cross-modal features only) up to the full model
MODULE_ROWS = {
    "BL": dict(gm=False, cs=False, lf=False, pf=False, alpha=0.0),
    "+GM_w/o_cs&LF": dict(gm=True, cs=False, lf=True, pf=False),
    "+GM&LF": dict(gm=True, cs=True, lf=True, pf=False),
    "+GM&LF+PF": dict(gm=True, cs=True, lf=True, pf=True),
}
PROMPT_SIZES = (4, 8, 16, 32, 64, 128, 256)
ETAS = (0.01, 0.05, 0.1, 0.5, 1.0)
COMBINATION_WEIGHTS = (0.01, 0.1, 1.0)
FUSION_ORDERS = ("I>L>MM", "L>I>MM")

METRIC_COLUMNS = ["open_acc", "closed_acc", "overall_acc", "n_params", "config_hash", "seed", "epochs_run", "wall_time"]


@dataclass(frozen=True)
class Cell:
    axis: str
    label: str
    overrides: dict


def _modules():
    return [Cell("modules", name, dict(o)) for name, o in MODULE_ROWS.items()]


def _prompt_size():
    return [Cell("prompt_size", str(p), {"prompt_size": p}) for p in PROMPT_SIZES]


def _eta():
    return [Cell("eta", f"{e:g}", {"eta": e}) for e in ETAS]


def _theta_beta():
    return [
        Cell("theta_beta", f"theta={t:g},beta={b:g}", {"theta": t, "beta": b})
        for t, b in product(COMBINATION_WEIGHTS, COMBINATION_WEIGHTS)
    ]


def _fusion_order():
    return [Cell("fusion_order", o, {"fusion_order": o}) for o in FUSION_ORDERS]


AXES = {
    "modules": _modules,
    "prompt_size": _prompt_size,
    "eta": _eta,
    "theta_beta": _theta_beta,
    "fusion_order": _fusion_order,
}
# config keys shown as their own CSV columns
AXIS_KEYS = {
    "modules": ["gm", "cs", "lf", "pf", "alpha"],
    "prompt_size": ["prompt_size"],
    "eta": ["eta"],
    "theta_beta": ["theta", "beta"],
    "fusion_order": ["fusion_order"],
}


def cells(axis: str) -> list[Cell]:
    try:
        return AXES[axis]()
    except KeyError:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}") from None


def cell_config(base: ModelConfig, cell: Cell) -> ModelConfig:
    return base.replace(**cell.overrides).validate()


def run_cell(base: ModelConfig, cell: Cell, data: dict, split: str = "test", cell_dir: Path | None = None) -> dict:
    config = cell_config(base, cell)
    _, report = train(config, data)
    metrics = report.metrics.get(split) or report.metrics["val"]
    row = {"axis": cell.axis, "setting": cell.label}
    row.update({k: getattr(config, k) for k in AXIS_KEYS[cell.axis]})
    row.update(
        open_acc=metrics["open_acc"],
        closed_acc=metrics["closed_acc"],
        overall_acc=metrics["overall_acc"],
        n_params=report.n_parameters,
        config_hash=report.config_hash,
        seed=config.seed,
        epochs_run=len(report.epochs),
        wall_time=round(report.wall_time, 3),
    )
    if cell_dir is not None:
        cell_dir.mkdir(parents=True, exist_ok=True)
        name = cell.label.replace("/", "_").replace(",", "_").replace("=", "").replace(">", "")
        report.save(cell_dir / f"{name}.json")
    log.info("%s %s overall %.2f", cell.axis, cell.label, row["overall_acc"])
    return row


def _run_job(job):
    return run_cell(*job)


def run_axis(
    axis: str,
    base: ModelConfig,
    data: dict,
    out_dir=None,
    workers: int = 1,
    split: str = "test",
) -> list[dict]:
    """Train every cell of `axis`; rows come back (and are written) in axis order."""
    todo = cells(axis)
    for cell in todo:
        cell_config(base, cell)  # refuse the whole axis before spending any compute
    cell_dir = Path(out_dir) / "cells" / axis if out_dir is not None else None
    jobs = [(base, cell, data, split, cell_dir) for cell in todo]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_job, jobs))
    else:
        rows = [_run_job(job) for job in jobs]
    if out_dir is not None:
        write_csv(rows, Path(out_dir) / f"{axis}.csv", ["axis", "setting", *AXIS_KEYS[axis], *METRIC_COLUMNS])
        if axis == "theta_beta":
            write_grid(rows, Path(out_dir) / "theta_beta_grid.csv")
    return rows


def write_csv(rows: Sequence[dict], path, columns: Sequence[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if row.get(k) is None else row[k] for k in columns})


def write_grid(rows: Sequence[dict], path) -> None:
    """Overall accuracy as a theta (rows) by beta (columns) table."""
    acc = {(r["theta"], r["beta"]): r["overall_acc"] for r in rows}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["theta\\beta", *[f"{b:g}" for b in COMBINATION_WEIGHTS]])
        for t in COMBINATION_WEIGHTS:
            writer.writerow([f"{t:g}", *[acc[(t, b)] for b in COMBINATION_WEIGHTS]])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def summary(rows: Sequence[dict]) -> str:
    return json.dumps([{k: r[k] for k in ("axis", "setting", "overall_acc", "n_params")} for r in rows], indent=1)
