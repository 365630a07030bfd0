"""Ablation harness: query-count sweep, single-mask (projector-off)
comparison, and component (visual gate / score estimator) grid.

Each cell trains a fresh model from the shared base config with the cell's
switches applied and evaluates on the validation split.  Failed cells are
recorded, not fatal; partial tables still render.  Cells can run in
parallel worker processes (``jobs > 1``).
"""

from __future__ import annotations

import dataclasses
import json
import tempfile
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import TrainConfig, config_from_dict, config_to_dict
from .reports import (METRIC_COLUMNS, metric_cells, plot_query_sweep,
                      write_study)
from .train import evaluate_model, train

NQ_SWEEP = (1, 2, 4, 8, 16, 24, 32)
MMP_SWEEP = (8, 16, 24)

STUDIES = ("nq", "mmp", "components")


def _cell_config(base: TrainConfig, overrides: dict) -> TrainConfig:
    doc = config_to_dict(base)
    doc["model"].update(overrides)
    return config_from_dict(doc)


def run_cell(args):
    """Train+evaluate one cell; module-level so worker processes can pickle it."""
    base_doc, overrides, seed = args
    try:
        cfg = config_from_dict(base_doc)
        cfg.seed = seed
        cfg = _cell_config(cfg, overrides)
        with tempfile.TemporaryDirectory() as tmp:
            model, _ = train(cfg, tmp)
            from .train import _split_samples
            report = evaluate_model(
                model, _split_samples(cfg, "val", cfg.val_size), cfg.iou_agg)
        return {"ok": True, "overrides": overrides, "seed": seed,
                **report.to_dict()}
    except Exception as exc:  # cell failure must not kill the sweep
        return {"ok": False, "overrides": overrides, "seed": seed,
                "error": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc()}


def _run_cells(base: TrainConfig, cells, jobs: int = 1):
    base_doc = config_to_dict(base)
    args = [(base_doc, overrides, seed) for overrides, seed in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run_cell, args))
    return [run_cell(a) for a in args]


def _cells_for(study: str, base: TrainConfig, seeds):
    if study == "nq":
        return [({"num_queries": nq}, s) for nq in NQ_SWEEP for s in seeds]
    if study == "mmp":
        return [({"num_queries": nq, "use_mmp": mmp}, s)
                for nq in MMP_SWEEP for mmp in (True, False) for s in seeds]
    if study == "components":
        return [({"use_fvg": fvg, "use_mqe": mqe}, s)
                for fvg in (True, False) for mqe in (True, False)
                for s in seeds]
    raise ValueError(f"unknown study {study!r}")


def _median_row(results, overrides):
    """Median-IoU result among the seeds of one cell (None if all failed)."""
    matching = [r for r in results
                if r["overrides"] == overrides and r["ok"]]
    if not matching:
        return None
    matching.sort(key=lambda r: r["iou"])
    return matching[len(matching) // 2]


def run_study(study: str, base: TrainConfig, out_dir, seeds=(0,), jobs=1):
    """Run one study and write table/JSON/figure; returns the raw results."""
    out_dir = Path(out_dir)
    cells = _cells_for(study, base, seeds)
    results = _run_cells(base, cells, jobs)

    if study == "nq":
        headers = ["N_q"] + METRIC_COLUMNS
        rows, ious = [], []
        for nq in NQ_SWEEP:
            r = _median_row(results, {"num_queries": nq})
            if r is None:
                rows.append([str(nq)] + ["FAILED"] * len(METRIC_COLUMNS))
                ious.append(None)
            else:
                rows.append([str(nq)] + metric_cells(r))
                ious.append(r["iou"])
        paths = write_study(out_dir, "nq", headers, rows, results)
        plot_query_sweep(out_dir / "nq.png", list(NQ_SWEEP), ious)
        paths["figure"] = str(out_dir / "nq.png")
    elif study == "mmp":
        headers = ["N_q", "MMP"] + METRIC_COLUMNS
        rows = []
        for nq in MMP_SWEEP:
            for mmp in (True, False):
                r = _median_row(results, {"num_queries": nq, "use_mmp": mmp})
                tag = "yes" if mmp else "no"
                if r is None:
                    rows.append([str(nq), tag] + ["FAILED"] * len(METRIC_COLUMNS))
                else:
                    rows.append([str(nq), tag] + metric_cells(r))
        paths = write_study(out_dir, "mmp", headers, rows, results)
    else:
        headers = ["f_vg", "MQE"] + METRIC_COLUMNS
        rows = []
        for fvg in (True, False):
            for mqe in (True, False):
                r = _median_row(results, {"use_fvg": fvg, "use_mqe": mqe})
                tags = ["yes" if fvg else "no", "yes" if mqe else "no"]
                if r is None:
                    rows.append(tags + ["FAILED"] * len(METRIC_COLUMNS))
                else:
                    rows.append(tags + metric_cells(r))
        paths = write_study(out_dir, "components", headers, rows, results)

    with open(out_dir / f"{study}.results.json", "w") as f:
        json.dump(results, f, indent=2, sort_keys=True)
    return results, paths
