"""Report rendering: aligned-column text tables, JSON twins, and
matplotlib figures written alongside them."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import THRESHOLDS

METRIC_COLUMNS = ["IoU"] + [f"Pr@{int(t * 100)}" for t in THRESHOLDS]


def format_table(headers, rows) -> str:
    """UTF-8 aligned-column table; cells are strings."""
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def fmt(cells):
        return "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def metric_cells(report_dict) -> list:
    """Render IoU / Pr@X values as percentages with two decimals."""
    keys = ["iou"] + [f"pr{int(t * 100)}" for t in THRESHOLDS]
    return [f"{report_dict[k] * 100:.2f}" for k in keys]


def write_study(out_dir, name: str, headers, rows, results) -> dict:
    """Write <name>.txt (aligned table) and <name>.json (same table as
    structured data) for one ablation study."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = format_table(headers, rows)
    (out_dir / f"{name}.txt").write_text(text)
    with open(out_dir / f"{name}.json", "w") as f:
        json.dump({"headers": headers, "rows": rows}, f, indent=2,
                  sort_keys=True)
    return {"table": str(out_dir / f"{name}.txt"),
            "json": str(out_dir / f"{name}.json")}


def plot_query_sweep(out_path, nqs, ious) -> None:
    """IoU as a function of the query count."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(nqs, [v * 100 if v is not None else float("nan") for v in ious],
            marker="o")
    ax.set_xlabel("number of queries")
    ax.set_ylabel("IoU (%)")
    ax.set_xscale("log", base=2)
    ax.set_xticks(nqs)
    ax.set_xticklabels([str(n) for n in nqs])
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def plot_training_curves(out_path, log: list) -> None:
    """Loss and validation IoU per epoch from a metrics log."""
    epochs = [e["epoch"] for e in log]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [e["loss"] for e in log], marker="o")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax1.grid(True, alpha=0.3)
    ax2.plot(epochs, [e["iou"] * 100 for e in log], marker="o", color="C1")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val IoU (%)")
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
