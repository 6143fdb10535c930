"""Report generation: delimited output plus rendered figures.

Every report is a CSV with a one-line header; numbers are virtual ticks.
Wall-clock values never enter a report so repeated runs with the same seed
produce byte-identical files. Each CSV gets a companion PNG rendered next
to it for quick inspection.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import MismatchedRuns


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:g}"
    return str(v)


def write_csv(path: str, header: list[str], rows: list[list]) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    text = "\n".join(lines) + "\n"
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return text


# --- overhead breakdown ---------------------------------------------------------

@dataclass
class RunRecord:
    seed: int
    config_sha: str
    with_ckpt: bool
    total_ticks: float
    ckpt_ticks: float = 0.0
    reconnects: int = 0


def report_overhead_breakdown(records: list[RunRecord]) -> dict:
    """Break a checkpointed run's walltime into reference time, measured
    checkpoint sections, and everything else (reconnects and protocol skew).

    Requires exactly one reference and one checkpointed run over identical
    seed and configuration.
    """
    refs = [r for r in records if not r.with_ckpt]
    cks = [r for r in records if r.with_ckpt]
    if len(refs) != 1 or len(cks) != 1:
        raise MismatchedRuns("need one reference and one checkpointed record")
    ref, ck = refs[0], cks[0]
    if ref.seed != ck.seed or ref.config_sha != ck.config_sha:
        raise MismatchedRuns("paired runs differ in seed or configuration")
    total = ck.total_ticks
    reference = ref.total_ticks
    checkpoint = ck.ckpt_ticks
    other = total - reference - checkpoint
    pct = (lambda v: 100.0 * v / total if total else 0.0)
    return {
        "reference_ticks": reference,
        "checkpoint_ticks": checkpoint,
        "other_ticks": other,
        "total_ticks": total,
        "reference_pct": pct(reference),
        "checkpoint_pct": pct(checkpoint),
        "other_pct": pct(other),
        "reconnects": ck.reconnects,
    }


OVERHEAD_HEADER = ["reference_ticks", "checkpoint_ticks", "other_ticks",
                   "total_ticks", "reference_pct", "checkpoint_pct",
                   "other_pct", "reconnects"]


def write_overhead_report(out_dir: str, breakdown: dict) -> str:
    row = [breakdown[k] for k in OVERHEAD_HEADER]
    text = write_csv(os.path.join(out_dir, "overhead_breakdown.csv"),
                     OVERHEAD_HEADER, [row])
    _overhead_figure(os.path.join(out_dir, "overhead_breakdown.png"), breakdown)
    return text


def _overhead_figure(path: str, b: dict) -> None:
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    bottom = 0.0
    for key, color in (("reference_ticks", "#4878d0"),
                       ("checkpoint_ticks", "#ee854a"),
                       ("other_ticks", "#6acc64")):
        val = max(b[key], 0.0)
        ax.bar(["walltime"], [val], bottom=bottom, color=color,
               label=key.replace("_ticks", ""))
        bottom += val
    ax.set_ylabel("virtual ticks")
    ax.set_title("walltime breakdown")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# --- comm bench -------------------------------------------------------------------

COMM_HEADER = ["size_bytes", "pre_ticks", "transient_ticks", "post_ticks"]


def write_comm_report(out_dir: str, result) -> str:
    rows = [[r["size"], r["pre"], r["transient"], r["post"]]
            for r in result.rows]
    text = write_csv(os.path.join(out_dir, "comm_latency.csv"),
                     COMM_HEADER, rows)
    write_csv(os.path.join(out_dir, "comm_summary.csv"),
              ["census_pre", "reconnects", "virtual_walltime", "status"],
              [[result.census_pre, result.reconnects,
                result.virtual_walltime, result.outcome.status]])
    _comm_figure(os.path.join(out_dir, "comm_latency.png"), result)
    return text


def _comm_figure(path: str, result) -> None:
    sizes = [r["size"] for r in result.rows]
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    for phase, marker in (("pre", "o"), ("transient", "s"), ("post", "^")):
        vals = [r[phase] for r in result.rows]
        if any(v is not None for v in vals):
            ax.plot(sizes, vals, marker=marker, label=phase)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("message size (bytes)")
    ax.set_ylabel("latency (virtual ticks)")
    ax.set_title("per-size latency around a checkpoint")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# --- heatdis ------------------------------------------------------------------------

HEATDIS_HEADER = ["residual", "digest", "virtual_walltime", "sent", "consumed",
                  "reconnects", "ckpt_ticks", "status"]


def write_heatdis_report(out_dir: str, result, grid: Optional[np.ndarray] = None) -> str:
    c = result.counters
    row = [result.residual, result.digest, result.virtual_walltime,
           c.get("sent", 0), c.get("consumed", 0), c.get("reconnects", 0),
           c.get("ckpt_ticks", 0.0), c.get("status", "")]
    text = write_csv(os.path.join(out_dir, "heatdis.csv"),
                     HEATDIS_HEADER, [row])
    if grid is not None:
        _grid_figure(os.path.join(out_dir, "heatdis_grid.png"), grid)
    return text


def _grid_figure(path: str, grid: np.ndarray) -> None:
    fig, ax = plt.subplots(figsize=(4.0, 3.6))
    im = ax.imshow(grid, cmap="inferno", origin="upper")
    fig.colorbar(im, ax=ax, shrink=0.85, label="temperature")
    ax.set_title("final temperature field")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_trace(out_dir: str, trace) -> None:
    trace.write(os.path.join(out_dir, "trace.csv"))
