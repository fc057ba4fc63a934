"""
Comparison reports across completed runs: report.md, report.csv and curves.png.
"""

import logging
from pathlib import Path
from typing import Sequence

import pandas as pd
from matplotlib.figure import Figure

from ..core import config
from ..core.errors import NoRunsFound
from ..core.fileio import read_json, write_text_atomic
from ..core.run_manager import find_runs

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["run", "experiment", "training", "bands", "plan", "seed", "miou", "f1", "precision", "recall"]
STAGE_COLUMNS = ["run", "training", "stage", "patch_size", "epochs", "best_val_miou", "best_val_f1"]


def _summary_row(run: str, metrics: dict, block: dict) -> dict:
    final = block["final"]
    return {
        "run": run,
        "experiment": metrics.get("experiment", run),
        "training": block.get("training", metrics.get("training", "")),
        "bands": metrics.get("bands", ""),
        "plan": "-".join(str(s) for s in block.get("plan", metrics.get("plan", []))),
        "seed": metrics.get("seed"),
        "miou": final["miou"],
        "f1": final["f1"],
        "precision": final["precision"],
        "recall": final["recall"],
    }


def collect_runs(roots: Sequence) -> tuple:
    """Returns (summary frame, per-stage frame, {run name: [(label, history frame)]})."""
    runs = find_runs(roots)
    if not runs:
        raise NoRunsFound(f"No completed runs under {[str(r) for r in roots]}", roots=list(roots))
    rows, stage_rows, curves = [], [], {}
    for run_dir in runs:
        metrics_path = run_dir / config.METRICS_JSON_NAME
        if not metrics_path.is_file():
            logger.warning(f"Skipping {run_dir}: no {config.METRICS_JSON_NAME}")
            continue
        metrics = read_json(metrics_path)
        name = run_dir.name
        blocks = [(metrics, run_dir / config.HISTORY_CSV_NAME, metrics.get("training", "progressive"))]
        if "baseline" in metrics:
            blocks.append((metrics["baseline"], run_dir / "baseline" / config.HISTORY_CSV_NAME, "individual"))
        for block, history_path, training in blocks:
            rows.append(_summary_row(name, metrics, block))
            for stage in block.get("stages", []):
                stage_rows.append({"run": name, "training": training, **{k: stage.get(k) for k in STAGE_COLUMNS[2:]}})
            if history_path.is_file():
                curves.setdefault(name, []).append((training, pd.read_csv(history_path)))
    if not rows:
        raise NoRunsFound(f"Completed runs under {[str(r) for r in roots]} carry no metrics", roots=list(roots))
    return (pd.DataFrame(rows, columns=SUMMARY_COLUMNS),
            pd.DataFrame(stage_rows, columns=STAGE_COLUMNS),
            curves)


def _markdown_table(frame: pd.DataFrame) -> str:
    return frame.to_markdown(index=False, floatfmt=".4f", missingval="")


def plot_curves(curves: dict, path) -> Path:
    """Validation mIoU per epoch for every run, stage boundaries marked."""
    path = Path(path)
    # pyplot-free figure: no GUI backend involved
    fig = Figure(figsize=(8, 4.5))
    ax = fig.subplots()
    for run, entries in sorted(curves.items()):
        for training, frame in entries:
            if frame.empty:
                continue
            x = range(1, len(frame) + 1)
            line, = ax.plot(x, frame["val_miou"], marker=".", label=f"{run} ({training})")
            boundaries = frame.index[frame["stage"].diff().fillna(0) != 0]
            for b in boundaries:
                ax.axvline(b + 0.5, color=line.get_color(), linestyle=":", alpha=0.5)
    ax.set_xlabel("epoch (cumulative)")
    ax.set_ylabel("validation mIoU")
    ax.grid(True, alpha=0.3)
    if curves:
        ax.legend(fontsize="small")
    fig.tight_layout()
    config.ensure_dir(path.parent)
    fig.savefig(path, dpi=120)
    return path


def report(roots: Sequence, out_dir=None) -> dict:
    """Writes report.md / report.csv / curves.png for all completed runs under `roots`."""
    roots = [Path(r) for r in roots]
    summary, stages, curves = collect_runs(roots)
    out_dir = Path(out_dir) if out_dir else roots[0]
    csv_path = write_text_atomic(out_dir / "report.csv", summary.to_csv(index=False))
    md = ["# Run comparison", "", _markdown_table(summary), ""]
    if not stages.empty:
        md += ["## Per-stage best validation scores", "", _markdown_table(stages), ""]
    md_path = write_text_atomic(out_dir / "report.md", "\n".join(md))
    png_path = plot_curves(curves, out_dir / "curves.png")
    logger.info(f"Report over {len(summary)} rows written to {out_dir}")
    return {"markdown": md_path, "csv": csv_path, "curves": png_path}
