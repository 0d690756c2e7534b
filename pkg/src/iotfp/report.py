"""Evaluation report files: a CSV of per-device metrics plus PNG figures next to it."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import EvalReport  # noqa: E402

# keep PNG bytes independent of the matplotlib build
_PNG_META = {"Software": None}


def write_report_csv(reports: Mapping[str, EvalReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=EvalReport.CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for dev in sorted(reports):
            w.writerow(reports[dev].to_row())


def read_report_csv(path: str | Path) -> dict[str, dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["device_id"]: row for row in csv.DictReader(fh)}


def _value(x: float | None) -> float:
    return np.nan if x is None else x


def plot_metrics(reports: Mapping[str, EvalReport], path: str | Path) -> None:
    """Grouped bars of precision, recall and FPR per device."""
    devs = sorted(reports)
    x = np.arange(len(devs))
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(devs) + 2), 3.2))
    for i, (name, color) in enumerate((("precision", "C0"), ("recall", "C1"), ("fpr", "C3"))):
        vals = [_value(getattr(reports[d], name)) for d in devs]
        ax.bar(x + (i - 1) * 0.27, vals, width=0.27, label=name, color=color)
    ax.set_xticks(x)
    ax.set_xticklabels(devs, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("rate")
    ax.legend(loc="lower center", bbox_to_anchor=(0.5, 1.0), ncol=3, fontsize="small", frameon=False)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_counts(reports: Mapping[str, EvalReport], path: str | Path) -> None:
    """Stacked window counts (TP/FN/FP) per device."""
    devs = sorted(reports)
    x = np.arange(len(devs))
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(devs) + 2), 3.2))
    bottom = np.zeros(len(devs))
    for name, color in (("tp", "C2"), ("fn", "C1"), ("fp", "C3")):
        vals = np.array([getattr(reports[d], name) for d in devs], dtype=np.float64)
        ax.bar(x, vals, bottom=bottom, label=name, color=color)
        bottom += vals
    ax.set_xticks(x)
    ax.set_xticklabels(devs, rotation=30, ha="right")
    ax.set_ylabel("windows")
    ax.legend(fontsize="small", frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def write_report(reports: Mapping[str, EvalReport], csv_path: str | Path,
                 figures: bool = True) -> list[Path]:
    """Write the CSV and, unless disabled, ``<stem>_metrics.png`` and ``<stem>_counts.png``."""
    csv_path = Path(csv_path)
    write_report_csv(reports, csv_path)
    written = [csv_path]
    if figures and reports:
        for suffix, fn in (("metrics", plot_metrics), ("counts", plot_counts)):
            out = csv_path.with_name(f"{csv_path.stem}_{suffix}.png")
            fn(reports, out)
            written.append(out)
    return written
