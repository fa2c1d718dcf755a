"""Result tables and report files: CSV, text summary, qualitative overlays.

Every emitted file is written to a temp path in the target directory and
moved into place with os.replace, so re-runs overwrite atomically. Overlays
draw ground-truth and predicted organ contours over the windowed slice with
matplotlib (Agg backend; no display needed).
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from . import organs  # noqa: E402
from .metrics import MetricsReport  # noqa: E402

ORGAN_COLORS = {
    organs.LEFT_LUNG: "tab:blue",
    organs.RIGHT_LUNG: "tab:cyan",
    organs.HEART: "tab:red",
    organs.ESOPHAGUS: "tab:orange",
    organs.TRACHEA: "tab:green",
    organs.SPINAL_CORD: "tab:purple",
}


@dataclass(frozen=True)
class ResultRow:
    method: str
    dice: float
    precision: float
    recall: float
    hd95_mm: float


@dataclass
class ResultsTable:
    """One comparison table: a row of averaged scores per method."""

    title: str
    rows: list[ResultRow]

    def row(self, method: str) -> ResultRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(f"no row for method {method!r} in {self.title}")

    def to_csv(self, path: str | Path) -> Path:
        lines = [["method", "dice", "precision", "recall", "hd95_mm"]]
        for r in self.rows:
            lines.append(
                [r.method, f"{r.dice:.6f}", f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.hd95_mm:.6f}"]
            )
        return write_csv_atomic(path, lines)

    @classmethod
    def from_csv(cls, path: str | Path, title: str | None = None) -> "ResultsTable":
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            if header != ["method", "dice", "precision", "recall", "hd95_mm"]:
                raise ValueError(f"{path}: unexpected results header {header}")
            rows = [
                ResultRow(m, float(d), float(p), float(r), float(h))
                for m, d, p, r, h in reader
            ]
        return cls(title=title or Path(path).stem, rows=rows)

    def format_text(self) -> str:
        widths = [max(12, *(len(r.method) for r in self.rows))]
        head = f"{'method':<{widths[0]}}  {'DICE':>7}  {'PREC':>7}  {'REC':>7}  {'HD95mm':>8}"
        lines = [self.title, "-" * len(head), head]
        for r in self.rows:
            hd = "   nan" if math.isnan(r.hd95_mm) else f"{r.hd95_mm:8.3f}"
            lines.append(
                f"{r.method:<{widths[0]}}  {r.dice:7.3f}  {r.precision:7.3f}  {r.recall:7.3f}  {hd:>8}"
            )
        return "\n".join(lines) + "\n"


def write_csv_atomic(path: str | Path, rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            csv.writer(f).writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_text_atomic(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def per_class_csv(
    path: str | Path,
    reports: Mapping[str, Mapping[str, MetricsReport]],
) -> Path:
    """Per-method, per-patient, per-organ breakdown: reports[method][patient]."""
    lines = [["method", "patient", "organ", "dice", "precision", "recall", "hd95_mm"]]
    for method in sorted(reports):
        for patient in sorted(reports[method]):
            rep = reports[method][patient]
            for organ, s in sorted(rep.per_class.items()):
                lines.append(
                    [
                        method,
                        patient,
                        organs.ORGAN_NAMES.get(organ, str(organ)),
                        f"{s.dice:.6f}",
                        f"{s.precision:.6f}",
                        f"{s.recall:.6f}",
                        f"{s.hd95_mm:.6f}",
                    ]
                )
    return write_csv_atomic(path, lines)


def render_overlay(
    windowed: np.ndarray,
    gt_labels: np.ndarray,
    pred_labels: np.ndarray,
    out_path: str | Path,
    title: str = "",
) -> Path:
    """Prediction (solid) vs ground-truth (dashed) contours over one slice."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4.8, 4.8), dpi=110)
    ax.imshow(windowed, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
    for organ, color in ORGAN_COLORS.items():
        if (gt_labels == organ).any():
            ax.contour(gt_labels == organ, levels=[0.5], colors=[color], linestyles="dashed", linewidths=0.9)
        if (pred_labels == organ).any():
            ax.contour(pred_labels == organ, levels=[0.5], colors=[color], linewidths=1.2)
    ax.set_title(title, fontsize=9)
    ax.axis("off")
    fig.tight_layout()
    tmp = out_path.with_suffix(".tmp.png")
    fig.savefig(tmp)
    plt.close(fig)
    os.replace(tmp, out_path)
    return out_path


def emit_report(
    tables: Mapping[str, ResultsTable],
    out_dir: str | Path,
    per_class: Mapping[str, Mapping[str, MetricsReport]] | None = None,
    overlays: Iterable[tuple[np.ndarray, np.ndarray, np.ndarray, str]] = (),
    prefix: str = "results",
) -> list[Path]:
    """Write summary CSVs, a text summary, the per-class breakdown, and overlays.

    `overlays` yields (windowed_slice, gt_labels, pred_labels, name) tuples.
    Returns every path written.
    """
    out_dir = Path(out_dir)
    if not tables:
        raise ValueError("emit_report needs at least one table")
    written = []
    summary_parts = []
    for name, table in tables.items():
        written.append(table.to_csv(out_dir / f"{name}_summary.csv"))
        summary_parts.append(table.format_text())
    written.append(write_text_atomic(out_dir / f"{prefix}_summary.txt", "\n".join(summary_parts)))
    if per_class is not None:
        written.append(per_class_csv(out_dir / f"{prefix}_per_class.csv", per_class))
    for windowed, gt_labels, pred_labels, name in overlays:
        written.append(render_overlay(windowed, gt_labels, pred_labels, out_dir / "overlays" / f"{name}.png", title=name))
    return written
