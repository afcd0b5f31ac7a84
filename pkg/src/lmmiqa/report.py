"""Result tables and figures for completed runs.

Tables list one row per run, ascending by Overall Score, four decimals.
Figures are SVG rendered through matplotlib with a fixed hash salt and no
date stamp, so identical inputs give identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from .metrics import LengthMismatch, MetricReport

BIN_WIDTH = 0.25
BIN_EDGES = np.linspace(0.0, 4.0, 17)
TABLE_FORMATS = ("csv", "json", "markdown")
TABLE_COLUMNS = ("Model", "Strategy", "PLCC", "SROCC", "KROCC", "Overall Score", "N", "Failures")

_SVG_RC = {
    "svg.hashsalt": "lmmiqa",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

RADIOLOGIST_COLOR = "#4c72b0"
MODEL_COLOR = "#dd8452"


@dataclass(frozen=True)
class RunSummary:
    strategy: str
    model_name: str
    report: MetricReport | None
    failures: int
    scored: int
    cache_hit_rate: float = 0.0
    wall_time: float = 0.0

    def __post_init__(self):
        if self.failures < 0 or self.scored < 0:
            raise ValueError("counts must be non-negative")

    @property
    def requested(self) -> int:
        return self.failures + self.scored

    def to_dict(self) -> dict:
        d = asdict(self)
        d["report"] = self.report.to_dict() if self.report else None
        d["requested"] = self.requested
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunSummary":
        rep = data.get("report")
        report = MetricReport(rep["plcc"], rep["srocc"], rep["krocc"], rep["n"]) if rep else None
        return cls(
            data["strategy"],
            data["model_name"],
            report,
            int(data["failures"]),
            int(data["scored"]),
            float(data.get("cache_hit_rate", 0.0)),
            float(data.get("wall_time", 0.0)),
        )


def _rows(summaries) -> list[RunSummary]:
    summaries = list(summaries)
    if not summaries:
        raise ValueError("no run summaries to tabulate")
    missing = [s.strategy for s in summaries if s.report is None]
    if missing:
        raise ValueError(f"runs without metrics cannot be tabulated: {', '.join(missing)}")
    return sorted(summaries, key=lambda s: s.report.overall)


def _f4(x: float) -> str:
    return f"{x:.4f}"


def emit_table(summaries, format: str = "csv") -> bytes:
    rows = _rows(summaries)
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TABLE_COLUMNS)
        for s in rows:
            r = s.report
            writer.writerow([s.model_name, s.strategy, _f4(r.plcc), _f4(r.srocc), _f4(r.krocc), _f4(r.overall), r.n, s.failures])
        return buf.getvalue().encode("utf-8")
    if format == "json":
        doc = [
            {
                "model": s.model_name,
                "strategy": s.strategy,
                "plcc": round(s.report.plcc, 4),
                "srocc": round(s.report.srocc, 4),
                "krocc": round(s.report.krocc, 4),
                "overall": round(s.report.overall, 4),
                "n": s.report.n,
                "failures": s.failures,
            }
            for s in rows
        ]
        return (json.dumps(doc, indent=2) + "\n").encode("utf-8")
    if format == "markdown":
        lines = ["| " + " | ".join(TABLE_COLUMNS) + " |", "|" + "|".join(["---"] * 2 + ["---:"] * 6) + "|"]
        for s in rows:
            r = s.report
            cells = [s.model_name, s.strategy, _f4(r.plcc), _f4(r.srocc), _f4(r.krocc), _f4(r.overall), str(r.n), str(s.failures)]
            lines.append("| " + " | ".join(cells) + " |")
        return ("\n".join(lines) + "\n").encode("utf-8")
    raise ValueError(f"unknown table format {format!r}; choose from {', '.join(TABLE_FORMATS)}")


def _pairs(truth, pred) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(truth, dtype=np.float64).ravel()
    p = np.asarray(pred, dtype=np.float64).ravel()
    if t.size != p.size:
        raise LengthMismatch(f"{t.size} radiologist scores but {p.size} predictions")
    if t.size == 0:
        raise LengthMismatch("nothing to plot: no score pairs")
    if np.any((t < 0) | (t > 4)) or np.any((p < 0) | (p > 4)):
        raise ValueError("scores must lie in [0, 4]")
    return t, p


def histogram_counts(values) -> np.ndarray:
    """Counts over 16 bins of width 0.25 on [0, 4]; the top bin is closed on the right."""
    counts, _ = np.histogram(np.asarray(values, dtype=np.float64), bins=BIN_EDGES)
    return counts


def _svg(fig: Figure) -> bytes:
    buf = io.BytesIO()
    with matplotlib.rc_context(_SVG_RC):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()


def emit_scatter(truth, pred, model_label: str = "Model") -> bytes:
    t, p = _pairs(truth, pred)
    with matplotlib.rc_context(_SVG_RC):
        fig = Figure(figsize=(4.5, 4.5))
        ax = fig.subplots()
        ax.plot([0, 4], [0, 4], color="0.4", linestyle="--", linewidth=1, gid="identity", label="y = x")
        ax.scatter(t, p, s=14, color=MODEL_COLOR, alpha=0.7, edgecolors="none", gid="markers")
        ax.set_xlim(0, 4)
        ax.set_ylim(0, 4)
        ax.set_aspect("equal")
        ax.set_xlabel("Radiologist score")
        ax.set_ylabel(f"{model_label} score")
        ax.legend(loc="upper left", frameon=False)
        fig.tight_layout()
    return _svg(fig)


def emit_histogram(truth, pred, model_label: str = "Model") -> bytes:
    t, p = _pairs(truth, pred)
    with matplotlib.rc_context(_SVG_RC):
        fig = Figure(figsize=(5.5, 3.5))
        ax = fig.subplots()
        for name, values, color, label in (
            ("radiologist", t, RADIOLOGIST_COLOR, "Radiologist"),
            ("model", p, MODEL_COLOR, model_label),
        ):
            bars = ax.bar(BIN_EDGES[:-1], histogram_counts(values), width=BIN_WIDTH, align="edge",
                          color=color, alpha=0.55, edgecolor="white", linewidth=0.5, label=label)
            for i, patch in enumerate(bars.patches):
                patch.set_gid(f"{name}-bin-{i:02d}")
        ax.set_xlim(0, 4)
        ax.set_xticks(np.arange(0, 4.5, 0.5))
        ax.set_xlabel("Score")
        ax.set_ylabel("Count")
        ax.legend(frameon=False)
        fig.tight_layout()
    return _svg(fig)


def write_tables(summaries, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt, ext in (("csv", "csv"), ("json", "json"), ("markdown", "md")):
        path = out_dir / f"table.{ext}"
        path.write_bytes(emit_table(summaries, fmt))
        written.append(path)
    return written


def write_figures(truth, pred, out_dir, model_label: str = "Model") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scatter = out_dir / "scatter.svg"
    hist = out_dir / "hist.svg"
    scatter.write_bytes(emit_scatter(truth, pred, model_label))
    hist.write_bytes(emit_histogram(truth, pred, model_label))
    return [scatter, hist]
