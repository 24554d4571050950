"""Render simulator CSVs into paper-style figures with verifiable sidecars.

Each figure kind consumes one documented CSV contract and writes two
files: the image, and ``<image>.json`` echoing exactly the numbers that
were plotted (series points, bar segments, annotations, data bounds).
Tests verify the sidecar against the CSV instead of diffing pixels.

Aggregation rules per kind:
  recall     rows grouped by label, points sorted by step; no math.
  heatmap    rows pivoted into a (layer, step_bucket) grid; no math.
  breakdown  rows grouped by (context_len, K, method); one stacked bar
             per group, total = sum of its segment times.
  amortize   one curve per row: mean per-step time over s = 1..16 steps,
             (first + (s-1) * rest) / s, against the baseline's flat
             per-step time; the break-even column becomes an "n=…"
             annotation when present.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

KINDS = ("recall", "heatmap", "breakdown", "amortize")
AMORTIZE_MAX_STEPS = 16


class SchemaError(ValueError):
    """Input CSV does not match the documented column contract."""


@dataclass(frozen=True)
class FigureSpec:
    kind: str
    csv_path: Path
    out_path: Path
    title: str = ""

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise SchemaError(f"unknown figure kind {self.kind!r}; expected one of {KINDS}")


def read_rows(path: Path, required: tuple[str, ...]) -> list[dict[str, str]]:
    """Read a CSV with an exact header contract; '#' lines are metadata."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    header = reader.fieldnames or []
    for col in required:
        if col not in header:
            raise SchemaError(f"{path}: missing required column {col!r} "
                              f"(header: {header})")
    return list(reader)


def render(spec: FigureSpec) -> dict:
    """Render one figure; returns the sidecar payload (also written to disk)."""
    sidecar = _RENDERERS[spec.kind](spec)
    sidecar["kind"] = spec.kind
    sidecar["source"] = str(spec.csv_path)
    side_path = Path(str(spec.out_path) + ".json")
    side_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return sidecar


def _bounds(values) -> dict:
    vals = [float(v) for v in values]
    return {"min": min(vals), "max": max(vals)}


def _render_recall(spec: FigureSpec) -> dict:
    rows = read_rows(spec.csv_path, ("step", "K", "recall", "label"))
    if not rows:
        raise SchemaError(f"{spec.csv_path}: no data rows")
    series: dict[str, list[tuple[int, float]]] = {}
    for row in rows:
        series.setdefault(row["label"], []).append(
            (int(row["step"]), float(row["recall"])))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label in sorted(series):
        pts = sorted(series[label])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
        series[label] = pts
    ax.set_xlabel("denoising step")
    ax.set_ylabel("top-K recall")
    ax.set_ylim(0.0, 1.05)
    if spec.title:
        ax.set_title(spec.title)
    if len(series) > 1:
        ax.legend(fontsize=7)
    fig.savefig(spec.out_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return {"series": {lb: [[s, r] for s, r in pts] for lb, pts in series.items()},
            "bounds": {"recall": _bounds(r for pts in series.values()
                                         for _, r in pts)}}


def _render_heatmap(spec: FigureSpec) -> dict:
    rows = read_rows(spec.csv_path, ("layer", "step_bucket", "value"))
    if not rows:
        raise SchemaError(f"{spec.csv_path}: no data rows")
    cells = {(int(r["layer"]), int(r["step_bucket"])): float(r["value"]) for r in rows}
    layers = sorted({l for l, _ in cells})
    buckets = sorted({b for _, b in cells})
    grid = np.full((len(layers), len(buckets)), np.nan)
    for (l, b), v in cells.items():
        grid[layers.index(l), buckets.index(b)] = v
    if np.isnan(grid).any():
        raise SchemaError(f"{spec.csv_path}: incomplete (layer, step_bucket) grid")
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    im = ax.imshow(grid, aspect="auto", cmap="viridis_r", origin="upper")
    ax.set_xlabel("denoising progress bucket")
    ax.set_ylabel("layer")
    if spec.title:
        ax.set_title(spec.title)
    fig.colorbar(im, ax=ax, label="normalized budget")
    fig.savefig(spec.out_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return {"layers": layers, "step_buckets": buckets,
            "grid": [[float(v) for v in row] for row in grid],
            "bounds": {"value": _bounds(grid.ravel())}}


def _render_breakdown(spec: FigureSpec) -> dict:
    rows = read_rows(spec.csv_path,
                     ("context_len", "K", "method", "phase", "stream", "time"))
    if not rows:
        raise SchemaError(f"{spec.csv_path}: no data rows")
    groups: dict[tuple[int, int, str], list[dict]] = {}
    for row in rows:
        key = (int(row["context_len"]), int(row["K"]), row["method"])
        groups.setdefault(key, []).append(
            {"phase": row["phase"], "stream": row["stream"],
             "time": float(row["time"])})
    bars = []
    for (ctx, k, method) in sorted(groups):
        segments = groups[(ctx, k, method)]
        bars.append({"context_len": ctx, "K": k, "method": method,
                     "segments": segments,
                     "total": sum(s["time"] for s in segments)})
    fig, ax = plt.subplots(figsize=(max(5, 0.8 * len(bars)), 3.4))
    xs = np.arange(len(bars))
    phase_colors = {"attention": "#4878d0", "index_selection": "#ee854a",
                    "other": "#6acc64"}
    for i, bar in enumerate(bars):
        bottom = 0.0
        for seg in bar["segments"]:
            hatch = "//" if seg["stream"] == "async" else None
            ax.bar(i, seg["time"], bottom=bottom,
                   color=phase_colors.get(seg["phase"], "#999999"),
                   hatch=hatch, edgecolor="white", width=0.7)
            bottom += seg["time"]
    ax.set_xticks(xs)
    ax.set_xticklabels([f"{b['method']}\n{b['context_len']//1024}K" for b in bars],
                       fontsize=7)
    ax.set_ylabel("modeled step time")
    if spec.title:
        ax.set_title(spec.title)
    fig.savefig(spec.out_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return {"bars": bars,
            "bounds": {"total": _bounds(b["total"] for b in bars)}}


def _render_amortize(spec: FigureSpec) -> dict:
    rows = read_rows(spec.csv_path,
                     ("context_len", "K", "baseline", "baseline_step_time",
                      "mage_first_time", "mage_rest_time", "break_even"))
    if not rows:
        raise SchemaError(f"{spec.csv_path}: no data rows")
    fig, ax = plt.subplots(figsize=(5, 3.4))
    steps = np.arange(1, AMORTIZE_MAX_STEPS + 1)
    entries, annotations = [], []
    for row in sorted(rows, key=lambda r: (int(r["context_len"]), r["baseline"])):
        first = float(row["mage_first_time"])
        rest = float(row["mage_rest_time"])
        base = float(row["baseline_step_time"])
        curve = [(first + (s - 1) * rest) / s for s in steps]
        label = f"{row['baseline']}@{int(row['context_len'])//1024}K"
        line, = ax.plot(steps, curve, marker=".", label=f"vs {label}")
        ax.axhline(base, color=line.get_color(), linestyle="--", linewidth=0.8)
        note = None
        if row["break_even"] != "none":
            note = f"n={int(row['break_even'])}"
            annotations.append(note)
            s = int(row["break_even"])
            if s <= AMORTIZE_MAX_STEPS:
                ax.annotate(note, (s, curve[s - 1]), fontsize=7,
                            textcoords="offset points", xytext=(2, 4))
        entries.append({"context_len": int(row["context_len"]), "K": int(row["K"]),
                        "baseline": row["baseline"], "baseline_step_time": base,
                        "mage_first_time": first, "mage_rest_time": rest,
                        "break_even": note,
                        "mean_step_time": [float(v) for v in curve]})
    ax.set_xlabel("denoising steps")
    ax.set_ylabel("mean per-step time")
    ax.legend(fontsize=7)
    if spec.title:
        ax.set_title(spec.title)
    fig.savefig(spec.out_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return {"entries": entries, "annotations": annotations,
            "bounds": {"mean_step_time": _bounds(v for e in entries
                                                 for v in e["mean_step_time"])}}


_RENDERERS = {
    "recall": _render_recall,
    "heatmap": _render_heatmap,
    "breakdown": _render_breakdown,
    "amortize": _render_amortize,
}
