"""Recall and skewness analyses over traced decoding runs.

Recall counts how much of a reference top-k index set survives in
another set; the skewness proxy counts how many entries a probability
row needs to reach a coverage threshold.  Both feed CSV files consumed
by the plotting component.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decoder import DenoiseTrace
from .errors import ConfigError, MetricError
from .mage import SelectionPlan

# Cumulative-sum comparisons get this much slack so that exact-boundary
# cases (nine 0.1 entries reaching 0.9) resolve the way arithmetic says
# they should rather than the way float rounding happens to fall.
CUMSUM_EPS = 1e-9


@dataclass(frozen=True)
class RecallCurve:
    steps: tuple[int, ...]
    recalls: tuple[float, ...]
    budget: int
    label: str


@dataclass(frozen=True)
class SkewHeatmap:
    """layers x step-buckets grid of coverage budgets, normalized to [0, 1]."""

    values: np.ndarray        # normalized grid
    raw: np.ndarray           # unnormalized mean coverage budgets
    step_buckets: int
    threshold: float
    normalization: str        # "global_max" or "row_max"


def topk_recall(reference, observed) -> float:
    """Fraction of the reference set present in the observed set."""
    ref = set(int(i) for i in np.asarray(reference).ravel())
    if not ref:
        raise MetricError("recall against an empty reference set is undefined")
    obs = set(int(i) for i in np.asarray(observed).ravel())
    return len(ref & obs) / len(ref)


def coverage_budget(row, threshold: float = 0.9) -> int:
    """Smallest count of largest entries whose sum reaches the threshold."""
    if not (0.0 < threshold <= 1.0):
        raise ConfigError(f"threshold must lie in (0, 1], got {threshold}")
    row = np.asarray(row, dtype=np.float64)
    total = row.sum()
    if abs(total - 1.0) > 1e-4:
        raise MetricError(f"row must sum to 1 within 1e-4, got {total}")
    cum = np.cumsum(np.sort(row)[::-1])
    return int(min(np.searchsorted(cum, threshold - CUMSUM_EPS) + 1, row.size))


def recall_curve(trace: DenoiseTrace, label: str = "") -> RecallCurve:
    """Recall of the first step's oracle sets against each later step's.

    Uses the per-step oracle sets stored in the trace; averaging over
    planned layers and heads is an unweighted mean.
    """
    records = [r for r in trace.records if r.oracle_sets is not None]
    if not records:
        raise MetricError("trace has no oracle sets; rerun with oracle tracing enabled")
    reference = records[0].oracle_sets
    steps, recalls = [], []
    for rec in records:
        vals = [topk_recall(ref_h, cur_h)
                for ref_layer, cur_layer in zip(reference, rec.oracle_sets)
                for ref_h, cur_h in zip(ref_layer, cur_layer)]
        steps.append(rec.step)
        recalls.append(float(np.mean(vals)))
    return RecallCurve(steps=tuple(steps), recalls=tuple(recalls),
                       budget=trace.budget, label=label)


def method_recall(method_plan: SelectionPlan, oracle_plan: SelectionPlan) -> float:
    """Mean over planned layers/heads of oracle-set recall by the method."""
    if (method_plan.num_layers != oracle_plan.num_layers
            or method_plan.num_kv_heads != oracle_plan.num_kv_heads
            or method_plan.exact_layer_prefix != oracle_plan.exact_layer_prefix):
        raise MetricError("plans cover different layers/heads")
    vals = []
    for layer in range(oracle_plan.exact_layer_prefix, oracle_plan.num_layers):
        for h in range(oracle_plan.num_kv_heads):
            vals.append(topk_recall(oracle_plan.indices[layer][h],
                                    method_plan.indices[layer][h]))
    if not vals:
        raise MetricError("no planned layers to compare")
    return float(np.mean(vals))


def plan_recall_against_sets(plan: SelectionPlan,
                             oracle_sets: Sequence[Sequence[np.ndarray]]) -> float:
    """Recall of a plan against per-step oracle sets from a trace record."""
    vals = []
    for i, layer in enumerate(range(plan.exact_layer_prefix, plan.num_layers)):
        for h, oracle in enumerate(oracle_sets[i]):
            vals.append(topk_recall(oracle, plan.indices[layer][h]))
    if not vals:
        raise MetricError("no planned layers to compare")
    return float(np.mean(vals))


def skew_heatmap(per_step_cross: Sequence[Sequence[np.ndarray]], num_kv_heads: int,
                 threshold: float = 0.9, step_buckets: int = 10,
                 normalization: str = "global_max") -> SkewHeatmap:
    """Coverage-budget grid over (layer, denoising progress).

    ``per_step_cross`` holds, for each traced step, one (H_q, width, n)
    renormalized cross-block attention array per layer.  A cell is the
    coverage budget averaged over every query row of every KV head,
    then averaged over the steps falling into the same progress bucket.
    """
    if not per_step_cross:
        raise MetricError("no traced steps")
    if normalization not in ("global_max", "row_max"):
        raise ConfigError(f"unknown normalization {normalization!r}")
    num_steps = len(per_step_cross)
    num_layers = len(per_step_cross[0])
    buckets = min(step_buckets, num_steps)
    per_layer_step = np.zeros((num_layers, num_steps), dtype=np.float64)
    for t, layers in enumerate(per_step_cross):
        if len(layers) != num_layers:
            raise MetricError("steps disagree on layer count")
        for layer, cross in enumerate(layers):
            rows = np.asarray(cross).reshape(-1, np.asarray(cross).shape[-1])
            per_layer_step[layer, t] = float(np.mean(
                [coverage_budget(r, threshold) for r in rows]))

    raw = np.zeros((num_layers, buckets), dtype=np.float64)
    for b in range(buckets):
        lo = b * num_steps // buckets
        hi = (b + 1) * num_steps // buckets
        raw[:, b] = per_layer_step[:, lo:hi].mean(axis=1)

    if normalization == "global_max":
        denom = raw.max()
        values = raw / denom if denom > 0 else raw
    else:
        denom = raw.max(axis=1, keepdims=True)
        values = np.where(denom > 0, raw / denom, raw)
    return SkewHeatmap(values=values, raw=raw, step_buckets=buckets,
                       threshold=threshold, normalization=normalization)


def rank_stability(grid: np.ndarray) -> list[float]:
    """Spearman correlation of layer rankings between consecutive columns."""
    grid = np.asarray(grid, dtype=np.float64)
    out = []
    for t in range(grid.shape[1] - 1):
        out.append(_spearman(grid[:, t], grid[:, t + 1]))
    return out


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0
        i = j + 1
    return ranks


def _spearman(a: np.ndarray, b: np.ndarray) -> float:
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    return float((ra * rb).sum() / denom) if denom > 0 else 1.0


def recall_csv(curves: Sequence[RecallCurve]) -> str:
    """Columns: step, K, recall, label."""
    buf = io.StringIO()
    buf.write("step,K,recall,label\n")
    for curve in curves:
        for step, recall in zip(curve.steps, curve.recalls):
            buf.write(f"{step},{curve.budget},{recall!r},{curve.label}\n")
    return buf.getvalue()


def heatmap_csv(heatmap: SkewHeatmap) -> str:
    """Columns: layer, step_bucket, value; normalization noted up front."""
    buf = io.StringIO()
    buf.write(f"# normalization={heatmap.normalization} threshold={heatmap.threshold!r}\n")
    buf.write("layer,step_bucket,value\n")
    for layer in range(heatmap.values.shape[0]):
        for b in range(heatmap.values.shape[1]):
            buf.write(f"{layer},{b},{float(heatmap.values[layer, b])!r}\n")
    return buf.getvalue()
