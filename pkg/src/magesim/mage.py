"""Mask-guided selection: candidate unions, coverage scoring, budgets.

The plan for a block is built once, from the exact attention of the
first (all-masked) denoising step, and reused for every later step:

1.  Per KV head, each of the head's group_size * block_size query rows
    votes for its top-k cache indices; the union of those votes is the
    head's candidate set.
2.  Coverage is the mean probability mass the union captures per query;
    a head's demand score is ``union_size * (1 - ln coverage)``, and a
    layer's score is the max over its heads.
3.  The average per-layer budget is split across planned layers in
    proportion to their scores, floored at a minimum allocation, with
    no renormalization after flooring.
4.  Each head keeps its most-voted union members up to the layer
    budget; spare slots are filled with the most recent cache positions.

All rank orderings share one total tie-break: vote count descending,
then attention mass descending, then index ascending.

Attention enters in plan space as *cross-block distributions*: the
first ``n`` columns of a forward's attention rows, renormalized per row
so each query is a probability distribution over the cache.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (AllocationError, ConfigError, DomainError, PlanError,
                     SelectionError)


@dataclass(frozen=True)
class HeadUnion:
    """Candidate statistics for one (layer, KV head)."""

    union: np.ndarray     # sorted candidate indices
    votes: np.ndarray     # per-union-member vote count, aligned with union
    mass: np.ndarray      # per-union-member summed attention mass
    coverage: float
    score: float


@dataclass(frozen=True)
class UnionStats:
    """Per planned-layer, per-head union statistics plus layer scores."""

    exact_layer_prefix: int
    heads: tuple[tuple[HeadUnion, ...], ...]   # [planned layer][kv head]
    layer_scores: tuple[float, ...]            # per planned layer


@dataclass(frozen=True)
class SelectionPlan:
    """Per-layer budget and per-KV-head sorted cache indices.

    Layers below ``exact_layer_prefix`` carry the full index range; the
    model ignores plan entries for those layers anyway.
    """

    method: str
    context_length: int
    exact_layer_prefix: int
    budgets: tuple[int, ...]
    indices: tuple[tuple[np.ndarray, ...], ...]   # [layer][kv head]

    @property
    def num_layers(self) -> int:
        return len(self.budgets)

    @property
    def num_kv_heads(self) -> int:
        return len(self.indices[0])


def cross_block_distributions(attn_layer: np.ndarray, n: int) -> np.ndarray:
    """Renormalize one layer's attention rows over the first n columns.

    attn_layer: (num_query_heads, width, >=n).  Returns (H_q, width, n)
    rows summing to 1 (rows with zero cross mass stay zero).
    """
    cross = attn_layer[:, :, :n].astype(np.float32)
    total = cross.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, cross / total, 0.0).astype(np.float32)


def per_query_topk(row: np.ndarray, k: int) -> np.ndarray:
    """Indices of the min(k, n) largest entries, ties to the lowest index."""
    if k < 1:
        raise ConfigError(f"top-k count must be >= 1, got {k}")
    row = np.asarray(row)
    if row.ndim != 1 or row.size == 0:
        raise ConfigError("top-k needs a nonempty 1-d row")
    order = np.argsort(-row, kind="stable")
    return order[: min(k, row.size)]


def form_union(rows: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Union of per-row top-k index sets with vote counts.

    rows: (num_queries, n) probability rows for one KV head.  Returns
    (union, votes) where union is sorted ascending and votes[i] counts
    the rows whose top-k contained union[i].
    """
    rows = np.asarray(rows)
    if rows.ndim != 2 or rows.size == 0:
        raise ConfigError("union formation needs a nonempty 2-d attention block")
    n = rows.shape[1]
    counts = np.zeros(n, dtype=np.int64)
    for row in rows:
        counts[per_query_topk(row, k)] += 1
    union = np.nonzero(counts)[0]
    return union, counts[union]


def coverage(rows: np.ndarray, union: np.ndarray) -> float:
    """Mean probability mass the union captures per query row.

    A union covering every column has coverage exactly 1.0 by
    definition, independent of float accumulation order.
    """
    union = np.asarray(union, dtype=np.int64)
    if union.size == 0:
        raise SelectionError("coverage of an empty union is undefined")
    rows = np.asarray(rows)
    if union.max() >= rows.shape[1]:
        raise SelectionError("union member outside the attention row")
    if union.size == rows.shape[1]:
        return 1.0
    p = float(rows[:, union].sum(axis=1).mean())
    return min(p, 1.0)


def adjusted_score(union_size: int, cov: float) -> float:
    """Budget-demand score: union size scaled by (1 - ln coverage)."""
    if not (0.0 < cov <= 1.0):
        raise DomainError(f"coverage must lie in (0, 1], got {cov}")
    return float(union_size) * (1.0 - float(np.log(cov)))


def allocate_budgets(layer_scores: Sequence[float], budget: int,
                     min_budget: int) -> list[int]:
    """Split budget * num_planned_layers across layers by score share.

    Each layer gets ``floor((score / total) * (budget * L))`` floored at
    ``min_budget``; the floor is applied after the proportional split
    and nothing is renormalized afterwards, so the total may exceed
    ``budget * L`` when floors bind.  The association above is part of
    the definition so independent implementations agree bit-for-bit.
    """
    scores = [float(s) for s in layer_scores]
    if any(s < 0 for s in scores):
        raise AllocationError("layer scores must be nonnegative")
    total = sum(scores)
    if total <= 0:
        raise AllocationError("all layer scores are zero; nothing to allocate")
    if not (budget >= min_budget >= 1):
        raise ConfigError(f"need budget >= min_budget >= 1, got {budget}, {min_budget}")
    pool = budget * len(scores)
    return [max(min_budget, math.floor((s / total) * pool)) for s in scores]


def select_indices(union: np.ndarray, votes: np.ndarray, mass: np.ndarray,
                   layer_budget: int, n: int) -> np.ndarray:
    """Pick the head's final indices for one layer, sorted ascending.

    Union members are ranked by votes, then attention mass, then index;
    if the budget exceeds the union, the most recent cache positions
    fill the remainder.
    """
    if n < 1:
        raise PlanError("cannot select indices from an empty cache")
    if layer_budget < 1:
        raise ConfigError(f"layer budget must be >= 1, got {layer_budget}")
    union = np.asarray(union, dtype=np.int64)
    want = min(layer_budget, n)
    if want <= union.size:
        order = np.lexsort((union, -np.asarray(mass), -np.asarray(votes)))
        chosen = union[order[:want]]
    else:
        taken = np.zeros(n, dtype=bool)
        taken[union] = True
        fill = [i for i in range(n - 1, -1, -1) if not taken[i]][: want - union.size]
        chosen = np.concatenate([union, np.asarray(fill, dtype=np.int64)])
    return np.sort(chosen)


def full_layer_indices(n: int, num_kv_heads: int) -> tuple[np.ndarray, ...]:
    full = np.arange(n, dtype=np.int64)
    return tuple(full.copy() for _ in range(num_kv_heads))


def build_plan(attn: Sequence[np.ndarray], n: int, *, num_kv_heads: int,
               exact_layer_prefix: int, budget: int, min_budget: int,
               ) -> tuple[SelectionPlan, UnionStats]:
    """Full plan construction from one exact forward's attention.

    ``attn`` holds one (num_query_heads, width, >=n) array per layer,
    as produced by a plan-free forward over the all-masked block; only
    the first ``n`` columns (the cache positions) matter.
    """
    if n < 1:
        raise PlanError("cannot plan against an empty cache")
    num_layers = len(attn)
    if not (1 <= exact_layer_prefix <= num_layers):
        raise ConfigError("exact_layer_prefix outside [1, num_layers]")
    num_query_heads = attn[0].shape[0]
    if num_query_heads % num_kv_heads != 0:
        raise ConfigError("query heads must group evenly over KV heads")
    group = num_query_heads // num_kv_heads

    planned = range(exact_layer_prefix, num_layers)
    stats_layers: list[tuple[HeadUnion, ...]] = []
    layer_scores: list[float] = []
    for layer in planned:
        dist = cross_block_distributions(np.asarray(attn[layer]), n)
        width = dist.shape[1]
        heads: list[HeadUnion] = []
        for h in range(num_kv_heads):
            rows = dist[h * group:(h + 1) * group].reshape(group * width, n)
            union, votes = form_union(rows, budget)
            cov = coverage(rows, union)
            mass = rows.sum(axis=0)[union]
            heads.append(HeadUnion(union=union, votes=votes, mass=mass,
                                   coverage=cov,
                                   score=adjusted_score(union.size, cov)))
        stats_layers.append(tuple(heads))
        layer_scores.append(max(h.score for h in heads))

    planned_budgets = allocate_budgets(layer_scores, budget, min_budget)

    budgets: list[int] = []
    indices: list[tuple[np.ndarray, ...]] = []
    for layer in range(num_layers):
        if layer < exact_layer_prefix:
            budgets.append(n)
            indices.append(full_layer_indices(n, num_kv_heads))
            continue
        i = layer - exact_layer_prefix
        layer_budget = planned_budgets[i]
        budgets.append(layer_budget)
        indices.append(tuple(
            select_indices(head.union, head.votes, head.mass, layer_budget, n)
            for head in stats_layers[i]))

    plan = SelectionPlan(method="mage", context_length=n,
                         exact_layer_prefix=exact_layer_prefix,
                         budgets=tuple(budgets), indices=tuple(indices))
    stats = UnionStats(exact_layer_prefix=exact_layer_prefix,
                       heads=tuple(stats_layers), layer_scores=tuple(layer_scores))
    return plan, stats


def validate_plan(plan: SelectionPlan, n: int, min_budget: int | None = None) -> None:
    """Assert the structural invariants every plan must satisfy."""
    if plan.context_length != n:
        raise PlanError(f"plan built for context {plan.context_length}, cache has {n}")
    for layer, (budget, heads) in enumerate(zip(plan.budgets, plan.indices)):
        planned = layer >= plan.exact_layer_prefix
        if planned and min_budget is not None and budget < min_budget:
            raise PlanError(f"layer {layer} budget {budget} below floor {min_budget}")
        for head, idx in enumerate(heads):
            if len(idx) != min(budget, n):
                raise PlanError(
                    f"layer {layer} head {head}: {len(idx)} indices, "
                    f"expected min(budget={budget}, n={n})")
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise PlanError(f"layer {layer} head {head}: index out of range")
            if np.any(np.diff(idx) <= 0):
                raise PlanError(f"layer {layer} head {head}: indices not strictly increasing")


def serialize_plan(plan: SelectionPlan) -> str:
    """Line-oriented text form: one (layer, head, budget, indices) row each."""
    lines = [f"MAGEPLAN1 method={plan.method} context={plan.context_length} "
             f"layers={plan.num_layers} kv_heads={plan.num_kv_heads} "
             f"exact_prefix={plan.exact_layer_prefix}"]
    for layer, heads in enumerate(plan.indices):
        for head, idx in enumerate(heads):
            body = " ".join(str(int(i)) for i in idx)
            lines.append(f"{layer}\t{head}\t{plan.budgets[layer]}\t{body}")
    return "\n".join(lines) + "\n"


def parse_plan(text: str) -> SelectionPlan:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("MAGEPLAN1 "):
        raise PlanError("not a plan dump: missing MAGEPLAN1 header")
    header = dict(part.split("=", 1) for part in lines[0].split()[1:])
    num_layers = int(header["layers"])
    num_kv_heads = int(header["kv_heads"])
    budgets = [0] * num_layers
    indices: list[list[np.ndarray]] = [[np.empty(0, np.int64)] * num_kv_heads
                                       for _ in range(num_layers)]
    for ln in lines[1:]:
        layer_s, head_s, budget_s, *rest = ln.split("\t")
        layer, head = int(layer_s), int(head_s)
        budgets[layer] = int(budget_s)
        body = rest[0].split() if rest and rest[0] else []
        indices[layer][head] = np.asarray([int(t) for t in body], dtype=np.int64)
    return SelectionPlan(method=header["method"], context_length=int(header["context"]),
                         exact_layer_prefix=int(header["exact_prefix"]),
                         budgets=tuple(budgets),
                         indices=tuple(tuple(h) for h in indices))
