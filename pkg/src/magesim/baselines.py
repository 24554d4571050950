"""Sparse-attention baselines adapted to block decoding.

Each builder emits the same SelectionPlan type the mask-guided path
produces, so plans from any method can be executed, traced and compared
uniformly.  Per-query scores are aggregated over a block's queries by
summation, matching how oracle sets are defined for recall measurement.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, PlanError
from .kvcache import PageMeta
from .mage import SelectionPlan, full_layer_indices

METHODS = ("exact", "mage", "quest", "tidal", "window", "oracle", "random", "full")


@dataclass(frozen=True)
class BaselineConfig:
    """Method tag plus the knobs the individual baselines need."""

    method: str
    page_size: int = 16        # quest
    anchor_layer: int | None = None   # tidal; defaults to the first planned layer
    num_sinks: int = 4         # window
    window_size: int = 64      # window
    seed: int = 0              # random

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.page_size < 1:
            raise ConfigError("page_size must be positive")
        if self.num_sinks < 0 or self.window_size < 0:
            raise ConfigError("num_sinks and window_size must be nonnegative")


def _topk_by_score(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k positions by score, ties to the lowest index, sorted ascending."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return np.sort(order[: min(k, len(scores))])


def quest_page_scores(queries: np.ndarray, page_min: np.ndarray,
                      page_max: np.ndarray) -> np.ndarray:
    """Upper-bound importance per page for one KV head.

    queries: (num_queries, head_dim); page_min/page_max: (num_pages,
    head_dim).  Score = sum over queries and dims of
    max(q*page_min, q*page_max), the classic per-page bound on the
    pre-softmax score of any key inside the page.
    """
    lo = queries[:, None, :] * page_min[None, :, :]
    hi = queries[:, None, :] * page_max[None, :, :]
    return np.maximum(lo, hi).sum(axis=(0, 2))


def quest_head_indices(queries: np.ndarray, page_min: np.ndarray,
                       page_max: np.ndarray, budget: int, n: int,
                       page_size: int) -> np.ndarray:
    """Token indices for one head: fill whole pages by importance, trim to budget.

    Pages are taken in score order until at least ``budget`` tokens are
    covered; the overshoot is trimmed from the last (lowest-scoring)
    selected page, dropping its highest positions first.
    """
    if n < 1:
        raise PlanError("cannot build a page plan over an empty cache")
    scores = quest_page_scores(queries, page_min, page_max)
    want = min(budget, n)
    order = np.argsort(-scores, kind="stable")
    chosen: list[np.ndarray] = []
    count = 0
    for page in order:
        start = page * page_size
        stop = min(start + page_size, n)
        chosen.append(np.arange(start, stop, dtype=np.int64))
        count += stop - start
        if count >= want:
            break
    overshoot = count - want
    if overshoot > 0:
        chosen[-1] = chosen[-1][:-overshoot]
    return np.sort(np.concatenate(chosen))


def quest_plan(queries_per_layer: Sequence[np.ndarray], meta: PageMeta,
               budget: int, exact_layer_prefix: int) -> SelectionPlan:
    """Page-importance plan: uniform budget, independent per layer/head.

    queries_per_layer: one (width, num_query_heads, head_dim) array per
    layer (that layer's query projections for the current block).
    """
    n = meta.cache_length
    if n < 1:
        raise PlanError("cannot build a page plan over an empty cache")
    num_layers = len(queries_per_layer)
    num_kv_heads = meta.min_keys[0].shape[1]
    num_query_heads = queries_per_layer[0].shape[1]
    group = num_query_heads // num_kv_heads

    budgets, indices = [], []
    for layer in range(num_layers):
        if layer < exact_layer_prefix:
            budgets.append(n)
            indices.append(full_layer_indices(n, num_kv_heads))
            continue
        q = np.asarray(queries_per_layer[layer])
        heads = []
        for h in range(num_kv_heads):
            rows = q[:, h * group:(h + 1) * group, :].reshape(-1, q.shape[2])
            heads.append(quest_head_indices(rows, meta.min_keys[layer][:, h, :],
                                            meta.max_keys[layer][:, h, :],
                                            budget, n, meta.page_size))
        budgets.append(min(budget, n))
        indices.append(tuple(heads))
    return SelectionPlan(method="quest", context_length=n,
                         exact_layer_prefix=exact_layer_prefix,
                         budgets=tuple(budgets), indices=tuple(indices))


def tidal_plan(anchor_cross: np.ndarray, budget: int, num_layers: int,
               num_kv_heads: int, exact_layer_prefix: int) -> SelectionPlan:
    """Anchor-layer reuse: one selection assigned to every planned layer.

    anchor_cross: (num_query_heads, width, n) renormalized cross-block
    attention at the anchor layer; per head the top positions by summed
    mass over the head's queries form the shared selection.
    """
    num_query_heads, _, n = anchor_cross.shape
    if n < 1:
        raise PlanError("anchor attention covers an empty cache")
    group = num_query_heads // num_kv_heads
    shared = tuple(
        _topk_by_score(anchor_cross[h * group:(h + 1) * group].sum(axis=(0, 1)), budget)
        for h in range(num_kv_heads))
    budgets, indices = [], []
    for layer in range(num_layers):
        if layer < exact_layer_prefix:
            budgets.append(n)
            indices.append(full_layer_indices(n, num_kv_heads))
        else:
            budgets.append(min(budget, n))
            indices.append(tuple(idx.copy() for idx in shared))
    return SelectionPlan(method="tidal", context_length=n,
                         exact_layer_prefix=exact_layer_prefix,
                         budgets=tuple(budgets), indices=tuple(indices))


def window_plan(n: int, num_sinks: int, window_size: int, num_layers: int,
                num_kv_heads: int, exact_layer_prefix: int) -> SelectionPlan:
    """Attention sinks plus a recency window, identical for all layers/heads."""
    if n < 1:
        raise PlanError("cannot build a window plan over an empty cache")
    if num_sinks + window_size < 1:
        raise ConfigError("need at least one sink or window slot")
    sinks = np.arange(min(num_sinks, n), dtype=np.int64)
    recent = np.arange(max(0, n - window_size), n, dtype=np.int64)
    shared = np.union1d(sinks, recent)
    budgets = tuple(len(shared) for _ in range(num_layers))
    indices = tuple(tuple(shared.copy() for _ in range(num_kv_heads))
                    for _ in range(num_layers))
    return SelectionPlan(method="window", context_length=n,
                         exact_layer_prefix=exact_layer_prefix,
                         budgets=budgets, indices=indices)


def oracle_plan(cross_per_layer: Sequence[np.ndarray], budget: int,
                num_kv_heads: int, exact_layer_prefix: int) -> SelectionPlan:
    """Ground-truth plan: per layer/head top positions by summed exact mass."""
    num_layers = len(cross_per_layer)
    n = cross_per_layer[0].shape[2] if num_layers else 0
    if n < 1:
        raise PlanError("oracle attention covers an empty cache")
    num_query_heads = cross_per_layer[0].shape[0]
    group = num_query_heads // num_kv_heads
    budgets, indices = [], []
    for layer in range(num_layers):
        if layer < exact_layer_prefix:
            budgets.append(n)
            indices.append(full_layer_indices(n, num_kv_heads))
            continue
        cross = np.asarray(cross_per_layer[layer])
        heads = tuple(
            _topk_by_score(cross[h * group:(h + 1) * group].sum(axis=(0, 1)), budget)
            for h in range(num_kv_heads))
        budgets.append(min(budget, n))
        indices.append(heads)
    return SelectionPlan(method="oracle", context_length=n,
                         exact_layer_prefix=exact_layer_prefix,
                         budgets=tuple(budgets), indices=tuple(indices))


def random_plan(n: int, budget: int, num_layers: int, num_kv_heads: int,
                exact_layer_prefix: int, seed: int) -> SelectionPlan:
    """Uniform random selection per layer/head; the recall floor baseline."""
    if n < 1:
        raise PlanError("cannot build a random plan over an empty cache")
    rng = np.random.default_rng(seed)
    want = min(budget, n)
    budgets, indices = [], []
    for layer in range(num_layers):
        if layer < exact_layer_prefix:
            budgets.append(n)
            indices.append(full_layer_indices(n, num_kv_heads))
            continue
        budgets.append(want)
        indices.append(tuple(
            np.sort(rng.choice(n, size=want, replace=False)).astype(np.int64)
            for _ in range(num_kv_heads)))
    return SelectionPlan(method="random", context_length=n,
                         exact_layer_prefix=exact_layer_prefix,
                         budgets=tuple(budgets), indices=tuple(indices))


def full_plan(n: int, num_layers: int, num_kv_heads: int,
              exact_layer_prefix: int) -> SelectionPlan:
    if n < 1:
        raise PlanError("cannot build a plan over an empty cache")
    return SelectionPlan(method="full", context_length=n,
                         exact_layer_prefix=exact_layer_prefix,
                         budgets=tuple(n for _ in range(num_layers)),
                         indices=tuple(full_layer_indices(n, num_kv_heads)
                                       for _ in range(num_layers)))


class QuestSelector:
    """Drives page selection inside a forward pass, layer by layer.

    Quest's estimate needs the current layer's queries, which exist only
    once the forward reaches that layer, so selection happens in-line.
    The realized choices are recorded so the step's effective plan can
    be traced.
    """

    def __init__(self, meta: PageMeta, budget: int, exact_layer_prefix: int,
                 num_layers: int, num_kv_heads: int):
        self.meta = meta
        self.budget = budget
        self.exact_layer_prefix = exact_layer_prefix
        self.num_layers = num_layers
        self.num_kv_heads = num_kv_heads
        self._realized: dict[int, tuple[np.ndarray, ...]] = {}

    def indices_for_layer(self, layer, queries):
        n = self.meta.cache_length
        group = queries.shape[1] // self.num_kv_heads
        heads = tuple(
            quest_head_indices(
                queries[:, h * group:(h + 1) * group, :].reshape(-1, queries.shape[2]),
                self.meta.min_keys[layer][:, h, :], self.meta.max_keys[layer][:, h, :],
                self.budget, n, self.meta.page_size)
            for h in range(self.num_kv_heads))
        self._realized[layer] = heads
        return heads

    def observe(self, layer, cross_attn):
        pass

    def realized_plan(self) -> SelectionPlan:
        n = self.meta.cache_length
        budgets, indices = [], []
        for layer in range(self.num_layers):
            if layer in self._realized:
                heads = self._realized[layer]
                budgets.append(len(heads[0]))
                indices.append(heads)
            else:
                budgets.append(n)
                indices.append(full_layer_indices(n, self.num_kv_heads))
        return SelectionPlan(method="quest", context_length=n,
                             exact_layer_prefix=self.exact_layer_prefix,
                             budgets=tuple(budgets), indices=tuple(indices))


class TidalSelector:
    """Anchor-layer reuse inside a forward pass.

    The anchor layer runs exact and its attention is captured to select
    the shared index set; layers after the anchor use it immediately.
    Planned layers *before* the anchor (possible only when the anchor
    sits above the exact prefix) reuse the previous step's selection and
    run exact when none exists yet.
    """

    def __init__(self, anchor_layer: int, budget: int, exact_layer_prefix: int,
                 num_layers: int, num_kv_heads: int, n: int):
        if not (exact_layer_prefix <= anchor_layer < num_layers):
            raise ConfigError(
                f"anchor_layer {anchor_layer} outside planned range "
                f"[{exact_layer_prefix}, {num_layers})")
        self.anchor_layer = anchor_layer
        self.budget = budget
        self.exact_layer_prefix = exact_layer_prefix
        self.num_layers = num_layers
        self.num_kv_heads = num_kv_heads
        self.n = n
        self.current: tuple[np.ndarray, ...] | None = None
        self.previous: tuple[np.ndarray, ...] | None = None

    def start_step(self) -> None:
        self.previous = self.current
        self.current = None

    def indices_for_layer(self, layer, queries):
        if layer == self.anchor_layer:
            return None
        if layer > self.anchor_layer:
            return self.current
        return self.previous

    def observe(self, layer, cross_attn):
        if layer != self.anchor_layer:
            return
        group = cross_attn.shape[0] // self.num_kv_heads
        self.current = tuple(
            _topk_by_score(cross_attn[h * group:(h + 1) * group].sum(axis=(0, 1)),
                           self.budget)
            for h in range(self.num_kv_heads))

    def realized_plan(self) -> SelectionPlan:
        if self.current is None:
            raise PlanError("no anchor attention observed yet")
        return tidal_plan_from_shared(self.current, self.n, self.num_layers,
                                      self.num_kv_heads, self.exact_layer_prefix)


def tidal_plan_from_shared(shared: tuple[np.ndarray, ...], n: int, num_layers: int,
                           num_kv_heads: int, exact_layer_prefix: int) -> SelectionPlan:
    budgets, indices = [], []
    for layer in range(num_layers):
        if layer < exact_layer_prefix:
            budgets.append(n)
            indices.append(full_layer_indices(n, num_kv_heads))
        else:
            budgets.append(len(shared[0]))
            indices.append(tuple(idx.copy() for idx in shared))
    return SelectionPlan(method="tidal", context_length=n,
                         exact_layer_prefix=exact_layer_prefix,
                         budgets=tuple(budgets), indices=tuple(indices))
