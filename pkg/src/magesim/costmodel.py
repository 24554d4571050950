"""Analytic per-step latency model for exact and sparse decoding.

Everything is parameter-relative: the model's job is breakdowns,
overlap behaviour and break-even trends under stated bandwidth, launch
and compute parameters, never absolute hardware numbers.

Per layer, an attention pass over m cache entries costs one kernel
launch, m * bytes_per_kv_entry of reads, and block * heads * dim * m
flop-equivalents.  Index selection is priced as a per-row primitive:
one top-k over m elements reads m * element_size bytes and spends m
compare units.  The mask-guided first step puts its selection rows on
an async lane and combines lanes with ``overlap``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError, CostModelError

KINDS = ("exact", "mage_first", "mage_rest", "quest", "tidal")


@dataclass(frozen=True)
class CostParams:
    bandwidth: float          # bytes per unit time
    launch_overhead: float    # time per kernel-equivalent operation
    compute_rate: float       # flop-equivalents per unit time
    element_size: int         # bytes per stored scalar
    num_layers: int
    num_query_heads: int
    num_kv_heads: int
    head_dim: int
    block_size: int
    page_size: int = 16

    def __post_init__(self) -> None:
        for name in ("bandwidth", "launch_overhead", "compute_rate", "element_size",
                     "num_layers", "num_query_heads", "num_kv_heads", "head_dim",
                     "block_size", "page_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be strictly positive")

    @property
    def bytes_per_kv_entry(self) -> float:
        """Key plus value bytes for one token at one layer."""
        return 2 * self.head_dim * self.num_kv_heads * self.element_size


@dataclass(frozen=True)
class LatencyReport:
    kind: str
    context_length: int
    budget: int
    phases: dict[str, float]        # index_selection / attention / other
    main_stream: float
    async_stream: float
    serial_tail: float
    total: float
    speedup_vs_exact: float


def overlap(main: float, async_work: float, serial_tail: float) -> float:
    """Two-lane schedule: lanes run concurrently, the tail runs after."""
    if min(main, async_work, serial_tail) < 0:
        raise CostModelError("overlap inputs must be nonnegative")
    return max(main, async_work) + serial_tail


def _attention_time(params: CostParams, entries: float) -> float:
    reads = entries * params.bytes_per_kv_entry / params.bandwidth
    flops = (params.block_size * params.num_query_heads * params.head_dim
             * entries / params.compute_rate)
    return reads + flops


def _selection_row_time(params: CostParams, entries: float) -> float:
    return (entries * params.element_size / params.bandwidth
            + entries / params.compute_rate)


def step_latency(params: CostParams, n: int, budget: int, kind: str) -> LatencyReport:
    """Modeled time of one denoising step of the given kind."""
    if kind not in KINDS:
        raise CostModelError(f"unknown step kind {kind!r}; expected one of {KINDS}")
    if n < 1:
        raise CostModelError("context length must be positive")
    if kind != "exact" and budget > n:
        raise CostModelError(f"budget {budget} exceeds context {n}")
    L = params.num_layers

    exact_attention = L * _attention_time(params, n)
    exact_other = L * params.launch_overhead
    exact_total = exact_attention + exact_other

    if kind == "exact":
        phases = {"index_selection": 0.0, "attention": exact_attention,
                  "other": exact_other}
        main, async_work, tail = exact_total, 0.0, 0.0
    elif kind == "mage_rest":
        attention = L * _attention_time(params, budget)
        phases = {"index_selection": 0.0, "attention": attention,
                  "other": L * params.launch_overhead}
        main, async_work, tail = attention + phases["other"], 0.0, 0.0
    elif kind == "mage_first":
        # Exact pass on the main lane; union/selection rows on the async lane.
        rows = params.num_query_heads * params.block_size
        selection = L * (params.launch_overhead + rows * _selection_row_time(params, n))
        phases = {"index_selection": selection, "attention": exact_attention,
                  "other": exact_other + params.launch_overhead}
        main, async_work, tail = exact_total, selection, params.launch_overhead
    elif kind == "quest":
        meta_entries = math.ceil(n / params.page_size)
        meta_bytes = meta_entries * 2 * params.head_dim * params.element_size \
            * params.num_kv_heads
        estimation = L * meta_bytes / params.bandwidth
        attention = L * _attention_time(params, budget)
        phases = {"index_selection": estimation, "attention": attention,
                  "other": 2 * L * params.launch_overhead}
        main, async_work, tail = estimation + attention + phases["other"], 0.0, 0.0
    else:  # tidal
        attention = _attention_time(params, n) + (L - 1) * _attention_time(params, budget)
        selection = params.num_kv_heads * _selection_row_time(params, n)
        phases = {"index_selection": selection, "attention": attention,
                  "other": (L + 1) * params.launch_overhead}
        main, async_work, tail = sum(phases.values()), 0.0, 0.0

    total = overlap(main, async_work, tail)
    return LatencyReport(kind=kind, context_length=n, budget=budget, phases=phases,
                         main_stream=main, async_stream=async_work, serial_tail=tail,
                         total=total, speedup_vs_exact=exact_total / total)


def break_even(exact_step: float, first_step: float, rest_step: float) -> int | None:
    """Smallest step count at which the plan-once method is ahead.

    A run of s steps costs ``first + (s-1) * rest`` against ``s * exact``.
    If the first step is no slower than the baseline the method is never
    behind, so the break-even is 1; otherwise it is the smallest s with
    strictly lower cumulative time.  Returns None when ``rest >= exact``
    (catching up never happens).
    """
    if min(exact_step, first_step, rest_step) < 0:
        raise CostModelError("step times must be nonnegative")
    if first_step <= exact_step:
        return 1
    if rest_step >= exact_step:
        return None
    ratio = (first_step - rest_step) / (exact_step - rest_step)
    s = max(1, math.floor(ratio) + 1)
    # Guard the float boundary on either side.
    while s > 1 and first_step + (s - 2) * rest_step < (s - 1) * exact_step:
        s -= 1
    while not (first_step + (s - 1) * rest_step < s * exact_step):
        s += 1
    return s
