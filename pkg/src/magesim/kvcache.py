"""Per-layer, per-KV-head key/value storage with append and indexed gather."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, PlanError, ShapeError


class KVCache:
    """Grow-only key/value store, one (n, num_kv_heads, head_dim) pair per layer.

    Append is the only mutation; rows already stored never change, so a
    gather taken before an append stays valid afterwards.
    """

    def __init__(self, num_layers: int, num_kv_heads: int, head_dim: int):
        if min(num_layers, num_kv_heads, head_dim) < 1:
            raise ConfigError("cache dimensions must be positive")
        self.num_layers = num_layers
        self.num_kv_heads = num_kv_heads
        self.head_dim = head_dim
        empty = (0, num_kv_heads, head_dim)
        self._keys = [np.zeros(empty, dtype=np.float32) for _ in range(num_layers)]
        self._values = [np.zeros(empty, dtype=np.float32) for _ in range(num_layers)]

    @property
    def length(self) -> int:
        return self._keys[0].shape[0]

    def keys(self, layer: int) -> np.ndarray:
        return self._keys[layer]

    def values(self, layer: int) -> np.ndarray:
        return self._values[layer]

    def append(self, key_slabs: Sequence[np.ndarray], value_slabs: Sequence[np.ndarray]) -> None:
        """Append one (width, num_kv_heads, head_dim) slab pair per layer."""
        if len(key_slabs) != self.num_layers or len(value_slabs) != self.num_layers:
            raise ShapeError(
                f"expected {self.num_layers} per-layer slabs, "
                f"got {len(key_slabs)} keys / {len(value_slabs)} values")
        width = key_slabs[0].shape[0]
        expected = (width, self.num_kv_heads, self.head_dim)
        for layer, (k, v) in enumerate(zip(key_slabs, value_slabs)):
            if k.shape != expected or v.shape != expected:
                raise ShapeError(
                    f"layer {layer}: slab shape {k.shape}/{v.shape}, expected {expected}")
        for layer in range(self.num_layers):
            self._keys[layer] = np.concatenate(
                [self._keys[layer], key_slabs[layer].astype(np.float32, copy=False)])
            self._values[layer] = np.concatenate(
                [self._values[layer], value_slabs[layer].astype(np.float32, copy=False)])

    def gather(self, layer: int, kv_head: int, indices) -> tuple[np.ndarray, np.ndarray]:
        """Return (keys, values) rows for one head at the given sorted indices."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size:
            if idx.min() < 0 or idx.max() >= self.length:
                raise PlanError(
                    f"gather index out of range for cache of length {self.length}")
            if np.any(np.diff(idx) <= 0):
                raise PlanError("gather indices must be strictly increasing")
        return (self._keys[layer][idx, kv_head, :],
                self._values[layer][idx, kv_head, :])


@dataclass(frozen=True)
class PageMeta:
    """Elementwise min/max key bounds per fixed-size page of the cache.

    Arrays are indexed [layer][page, kv_head, dim]; the last page may
    cover fewer than ``page_size`` entries.
    """

    page_size: int
    cache_length: int
    min_keys: tuple[np.ndarray, ...]
    max_keys: tuple[np.ndarray, ...]

    @property
    def num_pages(self) -> int:
        return math.ceil(self.cache_length / self.page_size) if self.cache_length else 0

    def page_token_range(self, page: int) -> tuple[int, int]:
        start = page * self.page_size
        return start, min(start + self.page_size, self.cache_length)


def build_page_meta(cache: KVCache, page_size: int) -> PageMeta:
    """Compute min/max key bounds for every page of every layer/head.

    Recomputed from scratch on each call; at desk scale this is cheaper
    to reason about than incremental maintenance across appends.
    """
    if page_size < 1:
        raise ConfigError(f"page_size must be >= 1, got {page_size}")
    n = cache.length
    num_pages = math.ceil(n / page_size) if n else 0
    mins, maxs = [], []
    for layer in range(cache.num_layers):
        keys = cache.keys(layer)
        lo = np.empty((num_pages, cache.num_kv_heads, cache.head_dim), dtype=np.float32)
        hi = np.empty_like(lo)
        for page in range(num_pages):
            seg = keys[page * page_size:(page + 1) * page_size]
            lo[page] = seg.min(axis=0)
            hi[page] = seg.max(axis=0)
        mins.append(lo)
        maxs.append(hi)
    return PageMeta(page_size=page_size, cache_length=n,
                    min_keys=tuple(mins), max_keys=tuple(maxs))
