"""Seeded miniature grouped-query transformer, forward only.

The model is a stand-in backbone: every weight is drawn from a seeded
generator so that identical configs give bit-identical outputs.  Query
projections carry an additive bias drawn at a larger scale than the
weights; this gives every layer a stable per-key salience component on
top of query-specific variation, which is what makes the synthetic
attention landscape worth analysing (zero-mean random features have no
cross-step structure at all).

Attention rows are computed over all cached entries plus the current
block's own entries.  A selection plan restricts which *cached* entries
a layer may read; block-internal attention is always exact.  Restriction
is implemented as masked softmax, so a plan covering the full cache is
bit-identical to running with no plan.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, PlanError, ShapeError
from .kvcache import KVCache

# Per-entry standard deviations relative to 1/sqrt(model_dim).  The query
# bias is deliberately larger so score rankings share structure across
# queries and denoising steps; the output gain is small so the residual
# stream stays position-diverse instead of collapsing onto the shared
# attention direction.
_QUERY_BIAS_GAIN = 5.0
_SCORE_GAIN = 4.0
_OUTPUT_GAIN = 0.7
_POS_BASE = 10000.0


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    embedding: np.ndarray          # (vocab_size, model_dim)
    unembedding: np.ndarray        # (vocab_size, model_dim)
    w_query: tuple[np.ndarray, ...]    # per layer (model_dim, num_query_heads*head_dim)
    b_query: tuple[np.ndarray, ...]    # per layer (num_query_heads, head_dim)
    w_key: tuple[np.ndarray, ...]      # per layer (model_dim, num_kv_heads*head_dim)
    w_value: tuple[np.ndarray, ...]    # per layer (model_dim, num_kv_heads*head_dim)
    w_output: tuple[np.ndarray, ...]   # per layer (num_query_heads*head_dim, model_dim)

    def weight_checksum(self) -> str:
        """Hex digest over all weight bytes, for determinism checks."""
        h = hashlib.sha256()
        h.update(self.embedding.tobytes())
        h.update(self.unembedding.tobytes())
        for group in (self.w_query, self.b_query, self.w_key, self.w_value, self.w_output):
            for w in group:
                h.update(w.tobytes())
        return h.hexdigest()

    def new_cache(self) -> KVCache:
        c = self.config
        return KVCache(c.num_layers, c.num_kv_heads, c.head_dim)


@dataclass
class BlockState:
    """Tokens, mask flags and absolute positions of one decoding block.

    A position's token id is meaningful only while its mask flag is
    False; masked positions are embedded with the reserved mask token.
    """

    tokens: np.ndarray      # (width,) int64
    mask_flags: np.ndarray  # (width,) bool
    positions: np.ndarray   # (width,) int64

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.mask_flags = np.asarray(self.mask_flags, dtype=bool)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if not (len(self.tokens) == len(self.mask_flags) == len(self.positions)):
            raise ShapeError("block fields must share one length")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def num_masked(self) -> int:
        return int(self.mask_flags.sum())


class StepSelector(Protocol):
    """Per-layer index selection driven by the running forward pass.

    ``indices_for_layer`` is called before a layer's attention with that
    layer's query projections; returning None means the layer runs
    exact.  ``observe`` is called after attention with the layer's
    renormalized cross-block distributions, letting selectors that feed
    on attention (anchor-layer reuse) capture what they need.
    """

    def indices_for_layer(self, layer: int, queries: np.ndarray) -> Sequence[np.ndarray] | None: ...

    def observe(self, layer: int, cross_attn: np.ndarray) -> None: ...


def build_model(config: ModelConfig) -> Model:
    """Draw all weights from one seeded generator in a fixed order."""
    rng = np.random.default_rng(config.seed)
    dim = config.model_dim
    scale = np.float32(1.0 / np.sqrt(dim))

    def normal(*shape, gain=1.0):
        return (rng.standard_normal(shape, dtype=np.float32) * scale * np.float32(gain))

    embedding = normal(config.vocab_size, dim)
    unembedding = normal(config.vocab_size, dim)
    w_query, b_query, w_key, w_value, w_output = [], [], [], [], []
    for _ in range(config.num_layers):
        w_query.append(normal(dim, config.num_query_heads * config.head_dim))
        b_query.append(
            rng.standard_normal((config.num_query_heads, config.head_dim), dtype=np.float32)
            * np.float32(_QUERY_BIAS_GAIN / np.sqrt(config.head_dim)))
        w_key.append(normal(dim, config.num_kv_heads * config.head_dim))
        w_value.append(normal(dim, config.num_kv_heads * config.head_dim))
        w_output.append(normal(config.num_query_heads * config.head_dim, dim,
                               gain=_OUTPUT_GAIN))
    model = Model(config=config, embedding=embedding, unembedding=unembedding,
                  w_query=tuple(w_query), b_query=tuple(b_query),
                  w_key=tuple(w_key), w_value=tuple(w_value), w_output=tuple(w_output))
    for name, group in (("embedding", [embedding]), ("unembedding", [unembedding]),
                        ("w_query", w_query), ("b_query", b_query), ("w_key", w_key),
                        ("w_value", w_value), ("w_output", w_output)):
        for w in group:
            if not np.all(np.isfinite(w)):
                raise ConfigError(f"non-finite values in {name}")
    return model


def position_encoding(positions: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sinusoidal encoding, scaled to match embedding magnitude."""
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    half = (dim + 1) // 2
    freqs = _POS_BASE ** (-np.arange(half, dtype=np.float64) / half)
    angles = pos * freqs[None, :]
    enc = np.zeros((len(pos), dim), dtype=np.float64)
    enc[:, 0::2] = np.sin(angles[:, : enc[:, 0::2].shape[1]])
    enc[:, 1::2] = np.cos(angles[:, : enc[:, 1::2].shape[1]])
    return (enc / np.sqrt(dim)).astype(np.float32)


def _embed(model: Model, tokens: np.ndarray, mask_flags: np.ndarray,
           positions: np.ndarray) -> np.ndarray:
    cfg = model.config
    ids = np.where(mask_flags, cfg.mask_token_id, tokens)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ShapeError("token id outside vocabulary")
    return model.embedding[ids] + position_encoding(positions, cfg.model_dim)


def _validate_plan_indices(indices_per_head: Sequence[np.ndarray], n: int,
                           num_kv_heads: int) -> list[np.ndarray]:
    if len(indices_per_head) != num_kv_heads:
        raise PlanError(f"plan must provide {num_kv_heads} head index lists")
    out = []
    for idx in indices_per_head:
        arr = np.asarray(idx, dtype=np.int64)
        if arr.size:
            if n == 0:
                raise PlanError("nonempty plan with empty cache")
            if arr.min() < 0 or arr.max() >= n:
                raise PlanError(f"plan index out of range for cache length {n}")
            if np.any(np.diff(arr) <= 0):
                raise PlanError("plan indices must be strictly increasing")
        out.append(arr)
    return out


def _attend(model: Model, layer: int, x: np.ndarray, keys: np.ndarray,
            values: np.ndarray, n: int,
            allowed_cross: list[np.ndarray] | None) -> tuple[np.ndarray, np.ndarray]:
    """One layer of grouped-query attention over cache + block entries.

    ``allowed_cross`` is a per-KV-head boolean mask (or index list) over
    the first ``n`` key columns; block-internal columns are always
    readable.  Returns (context, attention) with attention zero at
    masked-out columns.
    """
    cfg = model.config
    width = x.shape[0]
    q = (x @ model.w_query[layer]).reshape(width, cfg.num_query_heads, cfg.head_dim)
    q = q + model.b_query[layer][None, :, :]
    q2kv = np.arange(cfg.num_query_heads) // cfg.group_size
    keys_q = keys[:, q2kv, :]     # (n+width, H_q, d)
    vals_q = values[:, q2kv, :]
    scores = np.einsum("bhd,nhd->hbn", q, keys_q).astype(np.float32)
    scores *= np.float32(_SCORE_GAIN / (np.sqrt(cfg.head_dim) * cfg.skew_temperature))

    if allowed_cross is not None:
        allow = np.zeros((cfg.num_kv_heads, n + width), dtype=bool)
        allow[:, n:] = True
        for h, idx in enumerate(allowed_cross):
            allow[h, idx] = True
        scores = np.where(allow[q2kv][:, None, :], scores, np.float32(-np.inf))

    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    attn = weights / weights.sum(axis=-1, keepdims=True)
    ctx = np.einsum("hbn,nhd->bhd", attn, vals_q).astype(np.float32)
    return ctx.reshape(width, cfg.num_query_heads * cfg.head_dim), attn


def _logits(model: Model, x: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + np.float32(1e-6))
    return (x / norm) @ model.unembedding.T


def forward_block(model: Model, cache: KVCache, block: BlockState,
                  plan=None, selector: StepSelector | None = None,
                  ) -> tuple[np.ndarray, np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Run the block through all layers against the current cache.

    Returns ``(logits, attn, new_kv)`` where ``attn`` has shape
    (num_layers, num_query_heads, width, n + width) and rows are
    probability distributions, and ``new_kv`` holds the block's per-layer
    key/value slabs for a later cache append.

    ``plan`` supplies fixed per-layer per-head cache indices; ``selector``
    supplies them per layer from the running queries.  Layers below
    ``exact_layer_prefix`` always run exact.
    """
    if plan is not None and selector is not None:
        raise PlanError("pass either a fixed plan or a selector, not both")
    cfg = model.config
    n = cache.length
    width = len(block)
    plan_indices: dict[int, list[np.ndarray]] = {}
    if plan is not None:
        for layer in range(cfg.exact_layer_prefix, cfg.num_layers):
            plan_indices[layer] = _validate_plan_indices(
                plan.indices[layer], n, cfg.num_kv_heads)

    x = _embed(model, block.tokens, block.mask_flags, block.positions)
    attn_all = np.zeros((cfg.num_layers, cfg.num_query_heads, width, n + width),
                        dtype=np.float32)
    new_kv: list[tuple[np.ndarray, np.ndarray]] = []
    for layer in range(cfg.num_layers):
        k_blk = (x @ model.w_key[layer]).reshape(width, cfg.num_kv_heads, cfg.head_dim)
        v_blk = (x @ model.w_value[layer]).reshape(width, cfg.num_kv_heads, cfg.head_dim)
        keys = np.concatenate([cache.keys(layer), k_blk]) if n else k_blk
        values = np.concatenate([cache.values(layer), v_blk]) if n else v_blk

        allowed = None
        if layer >= cfg.exact_layer_prefix and n > 0:
            if layer in plan_indices:
                allowed = plan_indices[layer]
            elif selector is not None:
                q = (x @ model.w_query[layer]).reshape(width, cfg.num_query_heads, cfg.head_dim)
                q = q + model.b_query[layer][None, :, :]
                chosen = selector.indices_for_layer(layer, q)
                if chosen is not None:
                    allowed = _validate_plan_indices(chosen, n, cfg.num_kv_heads)

        ctx, attn = _attend(model, layer, x, keys, values, n, allowed)
        attn_all[layer] = attn
        if selector is not None and n > 0:
            cross = attn[:, :, :n]
            total = cross.sum(axis=-1, keepdims=True)
            with np.errstate(invalid="ignore", divide="ignore"):
                selector.observe(layer, np.where(total > 0, cross / total, 0.0))
        x = x + ctx @ model.w_output[layer]
        new_kv.append((k_blk, v_blk))
    return _logits(model, x), attn_all, new_kv


def forward_masked(model: Model, tokens: np.ndarray, mask_flags: np.ndarray,
                   positions: np.ndarray, allowed: np.ndarray,
                   head_allowed: Sequence[np.ndarray | None] | None = None,
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Cache-free forward over a full sequence under an attention mask.

    ``allowed`` is a (seq, seq) boolean matrix; ``head_allowed`` may
    override it per layer with a (num_kv_heads, seq, seq) matrix (used
    for per-head sparse masks on the training path).  Every query row
    must keep at least one readable key.
    """
    cfg = model.config
    seq = len(tokens)
    if allowed.shape != (seq, seq):
        raise ShapeError(f"mask shape {allowed.shape} does not match sequence {seq}")
    if not allowed.any(axis=1).all():
        raise ShapeError("attention mask leaves a query row with no readable keys")
    x = _embed(model, np.asarray(tokens, dtype=np.int64),
               np.asarray(mask_flags, dtype=bool), np.asarray(positions, dtype=np.int64))
    q2kv = np.arange(cfg.num_query_heads) // cfg.group_size
    attn_all = np.zeros((cfg.num_layers, cfg.num_query_heads, seq, seq), dtype=np.float32)
    for layer in range(cfg.num_layers):
        q = (x @ model.w_query[layer]).reshape(seq, cfg.num_query_heads, cfg.head_dim)
        q = q + model.b_query[layer][None, :, :]
        k = (x @ model.w_key[layer]).reshape(seq, cfg.num_kv_heads, cfg.head_dim)
        v = (x @ model.w_value[layer]).reshape(seq, cfg.num_kv_heads, cfg.head_dim)
        scores = np.einsum("bhd,nhd->hbn", q, k[:, q2kv, :]).astype(np.float32)
        scores *= np.float32(_SCORE_GAIN / (np.sqrt(cfg.head_dim) * cfg.skew_temperature))
        mask = allowed[None, :, :]
        if head_allowed is not None and head_allowed[layer] is not None:
            mask = head_allowed[layer]
            if mask.shape != (cfg.num_kv_heads, seq, seq):
                raise ShapeError("per-head mask has the wrong shape")
            if not mask.any(axis=2).all():
                raise ShapeError("per-head mask leaves a query row with no readable keys")
            mask = mask[q2kv]
        scores = np.where(mask, scores, np.float32(-np.inf))
        scores -= scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        attn = weights / weights.sum(axis=-1, keepdims=True)
        attn_all[layer] = attn
        ctx = np.einsum("hbn,nhd->bhd", attn, v[:, q2kv, :]).astype(np.float32)
        x = x + ctx.reshape(seq, cfg.num_query_heads * cfg.head_dim) @ model.w_output[layer]
    return _logits(model, x), attn_all
