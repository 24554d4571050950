"""Block-wise denoising loop: plan once, reuse, unmask, append.

Every method runs its first denoising step with exact attention.  The
mask-guided method builds its plan from that step's attention and
reuses it verbatim for the rest of the block; page and anchor baselines
re-select each step from their own inputs; the window plan is static
per block.  After the last step one more exact pass over the decoded
block produces the key/value slabs that are appended to the cache, so
cached entries always reflect the final tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .baselines import (BaselineConfig, QuestSelector, TidalSelector,
                        window_plan)
from .config import ModelConfig
from .errors import ConfigError, StateError
from .kvcache import KVCache, build_page_meta
from .mage import SelectionPlan, build_plan, cross_block_distributions
from .model import BlockState, Model, forward_block


@dataclass(frozen=True)
class DecodeConfig:
    """Knobs for one decoding run.

    Exactly one of ``steps`` / ``tokens_per_step`` may be given; the
    other is derived so that ``steps * tokens_per_step >= block_size``.
    """

    block_size: int
    budget: int
    min_budget: int = 1
    method: str = "exact"
    num_blocks: int = 1
    seed: int = 0
    tokens_per_step: int | None = None
    steps: int | None = None
    baseline: BaselineConfig | None = None
    trace_oracle: bool = False
    trace_attention: bool = False
    keep_logits: bool = False

    def __post_init__(self) -> None:
        if self.block_size < 1 or self.num_blocks < 1:
            raise ConfigError("block_size and num_blocks must be positive")
        if self.budget < 1 or self.min_budget < 1 or self.budget < self.min_budget:
            raise ConfigError("need budget >= min_budget >= 1")
        if self.steps is None and self.tokens_per_step is None:
            object.__setattr__(self, "tokens_per_step", 1)
        if self.tokens_per_step is not None:
            tps = self.tokens_per_step
            if tps < 1 or (tps & (tps - 1)) != 0:
                raise ConfigError(f"tokens_per_step must be a power of two, got {tps}")
            derived = math.ceil(self.block_size / tps)
            if self.steps is None:
                object.__setattr__(self, "steps", derived)
            elif self.steps != derived:
                raise ConfigError("give either steps or tokens_per_step, not both")
        else:
            if self.steps < 1:
                raise ConfigError("steps must be positive")
            object.__setattr__(self, "tokens_per_step",
                               math.ceil(self.block_size / self.steps))
        if self.steps * self.tokens_per_step < self.block_size:
            raise ConfigError("steps * tokens_per_step must cover the block")
        if self.method in ("quest", "tidal", "window") and self.baseline is None:
            object.__setattr__(self, "baseline", BaselineConfig(method=self.method))


@dataclass
class StepRecord:
    """Everything observed during one denoising step."""

    step: int
    context_length: int
    plan: SelectionPlan | None
    unmasked_positions: np.ndarray
    unmasked_tokens: np.ndarray
    confidences: np.ndarray
    cross_reads_per_layer: list[int]
    layers_executed: int
    oracle_sets: list[list[np.ndarray]] | None = None
    cross_attention: list[np.ndarray] | None = None
    logits: np.ndarray | None = None


@dataclass
class DenoiseTrace:
    block_index: int
    context_length: int
    num_steps: int
    budget: int
    plan: SelectionPlan | None
    records: list[StepRecord] = field(default_factory=list)


def unmask_step(logits: np.ndarray, mask_flags: np.ndarray,
                tokens_per_step: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pick the highest-confidence masked positions and their argmax tokens.

    Confidence is the max softmax probability of a position's row; ties
    go to the lower position index.  Returns (positions, tokens,
    confidences) for the unmasked subset.
    """
    mask_flags = np.asarray(mask_flags, dtype=bool)
    masked = np.nonzero(mask_flags)[0]
    if masked.size == 0:
        raise StateError("no masked positions remain in this block")
    rows = logits[masked].astype(np.float32)
    rows = rows - rows.max(axis=1, keepdims=True)
    probs = np.exp(rows)
    probs /= probs.sum(axis=1, keepdims=True)
    conf = probs.max(axis=1)
    order = np.lexsort((masked, -conf))
    take = order[: min(tokens_per_step, masked.size)]
    positions = masked[take]
    tokens = logits[positions].argmax(axis=1).astype(np.int64)
    return positions, tokens, conf[take]


def _oracle_sets(cross_per_layer: list[np.ndarray], budget: int,
                 num_kv_heads: int, exact_layer_prefix: int) -> list[list[np.ndarray]]:
    """Per planned-layer, per-head top-``budget`` indices by summed mass."""
    out: list[list[np.ndarray]] = []
    for layer in range(exact_layer_prefix, len(cross_per_layer)):
        cross = cross_per_layer[layer]
        group = cross.shape[0] // num_kv_heads
        heads = []
        for h in range(num_kv_heads):
            mass = cross[h * group:(h + 1) * group].sum(axis=(0, 1))
            order = np.argsort(-mass, kind="stable")
            heads.append(np.sort(order[: min(budget, mass.size)]))
        out.append(heads)
    return out


def _cross_reads(cfg: ModelConfig, n: int, plan: SelectionPlan | None,
                 exact_step: bool) -> list[int]:
    reads = []
    for layer in range(cfg.num_layers):
        if exact_step or plan is None or layer < cfg.exact_layer_prefix:
            reads.append(n)
        else:
            reads.append(int(min(plan.budgets[layer], n)))
    return reads


def denoise_block(model: Model, cache: KVCache, config: DecodeConfig,
                  start_position: int | None = None,
                  ) -> tuple[BlockState, DenoiseTrace]:
    """Generate one block: exact first step, method-specific sparse rest."""
    cfg = model.config
    n = cache.length
    width = config.block_size
    start = n if start_position is None else start_position
    block = BlockState(tokens=np.zeros(width, dtype=np.int64),
                       mask_flags=np.ones(width, dtype=bool),
                       positions=np.arange(start, start + width, dtype=np.int64))
    trace = DenoiseTrace(block_index=0, context_length=n, num_steps=config.steps,
                         budget=config.budget, plan=None)

    plan: SelectionPlan | None = None
    selector = None
    base = config.baseline
    if n > 0 and config.method == "window":
        plan = window_plan(n, base.num_sinks, base.window_size, cfg.num_layers,
                           cfg.num_kv_heads, cfg.exact_layer_prefix)
        trace.plan = plan
    elif n > 0 and config.method == "quest":
        selector = QuestSelector(build_page_meta(cache, base.page_size), config.budget,
                                 cfg.exact_layer_prefix, cfg.num_layers, cfg.num_kv_heads)
    elif n > 0 and config.method == "tidal":
        anchor = base.anchor_layer if base.anchor_layer is not None else cfg.exact_layer_prefix
        selector = TidalSelector(anchor, config.budget, cfg.exact_layer_prefix,
                                 cfg.num_layers, cfg.num_kv_heads, n)

    for step in range(1, config.steps + 1):
        exact_step = step == 1 or (plan is None and selector is None)
        if exact_step:
            logits, attn, _ = forward_block(model, cache, block)
        elif selector is not None:
            if isinstance(selector, TidalSelector):
                selector.start_step()
            logits, attn, _ = forward_block(model, cache, block, selector=selector)
        else:
            logits, attn, _ = forward_block(model, cache, block, plan=plan)

        cross = None
        if n > 0 and (config.trace_oracle or config.trace_attention):
            if exact_step:
                cross = [cross_block_distributions(attn[l], n)
                         for l in range(cfg.num_layers)]
            else:
                # Sparse execution: oracle sets need a parallel exact pass.
                _, attn_exact, _ = forward_block(model, cache, block)
                cross = [cross_block_distributions(attn_exact[l], n)
                         for l in range(cfg.num_layers)]

        if step == 1 and config.method == "mage" and n > 0:
            plan, _ = build_plan([attn[l] for l in range(cfg.num_layers)], n,
                                 num_kv_heads=cfg.num_kv_heads,
                                 exact_layer_prefix=cfg.exact_layer_prefix,
                                 budget=config.budget, min_budget=config.min_budget)
            trace.plan = plan

        step_plan: SelectionPlan | None = None
        if not exact_step:
            step_plan = plan if selector is None else selector.realized_plan()

        positions, tokens, confidences = unmask_step(
            logits, block.mask_flags, config.tokens_per_step)
        record = StepRecord(
            step=step, context_length=n, plan=step_plan,
            unmasked_positions=positions, unmasked_tokens=tokens,
            confidences=confidences,
            cross_reads_per_layer=_cross_reads(cfg, n, step_plan, exact_step),
            layers_executed=cfg.num_layers)
        if config.trace_oracle and cross is not None:
            record.oracle_sets = _oracle_sets(cross, config.budget, cfg.num_kv_heads,
                                              cfg.exact_layer_prefix)
        if config.trace_attention and cross is not None:
            record.cross_attention = cross
        if config.keep_logits:
            record.logits = logits
        trace.records.append(record)

        block.tokens[positions] = tokens
        block.mask_flags[positions] = False
        if block.num_masked == 0:
            break

    if block.num_masked != 0:
        raise StateError("denoising loop ended with masked positions")

    # Cache entries reflect the decoded block: one exact pass, logits unused.
    _, _, new_kv = forward_block(model, cache, block)
    cache.append([kv[0] for kv in new_kv], [kv[1] for kv in new_kv])
    return block, trace


def synthesize_prompt(model_config: ModelConfig, length: int, seed: int) -> np.ndarray:
    """Deterministic prompt tokens; never emits the reserved mask id."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, model_config.vocab_size - 1, size=length, dtype=np.int64)


def prefill(model: Model, cache: KVCache, tokens: np.ndarray) -> None:
    """Feed prompt tokens through exact attention, appending their KV."""
    cfg = model.config
    pos = 0
    tokens = np.asarray(tokens, dtype=np.int64)
    while pos < len(tokens):
        chunk = tokens[pos:pos + cfg.block_size]
        state = BlockState(tokens=chunk,
                           mask_flags=np.zeros(len(chunk), dtype=bool),
                           positions=np.arange(pos, pos + len(chunk), dtype=np.int64))
        _, _, new_kv = forward_block(model, cache, state)
        cache.append([kv[0] for kv in new_kv], [kv[1] for kv in new_kv])
        pos += len(chunk)


def generate(model: Model, prompt_len: int, num_blocks: int, config: DecodeConfig,
             prompt_tokens: np.ndarray | None = None,
             ) -> tuple[np.ndarray, list[DenoiseTrace]]:
    """Prefill a prompt, then decode blocks left to right."""
    if num_blocks < 1:
        raise ConfigError("num_blocks must be positive")
    cache = model.new_cache()
    prompt = (synthesize_prompt(model.config, prompt_len, config.seed)
              if prompt_tokens is None else np.asarray(prompt_tokens, dtype=np.int64))
    prefill(model, cache, prompt)
    pieces = [prompt]
    traces = []
    for b in range(num_blocks):
        block, trace = denoise_block(model, cache, config)
        trace.block_index = b
        traces.append(trace)
        pieces.append(block.tokens)
    return np.concatenate(pieces), traces
