"""Forward-only training pipeline: duplication, masking, distillation.

A training sample is duplicated into a clean half and a noisy half laid
out as [clean || noisy] over shared positions.  The offset block-causal
mask keeps the clean side autoregressive at block granularity and lets
each noisy block read only strictly earlier clean blocks plus itself,
so the denoising target never leaks.  Three forward passes produce the
objective: a gradient-free all-masked pass selects sparse indices by
cumulative attention mass, the sparse-constrained pass gives student
logits, and an exact pass gives the teacher's.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .model import Model, forward_masked


@dataclass(frozen=True)
class TrainingPair:
    clean: np.ndarray        # (length,) int64 original tokens
    noisy: np.ndarray        # (length,) clean with masked positions replaced
    mask_flags: np.ndarray   # (length,) bool, True where noisy holds the mask id
    block_size: int
    mask_ratio: float
    seed: int
    original_length: int     # pre-truncation length, recorded

    @property
    def num_blocks(self) -> int:
        return len(self.clean) // self.block_size


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    kl: float
    kl_weight: float
    temperature: float

    @property
    def total(self) -> float:
        return self.ce + self.kl_weight * self.kl


def make_training_pair(tokens, block_size: int, mask_ratio: float, seed: int,
                       mask_token_id: int) -> TrainingPair:
    """Mask a seeded subset of each block: round(ratio * block_size) positions."""
    if not (0.0 <= mask_ratio <= 1.0):
        raise ConfigError(f"mask_ratio must lie in [0, 1], got {mask_ratio}")
    tokens = np.asarray(tokens, dtype=np.int64)
    original = len(tokens)
    usable = (original // block_size) * block_size
    if usable == 0:
        raise DataError(f"need at least one block of {block_size} tokens, got {original}")
    clean = tokens[:usable].copy()
    if np.any(clean == mask_token_id):
        raise DataError("input tokens must not contain the reserved mask id")
    per_block = int(mask_ratio * block_size + 0.5)
    rng = np.random.default_rng(seed)
    flags = np.zeros(usable, dtype=bool)
    for b in range(usable // block_size):
        if per_block:
            chosen = rng.choice(block_size, size=per_block, replace=False)
            flags[b * block_size + chosen] = True
    noisy = np.where(flags, mask_token_id, clean)
    return TrainingPair(clean=clean, noisy=noisy, mask_flags=flags,
                        block_size=block_size, mask_ratio=mask_ratio, seed=seed,
                        original_length=original)


def offset_block_causal_mask(num_blocks: int, block_size: int) -> np.ndarray:
    """Attention mask over the [clean || noisy] layout.

    Clean queries see their own block bidirectionally and earlier clean
    blocks; noisy queries see strictly earlier clean blocks and their
    own noisy block; nothing else.
    """
    if num_blocks < 1 or block_size < 1:
        raise ConfigError("num_blocks and block_size must be positive")
    half = num_blocks * block_size
    blk = np.arange(half) // block_size
    allowed = np.zeros((2 * half, 2 * half), dtype=bool)
    allowed[:half, :half] = blk[:, None] >= blk[None, :]          # clean -> clean
    allowed[half:, :half] = blk[:, None] > blk[None, :]           # noisy -> earlier clean
    allowed[half:, half:] = blk[:, None] == blk[None, :]          # noisy -> own block
    return allowed


def top_p_select(distribution, p: float) -> np.ndarray:
    """Smallest set of highest-mass indices reaching cumulative mass p.

    Ties go to the lower index; the input is renormalized internally and
    at least one index is always returned.
    """
    if not (0.0 < p <= 1.0):
        raise ConfigError(f"p must lie in (0, 1], got {p}")
    dist = np.asarray(distribution, dtype=np.float64)
    total = dist.sum()
    if abs(total - 1.0) > 1e-4:
        raise ConfigError(f"distribution must sum to 1 within 1e-4, got {total}")
    dist = dist / total
    order = np.argsort(-dist, kind="stable")
    cum = np.cumsum(dist[order])
    count = int(np.searchsorted(cum, p - 1e-9) + 1)
    count = min(max(count, 1), int((dist > 0).sum()) or 1)
    return np.sort(order[:count])


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def distill_loss(student_logits: np.ndarray, teacher_logits: np.ndarray,
                 targets: np.ndarray, kl_weight: float, temperature: float,
                 mask=None) -> LossBreakdown:
    """Cross-entropy on targets plus weighted student-to-teacher KL.

    Cross-entropy uses temperature 1; the KL term compares tempered
    softmax distributions, KL(student || teacher), averaged with the
    cross-entropy over the selected (masked) positions only.
    """
    student = np.asarray(student_logits, dtype=np.float64)
    teacher = np.asarray(teacher_logits, dtype=np.float64)
    if student.shape != teacher.shape:
        raise ShapeError(f"logit shapes differ: {student.shape} vs {teacher.shape}")
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    sel = np.ones(student.shape[0], dtype=bool) if mask is None else np.asarray(mask, bool)
    if not sel.any():
        raise DataError("no positions selected for the loss")
    student, teacher = student[sel], teacher[sel]
    targets = np.asarray(targets, dtype=np.int64)[sel] if mask is not None \
        else np.asarray(targets, dtype=np.int64)
    if targets.min() < 0 or targets.max() >= student.shape[1]:
        raise ShapeError("target id outside the vocabulary")

    log_probs = _log_softmax(student)
    ce = float(-log_probs[np.arange(len(targets)), targets].mean())

    log_ps = _log_softmax(student / temperature)
    log_pt = _log_softmax(teacher / temperature)
    kl = float((np.exp(log_ps) * (log_ps - log_pt)).sum(axis=-1).mean())
    kl = max(kl, 0.0)
    return LossBreakdown(ce=ce, kl=kl, kl_weight=kl_weight, temperature=temperature)


@dataclass
class StageArtifacts:
    selected: list[list[dict[int, np.ndarray]]]   # [layer][kv_head] -> {block: indices}
    sparse_masks: list[np.ndarray | None]         # per layer (H_kv, S, S) or None
    student_logits: np.ndarray
    teacher_logits: np.ndarray
    selection_attention: np.ndarray


def three_stage_forward(model: Model, pair: TrainingPair, top_p: float,
                        kl_weight: float, temperature: float,
                        ) -> tuple[LossBreakdown, StageArtifacts]:
    """Selection pass, sparse student pass, exact teacher pass, then the loss.

    Stage 1 runs the noisy half fully masked and picks, per planned
    layer / KV head / noisy block, the union over the head's queries of
    their cumulative-mass selections from strictly earlier clean blocks.
    Stage 2 applies those selections to the noisy-to-clean region only.
    Stage 3 is the exact teacher.  The loss is taken at masked noisy
    positions against the clean tokens.
    """
    cfg = model.config
    B = pair.block_size
    nb = pair.num_blocks
    half = nb * B
    seq = 2 * half
    positions = np.concatenate([np.arange(half), np.arange(half)])
    dense = offset_block_causal_mask(nb, B)
    group = cfg.group_size

    # Stage 1: all-masked noisy half, exact attention, no gradients anywhere.
    tokens1 = np.concatenate([pair.clean, pair.clean])   # ids under masks are unused
    flags1 = np.concatenate([np.zeros(half, bool), np.ones(half, bool)])
    _, attn1 = forward_masked(model, tokens1, flags1, positions, dense)

    selected: list[list[dict[int, np.ndarray]]] = []
    sparse_masks: list[np.ndarray | None] = []
    for layer in range(cfg.num_layers):
        if layer < cfg.exact_layer_prefix:
            selected.append([])
            sparse_masks.append(None)
            continue
        per_head: list[dict[int, np.ndarray]] = []
        head_mask = np.repeat(dense[None, :, :], cfg.num_kv_heads, axis=0)
        for h in range(cfg.num_kv_heads):
            chosen: dict[int, np.ndarray] = {}
            for blk in range(1, nb):
                r0, r1 = half + blk * B, half + (blk + 1) * B
                cross = attn1[layer, h * group:(h + 1) * group, r0:r1, :blk * B]
                rows = cross.reshape(-1, blk * B).astype(np.float64)
                totals = rows.sum(axis=1, keepdims=True)
                rows = rows / totals
                union = np.zeros(blk * B, dtype=bool)
                for row in rows:
                    union[top_p_select(row, top_p)] = True
                idx = np.nonzero(union)[0]
                chosen[blk] = idx
                keep = np.zeros(blk * B, dtype=bool)
                keep[idx] = True
                head_mask[h, r0:r1, :blk * B] &= keep[None, :]
            per_head.append(chosen)
        selected.append(per_head)
        sparse_masks.append(head_mask)

    # Stage 2: sparse student on the actual noisy tokens.
    tokens2 = np.concatenate([pair.clean, pair.noisy])
    flags2 = np.concatenate([np.zeros(half, bool), pair.mask_flags])
    logits2, _ = forward_masked(model, tokens2, flags2, positions, dense,
                                head_allowed=sparse_masks)

    # Stage 3: exact teacher on the same tokens.
    logits3, _ = forward_masked(model, tokens2, flags2, positions, dense)

    student = logits2[half:][pair.mask_flags]
    teacher = logits3[half:][pair.mask_flags]
    targets = pair.clean[pair.mask_flags]
    loss = distill_loss(student, teacher, targets, kl_weight, temperature)
    artifacts = StageArtifacts(selected=selected, sparse_masks=sparse_masks,
                               student_logits=logits2, teacher_logits=logits3,
                               selection_attention=attn1)
    return loss, artifacts


def pair_to_json(pair: TrainingPair) -> str:
    """One JSON-lines record for offline inspection."""
    return json.dumps({
        "clean": pair.clean.tolist(),
        "noisy": pair.noisy.tolist(),
        "mask_flags": pair.mask_flags.astype(int).tolist(),
        "block_size": pair.block_size,
        "mask_ratio": pair.mask_ratio,
        "seed": pair.seed,
        "original_length": pair.original_length,
    })


def mask_to_csv(mask: np.ndarray) -> str:
    """Dense 0/1 rows for visualizing an attention mask."""
    return "\n".join(",".join(str(int(v)) for v in row) for row in mask) + "\n"
