"""Trace persistence: a binary attention format and a JSON-lines format.

The binary format stores per-step, per-layer cross-block attention so
the recall and skewness analyses can run on attention exported from any
model.  Layout, little-endian:

    magic   10 bytes  b"MAGETRACE1"
    header  5 x uint32: num_layers, num_query_heads, num_kv_heads,
                        block_width, num_steps
    lengths num_steps x uint32: cache length per step
    payload per step, per layer: num_query_heads * block_width * length
            float32 values, row-major (head, query, key); rows are
            probability distributions over the cache.

The JSON-lines format captures what the decoder observed per step:
plans, oracle sets, unmasked positions, confidences and read counts.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .decoder import DenoiseTrace
from .errors import TraceParseError
from .mage import SelectionPlan

MAGIC = b"MAGETRACE1"
_ROW_SUM_TOL = 1e-3


@dataclass(frozen=True)
class AttentionTrace:
    num_layers: int
    num_query_heads: int
    num_kv_heads: int
    block_width: int
    lengths: tuple[int, ...]                       # cache length per step
    attention: tuple[tuple[np.ndarray, ...], ...]  # [step][layer] (H_q, B, n_t)


def write_attention_trace(path: str | Path, trace: AttentionTrace) -> None:
    parts = [MAGIC,
             struct.pack("<5I", trace.num_layers, trace.num_query_heads,
                         trace.num_kv_heads, trace.block_width, len(trace.lengths)),
             struct.pack(f"<{len(trace.lengths)}I", *trace.lengths)]
    for step_layers, n in zip(trace.attention, trace.lengths):
        for layer_attn in step_layers:
            arr = np.ascontiguousarray(layer_attn, dtype=np.float32)
            expected = (trace.num_query_heads, trace.block_width, n)
            if arr.shape != expected:
                raise TraceParseError(f"attention shape {arr.shape} != {expected}")
            parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_attention_trace(path: str | Path) -> AttentionTrace:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise TraceParseError(f"{path}: missing {MAGIC!r} magic at offset 0")
    off = len(MAGIC)
    if len(data) < off + 20:
        raise TraceParseError(
            f"{path}: truncated header at offset {off}: need 20 bytes, "
            f"have {len(data) - off}")
    num_layers, h_q, h_kv, width, num_steps = struct.unpack_from("<5I", data, off)
    off += 20
    need = 4 * num_steps
    if len(data) < off + need:
        raise TraceParseError(
            f"{path}: truncated step lengths at offset {off}: need {need} bytes, "
            f"have {len(data) - off}")
    lengths = struct.unpack_from(f"<{num_steps}I", data, off)
    off += need

    expected_payload = sum(num_layers * h_q * width * n * 4 for n in lengths)
    if len(data) - off != expected_payload:
        raise TraceParseError(
            f"{path}: payload at offset {off} is {len(data) - off} bytes, header "
            f"declares {expected_payload} (missing {expected_payload - (len(data) - off)})")

    attention = []
    for n in lengths:
        step_layers = []
        for _ in range(num_layers):
            count = h_q * width * n
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=off)
            off += count * 4
            arr = arr.reshape(h_q, width, n)
            if n > 0:
                sums = arr.sum(axis=-1)
                if np.abs(sums - 1.0).max() > _ROW_SUM_TOL:
                    raise TraceParseError(
                        f"{path}: attention rows near offset {off} do not sum to "
                        f"1 within {_ROW_SUM_TOL}")
            step_layers.append(arr)
        attention.append(tuple(step_layers))
    return AttentionTrace(num_layers=num_layers, num_query_heads=h_q,
                          num_kv_heads=h_kv, block_width=width,
                          lengths=tuple(lengths), attention=tuple(attention))


def _plan_record(plan: SelectionPlan | None) -> dict | None:
    if plan is None:
        return None
    return {"method": plan.method,
            "context_length": plan.context_length,
            "exact_layer_prefix": plan.exact_layer_prefix,
            "budgets": list(plan.budgets),
            "indices": [[idx.tolist() for idx in heads] for heads in plan.indices]}


def plan_from_record(rec: dict) -> SelectionPlan:
    return SelectionPlan(
        method=rec["method"], context_length=rec["context_length"],
        exact_layer_prefix=rec["exact_layer_prefix"],
        budgets=tuple(rec["budgets"]),
        indices=tuple(tuple(np.asarray(idx, dtype=np.int64) for idx in heads)
                      for heads in rec["indices"]))


def traces_to_jsonl(traces: Sequence[DenoiseTrace], meta: dict) -> str:
    """One header record, then one record per (block, step)."""
    lines = [json.dumps({"kind": "header", **meta})]
    for trace in traces:
        for rec in trace.records:
            row = {
                "kind": "step",
                "block": trace.block_index,
                "step": rec.step,
                "context_length": rec.context_length,
                "budget": trace.budget,
                "plan": _plan_record(rec.plan),
                "unmasked_positions": rec.unmasked_positions.tolist(),
                "unmasked_tokens": rec.unmasked_tokens.tolist(),
                "confidences": [float(c) for c in rec.confidences],
                "cross_reads_per_layer": rec.cross_reads_per_layer,
                "layers_executed": rec.layers_executed,
                "oracle_sets": None if rec.oracle_sets is None else
                    [[h.tolist() for h in layer] for layer in rec.oracle_sets],
            }
            lines.append(json.dumps(row))
    return "\n".join(lines) + "\n"


def read_jsonl_trace(path: str | Path) -> tuple[dict, list[dict]]:
    """Returns (header, step records); raises on malformed lines."""
    header = None
    steps = []
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(f"{path}:{lineno}: bad JSON ({exc})") from exc
        if rec.get("kind") == "header":
            header = rec
        elif rec.get("kind") == "step":
            steps.append(rec)
        else:
            raise TraceParseError(f"{path}:{lineno}: unknown record kind {rec.get('kind')!r}")
    if header is None:
        raise TraceParseError(f"{path}: missing header record")
    return header, steps
