"""Command-line front end: simulate, analyze, cost, trace export/ingest.

Every command is deterministic given its config and seed; output files
are written atomically (temp file, then rename) so sweep cells can run
in parallel.  Exit codes: 0 success, 2 config error, 3 data or parse
error, 4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import costmodel, metrics, traceio
from .baselines import BaselineConfig
from .config import (ModelConfig, get_float, get_int, get_str,
                     model_config_from_mapping, read_config_file)
from .decoder import DecodeConfig, generate
from .errors import (ConfigError, DataError, MagesimError, MetricError,
                     TraceParseError)
from .mage import serialize_plan
from .model import build_model

# Fallback hardware constants for the latency column in simulate
# summaries; cost sweeps read theirs from the params file.
_DEFAULT_HW = {"bandwidth": 1.0e12, "launch_overhead": 5.0e-6,
               "compute_rate": 1.0e13, "element_size": 2}


def _write_text_atomic(path: Path, content: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(content)
    os.replace(tmp, path)


def _write_bytes_atomic(path: Path, content: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(content)
    os.replace(tmp, path)


def _decode_config_from(mapping: dict[str, str], args) -> DecodeConfig:
    method = args.method or get_str(mapping, "method", "exact")
    baseline = None
    if method in ("quest", "tidal", "window", "random"):
        anchor = get_int(mapping, "anchor_layer", -1)
        if args.anchor_layer is not None:
            anchor = args.anchor_layer
        baseline = BaselineConfig(
            method=method,
            page_size=args.page_size or get_int(mapping, "page_size", 16),
            anchor_layer=None if anchor < 0 else anchor,
            num_sinks=args.sinks if args.sinks is not None
                else get_int(mapping, "num_sinks", 4),
            window_size=args.window if args.window is not None
                else get_int(mapping, "window_size", 64),
            seed=args.seed if args.seed is not None else get_int(mapping, "seed", 0))
    tokens_per_step = args.tokens_per_step or \
        (get_int(mapping, "tokens_per_step", -1) if "tokens_per_step" in mapping else None)
    steps = args.steps or (get_int(mapping, "steps", -1) if "steps" in mapping else None)
    if tokens_per_step is not None and tokens_per_step < 0:
        tokens_per_step = None
    if steps is not None and steps < 0:
        steps = None
    if args.steps or args.tokens_per_step:
        # A flag override replaces the file's step policy entirely.
        steps = args.steps
        tokens_per_step = args.tokens_per_step
    return DecodeConfig(
        block_size=get_int(mapping, "block_size"),
        budget=args.k or get_int(mapping, "k", 64),
        min_budget=args.kmin or get_int(mapping, "k_min", 1),
        method=method,
        num_blocks=args.blocks or get_int(mapping, "num_blocks", 1),
        seed=args.seed if args.seed is not None else get_int(mapping, "seed", 0),
        tokens_per_step=tokens_per_step,
        steps=steps,
        baseline=baseline,
        trace_oracle=not args.no_oracle_trace,
        trace_attention=getattr(args, "attention", False),
        keep_logits=False)


def _model_config_from(mapping: dict[str, str], args) -> ModelConfig:
    if args.seed is not None:
        mapping = dict(mapping, seed=str(args.seed))
    return model_config_from_mapping(mapping)


def _mean_recall(traces) -> float | None:
    vals = []
    for trace in traces:
        for rec in trace.records:
            if rec.plan is None or rec.oracle_sets is None:
                continue
            vals.append(metrics.plan_recall_against_sets(rec.plan, rec.oracle_sets))
    return float(np.mean(vals)) if vals else None


def _summary_latency(mapping, model_cfg: ModelConfig, decode_cfg: DecodeConfig,
                     final_n: int) -> float | None:
    if final_n < 1:
        return None
    params = costmodel.CostParams(
        bandwidth=get_float(mapping, "bandwidth", _DEFAULT_HW["bandwidth"]),
        launch_overhead=get_float(mapping, "launch_overhead", _DEFAULT_HW["launch_overhead"]),
        compute_rate=get_float(mapping, "compute_rate", _DEFAULT_HW["compute_rate"]),
        element_size=get_int(mapping, "element_size", _DEFAULT_HW["element_size"]),
        num_layers=model_cfg.num_layers, num_query_heads=model_cfg.num_query_heads,
        num_kv_heads=model_cfg.num_kv_heads, head_dim=model_cfg.head_dim,
        block_size=model_cfg.block_size,
        page_size=get_int(mapping, "page_size", 16))
    kind = {"exact": "exact", "mage": "mage_rest", "quest": "quest",
            "tidal": "tidal", "window": "mage_rest", "random": "mage_rest"}[decode_cfg.method]
    budget = min(decode_cfg.budget, final_n)
    return costmodel.step_latency(params, final_n, budget, kind).total


def cmd_simulate(args) -> int:
    mapping = read_config_file(args.config)
    model_cfg = _model_config_from(mapping, args)
    decode_cfg = _decode_config_from(mapping, args)
    prompt_len = args.prompt_len or get_int(mapping, "prompt_len", 4 * model_cfg.block_size)
    model = build_model(model_cfg)
    tokens, traces = generate(model, prompt_len, decode_cfg.num_blocks, decode_cfg)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"num_layers": model_cfg.num_layers,
            "num_query_heads": model_cfg.num_query_heads,
            "num_kv_heads": model_cfg.num_kv_heads,
            "block_size": model_cfg.block_size,
            "exact_layer_prefix": model_cfg.exact_layer_prefix,
            "method": decode_cfg.method, "budget": decode_cfg.budget,
            "min_budget": decode_cfg.min_budget,
            "tokens_per_step": decode_cfg.tokens_per_step,
            "steps": decode_cfg.steps, "seed": decode_cfg.seed,
            "prompt_len": prompt_len}
    _write_text_atomic(out / "trace.jsonl", traceio.traces_to_jsonl(traces, meta))

    plan_sections = []
    for trace in traces:
        for rec in trace.records:
            if rec.plan is not None:
                plan_sections.append(f"# block={trace.block_index} step={rec.step}\n"
                                     + serialize_plan(rec.plan))
    _write_text_atomic(out / "plans.txt", "".join(plan_sections))

    final_n = traces[-1].context_length if traces else 0
    latency = _summary_latency(mapping, model_cfg, decode_cfg, final_n)
    recall = _mean_recall(traces)
    lines = ["method,K,tokens_per_step,mean_recall,step_latency_model"]
    lines.append(",".join([
        decode_cfg.method, str(decode_cfg.budget), str(decode_cfg.tokens_per_step),
        "" if recall is None else repr(recall),
        "" if latency is None else repr(latency)]))
    _write_text_atomic(out / "summary.csv", "\n".join(lines) + "\n")
    _write_text_atomic(out / "tokens.txt",
                       " ".join(str(int(t)) for t in tokens) + "\n")
    print(f"simulate: wrote {out / 'trace.jsonl'}, plans.txt, summary.csv, tokens.txt")
    return 0


def _oracle_sets_from_attention(step_layers, budget: int, num_kv_heads: int,
                                prefix: int):
    sets = []
    for layer in range(prefix, len(step_layers)):
        arr = np.asarray(step_layers[layer])
        group = arr.shape[0] // num_kv_heads
        heads = []
        for h in range(num_kv_heads):
            mass = arr[h * group:(h + 1) * group].sum(axis=(0, 1))
            order = np.argsort(-mass, kind="stable")
            heads.append(np.sort(order[: min(budget, mass.size)]))
        sets.append(heads)
    return sets


def cmd_analyze(args) -> int:
    path = Path(args.trace)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    is_binary = path.read_bytes()[: len(traceio.MAGIC)] == traceio.MAGIC

    if args.analysis == "recall":
        rows = []
        if is_binary:
            trace = traceio.read_attention_trace(path)
            budget = args.k or 32
            prefix = args.exact_layer_prefix
            sets = [_oracle_sets_from_attention(step, budget, trace.num_kv_heads, prefix)
                    for step in trace.attention if step[0].shape[2] > 0]
            if not sets:
                raise MetricError("trace has no steps with a nonempty cache")
            ref = sets[0]
            for t, cur in enumerate(sets, start=1):
                vals = [metrics.topk_recall(r, c)
                        for rl, cl in zip(ref, cur) for r, c in zip(rl, cl)]
                rows.append((t, budget, float(np.mean(vals)), path.stem))
        else:
            header, steps = traceio.read_jsonl_trace(path)
            by_block: dict[int, list[dict]] = {}
            for rec in steps:
                if rec["oracle_sets"] is not None:
                    by_block.setdefault(rec["block"], []).append(rec)
            if not by_block:
                raise MetricError("trace has no oracle sets; rerun simulate with tracing")
            for block, recs in sorted(by_block.items()):
                ref = recs[0]["oracle_sets"]
                for rec in recs:
                    vals = [metrics.topk_recall(r, c)
                            for rl, cl in zip(ref, rec["oracle_sets"])
                            for r, c in zip(rl, cl)]
                    rows.append((rec["step"], rec["budget"], float(np.mean(vals)),
                                 f"block{block}"))
        lines = ["step,K,recall,label"]
        lines += [f"{s},{k},{r!r},{lb}" for s, k, r, lb in rows]
        _write_text_atomic(out / "recall.csv", "\n".join(lines) + "\n")
        print(f"analyze: wrote {out / 'recall.csv'}")
        return 0

    if args.analysis == "skew":
        if not is_binary:
            raise DataError("skew analysis needs a binary attention trace")
        trace = traceio.read_attention_trace(path)
        per_step = [list(step) for step in trace.attention if step[0].shape[2] > 0]
        if not per_step:
            raise MetricError("trace has no steps with a nonempty cache")
        heatmap = metrics.skew_heatmap(per_step, trace.num_kv_heads,
                                       threshold=args.threshold)
        _write_text_atomic(out / "skew.csv", metrics.heatmap_csv(heatmap))
        print(f"analyze: wrote {out / 'skew.csv'}")
        return 0

    if args.analysis == "method-recall":
        if is_binary:
            raise DataError("method-recall needs a JSON-lines trace with plans")
        header, steps = traceio.read_jsonl_trace(path)
        rows = []
        for rec in steps:
            if rec["plan"] is None or rec["oracle_sets"] is None:
                continue
            plan = traceio.plan_from_record(rec["plan"])
            sets = [[np.asarray(h, dtype=np.int64) for h in layer]
                    for layer in rec["oracle_sets"]]
            rows.append((rec["step"], rec["budget"],
                         metrics.plan_recall_against_sets(plan, sets),
                         f"block{rec['block']}:{plan.method}"))
        if not rows:
            raise MetricError("trace has no (plan, oracle) step pairs")
        lines = ["step,K,recall,label"]
        lines += [f"{s},{k},{r!r},{lb}" for s, k, r, lb in rows]
        _write_text_atomic(out / "method_recall.csv", "\n".join(lines) + "\n")
        print(f"analyze: wrote {out / 'method_recall.csv'}")
        return 0

    raise ConfigError(f"unknown analysis {args.analysis!r}")


_PHASE_STREAMS = {
    "exact": {"attention": "main", "index_selection": "main", "other": "main"},
    "mage_rest": {"attention": "main", "index_selection": "main", "other": "main"},
    "mage_first": {"attention": "main", "index_selection": "async", "other": "main"},
    "quest": {"attention": "main", "index_selection": "main", "other": "main"},
    "tidal": {"attention": "main", "index_selection": "main", "other": "main"},
}


def cmd_cost(args) -> int:
    mapping = read_config_file(args.params)
    params = costmodel.CostParams(
        bandwidth=get_float(mapping, "bandwidth"),
        launch_overhead=get_float(mapping, "launch_overhead"),
        compute_rate=get_float(mapping, "compute_rate"),
        element_size=get_int(mapping, "element_size"),
        num_layers=get_int(mapping, "num_layers"),
        num_query_heads=get_int(mapping, "num_query_heads"),
        num_kv_heads=get_int(mapping, "num_kv_heads"),
        head_dim=get_int(mapping, "head_dim"),
        block_size=get_int(mapping, "block_size"),
        page_size=get_int(mapping, "page_size", 16))
    contexts = [int(x) for x in args.contexts.split(",")]
    budgets = [int(x) for x in args.budgets.split(",")]
    methods = args.methods.split(",")
    for m in methods:
        if m not in ("exact", "mage", "quest", "tidal"):
            raise ConfigError(f"unknown cost method {m!r}")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    breakdown = ["context_len,K,method,phase,stream,time"]
    amortize = ["context_len,K,baseline,baseline_step_time,mage_first_time,"
                "mage_rest_time,mage_rest_speedup,break_even"]
    for n in contexts:
        for k in budgets:
            budget = min(k, n)
            reports = {}
            for m in methods:
                kinds = ("mage_first", "mage_rest") if m == "mage" else (m,)
                for kind in kinds:
                    reports[kind] = costmodel.step_latency(params, n, budget, kind)
            for kind, rep in reports.items():
                for phase, t in rep.phases.items():
                    stream = _PHASE_STREAMS[kind][phase]
                    breakdown.append(f"{n},{k},{kind},{phase},{stream},{t!r}")
            if "mage" in methods:
                first = reports["mage_first"].total
                rest = reports["mage_rest"].total
                for base_kind in [m for m in ("exact", "quest", "tidal") if m in methods]:
                    base_time = reports[base_kind].total
                    be = costmodel.break_even(base_time, first, rest)
                    amortize.append(
                        f"{n},{k},{base_kind},{base_time!r},{first!r},{rest!r},"
                        f"{base_time / rest!r},{'none' if be is None else be}")
    _write_text_atomic(out / "breakdown.csv", "\n".join(breakdown) + "\n")
    _write_text_atomic(out / "amortize.csv", "\n".join(amortize) + "\n")
    print(f"cost: wrote {out / 'breakdown.csv'}, amortize.csv")
    return 0


def cmd_trace_export(args) -> int:
    mapping = read_config_file(args.config)
    model_cfg = _model_config_from(mapping, args)
    args.attention = True
    decode_cfg = _decode_config_from(mapping, args)
    prompt_len = args.prompt_len or get_int(mapping, "prompt_len", 4 * model_cfg.block_size)
    model = build_model(model_cfg)
    _, traces = generate(model, prompt_len, decode_cfg.num_blocks, decode_cfg)

    steps, lengths = [], []
    for trace in traces:
        for rec in trace.records:
            if rec.cross_attention is None:
                continue
            steps.append(tuple(rec.cross_attention))
            lengths.append(rec.context_length)
    if not steps:
        raise DataError("no attention was traced; prompt may be empty")
    att = traceio.AttentionTrace(
        num_layers=model_cfg.num_layers, num_query_heads=model_cfg.num_query_heads,
        num_kv_heads=model_cfg.num_kv_heads, block_width=model_cfg.block_size,
        lengths=tuple(lengths), attention=tuple(steps))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    buf_path = out.with_name(out.name + ".tmp")
    traceio.write_attention_trace(buf_path, att)
    os.replace(buf_path, out)
    print(f"trace export: wrote {out} ({len(steps)} steps)")
    return 0


def cmd_trace_ingest(args) -> int:
    path = Path(args.infile)
    is_binary = path.read_bytes()[: len(traceio.MAGIC)] == traceio.MAGIC
    if is_binary:
        trace = traceio.read_attention_trace(path)
        summary = {
            "format": "binary",
            "num_layers": trace.num_layers,
            "num_query_heads": trace.num_query_heads,
            "num_kv_heads": trace.num_kv_heads,
            "block_width": trace.block_width,
            "num_steps": len(trace.lengths),
            "lengths": list(trace.lengths),
        }
    else:
        header, steps = traceio.read_jsonl_trace(path)
        summary = {"format": "jsonl", "header": header, "num_steps": len(steps)}
    text = json.dumps(summary, indent=2) + "\n"
    if args.out:
        _write_text_atomic(Path(args.out), text)
        print(f"trace ingest: wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _add_common_sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="flat key/value config file")
    p.add_argument("--method", choices=["exact", "mage", "quest", "tidal",
                                        "window", "random"])
    p.add_argument("--k", type=int, help="average per-layer budget")
    p.add_argument("--kmin", type=int, help="minimum per-layer budget")
    p.add_argument("--tokens-per-step", type=int, dest="tokens_per_step")
    p.add_argument("--steps", type=int)
    p.add_argument("--blocks", type=int, help="number of generated blocks")
    p.add_argument("--prompt-len", type=int, dest="prompt_len")
    p.add_argument("--seed", type=int)
    p.add_argument("--page-size", type=int, dest="page_size")
    p.add_argument("--anchor-layer", type=int, dest="anchor_layer")
    p.add_argument("--sinks", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--no-oracle-trace", action="store_true",
                   help="skip per-step oracle sets (faster, disables recall)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="magesim")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a decoding experiment")
    _add_common_sim_flags(p)
    p.add_argument("--out-dir", default="out", dest="out_dir")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="derive CSV analyses from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--analysis", required=True,
                   choices=["recall", "skew", "method-recall"])
    p.add_argument("--k", type=int, help="oracle budget for binary traces")
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--exact-layer-prefix", type=int, default=1,
                   dest="exact_layer_prefix")
    p.add_argument("--out-dir", default="out", dest="out_dir")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("cost", help="latency breakdown and amortization sweep")
    p.add_argument("--params", required=True, help="cost parameter file")
    p.add_argument("--contexts", default="16384,32768,65536,131072")
    p.add_argument("--budgets", default="2048")
    p.add_argument("--methods", default="exact,mage,quest,tidal")
    p.add_argument("--out-dir", default="out", dest="out_dir")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("trace", help="trace file utilities")
    trace_sub = p.add_subparsers(dest="trace_command", required=True)

    pe = trace_sub.add_parser("export", help="run and export binary attention trace")
    _add_common_sim_flags(pe)
    pe.add_argument("--out", required=True)
    pe.set_defaults(func=cmd_trace_export)

    pi = trace_sub.add_parser("ingest", help="validate and summarize a trace file")
    pi.add_argument("--in", dest="infile", required=True)
    pi.add_argument("--out", help="write the summary JSON here instead of stdout")
    pi.set_defaults(func=cmd_trace_ingest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, TraceParseError, MetricError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except MagesimError as exc:
        print(f"internal invariant violation: {exc}", file=sys.stderr)
        return 4
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
