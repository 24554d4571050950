"""Figure-fidelity acceptance: sidecar data equals the CSV's, exactly."""

import csv
import json
from pathlib import Path

from mageplots import FigureSpec, render

from test_render import AMORTIZE_CSV, BREAKDOWN_CSV, HEATMAP_CSV, RECALL_CSV


def report(name, ok, detail=""):
    print(f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'}"
          + (f" ({detail})" if detail else ""))
    assert ok, detail


def rows_of(text):
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def test_criterion_9_plot_fidelity(tmp_path):
    ok = True
    notes = []

    # recall: sidecar points are exactly the CSV rows grouped by label
    p = tmp_path / "r.csv"
    p.write_text(RECALL_CSV)
    side = render(FigureSpec(kind="recall", csv_path=p, out_path=tmp_path / "r.png"))
    expected = {}
    for row in rows_of(RECALL_CSV):
        expected.setdefault(row["label"], []).append(
            [int(row["step"]), float(row["recall"])])
    ok &= side["series"] == {k: sorted(v) for k, v in expected.items()}
    notes.append("recall")

    # heatmap: grid equals the pivoted CSV values
    p = tmp_path / "h.csv"
    p.write_text(HEATMAP_CSV)
    side = render(FigureSpec(kind="heatmap", csv_path=p, out_path=tmp_path / "h.png"))
    for row in rows_of(HEATMAP_CSV):
        li = side["layers"].index(int(row["layer"]))
        bi = side["step_buckets"].index(int(row["step_bucket"]))
        ok &= side["grid"][li][bi] == float(row["value"])
    notes.append("heatmap")

    # breakdown: segments echo rows; stacked heights sum to the bar total
    p = tmp_path / "b.csv"
    p.write_text(BREAKDOWN_CSV)
    side = render(FigureSpec(kind="breakdown", csv_path=p, out_path=tmp_path / "b.png"))
    by_method = {b["method"]: b for b in side["bars"]}
    for row in rows_of(BREAKDOWN_CSV):
        bar = by_method[row["method"]]
        seg = next(s for s in bar["segments"] if s["phase"] == row["phase"])
        ok &= seg["time"] == float(row["time"]) and seg["stream"] == row["stream"]
    ok &= all(abs(sum(s["time"] for s in b["segments"]) - b["total"]) <= 1e-9
              for b in side["bars"])
    notes.append("breakdown+stacking")

    # amortize: scalars echo rows; the break-even label is present
    p = tmp_path / "a.csv"
    p.write_text(AMORTIZE_CSV)
    side = render(FigureSpec(kind="amortize", csv_path=p, out_path=tmp_path / "a.png"))
    for row in rows_of(AMORTIZE_CSV):
        entry = next(e for e in side["entries"] if e["baseline"] == row["baseline"])
        ok &= entry["baseline_step_time"] == float(row["baseline_step_time"])
        ok &= entry["mage_first_time"] == float(row["mage_first_time"])
        ok &= entry["mage_rest_time"] == float(row["mage_rest_time"])
    ok &= "n=3" in side["annotations"]
    notes.append("amortize+label")

    # sidecars survive the disk round trip bit-for-bit at printed precision
    for name in ("r", "h", "b", "a"):
        disk = json.loads(Path(str(tmp_path / f"{name}.png") + ".json").read_text())
        ok &= isinstance(disk, dict)
    report("9 plot fidelity", bool(ok), ", ".join(notes))
