"""Bit accounting, compression ratio, run records and multi-seed summaries."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .quant import round_bits

RECORD_SCHEMA = 1
SUMMARY_SCHEMA = 1
FP32_BITS = 32.0


def avg_bits(bits, dims) -> float:
    """Dimension-weighted mean of rounded bits; ``bits`` holds one per-node array per site."""
    num = 0.0
    den = 0.0
    for b, d in zip(bits, dims):
        b = np.asarray(b, dtype=np.float64)
        num += float(d) * float(np.sum(round_bits(b)))
        den += float(d) * b.size
    if den == 0:
        raise ValueError("avg_bits of an empty table")
    return num / den


def avg_bits_from_tape(tape) -> float:
    """Average bits actually used in a forward pass (32 for an unquantized model)."""
    qt = tape.qt
    if not qt.sites:
        return FP32_BITS
    names = list(qt.sites)
    return avg_bits([qt.sites[n]["bits"][tape.index[n]] for n in names], [qt.sites[n]["dim"] for n in names])


def compression_ratio(b_m: float, n: int, f0: int, f1: int, num_layers: int, count_first_layer: bool = True,
                      step_overhead: bool = True) -> float:
    """FP32 feature bits over quantized feature bits plus one 32-bit step per node per layer.

    ``step_overhead=False`` drops the step term, which only makes sense for
    sanity checks (b_m = 32 then gives exactly 1).
    """
    elems = (num_layers - 1) * n * f1 + (n * f0 if count_first_layer else 0)
    den = b_m * elems + (32.0 * n * num_layers if step_overhead else 0.0)
    if den == 0:
        return 1.0
    return 32.0 * elems / den


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _clean(v):
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


@dataclass
class RunRecord:
    command: str
    config_hash: str
    seed: int
    history: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)  # test_acc, avg_bits, compression_ratio, ...
    cycle_report: dict | None = None
    wall_clock: float = 0.0
    schema: int = RECORD_SCHEMA

    def to_json(self, include_wall_clock: bool = True) -> str:
        d = _clean(asdict(self))
        if not include_wall_clock:
            d.pop("wall_clock")
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> RunRecord:
        d = json.loads(text)
        if d.get("schema") != RECORD_SCHEMA:
            raise ValueError(f"unsupported run record schema {d.get('schema')!r}")
        return cls(**d)


def summarize(records: list[RunRecord]) -> dict[str, dict[str, float]]:
    """Mean and population std of every numeric metric over runs."""
    if not records:
        raise ValueError("no records to summarize")
    keys = sorted({k for r in records for k, v in r.metrics.items() if isinstance(v, (int, float))})
    out = {}
    for k in keys:
        vals = np.array([float(r.metrics[k]) for r in records if r.metrics.get(k) is not None])
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(vals.size)}
    return out


def write_summary(records: list[RunRecord], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summ = summarize(records)
    csv_path = out_dir / "summary.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "mean", "std", "n"])
        for k, s in summ.items():
            w.writerow([k, repr(s["mean"]), repr(s["std"]), s["n"]])
    json_path = out_dir / "summary.json"
    payload = {
        "schema": SUMMARY_SCHEMA,
        "seeds": [r.seed for r in records],
        "config_hashes": sorted({r.config_hash for r in records}),
        "metrics": summ,
    }
    json_path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return csv_path, json_path
