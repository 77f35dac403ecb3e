"""Tile-level cycle and energy model of a bit-serial GNN accelerator.

This is an analytic model, not RTL: its only timing law is that a PE
multiplies an m-bit feature by a weight in m cycles. Each PE holds one node
row of a tile and has ``macs_per_pe`` multipliers, so an update tile costs
``ceil(F_in / macs) * max_bits(tile) * F_out`` cycles (all PEs of a tile run
in lockstep) and an aggregation tile costs ``max_deg(tile) * ceil(F / macs)``.

Energy figures are relative to whatever table the config supplies.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

ENERGY_KEYS = ("int_mac_pj", "float_mul_pj", "sram_pj_per_bit", "dram_pj_per_bit")
STEP_BITS = 32
INDEX_BITS = 32
BASELINE_BITS = 4


@dataclass(frozen=True)
class AccelConfig:
    num_pes: int = 256
    macs_per_pe: int = 16
    weight_bits: int = 4
    input_buffer_bytes: int = 2 * 1024 * 1024
    output_buffer_bytes: int = 2 * 1024 * 1024
    edge_buffer_bytes: int = 256 * 1024
    weight_buffer_bytes: int = 256 * 1024
    energy: dict = field(default_factory=lambda: {
        "int_mac_pj": 0.2,
        "float_mul_pj": 3.7,
        "sram_pj_per_bit": 0.3125,
        "dram_pj_per_bit": 7.0,
    })

    def __post_init__(self):
        for f in fields(self):
            if f.name != "energy" and not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")
        for k, v in self.energy.items():
            if not v > 0:
                raise ValueError(f"energy entry {k} must be positive")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def parse_accel_config(text: str) -> AccelConfig:
    """``key = value`` lines; ``#`` starts a comment. Energy keys are in pJ."""
    scalar = {f.name for f in fields(AccelConfig) if f.name != "energy"}
    kw: dict = {}
    energy: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in scalar:
            kw[k] = int(v)
        elif k in ENERGY_KEYS:
            energy[k] = float(v)
        else:
            raise ValueError(f"line {lineno}: unknown accelerator key {k!r}")
    if energy:
        kw["energy"] = {**AccelConfig().energy, **energy}
    return AccelConfig(**kw)


def load_accel_config(path=None) -> AccelConfig:
    if path is None:
        from importlib import resources
        text = resources.files("a2q").joinpath("data", "accel_default.cfg").read_text()
    else:
        text = Path(path).read_text()
    return parse_accel_config(text)


@dataclass
class UpdateWork:
    f_in: int
    f_out: int
    bits: np.ndarray  # per-node rounded bits of the update input
    learned: bool = True  # False for inputs whose precision is fixed by the data


@dataclass
class Workload:
    num_nodes: int
    degrees: np.ndarray  # row nnz of Ã, i.e. in-degree including the self term
    updates: list[UpdateWork]
    agg_dims: list[int]
    float_ops: int = 0
    nnz: int = 0

    def __post_init__(self):
        self.degrees = np.asarray(self.degrees, dtype=np.int64)
        if self.degrees.shape != (self.num_nodes,):
            raise ValueError("degrees length differs from num_nodes")
        for u in self.updates:
            u.bits = np.asarray(u.bits, dtype=np.int64)
            if u.bits.shape != (self.num_nodes,):
                raise ValueError("bits length differs from num_nodes")
            if u.bits.size and (u.bits.min() < 1 or u.bits.max() > 32):
                raise ValueError("bitwidths must be integers in [1, 32]")
        if not self.nnz:
            self.nnz = int(self.degrees.sum())

    def with_bits(self, b: int) -> Workload:
        ups = [replace(u, bits=np.full(self.num_nodes, b, dtype=np.int64)) for u in self.updates]
        return replace(self, updates=ups)

    def with_bit(self, layer: int, node: int, b: int) -> Workload:
        ups = [replace(u, bits=u.bits.copy()) for u in self.updates]
        ups[layer].bits[node] = b
        return replace(self, updates=ups)

    def avg_bits(self) -> float:
        ups = [u for u in self.updates if u.learned] or self.updates
        den = sum(u.f_in * self.num_nodes for u in ups)
        if den == 0:
            return 0.0
        return sum(u.f_in * float(u.bits.sum()) for u in ups) / den


def schedule_tiles(workload: Workload, phase: str, layer: int = 0, num_pes: int = 256,
                   sort: bool = True) -> list[np.ndarray]:
    """Node tiles of ``num_pes`` rows.

    Update tiles are ordered by descending bitwidth, aggregation tiles by
    descending in-degree; ``sort=False`` keeps natural node order. Ties keep
    node order.
    """
    if phase == "update":
        key = workload.updates[layer].bits
    elif phase == "aggregate":
        key = workload.degrees
    else:
        raise ValueError(f"unknown phase {phase!r}")
    n = workload.num_nodes
    order = np.argsort(-key, kind="stable") if sort else np.arange(n)
    return [order[i:i + num_pes] for i in range(0, n, num_pes)]


def cycles_update(tile_bits, f_in: int, f_out: int, macs_per_pe: int = 16) -> int:
    tile_bits = np.asarray(tile_bits)
    if tile_bits.size == 0 or f_in == 0 or f_out == 0:
        return 0
    return math.ceil(f_in / macs_per_pe) * int(tile_bits.max()) * f_out


def cycles_aggregate(tile_degrees, f: int, macs_per_pe: int = 16) -> int:
    tile_degrees = np.asarray(tile_degrees)
    if tile_degrees.size == 0 or f == 0:
        return 0
    return int(tile_degrees.max()) * math.ceil(f / macs_per_pe)


@dataclass
class CycleReport:
    cycles_update: int
    cycles_aggregate: int
    total_cycles: int
    dram_bits: int
    sram_bits: int
    int_macs: int
    float_ops: int
    energy_pj: float
    speedup_vs_int4: float
    avg_bits: float
    config_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _phase_cycles(w: Workload, cfg: AccelConfig, sort: bool) -> tuple[int, int]:
    upd = 0
    for l, u in enumerate(w.updates):
        for t in schedule_tiles(w, "update", l, cfg.num_pes, sort):
            upd += cycles_update(u.bits[t], u.f_in, u.f_out, cfg.macs_per_pe)
    agg = 0
    tiles = schedule_tiles(w, "aggregate", 0, cfg.num_pes, sort)
    for f in w.agg_dims:
        for t in tiles:
            agg += cycles_aggregate(w.degrees[t], f, cfg.macs_per_pe)
    return upd, agg


def traffic(w: Workload, cfg: AccelConfig, sort: bool = True) -> tuple[int, int]:
    """``(dram_bits, sram_bits)``.

    DRAM: each layer's compressed input features, per-node steps, weights and
    CSR arrays are fetched once (input/output buffers swap between layers).
    A feature map larger than the input buffer costs one extra write and read
    of every tile that does not fit.
    SRAM: every input element is read once per output column, weights once
    per tile, and one aggregation operand per nonzero and column.
    """
    cap = cfg.input_buffer_bytes * 8
    dram = sram = 0
    n = w.num_nodes
    csr_bits = (w.nnz + n + 1) * INDEX_BITS
    for l, u in enumerate(w.updates):
        feat = int(u.f_in * u.bits.sum())
        wbits = u.f_in * u.f_out * cfg.weight_bits
        dram += feat + STEP_BITS * n + wbits
        used = 0
        tiles = schedule_tiles(w, "update", l, cfg.num_pes, sort)
        for t in tiles:
            tb = int(u.f_in * u.bits[t].sum())
            if used + tb > cap:
                dram += 2 * tb
            used += tb
        sram += u.f_out * feat + len(tiles) * wbits
    for f in w.agg_dims:
        dram += csr_bits
        sram += w.nnz * f * cfg.weight_bits
    return dram, sram


def energy_estimate(counts: dict, cfg: AccelConfig) -> float:
    """Linear energy model; ``counts`` needs int_macs, float_ops, sram_bits, dram_bits."""
    e = cfg.energy
    missing = [k for k in ENERGY_KEYS if k not in e]
    if missing:
        raise KeyError(f"energy table lacks {missing}")
    return (counts["int_macs"] * e["int_mac_pj"] + counts["float_ops"] * e["float_mul_pj"]
            + counts["sram_bits"] * e["sram_pj_per_bit"] + counts["dram_bits"] * e["dram_pj_per_bit"])


def total_cycles(w: Workload, cfg: AccelConfig, sort: bool = True) -> int:
    return sum(_phase_cycles(w, cfg, sort))


def simulate(w: Workload, cfg: AccelConfig | None = None, sort: bool = True) -> CycleReport:
    cfg = cfg or AccelConfig()
    upd, agg = _phase_cycles(w, cfg, sort)
    total = upd + agg
    base = total_cycles(w.with_bits(BASELINE_BITS), cfg, sort)
    dram, sram = traffic(w, cfg, sort)
    macs = sum(w.num_nodes * u.f_in * u.f_out for u in w.updates) + sum(w.nnz * f for f in w.agg_dims)
    counts = {"int_macs": macs, "float_ops": w.float_ops, "sram_bits": sram, "dram_bits": dram}
    return CycleReport(
        cycles_update=upd, cycles_aggregate=agg, total_cycles=total,
        dram_bits=dram, sram_bits=sram, int_macs=macs, float_ops=w.float_ops,
        energy_pj=energy_estimate(counts, cfg),
        speedup_vs_int4=(base / total) if total else 1.0,
        avg_bits=w.avg_bits(), config_hash=cfg.digest(),
    )


def workload_from_model(model, qt, g, x0, unquantized_input_bits: int = 8) -> Workload:
    """Bits actually chosen by an integer forward pass of ``model`` on ``g``."""
    from .runtime import int_forward, op_counts

    spec = model.spec
    res = int_forward(model, qt, g, x0)
    n = g.num_nodes
    ups = []
    aggs = []

    def input_bits():
        x = np.asarray(x0)
        if np.all(x == np.round(x)):
            mx = int(np.abs(x).max(initial=0))
            signed = bool(np.any(x < 0))
            return max(1, mx.bit_length() + (1 if signed else 0))
        return unquantized_input_bits

    for l, (fin, fout) in enumerate(spec.layer_dims()):
        if spec.arch == "gcn":
            key = f"x{l}"
            if key in res.row_bits:
                ups.append(UpdateWork(fin, fout, res.row_bits[key]))
            else:
                ups.append(UpdateWork(fin, fout, np.full(n, input_bits()), learned=False))
            aggs.append(fout)
        else:
            ups.append(UpdateWork(fin, spec.hidden, res.row_bits[f"h{l}"]))
            ups.append(UpdateWork(spec.hidden, fout, res.row_bits[f"a{l}"]))
            aggs.append(fin)
    ops = op_counts(model, g, qt)
    return Workload(n, g.degrees, ups, aggs, float_ops=ops["float_ops"], nnz=g.nnz)
