"""Scalar reference implementations written directly from the quantizer rules.

Pure Python (``math`` only) so they share no code path with ``a2q.quant``.
"""

import math


def round_half_away(v: float) -> float:
    return math.copysign(math.floor(abs(v) + 0.5), v)


def max_code(b: float, signed: bool) -> int:
    rb = int(round_half_away(b))
    return 2 ** (rb - 1) - 1 if signed else 2 ** rb - 1


def q_forward(x: float, s: float, b: float, signed: bool = True) -> float:
    x, s = float(x), float(s)
    mc = max_code(b, signed)
    lo = -mc if signed else 0
    code = min(max(round_half_away(x / s), lo), mc)
    return code * s


def q_grads(x: float, s: float, b: float, signed: bool = True) -> tuple[float, float]:
    """(d xq / d s, d xq / d b) for one scalar."""
    x, s = float(x), float(s)
    mc = max_code(b, signed)
    rb = int(round_half_away(b))
    if abs(x) >= s * mc:
        sgn = (x > 0) - (x < 0)
        slope = 2 ** (rb - 1) if signed else 2 ** rb
        return float(sgn * mc), sgn * slope * math.log(2) * s
    return (q_forward(x, s, b, signed) - x) / s, 0.0


def q_error(xs, s, b, signed=True) -> float:
    return sum(abs(q_forward(x, s, b, signed) - x) for x in xs) / len(xs)


def q_local_grad(xs, s, b, signed=True) -> tuple[float, float]:
    gs = gb = 0.0
    for x in map(float, xs):
        e = q_forward(x, s, b, signed) - x
        sg = (e > 0) - (e < 0)
        ds, db = q_grads(x, s, b, signed)
        gs += sg * ds
        gb += sg * db
    return gs / len(xs), gb / len(xs)


def mem_loss(bits_per_layer, dims, target) -> tuple[float, list[float]]:
    """Loss and the (uniform) per-node gradient for each layer."""
    kb = 0.0
    for bs, d in zip(bits_per_layer, dims):
        for b in bs:
            kb += d * b
    kb /= 8 * 1024
    gap = kb - target
    return gap * gap, [2 * gap * d / (8 * 1024) for d in dims]


def q_code(x: float, s: float, b: float, signed: bool = True) -> int:
    x, s = float(x), float(s)
    mc = max_code(b, signed)
    lo = -mc if signed else 0
    return int(min(max(round_half_away(x / s), lo), mc))


def tile_update_cycles(bits: list[int], f_in: int, f_out: int, macs: int = 16) -> int:
    if not bits or f_in == 0:
        return 0
    return -(-f_in // macs) * max(bits) * f_out


def tile_aggregate_cycles(degrees: list[int], f: int, macs: int = 16) -> int:
    if not degrees or f == 0:
        return 0
    return max(degrees) * -(-f // macs)
