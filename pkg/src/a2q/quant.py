"""Learnable uniform quantizer: forward, piecewise gradients, local error gradients.

All bitwidths are continuous; ``round_bits`` (half away from zero) gives the
integer precision used at quantization time. Signed quantizers use the code
range [-(2^(b-1) - 1), 2^(b-1) - 1]; unsigned ones (post-ReLU features) use
[0, 2^b - 1] and so get one extra bit of magnitude for the same storage b.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

STEP_MIN = 1e-8
B_MAX = 8.0
B_MIN_SIGNED = 2.0
B_MIN_UNSIGNED = 1.0
ETA = 8 * 1024  # bits per KB
LN2 = math.log(2.0)


def round_bits(b):
    """Round half away from zero."""
    b = np.asarray(b, dtype=np.float64)
    return np.sign(b) * np.floor(np.abs(b) + 0.5)


def bit_bounds(signed: bool) -> tuple[float, float]:
    return (B_MIN_SIGNED if signed else B_MIN_UNSIGNED), B_MAX


def max_code_of(bits_rounded, signed: bool):
    e = np.asarray(bits_rounded, dtype=np.float64)
    return np.exp2(e - 1.0) - 1.0 if signed else np.exp2(e) - 1.0


@dataclass
class QuantParam:
    step: float
    bitwidth: float
    signed: bool = True

    def __post_init__(self):
        lo, hi = bit_bounds(self.signed)
        self.step = max(float(self.step), STEP_MIN)
        self.bitwidth = min(max(float(self.bitwidth), lo), hi)


@dataclass
class QuantResult:
    codes: np.ndarray
    values: np.ndarray
    sat_mask: np.ndarray


@dataclass
class QuantGrad:
    d_step: np.ndarray | float
    d_bitwidth: np.ndarray | float


def effective_levels(p: QuantParam) -> tuple[int, float]:
    mc = int(max_code_of(round_bits(p.bitwidth), p.signed))
    return mc, p.step * mc


def quantize(x, p: QuantParam) -> QuantResult:
    x = np.asarray(x, dtype=np.float64)
    if not p.signed and np.any(x < 0):
        raise ValueError("unsigned quantizer received a negative input")
    mc, thr = effective_levels(p)
    ax = np.abs(x)
    sat = ax >= thr
    mag = np.where(sat, float(mc), np.floor(ax / p.step + 0.5))
    codes = (np.sign(x) * mag).astype(np.int64)
    return QuantResult(codes, p.step * codes, sat)


def quant_grad(x, p: QuantParam, qr: QuantResult) -> QuantGrad:
    """d x_q / d step and d x_q / d bitwidth, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    rb = round_bits(p.bitwidth)
    mc = max_code_of(rb, p.signed)
    sgn = np.sign(x)
    slope = np.exp2(rb - 1.0) if p.signed else np.exp2(rb)
    d_step = np.where(qr.sat_mask, sgn * mc, (qr.values - x) / p.step)
    d_bit = np.where(qr.sat_mask, sgn * slope * LN2 * p.step, 0.0)
    return QuantGrad(d_step, d_bit)


def ste_input_grad(upstream, x, p: QuantParam) -> np.ndarray:
    _, thr = effective_levels(p)
    return np.where(np.abs(np.asarray(x, dtype=np.float64)) <= thr, upstream, 0.0)


def quant_error(x, qr: QuantResult) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("quantization error of an empty vector")
    return float(np.mean(np.abs(qr.values - x)))


def local_grad(x, p: QuantParam) -> QuantGrad:
    """Gradient of the mean absolute quantization error w.r.t. (step, bitwidth)."""
    x = np.asarray(x, dtype=np.float64)
    qr = quantize(x, p)
    g = quant_grad(x, p, qr)
    s = np.sign(qr.values - x)
    return QuantGrad(float(np.mean(s * g.d_step)), float(np.mean(s * g.d_bitwidth)))


def memory_kb(bitwidths, dims) -> float:
    return sum(float(d) * float(np.sum(b)) for b, d in zip(bitwidths, dims)) / ETA


def memory_loss(bitwidths, dims, m_target: float):
    """Squared gap between feature memory (KB) and ``m_target``.

    ``bitwidths`` is a sequence with one per-node array per layer and ``dims``
    the matching feature lengths. Returns ``(loss, grads)`` where ``grads``
    mirrors ``bitwidths``.
    """
    if not m_target > 0:
        raise ValueError("m_target must be positive")
    gap = memory_kb(bitwidths, dims) - m_target
    grads = [np.full(np.shape(b), 2.0 * gap * d / ETA) for b, d in zip(bitwidths, dims)]
    return gap * gap, grads


# ---------------------------------------------------------------------------
# Matrix quantizers used by the model: one (step, bits) per row or per column.
# ---------------------------------------------------------------------------

@dataclass
class Frozen:
    """Branch state captured at a base point; see ``fake_quant``."""

    resid: np.ndarray
    sat: np.ndarray
    b0: np.ndarray


@dataclass
class QState:
    x: np.ndarray
    xq: np.ndarray
    codes: np.ndarray
    sat: np.ndarray
    step: np.ndarray  # broadcastable to x
    bits: np.ndarray  # continuous, broadcastable to x
    signed: bool


def fake_quant(x, step, bits, signed: bool, frozen: Frozen | None = None) -> QState:
    """Quantize-dequantize ``x`` with broadcastable ``step`` and ``bits``.

    With ``frozen`` given, the function evaluated is the smooth surrogate the
    backward pass differentiates: in-range entries are ``x + step * resid``
    (frozen rounding residual) and saturated entries use a saturation level
    that moves continuously with the unrounded bitwidth. At the base point it
    equals the true quantizer; it exists for finite-difference checks.
    """
    x = np.asarray(x, dtype=np.float64)
    if not signed and np.any(x < 0):
        raise ValueError("unsigned quantizer received a negative input")
    step = np.asarray(step, dtype=np.float64)
    bits = np.asarray(bits, dtype=np.float64)
    rb = round_bits(bits)
    mc = max_code_of(rb, signed)
    ax = np.abs(x) if signed else x
    if frozen is None:
        sat = ax >= step * mc
        mag = ax / step
        mag += 0.5
        np.floor(mag, out=mag)
        np.copyto(mag, np.broadcast_to(mc, mag.shape), where=sat)
        codes = np.copysign(mag, x, out=mag) if signed else mag
        codes += 0.0  # no negative zeros
        xq = step * codes
        return QState(x, xq, codes, sat, step, bits, signed)
    sgn = np.sign(x)
    sat = frozen.sat
    rb0 = round_bits(frozen.b0)
    slope = np.exp2(rb0 - 1.0) if signed else np.exp2(rb0)
    relaxed = mc + slope * (np.exp2(bits - frozen.b0) - 1.0)
    xq = np.where(sat, sgn * step * relaxed, x + step * frozen.resid)
    codes = np.where(sat, sgn * mc, np.floor(ax / step + 0.5) * sgn)
    return QState(x, xq, codes, sat, step, bits, signed)


def freeze(q: QState) -> Frozen:
    resid = np.where(q.sat, 0.0, q.codes - q.x / q.step)
    return Frozen(resid, q.sat.copy(), np.broadcast_to(q.bits, q.x.shape).copy())


def _partials(q: QState):
    """Elementwise d xq/d step and d xq/d bits."""
    rb = round_bits(q.bits)
    mc = max_code_of(rb, q.signed)
    sgn = np.sign(q.x)
    slope = np.exp2(rb - 1.0) if q.signed else np.exp2(rb)
    ds = np.where(q.sat, sgn * mc, (q.xq - q.x) / q.step)
    db = np.where(q.sat, sgn * slope * LN2 * q.step, 0.0)
    return ds, db


def ste_mask(q: QState) -> np.ndarray:
    thr = q.step * max_code_of(round_bits(q.bits), q.signed)
    return np.abs(q.x) <= thr


def fake_quant_backward(q: QState, dxq, axis: int, param_grads: bool = True):
    """STE backward. ``axis=1`` reduces per row (node quantizers), ``axis=0`` per column.

    Returns ``(dx, d_step, d_bits)``; the last two are ``None`` when
    ``param_grads`` is false.
    """
    dx = np.where(ste_mask(q), dxq, 0.0)
    if not param_grads:
        return dx, None, None
    ds, db = _partials(q)
    return dx, np.sum(dxq * ds, axis=axis), np.sum(dxq * db, axis=axis)


def local_grads(q: QState, axis: int = 1):
    """Mean-absolute-error gradients per row (or column).

    Closed form of ``mean(sign(xq - x) * dxq/dθ)``: an in-range entry adds
    ``|xq - x| / s`` to the step gradient; an entry strictly past the
    threshold adds ``-max_code`` (step) and ``-slope ln2 s`` (bits); an entry
    exactly at the threshold quantizes without error and adds nothing.
    """
    rb = round_bits(q.bits)
    mc = max_code_of(rb, q.signed)
    slope = np.exp2(rb - 1.0) if q.signed else np.exp2(rb)
    err = np.abs(q.xq - q.x)
    over = q.sat & (err > 0)
    inr = np.where(q.sat, 0.0, err)
    d = q.x.shape[axis]
    n_over = np.sum(over, axis=axis)
    s_ax = _reduce_param(q.step, axis)
    mc_ax = _reduce_param(mc, axis)
    sl_ax = _reduce_param(slope, axis)
    d_step = (np.sum(inr, axis=axis) / s_ax - mc_ax * n_over) / d
    d_bits = -(sl_ax * LN2 * s_ax) * n_over / d
    return d_step, d_bits


def _reduce_param(p, axis: int):
    """Per-row (axis=1) or per-column (axis=0) value of a broadcast parameter."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim < 2:
        return p.reshape(-1) if p.ndim else p
    return p[:, 0] if axis == 1 else p[0, :]
