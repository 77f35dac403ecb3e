"""Fixed-point inference.

Every matmul and every aggregation runs on int64 codes. Each quantization
site gets exactly one float elementwise pass: rescale by the fused scales,
add bias, apply folded BN and ReLU, then requantize with the site's own
quantizer (choosing the NNS group first in bank mode).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import nns
from .graph import CsrGraph, norm_coeffs
from .quant import B_MAX, bit_bounds, fake_quant, max_code_of, round_bits

ACC_LIMIT = 2**62


@dataclass
class FixedMatrix:
    """Integer codes with per-row and/or per-column scales: value = row ⊗ col ⊙ codes."""

    codes: np.ndarray
    row_scales: np.ndarray | None = None
    col_scales: np.ndarray | None = None
    row_bits: np.ndarray | None = None
    signed: bool = True

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 2:
            raise ValueError("codes must be a matrix")
        n, f = self.codes.shape
        if self.row_scales is not None and np.shape(self.row_scales) != (n,):
            raise ValueError("row_scales length mismatch")
        if self.col_scales is not None and np.shape(self.col_scales) != (f,):
            raise ValueError("col_scales length mismatch")

    def scale(self) -> np.ndarray:
        r = np.ones(self.codes.shape[0]) if self.row_scales is None else self.row_scales
        c = np.ones(self.codes.shape[1]) if self.col_scales is None else self.col_scales
        return np.outer(r, c)

    def values(self) -> np.ndarray:
        return self.scale() * self.codes

    def representable(self) -> bool:
        if self.row_bits is None:
            return True
        mc = max_code_of(np.asarray(self.row_bits, dtype=np.float64), self.signed)[:, None]
        lo = -mc if self.signed else 0.0
        return bool(np.all((self.codes >= lo) & (self.codes <= mc)))


def _check_acc(a_max: int, b_max: int, terms: int) -> None:
    if int(a_max) * int(b_max) * max(int(terms), 1) >= ACC_LIMIT:
        raise OverflowError("int64 accumulator could overflow for these code ranges")


def int_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dims differ: {a.shape} @ {b.shape}")
    if a.size and b.size:
        _check_acc(np.abs(a).max(), np.abs(b).max(), a.shape[1])
    return a @ b


def requantize(v, step, bits, signed: bool) -> FixedMatrix:
    """Standard quantize rule applied to real values with per-row ``step``/``bits``."""
    step = np.asarray(step, dtype=np.float64)
    bits = np.asarray(bits, dtype=np.float64)
    q = fake_quant(v, step[:, None], bits[:, None], signed)
    return FixedMatrix(q.codes.astype(np.int64), row_scales=step,
                       row_bits=round_bits(bits).astype(np.int64), signed=signed)


def fuse_update(x: FixedMatrix, w: FixedMatrix, next_step, next_bits=B_MAX, signed: bool = True,
                row_factor=None, offset=None) -> FixedMatrix:
    """Integer X̄·W̄, one fused rescale (plus optional offset), then requantize per row.

    ``row_factor`` multiplies row ``i`` (the right-hand D^-1/2 in GCN).
    """
    if x.col_scales is not None or w.row_scales is not None:
        raise ValueError("inner-dimension scales cannot be factored out of the integer product")
    p = int_matmul(x.codes, w.codes)
    v = p.astype(np.float64)
    if x.row_scales is not None:
        v = v * x.row_scales[:, None]
    if w.col_scales is not None:
        v = v * w.col_scales[None, :]
    if row_factor is not None:
        v = v * np.asarray(row_factor)[:, None]
    if offset is not None:
        v = v + offset
    n = v.shape[0]
    return requantize(v, np.broadcast_to(next_step, (n,)), np.broadcast_to(next_bits, (n,)), signed)


def int_aggregate(g: CsrGraph, b: FixedMatrix, fused_norm=None, next_step=None, next_bits=B_MAX,
                  signed: bool = True, offset=None, exclude_self: bool = False):
    """Integer CSR row sums of ``b.codes``, then one elementwise rescale pass.

    The adjacency contributes only its {0,1} structure. Without ``next_step``
    the result is returned as a wide-accumulator :class:`FixedMatrix` whose row
    scale is ``fused_norm`` (``inv_sqrt_deg`` for GCN).
    """
    codes = b.codes
    if codes.shape[0] != g.num_nodes:
        raise ValueError("row count differs from graph size")
    if codes.size:
        _check_acc(np.abs(codes).max(), 1, int(np.diff(g.row_ptr).max(initial=0)))
    s = csr_row_sum(g, codes)
    if exclude_self and g.has_self_loops:
        s = s - codes
    out = FixedMatrix(s, row_scales=None if fused_norm is None else np.asarray(fused_norm, dtype=np.float64),
                      col_scales=b.col_scales)
    if next_step is None:
        return out
    v = out.values()
    if offset is not None:
        v = v + offset
    n = v.shape[0]
    return requantize(v, np.broadcast_to(next_step, (n,)), np.broadcast_to(next_bits, (n,)), signed)


def csr_row_sum(g: CsrGraph, codes: np.ndarray) -> np.ndarray:
    """``out[i] = Σ_{j in row i} codes[j]`` in int64, rows in CSR order."""
    codes = np.asarray(codes, dtype=np.int64)
    out = np.zeros((g.num_nodes, codes.shape[1]), dtype=np.int64)
    if g.nnz == 0:
        return out
    gathered = codes[g.col_idx]
    nonempty = np.flatnonzero(np.diff(g.row_ptr) > 0)
    out[nonempty] = np.add.reduceat(gathered, g.row_ptr[nonempty], axis=0)
    return out


def fold_bn(gamma, theta, next_step):
    """Per-channel BN affine folded into the next quantizer: returns ``(gamma / s, theta / s)``."""
    s = np.asarray(next_step, dtype=np.float64)
    if np.any(s == 0):
        raise ValueError("next_step must be non-zero")
    return np.asarray(gamma) / s, np.asarray(theta) / s


def merge_bn(gamma, beta, mean, var, eps: float = M.BN_EPS):
    """Frozen BN statistics merged into a plain affine ``(γ', θ')``."""
    inv = 1.0 / np.sqrt(var + eps)
    g2 = gamma * inv
    return g2, beta - mean * g2


# ---------------------------------------------------------------------------
# Whole network
# ---------------------------------------------------------------------------

@dataclass
class IntResult:
    logits: np.ndarray
    codes: dict[str, np.ndarray]
    index: dict[str, np.ndarray]
    row_bits: dict[str, np.ndarray]


def _weight_codes(w, step, bits) -> FixedMatrix:
    q = fake_quant(w, step[None, :], float(bits), True)
    return FixedMatrix(q.codes.astype(np.int64), col_scales=np.asarray(step, dtype=np.float64))


def _node_requant(key, v, qt: M.QuantTable, res: IntResult) -> FixedMatrix:
    site = qt.sites[key]
    n = v.shape[0]
    if qt.mode == "per_node_learned":
        if site["step"].size != n:
            raise ValueError(f"site {key}: table has {site['step'].size} entries for {n} nodes")
        idx = np.arange(n)
    elif qt.mode == "uniform_fixed":
        idx = np.zeros(n, dtype=np.int64)
    else:
        # selection fused into this elementwise pass
        idx = nns.select(qt.bank(key), v)
    fm = requantize(v, site["step"][idx], site["bits"][idx], site["signed"])
    res.codes[key] = fm.codes
    res.index[key] = idx
    res.row_bits[key] = fm.row_bits
    return fm


def _input_fixed(x) -> FixedMatrix | None:
    """Integer-valued inputs (e.g. binary bag-of-words) are already codes with scale 1."""
    if np.all(x == np.round(x)) and np.abs(x).max(initial=0) < 2**31:
        return FixedMatrix(x.astype(np.int64))
    return None


def int_forward(model: M.ModelParams, qt: M.QuantTable, g: CsrGraph, x0) -> IntResult:
    spec = model.spec
    if not spec.quantized:
        raise ValueError("integer inference needs a quantized model")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (g.num_nodes, spec.in_dim):
        raise ValueError(f"features {x0.shape} do not match graph/checkpoint ({g.num_nodes}, {spec.in_dim})")
    res = IntResult(np.empty(0), {}, {}, {})
    if spec.arch == "gcn":
        res.logits = _gcn(model, qt, g, x0, res)
    else:
        res.logits = _gin(model, qt, g, x0, res)
    return res


def _gcn(model, qt, g, x0, res):
    spec, p = model.spec, model.params
    c = norm_coeffs(g)
    L = spec.num_layers
    if "x0" in qt.sites:
        cur = _node_requant("x0", x0, qt, res)
    else:
        cur = _input_fixed(x0)
    xf = x0
    for l in range(L):
        wq = _weight_codes(p[f"{l}.W"], p[f"{l}.w_step"], spec.w_bits)
        res.codes[f"{l}.W"] = wq.codes
        astep = p[f"{l}.agg_step"]
        n = g.num_nodes
        if cur is not None:
            prod = int_matmul(cur.codes, wq.codes)
            rs = np.ones(n) if cur.row_scales is None else cur.row_scales
            v = prod * (rs * c)[:, None] * wq.col_scales[None, :]
        else:
            v = (xf @ wq.values()) * c[:, None]  # non-integer unquantized input
        cq = fake_quant(v, astep[None, :], float(spec.agg_bits), True)
        C = FixedMatrix(cq.codes.astype(np.int64), col_scales=astep)
        res.codes[f"{l}.C"] = C.codes
        agg = int_aggregate(g, C, fused_norm=c)
        h = agg.values() + p[f"{l}.bias"]
        if l == L - 1:
            return h
        h = np.maximum(h, 0.0)
        key = f"x{l + 1}"
        if key in qt.sites:
            cur = _node_requant(key, h, qt, res)
        else:
            cur, xf = None, h


def _gin(model, qt, g, x0, res):
    spec, p, buf = model.spec, model.params, model.buffers
    L = spec.num_layers
    n = g.num_nodes
    if spec.quantize_input:
        step = p["0.agg_step"]
        q = fake_quant(x0, step[None, :], float(spec.agg_bits), not spec.input_nonneg)
        xin = FixedMatrix(q.codes.astype(np.int64), col_scales=step)
        res.codes["0.X"] = xin.codes
    else:
        xin = _input_fixed(x0)
    xf = x0
    for l in range(L):
        eps = float(p[f"{l}.eps"])
        if xin is not None:
            nb = int_aggregate(g, xin, exclude_self=True)
            h = ((1.0 + eps) * xin.codes + nb.codes) * (np.ones(xin.codes.shape[1]) if xin.col_scales is None
                                                       else xin.col_scales)[None, :]
        else:
            nb = g.matrix @ xf
            if g.has_self_loops:
                nb = nb - xf
            h = (1.0 + eps) * xf + nb
        hq = _node_requant(f"h{l}", h, qt, res)
        w1 = _weight_codes(p[f"{l}.W1"], p[f"{l}.w1_step"], spec.w_bits)
        w2 = _weight_codes(p[f"{l}.W2"], p[f"{l}.w2_step"], spec.w_bits)
        res.codes[f"{l}.W1"], res.codes[f"{l}.W2"] = w1.codes, w2.codes
        if spec.batch_norm:
            gm, th = merge_bn(p[f"{l}.bn_gamma"], p[f"{l}.bn_beta"], buf[f"{l}.bn_mean"], buf[f"{l}.bn_var"])
        else:
            gm, th = np.ones(spec.hidden), np.zeros(spec.hidden)
        # bias folds into the BN offset; selection needs real values so fold with unit step
        mult, off = fold_bn(gm, p[f"{l}.b1"] * gm + th, 1.0)
        prod = int_matmul(hq.codes, w1.codes)
        a = np.maximum(prod * hq.row_scales[:, None] * (w1.col_scales * mult)[None, :] + off, 0.0)
        aq = _node_requant(f"a{l}", a, qt, res)
        prod2 = int_matmul(aq.codes, w2.codes)
        z2 = prod2 * aq.row_scales[:, None] * w2.col_scales[None, :] + p[f"{l}.b2"]
        if l == L - 1:
            return z2
        z2 = np.maximum(z2, 0.0)
        step = p[f"{l + 1}.agg_step"]
        q = fake_quant(z2, step[None, :], float(spec.agg_bits), False)
        xin = FixedMatrix(q.codes.astype(np.int64), col_scales=step)
        res.codes[f"{l + 1}.X"] = xin.codes


# ---------------------------------------------------------------------------
# Operation counts
# ---------------------------------------------------------------------------

def op_counts(model: M.ModelParams, g: CsrGraph, qt: M.QuantTable | None = None) -> dict[str, int]:
    """Integer MACs (update and aggregation) and float elementwise operations."""
    spec = model.spec
    n = g.num_nodes
    if n == 0:
        return {"int_update": 0, "int_aggregate": 0, "int_ops": 0, "float_ops": 0}
    upd = agg = flt = 0
    nnz_gcn = g.nnz
    nnz_gin = g.nnz - (n if g.has_self_loops else 0)
    bank_cmp = 0
    if qt is not None and qt.mode == "nns_bank":
        bank_cmp = int(np.ceil(np.log2(max(2, next(iter(qt.sites.values()))["step"].size))))
    for l, (fin, fout) in enumerate(spec.layer_dims()):
        if spec.arch == "gcn":
            upd += n * fin * fout
            agg += nnz_gcn * fout
            flt += 2 * n * fout  # rescale into the aggregation codes, rescale after it
            if bank_cmp and l + 1 < spec.num_layers:
                flt += n * fout + n * bank_cmp
        else:
            h = spec.hidden
            upd += n * fin * h + n * h * fout
            agg += nnz_gin * fin
            flt += n * fin + n * h + n * fout
            if bank_cmp:
                flt += n * fin + n * h + 2 * n * bank_cmp
    return {"int_update": upd, "int_aggregate": agg, "int_ops": upd + agg, "float_ops": flt}
