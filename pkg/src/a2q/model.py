"""Fake-quantized 2-layer GCN / GIN with a hand-written backward pass.

Quantization sites
------------------
Node sites carry one (step, bits) pair per node (or per bank group, or one
shared pair in the uniform baseline):

* GCN ``x{l}``: input features of layer ``l``; ``x0`` only when input
  quantization is enabled. ``x1`` is the post-aggregation site.
* GIN ``h{l}``: aggregated features entering the MLP; ``a{l}``: hidden MLP
  activations after ReLU.

Column sites use one step per output column with a fixed bitwidth: the
weights (``w_bits``) and the tensor that feeds the integer aggregation
(``agg_bits``). For GCN the right-hand ``D^-1/2`` is applied before that
quantizer, so the aggregation itself only ever sees integer codes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nns
from .graph import CsrGraph, DatasetSplit, norm_coeffs
from .quant import (
    STEP_MIN,
    bit_bounds,
    fake_quant,
    fake_quant_backward,
    freeze,
    local_grads,
    memory_loss,
    round_bits,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
MODES = ("fp32", "uniform_fixed", "per_node_learned", "nns_bank")


@dataclass
class ModelSpec:
    arch: str = "gcn"
    in_dim: int = 0
    hidden: int = 16
    num_classes: int = 0
    num_layers: int = 2
    quantized: bool = True
    quantize_input: bool = False
    input_nonneg: bool = False
    w_bits: int = 4
    agg_bits: int = 4
    batch_norm: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        if self.arch not in ("gcn", "gin"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.num_layers < 1:
            raise ValueError("need at least one layer")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.hidden] * (self.num_layers - 1) + [self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    def node_sites(self) -> list[tuple[str, int, bool]]:
        """(name, dim, signed) for every per-node quantization site, in forward order."""
        if not self.quantized:
            return []
        out = []
        for l, (fin, _) in enumerate(self.layer_dims()):
            if self.arch == "gcn":
                if l == 0 and not self.quantize_input:
                    continue
                signed = not (self.input_nonneg if l == 0 else True)
                out.append((f"x{l}", fin, signed))
            else:
                out.append((f"h{l}", fin, True))
                out.append((f"a{l}", self.hidden, False))
        return out


@dataclass
class ModelParams:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class QuantTable:
    """Per-site node quantizer parameters.

    ``per_node_learned``: one (step, bits) per node; ``uniform_fixed``: one
    shared pair per site with frozen bits; ``nns_bank``: ``m`` groups chosen
    per node by nearest q_max.
    """

    mode: str
    sites: dict[str, dict]  # name -> {"step", "bits", "dim", "signed"}

    @property
    def learn_bits(self) -> bool:
        return self.mode in ("per_node_learned", "nns_bank")

    def bank(self, name: str) -> nns.ParamBank:
        s = self.sites[name]
        bank = s.get("_bank")
        if bank is None or bank.step is not s["step"] or bank.bits is not s["bits"]:
            bank = nns.ParamBank.__new__(nns.ParamBank)
            bank.step, bank.bits = s["step"], s["bits"]
            s["_bank"] = bank
        return nns.bank_refresh(bank)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_model(spec: ModelSpec, rng: np.random.Generator) -> ModelParams:
    p: dict[str, np.ndarray] = {}
    buf: dict[str, np.ndarray] = {}

    def lin(name, fin, fout):
        lim = np.sqrt(6.0 / max(fin + fout, 1))
        p[name] = rng.uniform(-lim, lim, (fin, fout))

    for l, (fin, fout) in enumerate(spec.layer_dims()):
        if spec.arch == "gcn":
            lin(f"{l}.W", fin, fout)
            p[f"{l}.bias"] = np.zeros(fout)
            if spec.quantized:
                p[f"{l}.w_step"] = nns.init_steps(rng, fout)
                p[f"{l}.agg_step"] = nns.init_steps(rng, fout)
        else:
            h = spec.hidden
            p[f"{l}.eps"] = np.zeros(())
            lin(f"{l}.W1", fin, h)
            p[f"{l}.b1"] = np.zeros(h)
            lin(f"{l}.W2", h, fout)
            p[f"{l}.b2"] = np.zeros(fout)
            if spec.batch_norm:
                p[f"{l}.bn_gamma"] = np.ones(h)
                p[f"{l}.bn_beta"] = np.zeros(h)
                buf[f"{l}.bn_mean"] = np.zeros(h)
                buf[f"{l}.bn_var"] = np.ones(h)
            if spec.quantized:
                p[f"{l}.w1_step"] = nns.init_steps(rng, h)
                p[f"{l}.w2_step"] = nns.init_steps(rng, fout)
                if l > 0 or spec.quantize_input:
                    p[f"{l}.agg_step"] = nns.init_steps(rng, fin)
    return ModelParams(spec, p, buf)


def init_quant_table(spec: ModelSpec, mode: str, num_nodes: int, rng: np.random.Generator,
                     m: int = nns.DEFAULT_M, bits: float = 4.0) -> QuantTable:
    if mode not in MODES:
        raise ValueError(f"unknown quantization mode {mode!r}")
    sites = {}
    if mode != "fp32":
        k = {"per_node_learned": num_nodes, "uniform_fixed": 1, "nns_bank": m}[mode]
        for name, dim, signed in spec.node_sites():
            lo, hi = bit_bounds(signed)
            sites[name] = {
                "step": nns.init_steps(rng, k),
                "bits": np.full(k, float(np.clip(bits, lo, hi))),
                "dim": dim,
                "signed": signed,
            }
    return QuantTable(mode, sites)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    model: ModelParams
    qt: QuantTable
    graph: CsrGraph
    train: bool
    logits: np.ndarray | None = None
    layers: list[dict] = field(default_factory=list)
    qstates: dict = field(default_factory=dict)  # key -> QState
    index: dict = field(default_factory=dict)  # node site -> group index per node


def _node_quant(key, x, qt: QuantTable, tape: Tape, frozen):
    site = qt.sites[key]
    n = x.shape[0]
    if frozen is not None and ("idx." + key) in frozen:
        idx = frozen["idx." + key]
    elif qt.mode == "per_node_learned":
        if site["step"].size != n:
            raise ValueError(f"site {key}: table has {site['step'].size} entries for {n} nodes")
        idx = np.arange(n)
    elif qt.mode == "uniform_fixed":
        idx = np.zeros(n, dtype=np.int64)
    else:
        idx = nns.select(qt.bank(key), x)
    q = fake_quant(x, site["step"][idx][:, None], site["bits"][idx][:, None], site["signed"],
                   frozen=None if frozen is None else frozen.get(key))
    tape.qstates[key] = q
    tape.index[key] = idx
    return q.xq


def _col_quant(key, x, step, bits, signed, tape, frozen):
    q = fake_quant(x, step[None, :], float(bits), signed,
                   frozen=None if frozen is None else frozen.get(key))
    tape.qstates[key] = q
    return q.xq


def _dropout(x, rate, rng, train):
    if not train or rate <= 0.0:
        return x, None
    keep = 1.0 - rate
    mask = (rng.random(x.shape, dtype=np.float32) < keep) / keep
    return x * mask, mask


def forward(model: ModelParams, qt: QuantTable, g: CsrGraph, x0, *, train: bool = False,
            rng: np.random.Generator | None = None, frozen: dict | None = None):
    """Run the network. Returns ``(logits, tape)``.

    ``frozen`` (from :func:`freeze_tape`) swaps every quantizer for its smooth
    surrogate around a base point, for gradient checking.
    """
    spec = model.spec
    x = np.asarray(x0, dtype=np.float64)
    if x.shape != (g.num_nodes, spec.in_dim):
        raise ValueError(f"features {x.shape} do not match graph/model ({g.num_nodes}, {spec.in_dim})")
    if spec.quantized and qt.mode == "fp32":
        raise ValueError("quantized model needs a quantization table")
    if train and spec.dropout > 0 and rng is None:
        raise ValueError("dropout in training needs an rng")
    tape = Tape(model, qt, g, train)
    fn = _forward_gcn if spec.arch == "gcn" else _forward_gin
    logits = fn(model, qt, g, x, tape, train, rng, frozen)
    tape.logits = logits
    return logits, tape


def _forward_gcn(model, qt, g, x, tape, train, rng, frozen):
    spec, p = model.spec, model.params
    c = norm_coeffs(g)
    A = g.matrix
    L = spec.num_layers
    for l in range(L):
        rec = {"x": x}
        key = f"x{l}"
        xin = _node_quant(key, x, qt, tape, frozen) if key in qt.sites else x
        xin, mask = _dropout(xin, spec.dropout, rng, train)
        rec["xin"], rec["mask"] = xin, mask
        W = p[f"{l}.W"]
        if spec.quantized:
            W = _col_quant(f"{l}.W", W, p[f"{l}.w_step"], spec.w_bits, True, tape, frozen)
        rec["Wq"] = W
        C = (xin @ W) * c[:, None]
        if spec.quantized:
            C = _col_quant(f"{l}.C", C, p[f"{l}.agg_step"], spec.agg_bits, True, tape, frozen)
        H = (A @ C) * c[:, None] + p[f"{l}.bias"]
        rec["H"] = H
        tape.layers.append(rec)
        if l < L - 1:
            x = np.maximum(H, 0.0)
    return H


def _bn_forward(z, gamma, beta, mean_buf, var_buf, train):
    if train:
        mu = z.mean(axis=0)
        var = z.var(axis=0)
        mean_buf *= 1.0 - BN_MOMENTUM
        mean_buf += BN_MOMENTUM * mu
        n = z.shape[0]
        var_buf *= 1.0 - BN_MOMENTUM
        var_buf += BN_MOMENTUM * var * n / max(n - 1, 1)
    else:
        mu, var = mean_buf, var_buf
    inv = 1.0 / np.sqrt(var + BN_EPS)
    zhat = (z - mu) * inv
    return zhat * gamma + beta, (zhat, inv)


def _forward_gin(model, qt, g, x, tape, train, rng, frozen):
    spec, p, buf = model.spec, model.params, model.buffers
    A = g.matrix
    L = spec.num_layers
    for l in range(L):
        rec = {"x": x}
        if spec.quantized and f"{l}.agg_step" in p:
            xa = _col_quant(f"{l}.X", x, p[f"{l}.agg_step"], spec.agg_bits,
                            not (spec.input_nonneg or l > 0), tape, frozen)
        else:
            xa = x
        nb = A @ xa
        if g.has_self_loops:
            nb = nb - xa
        rec["xa"] = xa
        h = (1.0 + p[f"{l}.eps"]) * xa + nb
        rec["h"] = h
        hq = _node_quant(f"h{l}", h, qt, tape, frozen) if f"h{l}" in qt.sites else h
        hq, mask = _dropout(hq, spec.dropout, rng, train)
        rec["hq"], rec["mask"] = hq, mask
        W1, W2 = p[f"{l}.W1"], p[f"{l}.W2"]
        if spec.quantized:
            W1 = _col_quant(f"{l}.W1", W1, p[f"{l}.w1_step"], spec.w_bits, True, tape, frozen)
            W2 = _col_quant(f"{l}.W2", W2, p[f"{l}.w2_step"], spec.w_bits, True, tape, frozen)
        rec["W1q"], rec["W2q"] = W1, W2
        z1 = hq @ W1 + p[f"{l}.b1"]
        if spec.batch_norm:
            z1n, rec["bn"] = _bn_forward(z1, p[f"{l}.bn_gamma"], p[f"{l}.bn_beta"],
                                         buf[f"{l}.bn_mean"], buf[f"{l}.bn_var"], train)
        else:
            z1n = z1
        rec["z1n"] = z1n
        a = np.maximum(z1n, 0.0)
        aq = _node_quant(f"a{l}", a, qt, tape, frozen) if f"a{l}" in qt.sites else a
        rec["aq"] = aq
        z2 = aq @ W2 + p[f"{l}.b2"]
        rec["z2"] = z2
        tape.layers.append(rec)
        if l < L - 1:
            x = np.maximum(z2, 0.0)
    return z2


def freeze_tape(tape: Tape) -> dict:
    """Branch state of every quantizer (and group choice) at the tape's base point."""
    out = {k: freeze(q) for k, q in tape.qstates.items()}
    for k, idx in tape.index.items():
        out["idx." + k] = idx
    return out


# ---------------------------------------------------------------------------
# Loss and backward
# ---------------------------------------------------------------------------

def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    e = z - m
    return e - np.log(np.exp(e).sum(axis=1, keepdims=True))


def nll_loss(logits, split: DatasetSplit) -> float:
    idx = np.flatnonzero(split.train_mask)
    if idx.size == 0:
        raise ValueError("empty train mask")
    lp = _log_softmax(np.asarray(logits, dtype=np.float64)[idx])
    return float(-np.mean(lp[np.arange(idx.size), split.labels[idx]]))


def nll_grad(logits, split: DatasetSplit) -> np.ndarray:
    idx = np.flatnonzero(split.train_mask)
    if idx.size == 0:
        raise ValueError("empty train mask")
    d = np.zeros_like(logits)
    pr = np.exp(_log_softmax(logits[idx]))
    pr[np.arange(idx.size), split.labels[idx]] -= 1.0
    d[idx] = pr / idx.size
    return d


@dataclass
class Grads:
    params: dict[str, np.ndarray]
    sites: dict[str, dict[str, np.ndarray]]
    dxq: dict[str, np.ndarray]  # task gradient w.r.t. each quantized/layer-input feature map
    task_loss: float = 0.0
    memory_loss: float = 0.0

    @property
    def total_loss(self) -> float:
        return self.task_loss + self.memory_loss


def memory_bits(qt: QuantTable, tape: Tape):
    """Per-node continuous bits and dims of every node site, as seen in ``tape``."""
    names = list(qt.sites)
    return names, [qt.sites[n]["bits"][tape.index[n]] for n in names], [qt.sites[n]["dim"] for n in names]


def backward(tape: Tape, split: DatasetSplit, *, grad_mode: str = "global", lam: float = 0.0,
             m_target: float | None = None) -> Grads:
    """Gradients of ``L_task + lam * L_memory``.

    In ``local`` mode node-site (step, bits) gradients come from each node's
    own mean absolute quantization error instead of the task loss. Weight and
    aggregation-input steps always take task gradients.
    """
    if grad_mode not in ("global", "local"):
        raise ValueError(f"unknown grad_mode {grad_mode!r}")
    model, qt = tape.model, tape.qt
    grads = Grads({}, {}, {})
    grads.task_loss = nll_loss(tape.logits, split)
    dlogits = nll_grad(tape.logits, split)
    site_node_grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def node_back(key, dxq):
        q = tape.qstates[key]
        dx, ds, db = fake_quant_backward(q, dxq, axis=1, param_grads=grad_mode == "global")
        if grad_mode == "local":
            ds, db = local_grads(q, axis=1)
        site_node_grads[key] = (ds, db)
        return dx

    if model.spec.arch == "gcn":
        _backward_gcn(tape, dlogits, grads, node_back)
    else:
        _backward_gin(tape, dlogits, grads, node_back)

    for key, (ds, db) in site_node_grads.items():
        idx = tape.index[key]
        k = qt.sites[key]["step"].size
        grads.sites[key] = {"step": nns._group_sum(idx, ds, k), "bits": nns._group_sum(idx, db, k)}

    if qt.learn_bits and lam > 0 and m_target is not None and qt.sites:
        names, bits, dims = memory_bits(qt, tape)
        loss, mg = memory_loss(bits, dims, m_target)
        grads.memory_loss = lam * loss
        for name, g_node in zip(names, mg):
            k = qt.sites[name]["bits"].size
            grads.sites[name]["bits"] = grads.sites[name]["bits"] + lam * nns._group_sum(tape.index[name], g_node, k)
    if not qt.learn_bits:
        for s in grads.sites.values():
            s["bits"] = np.zeros_like(s["bits"])
    return grads


def _col_back(tape, key, dxq, grads, step_name):
    q = tape.qstates.get(key)
    if q is None:
        return dxq
    dx, ds, _ = fake_quant_backward(q, dxq, axis=0)
    grads.params[step_name] = ds
    return dx


def _backward_gcn(tape, dlogits, grads, node_back):
    model = tape.model
    spec, p = model.spec, model.params
    g = tape.graph
    c = norm_coeffs(g)
    AT = g.matrix.T.tocsr()
    dH = dlogits
    for l in reversed(range(spec.num_layers)):
        rec = tape.layers[l]
        if l < spec.num_layers - 1:
            dH = dH * (rec["H"] > 0)
        grads.params[f"{l}.bias"] = dH.sum(axis=0)
        dCq = AT @ (dH * c[:, None])
        dC = _col_back(tape, f"{l}.C", dCq, grads, f"{l}.agg_step")
        dB = dC * c[:, None]
        dWq = rec["xin"].T @ dB
        grads.params[f"{l}.W"] = _col_back(tape, f"{l}.W", dWq, grads, f"{l}.w_step")
        dxin = dB @ rec["Wq"].T
        if rec["mask"] is not None:
            dxin = dxin * rec["mask"]
        key = f"x{l}"
        grads.dxq[key] = dxin
        if key in tape.qt.sites:
            dx = node_back(key, dxin)
        else:
            dx = dxin
        if l > 0:
            dH = dx


def _bn_backward(dy, zhat, inv, gamma):
    n = dy.shape[0]
    dgamma = (dy * zhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dzhat = dy * gamma
    dz = inv / n * (n * dzhat - dzhat.sum(axis=0) - zhat * (dzhat * zhat).sum(axis=0))
    return dz, dgamma, dbeta


def _backward_gin(tape, dlogits, grads, node_back):
    model = tape.model
    spec, p = model.spec, model.params
    g = tape.graph
    AT = g.matrix.T.tocsr()
    dz2 = dlogits
    for l in reversed(range(spec.num_layers)):
        rec = tape.layers[l]
        if l < spec.num_layers - 1:
            dz2 = dz2 * (rec["z2"] > 0)
        grads.params[f"{l}.b2"] = dz2.sum(axis=0)
        grads.params[f"{l}.W2"] = _col_back(tape, f"{l}.W2", rec["aq"].T @ dz2, grads, f"{l}.w2_step")
        daq = dz2 @ rec["W2q"].T
        grads.dxq[f"a{l}"] = daq
        da = node_back(f"a{l}", daq) if f"a{l}" in tape.qt.sites else daq
        dz1n = da * (rec["z1n"] > 0)
        if spec.batch_norm:
            zhat, inv = rec["bn"]
            if tape.train:
                dz1, dgm, dbt = _bn_backward(dz1n, zhat, inv, p[f"{l}.bn_gamma"])
            else:
                dgm, dbt = (dz1n * zhat).sum(axis=0), dz1n.sum(axis=0)
                dz1 = dz1n * p[f"{l}.bn_gamma"] * inv
            grads.params[f"{l}.bn_gamma"], grads.params[f"{l}.bn_beta"] = dgm, dbt
        else:
            dz1 = dz1n
        grads.params[f"{l}.b1"] = dz1.sum(axis=0)
        grads.params[f"{l}.W1"] = _col_back(tape, f"{l}.W1", rec["hq"].T @ dz1, grads, f"{l}.w1_step")
        dhq = dz1 @ rec["W1q"].T
        if rec["mask"] is not None:
            dhq = dhq * rec["mask"]
        grads.dxq[f"h{l}"] = dhq
        dh = node_back(f"h{l}", dhq) if f"h{l}" in tape.qt.sites else dhq
        xa = rec["xa"]
        grads.params[f"{l}.eps"] = np.asarray(np.sum(dh * xa))
        dxa = (1.0 + p[f"{l}.eps"]) * dh + AT @ dh
        if g.has_self_loops:
            dxa = dxa - dh
        grads.dxq[f"x{l}"] = dxa
        dx = _col_back(tape, f"{l}.X", dxa, grads, f"{l}.agg_step")
        if l > 0:
            dz2 = dx


def zero_grad_fraction(tape: Tape, split: DatasetSplit, site: str | None = None) -> float:
    """Fraction of nodes whose task-gradient row at ``site`` is exactly zero.

    ``site`` defaults to the last quantization site (or the last layer input
    in an unquantized model).
    """
    grads = backward(tape, split, grad_mode="global")
    if site is None:
        quant_sites = [k for k in grads.dxq if k in tape.qt.sites]
        pool = quant_sites or list(grads.dxq)
        order = _site_order(tape.model.spec)
        site = max(pool, key=order.index)
    d = grads.dxq[site]
    return float(np.mean(~np.any(d != 0.0, axis=1)))


def _site_order(spec: ModelSpec) -> list[str]:
    out = []
    for l in range(spec.num_layers):
        out += [f"x{l}"] if spec.arch == "gcn" else [f"x{l}", f"h{l}", f"a{l}"]
    return out


def accuracy(logits, labels, mask) -> float:
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits[idx], axis=1) == labels[idx]))


def clamp_quant_params(model: ModelParams, qt: QuantTable) -> None:
    for k, v in model.params.items():
        if k.endswith("step"):
            np.maximum(v, STEP_MIN, out=v)
    for s in qt.sites.values():
        np.maximum(s["step"], STEP_MIN, out=s["step"])
        lo, hi = bit_bounds(s["signed"])
        np.clip(s["bits"], lo, hi, out=s["bits"])


def rounded_site_bits(qt: QuantTable, index: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: round_bits(qt.sites[k]["bits"][index[k]]).astype(np.int64) for k in qt.sites}
