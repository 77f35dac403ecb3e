"""Adam and the training loop for L_task + lambda * L_memory."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from .graph import CsrGraph, DatasetSplit
from .nns import DEFAULT_M
from .report import avg_bits_from_tape

log = logging.getLogger(__name__)


SELECT_BITS_TOL = 0.01  # best_val treats bitwidths within 1% of the minimum as equal


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    arch: str = "gcn"
    hidden: int = 16
    quant_mode: str = "per_node_learned"
    quantize_input: bool = False
    uniform_bits: float = 4.0
    bank_m: int = DEFAULT_M
    w_bits: int = 4
    agg_bits: int = 4
    batch_norm: bool = False
    dropout: float = 0.5
    epochs: int = 200
    lr_weights: float = 1e-2
    lr_step: float = 1e-4
    lr_bit: float = 1e-3
    lam: float = 1e-4
    m_target: float | None = None
    grad_mode: str = "global"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 5e-4
    select: str = "last"

    def __post_init__(self):
        for name in ("lr_weights", "lr_step", "lr_bit"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.quant_mode not in M.MODES:
            raise ValueError(f"unknown quant_mode {self.quant_mode!r}")
        if self.grad_mode not in ("global", "local"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")
        if self.m_target is not None and not self.m_target > 0:
            raise ValueError("m_target must be positive")
        if self.select not in ("last", "best_val"):
            raise ValueError(f"unknown select {self.select!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def param_group(key: str) -> str:
    if key.endswith("step"):
        return "step"
    if key.endswith("bits"):
        return "bits"
    return "weights"


def _decays(key: str) -> bool:
    return key.rsplit(".", 1)[-1] in ("W", "W1", "W2")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], cfg: TrainConfig,
              state: AdamState) -> None:
    """In-place Adam update with per-group learning rates (weight decay as L2 on W)."""
    lr = {"weights": cfg.lr_weights, "step": cfg.lr_step, "bits": cfg.lr_bit}
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k in sorted(grads):
        p = params[k]
        g = np.asarray(grads[k], dtype=np.float64)
        if cfg.weight_decay and _decays(k):
            g = g + cfg.weight_decay * p
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr[param_group(k)] * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def model_spec(cfg: TrainConfig, in_dim: int, num_classes: int, input_nonneg: bool) -> M.ModelSpec:
    return M.ModelSpec(
        arch=cfg.arch, in_dim=in_dim, hidden=cfg.hidden, num_classes=num_classes,
        quantized=cfg.quant_mode != "fp32", quantize_input=cfg.quantize_input,
        input_nonneg=input_nonneg, w_bits=cfg.w_bits, agg_bits=cfg.agg_bits,
        batch_norm=cfg.batch_norm, dropout=cfg.dropout,
    )


def flat_params(model: M.ModelParams, qt: M.QuantTable) -> dict[str, np.ndarray]:
    out = dict(model.params)
    for name, s in qt.sites.items():
        out[f"site.{name}.step"] = s["step"]
        out[f"site.{name}.bits"] = s["bits"]
    return out


def flat_grads(grads: M.Grads, qt: M.QuantTable) -> dict[str, np.ndarray]:
    out = dict(grads.params)
    for name, s in grads.sites.items():
        out[f"site.{name}.step"] = s["step"]
        if qt.learn_bits:
            out[f"site.{name}.bits"] = s["bits"]
    return out


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    task_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    avg_bits: list[float] = field(default_factory=list)
    selected_epoch: int = -1

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model: M.ModelParams, qt: M.QuantTable, g: CsrGraph, x0, split: DatasetSplit):
    logits, tape = M.forward(model, qt, g, x0, train=False)
    return {
        "train_acc": M.accuracy(logits, split.labels, split.train_mask),
        "val_acc": M.accuracy(logits, split.labels, split.val_mask),
        "test_acc": M.accuracy(logits, split.labels, split.test_mask),
        "avg_bits": avg_bits_from_tape(tape),
        "logits": logits,
        "tape": tape,
    }


def train(g: CsrGraph, x0, split: DatasetSplit, cfg: TrainConfig):
    """Returns ``(model, quant_table, history)``.

    ``select = "last"`` keeps the final-epoch model. ``"best_val"`` keeps the
    best-validation epoch among those whose average bitwidth is within
    ``SELECT_BITS_TOL`` of the smallest seen, so a learned run cannot pick an
    early, wider model. Fixed-precision modes get plain best-validation.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    spec = model_spec(cfg, x0.shape[1], split.num_classes, bool(np.all(x0 >= 0)))
    model = M.init_model(spec, rng)
    qt = M.init_quant_table(spec, cfg.quant_mode, g.num_nodes, rng, m=cfg.bank_m, bits=cfg.uniform_bits
                            if cfg.quant_mode == "uniform_fixed" else 4.0)
    drop_rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState()
    hist = History()
    params = flat_params(model, qt)
    best = None
    min_bits = np.inf
    for epoch in range(cfg.epochs):
        _, tape = M.forward(model, qt, g, x0, train=True, rng=drop_rng)
        grads = M.backward(tape, split, grad_mode=cfg.grad_mode, lam=cfg.lam, m_target=cfg.m_target)
        if not np.isfinite(grads.total_loss):
            raise DivergenceError(f"non-finite loss at epoch {epoch}: task={grads.task_loss} "
                                  f"memory={grads.memory_loss}")
        adam_step(params, flat_grads(grads, qt), cfg, state)
        M.clamp_quant_params(model, qt)
        ev = evaluate(model, qt, g, x0, split)
        hist.loss.append(grads.total_loss)
        hist.task_loss.append(grads.task_loss)
        for k in ("train_acc", "val_acc", "test_acc", "avg_bits"):
            getattr(hist, k).append(ev[k])
        if cfg.select == "best_val":
            b = ev["avg_bits"]
            min_bits = min(min_bits, b)
            tol = min_bits * (1.0 + SELECT_BITS_TOL)
            if best is not None and best[0] > tol:
                best = None
            if b <= tol and (best is None or ev["val_acc"] > best[1]):
                best = (b, ev["val_acc"], epoch, copy.deepcopy(model.params), copy.deepcopy(model.buffers),
                        copy.deepcopy(qt.sites))
        if epoch % 50 == 0 or epoch == cfg.epochs - 1:
            log.debug("epoch %d loss %.4f val %.3f bits %.3f", epoch, grads.total_loss, ev["val_acc"], ev["avg_bits"])
    hist.selected_epoch = cfg.epochs - 1
    if best is not None:
        _, _, hist.selected_epoch, p, b, sites = best
        model = M.ModelParams(model.spec, p, b)
        qt = M.QuantTable(qt.mode, sites)
    return model, qt, hist
