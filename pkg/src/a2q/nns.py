"""Nearest-neighbor selection of quantization parameter groups for unseen nodes.

A bank holds ``m`` (step, bits) groups. Each node picks the group whose
maximum representable magnitude ``q_max = step * (2^([b]-1) - 1)`` is closest
to the node's largest absolute feature. Gradients from every node that used a
group are summed into that group.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quant import STEP_MIN, QuantGrad, max_code_of, round_bits

DEFAULT_M = 1000


@dataclass
class ParamBank:
    step: np.ndarray
    bits: np.ndarray
    sorted_qmax: np.ndarray = field(init=False)
    perm: np.ndarray = field(init=False)

    def __post_init__(self):
        self.step = np.asarray(self.step, dtype=np.float64)
        self.bits = np.asarray(self.bits, dtype=np.float64)
        if self.step.shape != self.bits.shape or self.step.ndim != 1 or self.step.size == 0:
            raise ValueError("bank needs matching non-empty 1-D step and bits arrays")
        bank_refresh(self)

    @property
    def m(self) -> int:
        return self.step.size

    def qmax(self) -> np.ndarray:
        # signed code count even for unsigned sites, so selection follows the algorithm text
        return self.step * max_code_of(round_bits(self.bits), signed=True)


def init_steps(rng: np.random.Generator, size: int, mean: float = 0.01, std: float = 0.01) -> np.ndarray:
    """Normal(mean, std) truncated to ``>= STEP_MIN`` by redrawing."""
    out = rng.normal(mean, std, size)
    bad = out < STEP_MIN
    while np.any(bad):
        out[bad] = rng.normal(mean, std, int(bad.sum()))
        bad = out < STEP_MIN
    return out


def bank_init(m: int, seed, bits: float = 4.0) -> ParamBank:
    if m < 1:
        raise ValueError("bank size m must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return ParamBank(init_steps(rng, m), np.full(m, float(bits)))


def bank_refresh(bank: ParamBank) -> ParamBank:
    """Re-derive the sorted q_max array after a parameter update."""
    q = bank.qmax()
    # stable sort: equal q_max keeps the smaller group index first
    perm = np.argsort(q, kind="stable")
    bank.perm = perm
    bank.sorted_qmax = q[perm]
    return bank


def row_absmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] == 0:
        return np.zeros(x.shape[0])
    return np.max(np.abs(x), axis=1)


def select_from_f(bank: ParamBank, f: np.ndarray) -> np.ndarray:
    """Binary search of each ``f`` in the sorted q_max array.

    Equidistant candidates resolve to the smaller q_max; equal q_max values
    resolve to the smaller group index.
    """
    q = bank.sorted_qmax
    f = np.asarray(f, dtype=np.float64)
    hi = np.searchsorted(q, f, side="left")  # first q >= f
    lo = hi - 1
    hi_c = np.clip(hi, 0, q.size - 1)
    lo_c = np.clip(lo, 0, q.size - 1)
    d_hi = np.where(hi < q.size, np.abs(q[hi_c] - f), np.inf)
    d_lo = np.where(lo >= 0, np.abs(f - q[lo_c]), np.inf)
    pos = np.where(d_lo <= d_hi, lo_c, hi_c)
    # move to the first entry of a run of equal q_max values
    first = np.searchsorted(q, q[pos], side="left")
    return bank.perm[first]


def select(bank: ParamBank, x: np.ndarray) -> np.ndarray:
    return select_from_f(bank, row_absmax(x))


def select_bruteforce(bank: ParamBank, f: np.ndarray) -> np.ndarray:
    """Linear-scan reference with the same tie rules."""
    q = bank.qmax()
    out = np.empty(len(f), dtype=np.int64)
    for i, fi in enumerate(np.asarray(f, dtype=np.float64)):
        best, best_key = -1, None
        for k in range(q.size):
            key = (abs(fi - q[k]), q[k], k)
            if best_key is None or key < best_key:
                best, best_key = k, key
        out[i] = best
    return out


def accumulate_group_grads(assignment, node_grads: QuantGrad, m: int) -> QuantGrad:
    assignment = np.asarray(assignment, dtype=np.int64)
    ds = np.asarray(node_grads.d_step, dtype=np.float64)
    db = np.asarray(node_grads.d_bitwidth, dtype=np.float64)
    if assignment.shape != ds.shape or ds.shape != db.shape:
        raise ValueError("assignment and gradient lengths differ")
    return QuantGrad(_group_sum(assignment, ds, m), _group_sum(assignment, db, m))


def _group_sum(idx: np.ndarray, v: np.ndarray, m: int) -> np.ndarray:
    # sort by (group, value) so the reduction order ignores node order
    order = np.lexsort((v, idx))
    out = np.zeros(m)
    if idx.size == 0:
        return out
    si, sv = idx[order], v[order]
    starts = np.flatnonzero(np.r_[True, si[1:] != si[:-1]])
    out[si[starts]] = np.add.reduceat(sv, starts)
    return out
