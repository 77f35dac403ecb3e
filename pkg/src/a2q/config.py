"""Experiment configuration: ``key = value`` text files.

Keys
----
dataset            cora | synth | files
edge_file, feature_file, split_file, labels_file   (dataset = files)
row_normalize      scale each feature row to sum 1 (true/false)
split_seed         seed of the Cora train/val/test split
synth_n, synth_exponent, synth_classes, synth_feat_dim, synth_noise, synth_seed,
                   synth_train_frac, synth_val_frac
inductive          declares a graph-level / unseen-node setting (needed by nns_bank)
seeds              comma-separated seeds swept by ``report``
count_first_layer  include input features in compression accounting
accel_config       accelerator config file (default: bundled)
lambda             memory penalty factor
target_bits        sets m_target to the memory of this uniform bitwidth
any TrainConfig field (arch, hidden, quant_mode, epochs, lr_step, ...)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .train import TrainConfig

_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}


@dataclass
class ExperimentConfig:
    dataset: str = "synth"
    edge_file: str = ""
    feature_file: str = ""
    split_file: str = ""
    labels_file: str = ""
    row_normalize: bool = False
    split_seed: int = 0
    synth_n: int = 200
    synth_exponent: float = 2.5
    synth_classes: int = 4
    synth_feat_dim: int = 16
    synth_noise: float = 1.0
    synth_seed: int = 0
    synth_train_frac: float = 0.5
    synth_val_frac: float = 0.2
    inductive: bool = False
    seeds: list[int] = field(default_factory=lambda: [0])
    count_first_layer: bool = True
    accel_config: str = ""
    target_bits: float | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.dataset not in ("cora", "synth", "files"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.dataset == "files" and not (self.edge_file and self.feature_file and self.split_file):
            raise ValueError("dataset = files needs edge_file, feature_file and split_file")
        mode = self.train.quant_mode
        if mode == "nns_bank" and not self.inductive:
            raise ValueError("nns_bank needs inductive = true")
        if mode == "per_node_learned" and self.inductive:
            raise ValueError("per_node_learned needs a fixed node set (inductive = false)")
        if not self.seeds:
            raise ValueError("seeds must not be empty")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        from .report import config_hash
        return config_hash(self.to_dict())

    def with_seed(self, seed: int) -> ExperimentConfig:
        d = self.to_dict()
        d["train"] = TrainConfig(**{**d["train"], "seed": seed})
        return ExperimentConfig(**d)


def _parse_bool(v: str) -> bool:
    s = v.lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _convert(v: str, typ):
    t = str(typ)
    if "bool" in t:
        return _parse_bool(v)
    if "list" in t:
        return [int(s) for s in v.replace(",", " ").split()]
    if v.lower() in ("none", "") and "None" in t:
        return None
    if "float" in t:
        return float(v)
    if "int" in t:
        return int(v)
    return v


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    exp_fields = {f.name: f for f in fields(ExperimentConfig) if f.name != "train"}
    exp: dict = {}
    tr: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k == "lambda":
            k = "lam"
        if k in exp_fields:
            exp[k] = _convert(v, exp_fields[k].type)
        elif k in _TRAIN_KEYS and k != "m_target":
            tr[k] = _convert(v, _TRAIN_KEYS[k].type)
        elif k == "m_target":
            tr[k] = float(v)
        else:
            raise ValueError(f"line {lineno}: unknown config key {k!r}")
    if base_dir is not None:
        for k in ("edge_file", "feature_file", "split_file", "labels_file", "accel_config"):
            if exp.get(k) and not Path(exp[k]).is_absolute():
                exp[k] = str(Path(base_dir) / exp[k])
    return ExperimentConfig(train=TrainConfig(**tr), **exp)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    return parse_config(p.read_text(), base_dir=p.parent)


def load_dataset(cfg: ExperimentConfig):
    """``(graph, features, split)`` for the configured dataset."""
    from . import datasets
    from .graph import load_graph

    if cfg.dataset == "cora":
        g, x, split = datasets.cora(cfg.split_seed)
    elif cfg.dataset == "synth":
        g, x, split = datasets.synth_community(cfg.synth_n, cfg.synth_seed, exponent=cfg.synth_exponent,
                                               num_classes=cfg.synth_classes, feat_dim=cfg.synth_feat_dim,
                                               noise=cfg.synth_noise, train_frac=cfg.synth_train_frac,
                                               val_frac=cfg.synth_val_frac)
    else:
        g, x, split = load_graph(cfg.edge_file, cfg.feature_file, cfg.split_file, cfg.labels_file or None)
    if cfg.row_normalize:
        x = x / np.maximum(np.abs(x).sum(axis=1, keepdims=True), 1e-12)
    return g, x, split


def resolve_m_target(cfg: ExperimentConfig, num_nodes: int, in_dim: int) -> TrainConfig:
    """Fill ``m_target`` from ``target_bits`` using the model's node-site dims."""
    tc = cfg.train
    if cfg.target_bits is None or tc.m_target is not None:
        return tc
    from .quant import ETA
    from .train import model_spec

    spec = model_spec(tc, in_dim, 2, True)
    dims = [d for _, d, _ in spec.node_sites()]
    m = num_nodes * sum(dims) * cfg.target_bits / ETA
    return TrainConfig(**{**asdict(tc), "m_target": m})


def dumps_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
