"""``a2q`` command line: train, quantize, infer, simulate, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import accel, checkpoint, datasets
from . import model as M
from .config import ExperimentConfig, load_config, load_dataset, resolve_m_target
from .report import RunRecord, compression_ratio, write_summary
from .runtime import int_forward, op_counts
from .train import evaluate, train

log = logging.getLogger("a2q")


class CliError(RuntimeError):
    pass


def _paths(out: Path, seed: int) -> dict[str, Path]:
    return {
        "ckpt": out / f"model_seed{seed}.a2qc",
        "train": out / f"train_seed{seed}.json",
        "quantize": out / f"quantize_seed{seed}.json",
        "codes": out / f"codes_seed{seed}.npz",
        "infer": out / f"infer_seed{seed}.json",
        "simulate": out / f"simulate_seed{seed}.json",
    }


def _write_record(path: Path, rec: RunRecord) -> None:
    path.write_text(rec.to_json(include_wall_clock=False))
    path.with_suffix(".timing.json").write_text(json.dumps({"wall_clock": rec.wall_clock}) + "\n")


def _compression(cfg: ExperimentConfig, model: M.ModelParams, n: int, b_m: float) -> float:
    dims = model.spec.layer_dims()
    f0 = dims[0][0]
    f1 = dims[1][0] if len(dims) > 1 else 0
    return compression_ratio(b_m, n, f0, f1, len(dims), count_first_layer=cfg.count_first_layer)


def _load_ckpt(cfg: ExperimentConfig, paths):
    if not paths["ckpt"].exists():
        raise CliError(f"no checkpoint at {paths['ckpt']}; run 'a2q train' first")
    try:
        model, qt, _, extra = checkpoint.load(paths["ckpt"], expect_hash=cfg.digest())
    except checkpoint.CheckpointError as e:
        raise CliError(f"{paths['ckpt']}: {e}") from e
    return model, qt, extra


def cmd_train(cfg: ExperimentConfig, out: Path, seed: int) -> RunRecord:
    t0 = time.perf_counter()
    g, x, split = load_dataset(cfg)
    tc = resolve_m_target(cfg, g.num_nodes, x.shape[1])
    model, qt, hist = train(g, x, split, tc)
    ev = evaluate(model, qt, g, x, split)
    paths = _paths(out, seed)
    checkpoint.save(paths["ckpt"], model, qt, cfg.digest(), extra={"m_target": tc.m_target})
    metrics = {
        "test_acc": ev["test_acc"],
        "val_acc": ev["val_acc"],
        "train_acc": ev["train_acc"],
        "avg_bits": ev["avg_bits"],
        "compression_ratio": _compression(cfg, model, g.num_nodes, ev["avg_bits"]),
        "m_target_kb": tc.m_target,
    }
    return RunRecord("train", cfg.digest(), seed, hist.to_dict(), metrics, None, time.perf_counter() - t0)


def cmd_quantize(cfg: ExperimentConfig, out: Path, seed: int) -> RunRecord:
    """Export the integer codes and per-node bitwidths of every site."""
    t0 = time.perf_counter()
    paths = _paths(out, seed)
    model, qt, _ = _load_ckpt(cfg, paths)
    if not model.spec.quantized:
        raise CliError("quantize: fp32 checkpoint has nothing to quantize")
    g, x, _ = load_dataset(cfg)
    res = int_forward(model, qt, g, x)
    arrays = {f"codes.{k}": v for k, v in res.codes.items()}
    arrays.update({f"bits.{k}": v for k, v in res.row_bits.items()})
    with open(paths["codes"], "wb") as fh:
        for k in sorted(arrays):
            # fixed-layout text-free export: name length, name, shape, int64 data
            name = k.encode()
            a = np.ascontiguousarray(arrays[k], dtype="<i8")
            fh.write(len(name).to_bytes(4, "little") + name + a.ndim.to_bytes(4, "little"))
            fh.write(b"".join(int(d).to_bytes(8, "little") for d in a.shape) + a.tobytes())
    hist = {k: np.bincount(v.astype(np.int64), minlength=9).tolist() for k, v in sorted(res.row_bits.items())}
    metrics = {"sites": len(res.row_bits), "code_file": paths["codes"].name}
    return RunRecord("quantize", cfg.digest(), seed, {"bit_histograms": hist}, metrics, None,
                     time.perf_counter() - t0)


def cmd_infer(cfg: ExperimentConfig, out: Path, seed: int) -> RunRecord:
    t0 = time.perf_counter()
    paths = _paths(out, seed)
    model, qt, _ = _load_ckpt(cfg, paths)
    g, x, split = load_dataset(cfg)
    if model.spec.quantized:
        logits = int_forward(model, qt, g, x).logits
        path = "integer"
    else:
        logits, _ = M.forward(model, qt, g, x)
        path = "float"
    metrics = {
        "test_acc": M.accuracy(logits, split.labels, split.test_mask),
        "val_acc": M.accuracy(logits, split.labels, split.val_mask),
        "path": path,
        **{k: int(v) for k, v in op_counts(model, g, qt).items()},
    }
    return RunRecord("infer", cfg.digest(), seed, {}, metrics, None, time.perf_counter() - t0)


def cmd_simulate(cfg: ExperimentConfig, out: Path, seed: int) -> RunRecord:
    t0 = time.perf_counter()
    if cfg.train.quant_mode == "fp32":
        raise CliError("simulate: an fp32 model has no bitwidths to simulate; use a quantized quant_mode")
    paths = _paths(out, seed)
    model, qt, _ = _load_ckpt(cfg, paths)
    g, x, _ = load_dataset(cfg)
    acfg = accel.load_accel_config(cfg.accel_config or None)
    rep = accel.simulate(accel.workload_from_model(model, qt, g, x), acfg)
    metrics = {"speedup_vs_int4": rep.speedup_vs_int4, "total_cycles": rep.total_cycles,
               "energy_pj": rep.energy_pj, "sim_avg_bits": rep.avg_bits}
    return RunRecord("simulate", cfg.digest(), seed, {}, metrics, rep.to_dict(), time.perf_counter() - t0)


def cmd_report(cfg: ExperimentConfig, out: Path, seeds: list[int]) -> RunRecord:
    t0 = time.perf_counter()
    records = []
    for s in seeds:
        paths = _paths(out, s)
        if not paths["train"].exists():
            raise CliError(f"missing {paths['train']}; run 'a2q train --seed {s}' first")
        rec = RunRecord.from_json(paths["train"].read_text())
        if paths["simulate"].exists():
            rec.metrics.update(RunRecord.from_json(paths["simulate"].read_text()).metrics)
        records.append(rec)
    csv_path, json_path = write_summary(records, out)
    summary = json.loads(json_path.read_text())
    return RunRecord("report", cfg.digest(), seeds[0], {}, {"seeds": seeds, **summary["metrics"]}, None,
                     time.perf_counter() - t0)


COMMANDS = {"train": cmd_train, "quantize": cmd_quantize, "infer": cmd_infer, "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="a2q", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)
    for name in (*COMMANDS, "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, default=Path("runs"))
    p = sub.add_parser("prepare-cora", help="write the bundled Cora in the plain file formats")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split-seed", type=int, default=0)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.cmd == "prepare-cora":
            paths = datasets.write_cora(args.out, args.split_seed)
            for k, p in paths.items():
                print(f"{k}: {p}")
            return 0
        try:
            cfg = load_config(args.config)
        except (OSError, ValueError, TypeError) as e:
            raise CliError(f"{args.config}: {e}") from e
        args.out.mkdir(parents=True, exist_ok=True)
        if args.cmd == "report":
            seeds = [args.seed] if args.seed is not None else cfg.seeds
            rec = cmd_report(cfg, args.out, seeds)
            _write_record(args.out / "report.json", rec)
        else:
            seed = args.seed if args.seed is not None else cfg.seeds[0]
            cfg = cfg.with_seed(seed)
            rec = COMMANDS[args.cmd](cfg, args.out, seed)
            _write_record(_paths(args.out, seed)[args.cmd], rec)
        print(json.dumps(rec.metrics, sort_keys=True, default=str))
        return 0
    except (CliError, FileNotFoundError, ValueError, OverflowError) as e:
        print(f"a2q {args.cmd}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
