"""Checkpoint container.

Layout: magic ``A2QC``, u32 version, 32-byte SHA-256 of the experiment
config, u32 header length, UTF-8 JSON header, then the arrays listed in the
header as raw little-endian bytes in header order. No timestamps are stored,
so equal inputs give equal bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import model as M

MAGIC = b"A2QC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _arrays(model: M.ModelParams, qt: M.QuantTable) -> list[tuple[str, np.ndarray]]:
    out = [(f"param.{k}", v) for k, v in sorted(model.params.items())]
    out += [(f"buffer.{k}", v) for k, v in sorted(model.buffers.items())]
    for name in sorted(qt.sites):
        s = qt.sites[name]
        out += [(f"site.{name}.step", s["step"]), (f"site.{name}.bits", s["bits"])]
    return out


def dumps(model: M.ModelParams, qt: M.QuantTable, config_hash: str, extra: dict | None = None) -> bytes:
    digest = bytes.fromhex(config_hash)
    if len(digest) != 32:
        raise CheckpointError("config hash must be a SHA-256 hex digest")
    arrays = _arrays(model, qt)
    header = {
        "spec": asdict(model.spec),
        "mode": qt.mode,
        "sites": {n: {"dim": s["dim"], "signed": s["signed"]} for n, s in sorted(qt.sites.items())},
        "arrays": [[k, list(np.shape(v))] for k, v in arrays],
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), digest, struct.pack("<I", len(hb)), hb]
    parts += [np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in arrays]
    return b"".join(parts)


def loads(blob: bytes, expect_hash: str | None = None):
    """Returns ``(model, quant_table, config_hash, extra)``."""
    if blob[:4] != MAGIC:
        raise CheckpointError("not an A2QC checkpoint")
    if len(blob) < 44:
        raise CheckpointError("truncated checkpoint")
    (ver,) = struct.unpack_from("<I", blob, 4)
    if ver != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {ver}")
    chash = blob[8:40].hex()
    if expect_hash is not None and chash != expect_hash:
        raise CheckpointError("checkpoint was written for a different config")
    (hlen,) = struct.unpack_from("<I", blob, 40)
    if 44 + hlen > len(blob):
        raise CheckpointError("truncated checkpoint")
    try:
        header = json.loads(blob[44:44 + hlen])
    except ValueError as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    off = 44 + hlen
    arrays = {}
    for key, shape in header["arrays"]:
        size = int(np.prod(shape)) if shape else 1
        end = off + 8 * size
        if end > len(blob):
            raise CheckpointError("truncated checkpoint")
        arrays[key] = np.frombuffer(blob[off:end], dtype="<f8").astype(np.float64).reshape(shape)
        off = end
    if off != len(blob):
        raise CheckpointError("trailing bytes in checkpoint")
    spec = M.ModelSpec(**header["spec"])
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param.")}
    buffers = {k[7:]: v for k, v in arrays.items() if k.startswith("buffer.")}
    sites = {}
    for name, meta in header["sites"].items():
        sites[name] = {"step": arrays[f"site.{name}.step"], "bits": arrays[f"site.{name}.bits"],
                       "dim": meta["dim"], "signed": meta["signed"]}
    return M.ModelParams(spec, params, buffers), M.QuantTable(header["mode"], sites), chash, header["extra"]


def save(path, model, qt, config_hash: str, extra: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, qt, config_hash, extra))


def load(path, expect_hash: str | None = None):
    return loads(Path(path).read_bytes(), expect_hash)
