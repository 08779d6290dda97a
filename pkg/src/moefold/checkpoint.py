"""On-disk checkpoint format.

A checkpoint is a directory holding:

  manifest.json  format_version, kind, model/gate config, and one record
                 per tensor: name, dtype (f32|f64), shape, byte offset,
                 byte length, CRC32C of the payload. Records are sorted by
                 tensor name; offsets are 64-byte aligned.
  weights.bin    raw little-endian values concatenated in record order,
                 zero-padded between records to keep the alignment.

Shards use the same two files plus a `shard.json` sidecar carrying the
rank and its (tp, ep) tile coordinates. Saving is deterministic, so
save -> load -> save reproduces the original bytes exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict

import numpy as np

from .errors import (ChecksumError, ConfigError, ManifestError, TruncatedFileError,
                     UnknownVersionError)
from .model import DenseCheckpoint, ModelConfig
from .moe import GateConfig
from .tensor import Tensor
from .upcycle import DenseShard, MoECheckpoint, MoEShard

FORMAT_VERSION = 1
ALIGNMENT = 64

_DTYPES = {"f32": "<f4", "f64": "<f8"}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


# ---------------------------------------------------------------------------
# CRC32C (Castagnoli), slicing-by-8. The stdlib only ships CRC32 (zlib), so
# the table version lives here; check value crc32c(b"123456789") == 0xE3069283.
# ---------------------------------------------------------------------------

def _make_crc_tables():
    poly = 0x82F63B78
    base = []
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ poly if c & 1 else c >> 1
        base.append(c)
    tables = [base]
    for t in range(1, 8):
        prev = tables[t - 1]
        tables.append([base[prev[i] & 0xFF] ^ (prev[i] >> 8) for i in range(256)])
    return tables


_T0, _T1, _T2, _T3, _T4, _T5, _T6, _T7 = _make_crc_tables()


def crc32c(data: bytes, crc: int = 0) -> int:
    c = crc ^ 0xFFFFFFFF
    n = len(data)
    i = 0
    end8 = n - (n % 8)
    while i < end8:
        c = (_T7[(data[i] ^ c) & 0xFF]
             ^ _T6[(data[i + 1] ^ (c >> 8)) & 0xFF]
             ^ _T5[(data[i + 2] ^ (c >> 16)) & 0xFF]
             ^ _T4[(data[i + 3] ^ (c >> 24)) & 0xFF]
             ^ _T3[data[i + 4]] ^ _T2[data[i + 5]] ^ _T1[data[i + 6]] ^ _T0[data[i + 7]])
        i += 8
    while i < n:
        c = _T0[(c ^ data[i]) & 0xFF] ^ (c >> 8)
        i += 1
    return c ^ 0xFFFFFFFF


# ---------------------------------------------------------------------------
# save
# ---------------------------------------------------------------------------

def _gate_to_json(gate: GateConfig | None):
    return None if gate is None else asdict(gate)


def _gate_from_json(d) -> GateConfig | None:
    if d is None:
        return None
    try:
        return GateConfig(**d)
    except TypeError as e:
        raise ManifestError(f"bad gate config in manifest: {e}") from e


def _model_from_json(d) -> ModelConfig:
    try:
        return ModelConfig(**d)
    except TypeError as e:
        raise ManifestError(f"bad model config in manifest: {e}") from e


def _write_payload(path: str, kind: str, model: ModelConfig, tensors: dict[str, Tensor],
                   gate: GateConfig | None = None, moe_layers=None) -> None:
    os.makedirs(path, exist_ok=True)
    records = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        data = tensors[name].data
        dtype_name = _DTYPE_NAMES.get(data.dtype)
        if dtype_name is None:
            raise ConfigError(f"tensor {name} has unsupported dtype {data.dtype}")
        raw = np.ascontiguousarray(data).astype(_DTYPES[dtype_name], copy=False).tobytes()
        pad = (-offset) % ALIGNMENT
        offset += pad
        blobs.append((pad, raw))
        records.append({
            "name": name,
            "dtype": dtype_name,
            "shape": list(data.shape),
            "offset": offset,
            "length": len(raw),
            "crc32c": crc32c(raw),
        })
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "model": asdict(model),
        "gate": _gate_to_json(gate),
        "moe_layers": list(moe_layers) if moe_layers is not None else None,
        "tensors": records,
    }
    with open(os.path.join(path, "weights.bin"), "wb") as f:
        for pad, raw in blobs:
            if pad:
                f.write(b"\x00" * pad)
            f.write(raw)
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def save_checkpoint(ckpt: DenseCheckpoint | MoECheckpoint, path: str) -> None:
    if isinstance(ckpt, MoECheckpoint):
        ckpt.validate()
        _write_payload(path, "moe", ckpt.config, ckpt.tensors, gate=ckpt.gate, moe_layers=ckpt.moe_layers)
    elif isinstance(ckpt, DenseCheckpoint):
        ckpt.validate()
        _write_payload(path, "dense", ckpt.config, ckpt.tensors)
    else:
        raise ConfigError(f"cannot save object of type {type(ckpt).__name__}")


def save_shard(shard: DenseShard | MoEShard, path: str) -> None:
    if isinstance(shard, MoEShard):
        _write_payload(path, "moe_shard", shard.config, shard.tensors,
                       gate=shard.gate, moe_layers=shard.moe_layers)
    elif isinstance(shard, DenseShard):
        _write_payload(path, "dense_shard", shard.config, shard.tensors)
    else:
        raise ConfigError(f"cannot save object of type {type(shard).__name__}")
    sidecar = {
        "rank": shard.rank,
        "tp": [shard.tp_index, shard.tp_size],
        "ep": [shard.ep_index, shard.ep_size],
    }
    with open(os.path.join(path, "shard.json"), "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# load
# ---------------------------------------------------------------------------

def _read_manifest(path: str) -> dict:
    manifest_path = os.path.join(path, "manifest.json")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {manifest_path}: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise UnknownVersionError(f"unsupported checkpoint format version {version!r} (expected {FORMAT_VERSION})")
    return manifest


def _read_tensors(path: str, manifest: dict, verify: bool = True) -> dict[str, Tensor]:
    weights_path = os.path.join(path, "weights.bin")
    size = os.path.getsize(weights_path)
    tensors: dict[str, Tensor] = {}
    with open(weights_path, "rb") as f:
        for rec in manifest["tensors"]:
            name = rec["name"]
            if name in tensors:
                raise ManifestError(f"duplicate tensor record: {name}")
            dtype = _DTYPES.get(rec["dtype"])
            if dtype is None:
                raise ManifestError(f"tensor {name}: unknown dtype {rec['dtype']!r}")
            shape = tuple(rec["shape"])
            expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
            if expected != rec["length"]:
                raise ManifestError(f"tensor {name}: manifest length {rec['length']} does not match "
                                    f"shape {shape} x {np.dtype(dtype).itemsize} bytes = {expected}")
            if rec["offset"] + rec["length"] > size:
                raise TruncatedFileError(f"weights.bin truncated: tensor {name} needs bytes "
                                         f"[{rec['offset']}, {rec['offset'] + rec['length']}) of {size}")
            f.seek(rec["offset"])
            raw = f.read(rec["length"])
            if len(raw) != rec["length"]:
                raise TruncatedFileError(f"weights.bin truncated while reading tensor {name}")
            if verify and crc32c(raw) != rec["crc32c"]:
                raise ChecksumError(f"checksum mismatch for tensor {name}")
            arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.dtype(dtype).newbyteorder("="))
            tensors[name] = Tensor(arr.copy(), requires_grad=True)
    return tensors


def load_checkpoint(path: str, verify: bool = True) -> DenseCheckpoint | MoECheckpoint:
    manifest = _read_manifest(path)
    kind = manifest.get("kind")
    model = _model_from_json(manifest["model"])
    tensors = _read_tensors(path, manifest, verify=verify)
    if kind == "dense":
        ckpt = DenseCheckpoint(config=model, tensors=tensors)
        ckpt.validate()
        return ckpt
    if kind == "moe":
        gate = _gate_from_json(manifest.get("gate"))
        if gate is None or manifest.get("moe_layers") is None:
            raise ManifestError("moe checkpoint missing gate config or moe_layers")
        ckpt = MoECheckpoint(config=model, gate=gate, moe_layers=tuple(manifest["moe_layers"]), tensors=tensors)
        ckpt.validate()
        return ckpt
    raise ManifestError(f"not a whole-model checkpoint (kind={kind!r}); use load_shard")


def load_shard(path: str, verify: bool = True) -> DenseShard | MoEShard:
    manifest = _read_manifest(path)
    kind = manifest.get("kind")
    if kind not in ("dense_shard", "moe_shard"):
        raise ManifestError(f"not a shard checkpoint (kind={kind!r}); use load_checkpoint")
    with open(os.path.join(path, "shard.json")) as f:
        sidecar = json.load(f)
    model = _model_from_json(manifest["model"])
    tensors = _read_tensors(path, manifest, verify=verify)
    common = dict(rank=sidecar["rank"], tp_index=sidecar["tp"][0], tp_size=sidecar["tp"][1],
                  ep_index=sidecar["ep"][0], ep_size=sidecar["ep"][1], config=model, tensors=tensors)
    if kind == "dense_shard":
        return DenseShard(**common)
    gate = _gate_from_json(manifest.get("gate"))
    if gate is None or manifest.get("moe_layers") is None:
        raise ManifestError("moe shard missing gate config or moe_layers")
    return MoEShard(gate=gate, moe_layers=tuple(manifest["moe_layers"]), **common)
