"""Binary checkpoint container.

Layout: 8-byte little-endian header length, UTF-8 JSON header, then raw
little-endian float32 payloads.  The header maps each tensor name to
``{"shape", "dtype": "f32", "offset", "frozen"}`` (offsets relative to the
payload start) and carries the model config and normalization statistics
under ``"__metadata__"``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, fields

import numpy as np

from .backbone import ModelConfig, ModelParams
from .dataset import NormStats

META_KEY = "__metadata__"


class CheckpointError(ValueError):
    pass


def _header(p: ModelParams) -> dict:
    head = {}
    offset = 0
    for name, arr in p.tensors.items():
        head[name] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset,
                      "frozen": bool(p.frozen[name])}
        offset += arr.size * 4
    meta = {"config": asdict(p.config)}
    if p.norm_stats is not None:
        meta["norm_mean"] = [float(v) for v in p.norm_stats.mean]
        meta["norm_std"] = [float(v) for v in p.norm_stats.std]
    head[META_KEY] = meta
    return head


def save_checkpoint(p: ModelParams, path):
    """Write ``p``; tensors are stored as float32."""
    header = json.dumps(_header(p), separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in p.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, config: ModelConfig | None = None) -> ModelParams:
    """Read a checkpoint, validating every tensor against the model schema.

    The schema comes from ``config`` when given, else from the header
    metadata.  Tensors load as float32 arrays.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise CheckpointError(f"{path}: truncated checkpoint: missing header length")
    (hlen,) = struct.unpack("<Q", blob[:8])
    if len(blob) < 8 + hlen:
        raise CheckpointError(f"{path}: truncated checkpoint: header declares {hlen} bytes, "
                              f"file has {len(blob) - 8}")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: corrupt header: expected a JSON object")
    payload = blob[8 + hlen:]
    meta = header.pop(META_KEY, {})

    if config is None:
        raw = meta.get("config")
        if not isinstance(raw, dict):
            raise CheckpointError(f"{path}: header has no model config; pass one explicitly")
        known = {f.name for f in fields(ModelConfig)}
        unknown = set(raw) - known
        if unknown:
            raise CheckpointError(f"{path}: unknown config field(s) {sorted(unknown)}")
        try:
            config = ModelConfig(**raw)
        except (TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: invalid model config: {exc}") from None
    schema = config.schema()

    tensors, frozen = {}, {}
    for name, entry in header.items():
        if name not in schema:
            raise CheckpointError(f"{path}: unknown tensor name {name!r}")
        want, _ = schema[name]
        try:
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
            dtype = entry["dtype"]
            fz = bool(entry["frozen"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointError(f"{path}: malformed header entry for {name!r}") from None
        if dtype != "f32":
            raise CheckpointError(f"{path}: tensor {name!r} has unsupported dtype {dtype!r}")
        if shape != want:
            raise CheckpointError(f"{path}: shape mismatch for {name!r}: file {shape}, model {want}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if offset < 0 or offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload for tensor {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4,
                                      offset=offset).astype(np.float32).reshape(shape)
        frozen[name] = fz
    missing = [n for n in schema if n not in tensors]
    if missing:
        raise CheckpointError(f"{path}: missing tensor {missing[0]!r}")

    stats = None
    if "norm_mean" in meta:
        stats = NormStats(np.array(meta["norm_mean"], dtype=np.float64),
                          np.array(meta["norm_std"], dtype=np.float64))
    return ModelParams(config, {n: tensors[n] for n in schema}, {n: frozen[n] for n in schema}, stats)
