"""Compact binary checkpoints.

Layout (all integers little-endian)::

    magic      4 bytes   b"AMN1"
    version    u32
    header_len u64
    header     header_len bytes of UTF-8 JSON
    payload    trainable parameters as float32, in directory order

The JSON header carries the model config, the label map, the tensor
directory (name/shape/offset/length into the payload), and the batch-norm
running statistics (float32, base64). Keeping the statistics in the header
means the payload is exactly ``4 * count_parameters(model)`` bytes.
"""
from __future__ import annotations

import base64
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, CheckpointIntegrityError
from .layers import ModelConfig, build_mobilenet1d

MAGIC = b"AMN1"
FORMAT_VERSION = 1
PREFIX = struct.Struct("<4sIQ")


def _header(model, label_map, extra):
    directory = []
    offset = 0
    for name, p in model.params.items():
        length = 4 * p.size
        directory.append({"name": name, "shape": list(p.shape), "offset": offset, "length": length})
        offset += length
    buffers = {
        name: {"shape": list(b.shape),
               "f32": base64.b64encode(b.data.astype("<f4").tobytes()).decode("ascii")}
        for name, b in model.buffers.items()
    }
    header = {
        "config": model.config.to_dict(),
        "label_map": dict(label_map or {}),
        "tensors": directory,
        "buffers": buffers,
        "extra": dict(extra or {}),
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"), offset


def to_bytes(model, label_map=None, extra=None):
    header, payload_len = _header(model, label_map, extra)
    parts = [PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)), header]
    parts.extend(p.data.astype("<f4").tobytes() for p in model.params.values())
    blob = b"".join(parts)
    assert len(blob) == PREFIX.size + len(header) + payload_len
    return blob


def save_checkpoint(model, path, label_map=None, extra=None):
    """Write ``model`` to ``path`` atomically; returns bytes written."""
    blob = to_bytes(model, label_map if label_map is not None else getattr(model, "label_map", None),
                    extra)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return len(blob)


def checkpoint_nbytes(model):
    header, payload_len = _header(model, getattr(model, "label_map", None), None)
    return PREFIX.size + len(header) + payload_len


def read_header(blob):
    if len(blob) < PREFIX.size:
        raise CheckpointFormatError(f"file too short for checkpoint prefix ({len(blob)} bytes)")
    magic, version, header_len = PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}")
    end = PREFIX.size + header_len
    if end > len(blob):
        raise CheckpointIntegrityError(f"header length {header_len} exceeds file size {len(blob)}")
    try:
        header = json.loads(blob[PREFIX.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from exc
    return header, end


def from_bytes(blob):
    header, payload_start = read_header(blob)
    payload = memoryview(blob)[payload_start:]
    try:
        config = ModelConfig.from_dict(header["config"])
        directory = header["tensors"]
        buffers = header["buffers"]
    except (KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"header missing field: {exc}") from exc

    expected_offset = 0
    for entry in directory:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["offset"] != expected_offset or entry["length"] != 4 * n:
            raise CheckpointIntegrityError(f"tensor directory inconsistent at {entry['name']!r}")
        expected_offset += entry["length"]
    if expected_offset != len(payload):
        raise CheckpointIntegrityError(
            f"payload holds {len(payload)} bytes, directory declares {expected_offset}")

    model = build_mobilenet1d(config, seed=0)
    if [e["name"] for e in directory] != list(model.params):
        raise CheckpointIntegrityError("tensor directory does not match the architecture in config")
    for entry in directory:
        p = model.params[entry["name"]]
        if tuple(entry["shape"]) != p.shape:
            raise CheckpointIntegrityError(
                f"{entry['name']}: shape {tuple(entry['shape'])} vs config {p.shape}")
        raw = np.frombuffer(payload, dtype="<f4", count=p.size, offset=entry["offset"])
        p.data = raw.astype(np.float64).reshape(p.shape)
    if set(buffers) != set(model.buffers):
        raise CheckpointIntegrityError("buffer set does not match the architecture in config")
    for name, b in model.buffers.items():
        spec = buffers[name]
        raw = np.frombuffer(base64.b64decode(spec["f32"]), dtype="<f4")
        if tuple(spec["shape"]) != b.shape or raw.size != b.size:
            raise CheckpointIntegrityError(f"{name}: buffer shape mismatch")
        b.data[...] = raw.astype(np.float64).reshape(b.shape)
    model.label_map = dict(header.get("label_map", {}))
    model.extra = dict(header.get("extra", {}))
    return model


def load_checkpoint(path):
    return from_bytes(Path(path).read_bytes())


def round_to_float32(model):
    """Round every parameter and buffer to float32 precision in place."""
    for t in list(model.params.values()) + list(model.buffers.values()):
        t.data = t.data.astype(np.float32).astype(np.float64)
    return model


def describe(path):
    """Size accounting for a checkpoint file without building the model."""
    blob = Path(path).read_bytes()
    header, payload_start = read_header(blob)
    params = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["tensors"])
    return {
        "file_bytes": len(blob),
        "header_bytes": payload_start,
        "payload_bytes": len(blob) - payload_start,
        "params_total": params,
        "config": header["config"],
        "label_map": header["label_map"],
    }

