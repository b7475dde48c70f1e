"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"STBLN1"            magic
    uint16               format version
    uint64               header length in bytes
    header               UTF-8 JSON: spec, seed, metadata, tensor table
    payload              float64 little-endian tensors, concatenated in table order

The tensor table lists ``name``, ``shape`` and ``kind`` (``param``, ``momentum`` or
``buffer``) for every stored array.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import STBLN, NetworkSpec, build_model, param_shapes

MAGIC = b"STBLN1"
VERSION = 1
_PREFIX = struct.Struct("<6sHQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: STBLN, metadata: dict | None = None) -> bytes:
    """Serialize parameters, momentum buffers, running statistics, spec and seed."""
    table = []
    chunks = []
    for name, p in model.named_parameters():
        table.append({"name": name, "shape": list(p.shape), "kind": "param"})
        chunks.append(p.value)
        table.append({"name": name + ".momentum", "shape": list(p.shape), "kind": "momentum"})
        chunks.append(p.momentum_buffer)
    for name, arr in model.named_buffers():
        table.append({"name": name, "shape": list(arr.shape), "kind": "buffer"})
        chunks.append(arr)
    header = {
        "spec": model.spec.to_dict(),
        "input_channels": model.spec.input_channels,
        "seed": int(model.seed),
        "metadata": metadata or {},
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(c, dtype="<f8").tobytes() for c in chunks)
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + payload


def read_header(blob: bytes) -> dict:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("checkpoint truncated before header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if _PREFIX.size + hlen > len(blob):
        raise CheckpointError("header length field exceeds checkpoint size")
    try:
        header = json.loads(blob[_PREFIX.size : _PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    header["_payload_offset"] = _PREFIX.size + hlen
    return header


def load_checkpoint(blob: bytes, expected_spec: NetworkSpec | None = None) -> tuple[STBLN, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(model, metadata)``."""
    header = read_header(blob)
    try:
        spec_dict = dict(header["spec"])
        spec_dict["input_channels"] = header.get("input_channels", 2)
        spec = NetworkSpec.from_dict(spec_dict)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid spec in checkpoint: {exc}") from exc
    if expected_spec is not None and spec != expected_spec:
        raise CheckpointError(
            f"checkpoint shapes are inconsistent with the requested spec: "
            f"{spec.to_dict()} != {expected_spec.to_dict()}"
        )
    offset = header["_payload_offset"]
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * n
        if end > len(blob):
            raise CheckpointError(f"checkpoint truncated inside tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after payload")

    model = build_model(spec, int(header["seed"]))
    expected = param_shapes(spec)
    for name, p in model.named_parameters():
        if name not in arrays or arrays[name].shape != expected[name]:
            got = arrays[name].shape if name in arrays else None
            raise CheckpointError(f"shape inconsistency for {name}: stored {got}, spec implies {expected[name]}")
        mom = arrays.get(name + ".momentum")
        if mom is None or mom.shape != expected[name]:
            raise CheckpointError(f"missing or misshapen momentum buffer for {name}")
        p.value[...] = arrays[name]
        p.momentum_buffer[...] = mom
    for name, buf in model.named_buffers():
        if name not in arrays or arrays[name].shape != buf.shape:
            raise CheckpointError(f"shape inconsistency for buffer {name}")
        buf[...] = arrays[name]
    return model, header.get("metadata", {})


def write_checkpoint(path, model: STBLN, metadata: dict | None = None):
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(model, metadata))


def read_checkpoint(path, expected_spec: NetworkSpec | None = None) -> tuple[STBLN, dict]:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read(), expected_spec)

