"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic      4 bytes   b"VMTL"
    version    uint32
    length     uint32    byte length of the manifest
    manifest   UTF-8 JSON: {"meta": {...}, "entries": [{"name", "shape", "offset"}]}
    payload    float64 little-endian, entries back to back; offsets count floats

Entry names are prefixed ``param/``, ``adam.m/``, ``adam.v/`` and ``snapshot/``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VMTL"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = json.dumps({"meta": meta or {}, "entries": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(manifest)))
        fh.write(manifest)
        for chunk in chunks:
            fh.write(chunk)


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a VMTL checkpoint")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, length = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    manifest = json.loads(raw[12 : 12 + length].decode("utf-8"))
    payload = np.frombuffer(raw[12 + length :], dtype="<f8")
    arrays = {}
    for e in manifest["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["offset"] + n > payload.size:
            raise CheckpointError(f"{path}: entry {e['name']!r} runs past the payload")
        arrays[e["name"]] = payload[e["offset"] : e["offset"] + n].reshape(tuple(e["shape"])).astype(np.float64)
    return arrays, manifest["meta"]


def save_checkpoint(path, state) -> None:
    arrays = {f"param/{k}": v.data for k, v in state.model.params.items()}
    for k, m in state.adam.m.items():
        arrays[f"adam.m/{k}"] = m
        arrays[f"adam.v/{k}"] = state.adam.v[k]
    if state.snapshot is not None:
        for k, v in state.snapshot.params.items():
            arrays[f"snapshot/{k}"] = v.data
    meta = {
        "iteration": state.iteration,
        "adam_step": state.adam.step,
        "method": state.model.config.method.value,
        "seed": state.config.seed,
        "snapshot_iteration": None if state.snapshot is None else state.snapshot.iteration,
    }
    write_arrays(path, arrays, meta)


def restore_params(path, model) -> dict:
    """Load ``param/*`` entries into ``model`` in place; returns the metadata."""
    arrays, meta = read_arrays(path)
    params = model.params
    for name, p in params.items():
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        if arrays[key].shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: {arrays[key].shape} vs {p.shape}")
        p.data = arrays[key].copy()
    return meta
