"""Checkpoint container: a JSON manifest followed by a raw float blob.

Layout: 4-byte magic, 8-byte little-endian manifest length, the UTF-8 JSON
manifest, then the blob of little-endian 32-bit floats. The manifest lists
every parameter as {name, shape, offset, count} with contiguous offsets
into the blob; an optional optimizer section appends its moment buffers to
the same blob in the same layout. Saving and loading round-trips every
value bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig, build_model
from .errors import ImageIOError
from .model import ReconstructionModel
from .training import AdamState

MAGIC = b"CSF1"
FORMAT_VERSION = 1
_F4 = np.dtype("<f4")


def _manifest_entries(arrays: list[tuple[str, np.ndarray]], start: int) -> tuple[list[dict], list[bytes], int]:
    entries, chunks, offset = [], [], start
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype=_F4).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "count": int(arr.size),
        })
        chunks.append(raw)
        offset += len(raw)
    return entries, chunks, offset


def save_checkpoint(
    path,
    model: ReconstructionModel,
    config: Optional[RunConfig] = None,
    optimizer: Optional[AdamState] = None,
) -> None:
    params = model.named_parameters()
    entries, chunks, offset = _manifest_entries([(n, p.data) for n, p in params], 0)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": (config.to_dict() if isinstance(config, RunConfig) else config) or {},
        "parameters": entries,
    }
    if optimizer is not None:
        moments = [(f"m.{n}", optimizer.m[n]) for n, _ in params]
        moments += [(f"v.{n}", optimizer.v[n]) for n, _ in params]
        opt_entries, opt_chunks, offset = _manifest_entries(moments, offset)
        manifest["optimizer"] = {
            "kind": "adam",
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "step_count": optimizer.step_count,
            "entries": opt_entries,
        }
        chunks += opt_chunks
    blob = b"".join(chunks)
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    try:
        Path(path).write_bytes(MAGIC + len(head).to_bytes(8, "little") + head + blob)
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot write checkpoint ({exc})") from exc


def _read_entry(blob: bytes, entry: dict) -> np.ndarray:
    start, count = entry["offset"], entry["count"]
    arr = np.frombuffer(blob, dtype=_F4, count=count, offset=start)
    return arr.reshape(entry["shape"]).copy()


def load_checkpoint(path) -> tuple[ReconstructionModel, RunConfig, Optional[AdamState]]:
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise ImageIOError(f"{p}: cannot read checkpoint ({exc})") from exc
    if len(data) < 12 or data[:4] != MAGIC:
        raise ImageIOError(f"{p}: not a checkpoint file")
    head_len = int.from_bytes(data[4:12], "little")
    try:
        manifest = json.loads(data[12:12 + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ImageIOError(f"{p}: corrupt checkpoint manifest ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ImageIOError(f"{p}: unsupported checkpoint version {manifest.get('format_version')}")
    blob = data[12 + head_len:]

    entries = manifest["parameters"]
    expected = sum(e["count"] for e in entries)
    opt_manifest = manifest.get("optimizer")
    if opt_manifest is not None:
        expected += sum(e["count"] for e in opt_manifest["entries"])
    if len(blob) != expected * 4:
        raise ImageIOError(f"{p}: blob length {len(blob)} != {expected * 4} expected")

    config = RunConfig.from_dict(manifest.get("config") or {})
    model = build_model(config)
    stored = {e["name"]: e for e in entries}
    params = model.named_parameters()
    names = [n for n, _ in params]
    if set(names) != set(stored):
        missing = sorted(set(names) - set(stored))
        extra = sorted(set(stored) - set(names))
        raise ImageIOError(f"{p}: parameter mismatch (missing {missing}, unexpected {extra})")
    for name, param in params:
        value = _read_entry(blob, stored[name])
        if tuple(value.shape) != param.shape:
            raise ImageIOError(f"{p}: parameter {name} has shape {value.shape}, expected {param.shape}")
        param.data = np.ascontiguousarray(value, dtype=param.data.dtype)

    optimizer = None
    if opt_manifest is not None:
        optimizer = AdamState(
            params,
            beta1=opt_manifest["beta1"],
            beta2=opt_manifest["beta2"],
            eps=opt_manifest["eps"],
        )
        optimizer.step_count = opt_manifest["step_count"]
        by_name = {e["name"]: e for e in opt_manifest["entries"]}
        for name, param in params:
            m = _read_entry(blob, by_name[f"m.{name}"])
            v = _read_entry(blob, by_name[f"v.{name}"])
            optimizer.m[name] = np.ascontiguousarray(m, dtype=param.data.dtype)
            optimizer.v[name] = np.ascontiguousarray(v, dtype=param.data.dtype)
    return model, config, optimizer
