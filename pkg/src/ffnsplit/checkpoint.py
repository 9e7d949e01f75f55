"""Shared on-disk format: JSON manifest plus one little-endian float32 blob.

``<stem>.json`` holds ``{"format", "blob", "tensors": {name: {shape, dtype,
offset, nbytes}}, "meta": {...}}``; ``<stem>.bin`` holds the raw bytes in
manifest order. Names are written sorted so the bytes are reproducible.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT = "ffnsplit-ckpt-v1"
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".bin") else path


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    """Write ``tensors`` and ``meta``; returns the manifest path."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    blob_path = stem.with_suffix(".bin")
    entries = {}
    offset = 0
    with open(blob_path, "wb") as fh:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype=_LE_F32)
            raw = arr.tobytes()
            fh.write(raw)
            entries[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset, "nbytes": len(raw)}
            offset += len(raw)
    manifest = {"format": FORMAT, "blob": blob_path.name, "tensors": entries, "meta": dict(meta or {})}
    manifest_path = stem.with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest_path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    stem = _stem(path)
    manifest_path = stem.with_suffix(".json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{manifest_path}: unknown format {manifest.get('format')!r}")
    raw = (manifest_path.parent / manifest["blob"]).read_bytes()
    tensors = {}
    for name, e in manifest["tensors"].items():
        if e["dtype"] != "float32":
            raise CheckpointError(f"{name}: unsupported dtype {e['dtype']}")
        end = e["offset"] + e["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"{name}: blob truncated")
        arr = np.frombuffer(raw[e["offset"]:end], dtype=_LE_F32).reshape(e["shape"])
        tensors[name] = arr.astype(np.float32)
    return tensors, manifest["meta"]
