"""Manifest + blob container shared by checkpoints and dataset exports.

``<stem>.json`` lists every array (name, shape, dtype, byte offset, nbytes)
plus free-form metadata; ``<stem>.bin`` holds the little-endian arrays
concatenated in manifest order.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

SCHEMA_VERSION = 1


class FormatError(ValueError):
    pass


def _paths(stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def write_container(stem: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> Path:
    manifest_path, blob_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    digest = hashlib.sha256()
    with open(blob_path, "wb") as fh:
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes(order="C")
            fh.write(raw)
            digest.update(raw)
            entries.append(
                {
                    "name": name,
                    "shape": list(arr.shape),
                    "dtype": le.dtype.str,
                    "offset": offset,
                    "nbytes": len(raw),
                }
            )
            offset += len(raw)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "blob": blob_path.name,
        "sha256": digest.hexdigest(),
        "arrays": entries,
        "meta": dict(meta or {}),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=False) + "\n")
    return manifest_path


def read_container(stem: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    manifest_path, _ = _paths(stem)
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"{manifest_path}: unsupported schema version {manifest.get('schema_version')}")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    arrays = {}
    for e in manifest["arrays"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise FormatError(f"{manifest_path}: array {e['name']!r} runs past end of blob ({end} > {len(blob)})")
        dt = np.dtype(e["dtype"])
        arr = np.frombuffer(blob[e["offset"] : end], dtype=dt).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return arrays, manifest["meta"]


def container_digest(stem: str | Path) -> str:
    manifest_path, _ = _paths(stem)
    return json.loads(manifest_path.read_text())["sha256"]
