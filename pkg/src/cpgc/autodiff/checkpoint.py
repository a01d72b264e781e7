"""Tensor checkpoint format.

A checkpoint ``<stem>`` is two files:

* ``<stem>.manifest.json`` -- UTF-8 JSON with sorted keys: format tag, blob
  file name, one entry per tensor (name, shape, byte offset, element count)
  and a free-form ``metadata`` mapping.
* ``<stem>.bin`` -- the tensors back to back as little-endian float64,
  row-major, in manifest order.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from cpgc.errors import ContractError

FORMAT = "cpgc-tensors/1"
_LE_F64 = np.dtype("<f8")


def dump_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _paths(stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_name(stem.name + ".manifest.json"), stem.with_name(stem.name + ".bin")


def save_checkpoint(stem: str | Path, tensors: Mapping[str, np.ndarray],
                    metadata: Mapping[str, Any] | None = None) -> Path:
    manifest_path, blob_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(blob_path, "wb") as fh:
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=_LE_F64)
            fh.write(arr.tobytes(order="C"))
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            offset += arr.nbytes
    manifest = {"format": FORMAT, "blob": blob_path.name, "tensors": entries,
                "metadata": dict(metadata or {})}
    manifest_path.write_text(dump_json(manifest), encoding="utf-8")
    return manifest_path


def load_checkpoint(stem: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    manifest_path, _ = _paths(stem)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise ContractError(f"{manifest_path}: unknown checkpoint format {manifest.get('format')!r}")
    raw = (manifest_path.parent / manifest["blob"]).read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        start = entry["offset"]
        stop = start + entry["count"] * _LE_F64.itemsize
        if stop > len(raw):
            raise ContractError(f"{manifest_path}: tensor {entry['name']} runs past end of blob")
        arr = np.frombuffer(raw[start:stop], dtype=_LE_F64).astype(np.float64)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
    return tensors, manifest["metadata"]


def tensors_digest(tensors: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and little-endian bytes, in mapping order."""
    h = hashlib.sha256()
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=_LE_F64)
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
