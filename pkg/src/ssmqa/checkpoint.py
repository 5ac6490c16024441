"""Checkpoint container: a manifest JSON plus per-tensor binary blobs.

Tensor blobs are flat little-endian binary with a shape header::

    magic "TNSR" | u8 version | u8 dtype code | u8 ndim | ndim x u64 dims | data

Round trips are bit exact. The manifest records the model config, an
optional train config, the step counter and the name -> blob mapping.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

__all__ = [
    "CheckpointError",
    "CheckpointState",
    "write_tensor",
    "read_tensor",
    "checkpoint_save",
    "checkpoint_load",
]

FORMAT_VERSION = 1
_MAGIC = b"TNSR"
_DTYPE_CODES = {"<f4": 1, "<f8": 2, "<i8": 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(IOError):
    pass


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array)
    key = arr.dtype.newbyteorder("<").str
    if key not in _DTYPE_CODES:
        arr = arr.astype(np.float64)
        key = "<f8"
    arr = arr.astype(key)  # force little endian
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<BBB", 1, _DTYPE_CODES[key], arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<Q", d))
        f.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 7 or blob[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a tensor blob")
    version, code, ndim = struct.unpack("<BBB", blob[4:7])
    if version != 1:
        raise CheckpointError(f"{path}: unsupported blob version {version}")
    if code not in _CODE_DTYPES:
        raise CheckpointError(f"{path}: unknown dtype code {code}")
    off = 7
    if len(blob) < off + 8 * ndim:
        raise CheckpointError(f"{path}: truncated shape header")
    dims = struct.unpack("<" + "Q" * ndim, blob[off: off + 8 * ndim])
    off += 8 * ndim
    dtype = np.dtype(_CODE_DTYPES[code])
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(blob) != off + expected:
        raise CheckpointError(
            f"{path}: truncated data ({len(blob) - off} bytes, expected {expected})"
        )
    return np.frombuffer(blob[off:], dtype=dtype).reshape(dims).copy()


@dataclass
class CheckpointState:
    """Everything a run needs to resume: configs, step, named arrays."""

    model_config: dict
    arrays: Dict[str, np.ndarray]
    train_config: dict = None
    step: int = 0
    extra: dict = field(default_factory=dict)


def _blob_name(name: str) -> str:
    return name.replace("/", "__") + ".bin"


def checkpoint_save(state: CheckpointState, path) -> None:
    """Write a checkpoint directory: manifest.json + tensors/*.bin."""
    os.makedirs(path, exist_ok=True)
    tdir = os.path.join(path, "tensors")
    os.makedirs(tdir, exist_ok=True)
    entries = []
    for name in sorted(state.arrays):
        arr = state.arrays[name]
        fname = _blob_name(name)
        write_tensor(os.path.join(tdir, fname), arr)
        entries.append(
            {
                "name": name,
                "file": fname,
                "dtype": np.asarray(arr).dtype.name,
                "shape": list(np.asarray(arr).shape),
            }
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": state.model_config,
        "train_config": state.train_config,
        "step": state.step,
        "extra": state.extra,
        "tensors": entries,
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, ensure_ascii=False, indent=2, sort_keys=True)


def checkpoint_load(path) -> CheckpointState:
    """Read a checkpoint directory; any inconsistency raises CheckpointError
    before any state is returned."""
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise CheckpointError(f"{path}: no manifest.json")
    try:
        with open(mpath, encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format {version} != supported {FORMAT_VERSION}"
        )
    arrays = {}
    for entry in manifest["tensors"]:
        arr = read_tensor(os.path.join(path, "tensors", entry["file"]))
        if list(arr.shape) != entry["shape"] or arr.dtype.name != entry["dtype"]:
            raise CheckpointError(
                f"{path}: blob {entry['name']} does not match its manifest entry"
            )
        arrays[entry["name"]] = arr
    return CheckpointState(
        model_config=manifest["model_config"],
        arrays=arrays,
        train_config=manifest.get("train_config"),
        step=int(manifest.get("step", 0)),
        extra=manifest.get("extra", {}),
    )
