"""Tensor container used for parameter trees and training checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"CHITCKPT"
    uint32    format version
    uint64    manifest length N
    N bytes   UTF-8 JSON manifest
    ...       raw tensor blob

The manifest has a ``tensors`` list of ``{key, dtype, shape, offset, nbytes}``
records (offsets relative to the start of the blob) plus free-form metadata.
Tensor bytes are stored little-endian, C-contiguous.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

MAGIC = b"CHITCKPT"
VERSION = 1
_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def save_tensors(path: str | os.PathLike, tensors: dict[str, torch.Tensor], meta: dict[str, Any]) -> None:
    records, chunks, offset = [], [], 0
    for key in tensors:
        t = tensors[key].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"{key}: unsupported dtype {t.dtype}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes(order="C")
        records.append({"key": key, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = dict(meta)
    manifest["tensors"] = records
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(head)))
        fh.write(head)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)


def read_manifest(path: str | os.PathLike) -> tuple[dict[str, Any], int]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, n = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        manifest = json.loads(fh.read(n).decode("utf-8"))
    return manifest, len(MAGIC) + 12 + n


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    manifest, start = read_manifest(path)
    data = Path(path).read_bytes()[start:]
    tensors = {}
    for rec in manifest["tensors"]:
        lo, hi = rec["offset"], rec["offset"] + rec["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"{path}: truncated tensor {rec['key']}")
        arr = np.frombuffer(data[lo:hi], dtype=np.dtype(rec["dtype"])).reshape(rec["shape"])
        tensors[rec["key"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return tensors, manifest


def load_into_module(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "") -> None:
    """Copy ``prefix``-keyed tensors into ``module``, validating key set and shapes."""
    own = module.state_dict()
    given = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = sorted(set(own) - set(given))
    extra = sorted(set(given) - set(own))
    if missing or extra:
        raise CheckpointError(f"parameter keys do not match the model (missing={missing[:5]}, unexpected={extra[:5]})")
    for k, v in given.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise CheckpointError(f"{k}: checkpoint shape {tuple(v.shape)} != model shape {tuple(own[k].shape)}")
    module.load_state_dict({k: v.to(own[k].dtype) for k, v in given.items()})
