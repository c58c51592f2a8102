"""Versioned binary model container.

Layout::

    magic     8 bytes  b"LIFT3DM\\0"
    version   uint32 little-endian
    hdr_len   uint32 little-endian
    header    JSON (config, seed, meta, manifest of tensor names/shapes, crc32)
    payload   little-endian float64 values in manifest order
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import ModelFormatError, ShapeError
from .tcn import TcnConfig, TcnModel

MAGIC = b"LIFT3DM\0"
VERSION = 1
_EXTRA = "extra/"


def save_model(model: TcnModel, path, meta=None, extras=None) -> None:
    """Write config, parameters, running statistics and optional extra arrays."""
    tensors = {name: t.data for name, t in model.named_tensors().items()}
    for name, arr in (extras or {}).items():
        tensors[_EXTRA + name] = np.asarray(arr, dtype=np.float64)
    manifest = [{"name": n, "shape": list(a.shape)} for n, a in tensors.items()]
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in tensors.values())
    header = json.dumps({
        "config": model.config.to_dict(),
        "seed": model.seed,
        "meta": meta or {},
        "manifest": manifest,
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
    }).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        fh.write(payload)


def read_model_file(path):
    """Parse a model file into ``(header, {name: array})`` with integrity checks."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic)")
    version, hdr_len = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported model version {version} (expected {VERSION})")
    if len(raw) < 16 + hdr_len:
        raise ModelFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hdr_len])
    except (ValueError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupted header ({exc})") from None
    payload = raw[16 + hdr_len:]
    if len(payload) != header.get("payload_bytes"):
        raise ModelFormatError(
            f"{path}: truncated payload ({len(payload)} of {header.get('payload_bytes')} bytes)"
        )
    if zlib.crc32(payload) != header.get("crc32"):
        raise ModelFormatError(f"{path}: payload checksum mismatch")
    tensors = {}
    offset = 0
    for entry in header["manifest"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=offset)
        tensors[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
        offset += 8 * n
    return header, tensors


def load_model(path, expect_joints=None) -> TcnModel:
    """Rebuild a model from disk.

    The returned model carries ``meta`` (dict) and ``extras`` (arrays stored
    with ``save_model(..., extras=...)``) attributes.
    """
    header, tensors = read_model_file(path)
    try:
        config = TcnConfig.from_dict(header["config"])
    except TypeError as exc:
        raise ModelFormatError(f"{path}: bad config ({exc})") from None
    if expect_joints is not None and config.num_joints != expect_joints:
        raise ShapeError(
            f"model predicts {config.num_joints} joints, evaluation expects {expect_joints}"
        )
    model = TcnModel(config, seed=header.get("seed", 0))
    for name, t in model.named_tensors().items():
        if name not in tensors:
            raise ModelFormatError(f"{path}: missing tensor {name}")
        if tensors[name].shape != t.shape:
            raise ShapeError(f"{name}: stored shape {tensors[name].shape} != {t.shape}")
        t.data = tensors[name].copy()
    model.meta = header.get("meta", {})
    model.extras = {k[len(_EXTRA):]: v for k, v in tensors.items() if k.startswith(_EXTRA)}
    return model
