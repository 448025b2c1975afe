"""Bit-exact checkpoint files: named tensors behind a validated header.

Layout: 8 magic bytes, a little-endian uint32 format version, a little-endian
uint64 header length, a canonical JSON header (model config plus the ordered
tensor directory of name/dtype/shape), then the raw little-endian tensor bytes
in directory order. The directory must match the config's shape table exactly,
and it is validated before any payload is read.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (CheckpointShapeError, CheckpointTruncatedError,
                     CheckpointVersionError)
from .model import ModelConfig, TransformerModel, shape_table

MAGIC = b"MNMTCKP\x00"
VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict  # name -> np.ndarray, in shape-table order

    def directory(self):
        return [(name, arr.dtype.str, arr.shape) for name, arr in self.tensors.items()]


def checkpoint_from_model(model: TransformerModel) -> Checkpoint:
    tensors = {name: t.data for name, t in model.named_tensors()}
    return Checkpoint(config=model.config, tensors=tensors)


def model_from_checkpoint(ckpt: Checkpoint) -> TransformerModel:
    """Rebuild a model, re-tying the embedding if the config asks for it."""
    return TransformerModel.build(ckpt.config, lambda name, shape: ckpt.tensors[name])


def save_checkpoint(obj, path) -> None:
    ckpt = obj if isinstance(obj, Checkpoint) else checkpoint_from_model(obj)
    directory = []
    payload = []
    for name, shape in shape_table(ckpt.config):
        arr = np.ascontiguousarray(ckpt.tensors[name])
        if arr.shape != shape:
            raise CheckpointShapeError(f"tensor {name} has shape {arr.shape}, table says {shape}")
        if arr.dtype.str not in _DTYPES:
            arr = arr.astype("<f4" if arr.dtype.itemsize <= 4 else "<f8")
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        directory.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    header = json.dumps(
        {"config": ckpt.config.to_dict(), "tensors": directory},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 12:
        raise CheckpointTruncatedError("file too short for the fixed header")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointVersionError("bad magic bytes; not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported format version {version}")
    (header_len,) = struct.unpack_from("<Q", blob, len(MAGIC) + 4)
    header_start = len(MAGIC) + 12
    if len(blob) < header_start + header_len:
        raise CheckpointTruncatedError("header extends past end of file")
    try:
        header = json.loads(blob[header_start:header_start + header_len].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        directory = [(e["name"], e["dtype"], tuple(e["shape"])) for e in header["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointVersionError(f"malformed header: {exc}") from None

    expected = shape_table(config)
    if [(n, s) for n, _, s in directory] != expected:
        raise CheckpointShapeError(
            "tensor directory does not match the config's shape table")
    for _, dtype, _ in directory:
        if dtype not in _DTYPES:
            raise CheckpointShapeError(f"unsupported tensor dtype {dtype}")

    offset = header_start + header_len
    tensors = {}
    for name, dtype, shape in directory:
        dt = _DTYPES[dtype]
        nbytes = dt.itemsize * int(np.prod(shape))
        if offset + nbytes > len(blob):
            raise CheckpointTruncatedError(f"payload truncated in tensor {name}")
        tensors[name] = np.frombuffer(blob, dtype=dt, count=int(np.prod(shape)),
                                      offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointTruncatedError(
            f"{len(blob) - offset} trailing bytes after the last tensor")
    return Checkpoint(config=config, tensors=tensors)
