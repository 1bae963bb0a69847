"""Binary checkpoint container.

Layout (little-endian)::

    b"MBRW"  u32 version  32-byte model digest  u32 tensor count
    per tensor: u32 name length, UTF-8 name, u32 rank, u32 dims[rank], u8 dtype tag, raw values
    u32 CRC32 of every preceding byte

Dtype tags: 0 = float32, 1 = float64, 2 = uint8.  Non-array state (epoch,
best validation loss, training config) travels as a UTF-8 JSON blob in the
``meta/json`` uint8 tensor.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..model_zoo import ModelSpec, WeightSet, build
from ..tensor_engine import AdamState, BatchNormState

MAGIC = b"MBRW"
VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


def write_tensors(path, digest: bytes, tensors: dict[str, np.ndarray]) -> None:
    if len(digest) != 32:
        raise CheckpointError(f"model digest must be 32 bytes, got {len(digest)}")
    parts = [MAGIC, struct.pack("<I", VERSION), digest, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dtype) not in DTYPE_TAGS:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(struct.pack("<B", DTYPE_TAGS[np.dtype(dtype)]))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    body = b"".join(parts)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_tensors(path) -> tuple[bytes, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 44 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupt")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    digest = body[8:40]
    (count,) = struct.unpack_from("<I", body, 40)
    pos = 44
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", body, pos)
            dims = struct.unpack_from(f"<{rank}I", body, pos + 4)
            pos += 4 + 4 * rank
            dtype = TAG_DTYPES[body[pos]]
            pos += 1
            size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + size > len(body):
                raise CheckpointError(f"{path}: tensor {name!r} runs past the end of the file")
            tensors[name] = np.frombuffer(body, dtype, int(np.prod(dims, dtype=np.int64)), pos).reshape(dims).copy()
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed tensor table: {exc}") from exc
    if pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - pos} trailing bytes")
    return digest, tensors


@dataclass
class Checkpoint:
    model: str
    weights: WeightSet
    adam: Optional[dict[str, AdamState]] = None
    epoch: int = 0
    best_val_loss: float = float("inf")
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)


def save_checkpoint(path, spec: ModelSpec, ckpt: Checkpoint) -> None:
    tensors: dict[str, np.ndarray] = {}
    for key, value in ckpt.weights.params.items():
        tensors[f"param/{key}"] = value
    for layer, state in ckpt.weights.bn.items():
        if state.affine:
            tensors[f"bn/{layer}/gamma"] = state.gamma
            tensors[f"bn/{layer}/beta"] = state.beta
        tensors[f"bn/{layer}/moving_mean"] = state.moving_mean
        tensors[f"bn/{layer}/moving_var"] = state.moving_var
        tensors[f"bn/{layer}/hyper"] = np.array([state.momentum, state.epsilon], dtype=np.float64)
    for key, st in (ckpt.adam or {}).items():
        tensors[f"adam/{key}/m"] = st.m
        tensors[f"adam/{key}/v"] = st.v
        tensors[f"adam/{key}/hyper"] = np.array([st.step, st.beta1, st.beta2, st.epsilon, st.learning_rate],
                                                dtype=np.float64)
    meta = {"model": ckpt.model, "seed": ckpt.weights.seed, "epoch": ckpt.epoch,
            "best_val_loss": ckpt.best_val_loss, "config": ckpt.config, "history": ckpt.history}
    tensors["meta/json"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    write_tensors(path, spec.digest(), tensors)


def load_checkpoint(path, spec: Optional[ModelSpec] = None) -> tuple[ModelSpec, Checkpoint]:
    """Read a checkpoint; ``spec`` defaults to the builder named in the file."""
    digest, tensors = read_tensors(path)
    if "meta/json" not in tensors:
        raise CheckpointError(f"{path}: missing meta/json")
    meta = json.loads(tensors.pop("meta/json").tobytes().decode("utf-8"))
    if spec is None:
        spec = build(meta["model"])
    if spec.digest() != digest:
        raise CheckpointError(f"{path}: model hash mismatch; checkpoint was not written for {spec.name}")
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    expected = spec.param_shapes()
    for key, shape in expected.items():
        if key not in params or params[key].shape != tuple(shape):
            raise CheckpointError(f"{path}: parameter {key} missing or misshapen")
    bn = {}
    for layer in spec.layers:
        if layer.kind != "batchnorm":
            continue
        pre = f"bn/{layer.name}/"
        momentum, epsilon = tensors[pre + "hyper"]
        bn[layer.name] = BatchNormState(layer.channels, layer.bn_affine, float(momentum), float(epsilon),
                                        tensors.get(pre + "gamma"), tensors.get(pre + "beta"),
                                        tensors[pre + "moving_mean"], tensors[pre + "moving_var"])
    adam = {}
    for key in sorted(k[len("adam/"):-len("/hyper")] for k in tensors if k.startswith("adam/") and k.endswith("/hyper")):
        step, b1, b2, eps, lr = tensors[f"adam/{key}/hyper"]
        adam[key] = AdamState(tensors[f"adam/{key}/m"], tensors[f"adam/{key}/v"], int(step), float(b1), float(b2),
                              float(eps), float(lr))
    weights = WeightSet(params, bn, int(meta.get("seed", 0)))
    return spec, Checkpoint(meta["model"], weights, adam or None, int(meta["epoch"]), float(meta["best_val_loss"]),
                            meta.get("config", {}), meta.get("history", []))
