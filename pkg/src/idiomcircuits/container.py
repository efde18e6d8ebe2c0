"""Tensor container and vocabulary file I/O.

Container layout::

    u64 little-endian   header length N
    N bytes             UTF-8 JSON header
    ...                 raw little-endian float32 data

The header maps tensor names to ``{"dtype": "f32", "shape": [...], "offset": o,
"length": n}`` with offsets relative to the start of the data section, plus a
``"__metadata__"`` entry holding ``{"format": ..., "config": {...}}``. Tensor
names follow ``embed.W_E``, ``pos.W_pos``, ``blocks.{l}.ln1.w``,
``blocks.{l}.attn.W_{Q,K,V,O}``, ``blocks.{l}.ln2.w``,
``blocks.{l}.mlp.{W_in,b_in,W_out,b_out}``, ``ln_final.w``, ``unembed.W_U``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, HeaderError, NonFiniteError, ShapeError
from .model import ModelConfig, Vocab, Weights, expected_tensor_shapes

FORMAT = "idiomcircuits-tensors/1"
_LE_F32 = np.dtype("<f4")


def save_model(path, weights: Weights) -> None:
    tensors = weights.to_tensors()
    header = {"__metadata__": {"format": FORMAT, "config": weights.config.to_dict()}}
    blobs, offset = [], 0
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype=_LE_F32).tobytes()
        header[name] = {"dtype": "f32", "shape": list(tensors[name].shape), "offset": offset, "length": len(data)}
        blobs.append(data)
        offset += len(data)
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def read_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a container into (metadata, name -> float32 array) without model validation."""
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise HeaderError(f"{path}: file too short for header length prefix")
    (n,) = struct.unpack("<Q", blob[:8])
    if n > len(blob) - 8:
        raise HeaderError(f"{path}: header length {n} exceeds file size")
    try:
        header = json.loads(blob[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{path}: header is not valid UTF-8 JSON ({exc})") from None
    if not isinstance(header, dict):
        raise HeaderError(f"{path}: header must be a JSON object")
    meta = header.pop("__metadata__", None)
    if not isinstance(meta, dict) or "config" not in meta:
        raise HeaderError(f"{path}: header lacks __metadata__.config")
    data = blob[8 + n:]
    tensors = {}
    for name, entry in header.items():
        try:
            dtype, shape, off, length = entry["dtype"], entry["shape"], entry["offset"], entry["length"]
        except (TypeError, KeyError):
            raise HeaderError(f"{path}: malformed entry for tensor {name!r}") from None
        if dtype != "f32":
            raise HeaderError(f"{path}: tensor {name!r} has unsupported dtype {dtype!r}")
        if not (isinstance(shape, list) and all(isinstance(s, int) and s >= 0 for s in shape)):
            raise HeaderError(f"{path}: tensor {name!r} has malformed shape {shape!r}")
        count = int(np.prod(shape, dtype=np.int64))
        if length != 4 * count:
            raise HeaderError(f"{path}: tensor {name!r} byte length {length} does not match shape {shape}")
        if not (isinstance(off, int) and 0 <= off and off + length <= len(data)):
            raise HeaderError(f"{path}: tensor {name!r} data range is outside the file")
        arr = np.frombuffer(data, dtype=_LE_F32, count=count, offset=off).reshape(shape)
        tensors[name] = arr.astype(np.float32)
    return meta, tensors


def load_model(path) -> tuple[ModelConfig, Weights]:
    meta, tensors = read_tensors(path)
    try:
        config = ModelConfig.from_dict(meta["config"])
    except ConfigError as exc:
        raise HeaderError(f"{path}: invalid config in header ({exc})") from None
    expected = expected_tensor_shapes(config)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise ShapeError(f"{path}: missing tensors: {', '.join(missing)}")
    for name, arr in tensors.items():
        if name in expected and arr.shape != tuple(expected[name]):
            raise ShapeError(f"{path}: {name} has shape {arr.shape}, config requires {tuple(expected[name])}")
    for name in sorted(tensors):
        if not np.all(np.isfinite(tensors[name])):
            raise NonFiniteError(f"{path}: tensor {name} contains non-finite values")
    return config, Weights.from_tensors(config, tensors)


def read_vocab(path) -> Vocab:
    """Read ``id<TAB>token`` lines. Ids must cover 0..n-1 exactly once."""
    entries = {}
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            sid, sep, token = line.partition("\t")
            if not sep or not sid.strip().isdigit():
                raise ConfigError(f"{path}:{lineno}: expected 'id<TAB>token'")
            tid = int(sid)
            if tid in entries:
                raise ConfigError(f"{path}:{lineno}: duplicate id {tid}")
            entries[tid] = token
    if sorted(entries) != list(range(len(entries))):
        raise ConfigError(f"{path}: ids must be contiguous from 0")
    return Vocab(entries[i] for i in range(len(entries)))


def write_vocab(path, vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, tok in enumerate(vocab.tokens):
            fh.write(f"{i}\t{tok}\n")
