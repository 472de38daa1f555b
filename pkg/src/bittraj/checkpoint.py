"""Binary checkpoint format shared by trained models and packed exports.

Layout (little-endian)::

    magic      8 bytes  b"BTRJCKPT"
    version    u32      1
    kind       u32      0 = model, 1 = packed export
    hdr_len    u32      length of the JSON header
    header     hdr_len bytes of UTF-8 JSON
    n_tensors  u32
    per tensor:
        name_len u16, name (UTF-8)
        dtype    u8   0 = float32, 1 = uint8
        encoding u8   0 = dense, 1 = two_bit, 2 = base243
        scale    f64  dequantization scale (1.0 for dense)
        ndim     u8, shape u32 * ndim (logical shape)
        nbytes   u64, payload
    crc32      u32 over everything before it
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .bitlinear import BitLinear, QuantMode
from .deploy.export import DeployModel, PackedLinear
from .deploy.packing import PackedTernaryMatrix, payload_width
from .model import ModelConfig, Seq2SeqModel, build_model

MAGIC = b"BTRJCKPT"
VERSION = 1
KIND_MODEL, KIND_EXPORT = 0, 1
DTYPES = {0: np.float32, 1: np.uint8}
ENCODING_TAGS = {"dense": 0, "two_bit": 1, "base243": 2}
TAG_ENCODINGS = {v: k for k, v in ENCODING_TAGS.items()}


class CheckpointError(ValueError):
    pass


class ShapeMismatch(CheckpointError):
    pass


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def write_checkpoint(path, kind: int, header: dict, tensors: list[tuple]) -> None:
    """``tensors`` holds ``(name, array, encoding, scale, logical_shape)`` tuples."""
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<III", VERSION, kind, len(hdr)) + hdr
    out += struct.pack("<I", len(tensors))
    for name, arr, encoding, scale, shape in tensors:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr)
        dtype = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}[arr.dtype]
        payload = arr.tobytes()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BBdB", dtype, ENCODING_TAGS[encoding], float(scale), len(shape))
        out += struct.pack(f"<{len(shape)}I", *shape)
        out += struct.pack("<Q", len(payload)) + payload
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    Path(path).write_bytes(bytes(out))


def read_checkpoint(path) -> tuple[int, dict, dict[str, tuple]]:
    """Return ``(kind, header, {name: (array, encoding, scale, logical_shape)})``."""
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC) + 16 or buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    r = _Reader(buf[:-4])
    r.take(8)
    version, kind, hlen = r.unpack("III")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(r.take(hlen).decode("utf-8"))
    (n,) = r.unpack("I")
    tensors = {}
    for _ in range(n):
        (nlen,) = r.unpack("H")
        name = r.take(nlen).decode("utf-8")
        dtype, enc, scale, ndim = r.unpack("BBdB")
        shape = r.unpack(f"{ndim}I")
        (nbytes,) = r.unpack("Q")
        if dtype not in DTYPES or enc not in TAG_ENCODINGS:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype/encoding")
        arr = np.frombuffer(r.take(nbytes), dtype=DTYPES[dtype]).copy()
        encoding = TAG_ENCODINGS[enc]
        if encoding == "dense":
            if arr.size != int(np.prod(shape)):
                raise CheckpointError(f"{path}: tensor {name!r} payload does not match shape {shape}")
            arr = arr.reshape(shape)
        else:
            rows, cols = shape
            arr = arr.reshape(rows, payload_width(cols, encoding))
        tensors[name] = (arr, encoding, scale, tuple(shape))
    return kind, header, tensors


def _layer_kwargs(model: Seq2SeqModel) -> dict:
    for _, m in model.named_modules():
        if isinstance(m, BitLinear):
            return {"eps": m.eps, "bias_policy": m.bias_policy.value, "ste": m.ste.value, "ln_eps": m.ln_eps}
    return {}


def save_model(model: Seq2SeqModel, path, extra: dict | None = None) -> None:
    header = {"config": model.config.to_dict(), "mode": QuantMode.parse(model.mode).value,
              "layer": _layer_kwargs(model), "extra": extra or {}}
    tensors = [(n, p.data.astype(np.float32), "dense", 1.0, p.data.shape) for n, p in model.named_parameters()]
    write_checkpoint(path, KIND_MODEL, header, tensors)


def _assign(model: Seq2SeqModel, tensors: dict, path) -> None:
    params = dict(model.named_parameters())
    missing = set(params) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:3]}")
    for name, p in params.items():
        arr = tensors[name][0]
        if arr.shape != p.data.shape:
            raise ShapeMismatch(f"{path}: tensor {name!r} has shape {arr.shape}, model expects {p.data.shape}")
        p.data[...] = arr


def load_model(path, expect_config: ModelConfig | None = None) -> tuple[Seq2SeqModel, dict]:
    kind, header, tensors = read_checkpoint(path)
    if kind != KIND_MODEL:
        raise CheckpointError(f"{path}: expected a model checkpoint, found kind {kind}")
    cfg = ModelConfig(**header["config"])
    if expect_config is not None and expect_config != cfg:
        raise ShapeMismatch(f"{path}: checkpoint config {cfg} differs from requested {expect_config}")
    model = build_model(cfg, header["mode"], **header.get("layer", {}))
    _assign(model, tensors, path)
    return model, header


def save_export(deploy: DeployModel, path, extra: dict | None = None) -> None:
    model = deploy.model
    packed = {}
    tensors = []
    for mname, mod in model.named_modules():
        if isinstance(mod, PackedLinear):
            p = mod.packed
            packed[mname] = {"quantize_input": mod.quantize_input, "bias_policy": mod.bias_policy.value,
                             "eps": mod.eps, "ln_eps": mod.ln_eps, "bias": mod.bias_arr is not None}
            tensors.append((f"{mname}.weight", p.payload, p.encoding, p.scale, (p.rows, p.cols)))
            if mod.bias_arr is not None:
                tensors.append((f"{mname}.bias", mod.bias_arr, "dense", 1.0, mod.bias_arr.shape))
    tensors += [(n, p.data.astype(np.float32), "dense", 1.0, p.data.shape) for n, p in model.named_parameters()]
    header = {"config": model.config.to_dict(), "mode": deploy.mode.value, "encoding": deploy.encoding,
              "layer": _layer_kwargs(model), "packed": packed, "extra": extra or {}}
    write_checkpoint(path, KIND_EXPORT, header, tensors)


def _set_path(root, dotted: str, value) -> None:
    *parents, last = dotted.split(".")
    obj = root
    for part in parents:
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    setattr(obj, last, value)


def load_export(path) -> tuple[DeployModel, dict]:
    kind, header, tensors = read_checkpoint(path)
    if kind != KIND_EXPORT:
        raise CheckpointError(f"{path}: expected a packed export, found kind {kind}")
    cfg = ModelConfig(**header["config"])
    model = build_model(cfg, header["mode"], **header.get("layer", {}))
    for mname, meta in header["packed"].items():
        payload, encoding, scale, (rows, cols) = tensors[f"{mname}.weight"]
        bias = tensors[f"{mname}.bias"][0] if meta["bias"] else None
        layer = PackedLinear(PackedTernaryMatrix(rows, cols, encoding, payload, scale), bias,
                             meta["bias_policy"], meta["quantize_input"], meta["eps"], meta["ln_eps"])
        _set_path(model, mname, layer)
    _assign(model, tensors, path)
    for p in model.parameters():
        p.requires_grad = False
    return DeployModel(model, QuantMode.parse(header["mode"]), header["encoding"]), header
