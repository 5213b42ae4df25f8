"""Binary snapshot container for models, model updates and raw tensors.

Layout (all integers little-endian)::

    magic      4 bytes   b"FIDM" (model) or b"FIDU" (update / tensor dump)
    version    u8        currently 1
    header     u32 length + UTF-8 JSON: input shape, seed, layer-spec table, metadata
    count      u32       number of tensor blobs
    blob*      u32 layer index, u16 name length, name, u8 rank, u32 dims[rank],
               float64 data in row-major order

Model snapshots hold parameters and buffers (``buffer:`` name prefix), in layer
order. Update files hold one delta per parameter.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .model import Model, specs_from_dicts

MODEL_MAGIC = b"FIDM"
UPDATE_MAGIC = b"FIDU"
VERSION = 1
_BUFFER = "buffer:"


class ContainerError(ValueError):
    pass


def write_container(path_or_file, magic: bytes, header: dict, blobs):
    """Write ``(layer index, name, array)`` blobs after a JSON header."""
    blobs = list(blobs)
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<B", VERSION))
    raw = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", len(blobs)))
    for index, name, array in blobs:
        array = np.ascontiguousarray(array, dtype="<f8")
        encoded = name.encode()
        buf.write(struct.pack("<IH", index, len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", array.ndim))
        buf.write(struct.pack(f"<{array.ndim}I", *array.shape))
        buf.write(array.tobytes())
    data = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        path = Path(path_or_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    return data


def read_container(path_or_bytes, expect_magic: bytes | None = None):
    data = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else Path(path_or_bytes).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError("truncated container")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    magic = bytes(take(4))
    if magic not in (MODEL_MAGIC, UPDATE_MAGIC):
        raise ContainerError(f"bad magic {magic!r}")
    if expect_magic is not None and magic != expect_magic:
        raise ContainerError(f"expected magic {expect_magic!r}, got {magic!r}")
    (version,) = struct.unpack("<B", take(1))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(bytes(take(hlen)).decode())
    (count,) = struct.unpack("<I", take(4))
    blobs = []
    for _ in range(count):
        index, nlen = struct.unpack("<IH", take(6))
        name = bytes(take(nlen)).decode()
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        array = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        blobs.append((index, name, array))
    if pos != len(view):
        raise ContainerError("trailing bytes after last blob")
    return magic, header, blobs


def _model_header(model: Model, meta=None) -> dict:
    return {
        "input_shape": list(model.input_shape),
        "seed": model.seed,
        "layers": [spec.to_dict() for spec in model.specs],
        "meta": meta or {},
    }


def save_model(model: Model, path, meta=None):
    blobs = []
    for i, layer in enumerate(model.layers):
        blobs += [(i, name, v) for name, v in layer.params.items()]
        blobs += [(i, _BUFFER + name, v) for name, v in layer.buffers.items()]
    return write_container(path, MODEL_MAGIC, _model_header(model, meta), blobs)


def load_model(path, with_meta=False):
    """The stored model, or ``(model, meta)`` when ``with_meta`` is set."""
    _, header, blobs = read_container(path, MODEL_MAGIC)
    model = Model(specs_from_dicts(header["layers"]), header["input_shape"], header["seed"])
    for index, name, array in blobs:
        layer = model.layers[index]
        if name.startswith(_BUFFER):
            layer.buffers[name[len(_BUFFER):]] = array
        else:
            if layer.params[name].shape != array.shape:
                raise ContainerError(f"layer {index} {name}: stored shape {array.shape}")
            layer.params[name] = array
    return (model, header.get("meta", {})) if with_meta else model


def save_tensors(path, tensors: dict, meta=None):
    """Dump named tensors (e.g. partial reconstructions) into a FIDU container."""
    blobs = [(i, name, np.asarray(v)) for i, (name, v) in enumerate(tensors.items())]
    return write_container(path, UPDATE_MAGIC, {"kind": "tensors", "meta": meta or {}}, blobs)


def load_tensors(path) -> tuple[dict, dict]:
    _, header, blobs = read_container(path, UPDATE_MAGIC)
    return {name: a for _, name, a in blobs}, header.get("meta", {})
