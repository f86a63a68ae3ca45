"""Binary checkpoint container.

Layout (little endian)::

    b"LDGCKPT1"
    u32 config length, UTF-8 JSON ModelConfig
    u32 entry count
    per entry: u16 name length, name, u8 ndim, u64 dims..., f64 data

Weights come first in ``param_shapes`` order, then BN running statistics
under a ``buffer/`` prefix.
"""

import io
import json
import struct

import numpy as np

from ..errors import FormatError
from .model import ModelConfig, ModelParams

MAGIC = b"LDGCKPT1"
BUFFER_PREFIX = "buffer/"


def checkpoint_entries(params: ModelParams):
    for name, arr in params.weights.items():
        yield name, arr
    for name in sorted(params.buffers):
        yield BUFFER_PREFIX + name, params.buffers[name]


def dumps(params: ModelParams, cfg: ModelConfig) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    conf = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    out.write(struct.pack("<I", len(conf)))
    out.write(conf)
    entries = list(checkpoint_entries(params))
    out.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode()
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return out.getvalue()


def loads(buf: bytes):
    if buf[:8] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", offset=0)
    pos = 8
    try:
        (clen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        cfg = ModelConfig.from_dict(json.loads(buf[pos : pos + clen].decode()))
        pos += clen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        weights, buffers = {}, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(buf):
                raise FormatError("truncated checkpoint", offset=pos)
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
            if name.startswith(BUFFER_PREFIX):
                buffers[name[len(BUFFER_PREFIX) :]] = arr
            else:
                weights[name] = arr
    except struct.error:
        raise FormatError("truncated checkpoint", offset=pos) from None
    return ModelParams(weights, buffers), cfg


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig) -> None:
    with open(path, "wb") as f:
        f.write(dumps(params, cfg))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return loads(f.read())
