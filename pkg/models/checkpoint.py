"""
Checkpoint file layout (all integers little-endian u32):

    b"D3NT" | version | len(config) | config text (utf-8)
    then per tensor, until end of file:
    len(name) | name (utf-8) | rank | extents... | float64 data ('<f8', row-major)
"""
import struct
from pathlib import Path

import numpy as np

from models.errors import CheckpointError

MAGIC = b"D3NT"
VERSION = 1
_U32 = struct.Struct("<I")


def encode_checkpoint(config_text, tensors):
    parts = [MAGIC, _U32.pack(VERSION)]
    config = config_text.encode("utf-8")
    parts += [_U32.pack(len(config)), config]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"refusing to save non-finite tensor {name}")
        key = name.encode("utf-8")
        parts += [_U32.pack(len(key)), key, _U32.pack(arr.ndim)]
        parts += [_U32.pack(n) for n in arr.shape]
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]

    @property
    def done(self):
        return self.pos >= len(self.raw)


def decode_checkpoint(raw):
    """ Returns (config_text, {name: ndarray}) in file order """
    reader = _Reader(raw)
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version = reader.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_text = reader.take(reader.u32("config length"), "config").decode("utf-8")

    tensors = {}
    while not reader.done:
        name = reader.take(reader.u32("name length"), "tensor name").decode("utf-8")
        rank = reader.u32(f"rank of {name}")
        shape = tuple(reader.u32(f"extent of {name}") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        data = reader.take(8 * count, f"data of {name}")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name}")
        tensors[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
    return config_text, tensors


def save_checkpoint(path, config_text, tensors):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(config_text, tensors))
    tmp.replace(path)


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
