"""
Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only.
Pixels map to [0,1] by /255; images are [C,H,W] with C = 1 or 3.
"""
from pathlib import Path

import numpy as np

from models.errors import ImageFormatError, ShapeError
from models.tensor import Tensor

_CHANNELS = {b"P5": 1, b"P6": 3}
_WHITESPACE = b" \t\n\r\x0b\x0c"


def _next_token(raw, pos):
    """ Skip whitespace and '#' comments, return (token, start, end) """
    while pos < len(raw):
        if raw[pos:pos + 1] in (b"#",):
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif raw[pos] in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < len(raw) and raw[pos] not in _WHITESPACE and raw[pos:pos + 1] != b"#":
        pos += 1
    return raw[start:pos], start, pos


def _header_int(raw, pos, field):
    token, start, end = _next_token(raw, pos)
    if not token:
        raise ImageFormatError(f"missing {field}", start)
    if not token.isdigit():
        raise ImageFormatError(f"{field} is not a decimal integer: {token[:16]!r}", start)
    return int(token), start, end


def decode_image(raw):
    """ PGM/PPM bytes -> float64 array [C,H,W] in [0,1] """
    magic = raw[:2]
    if magic not in _CHANNELS:
        raise ImageFormatError(f"expected magic P5 or P6, got {magic!r}", 0)
    channels = _CHANNELS[magic]
    width, start, pos = _header_int(raw, 2, "width")
    if width < 1:
        raise ImageFormatError("width must be positive", start)
    height, start, pos = _header_int(raw, pos, "height")
    if height < 1:
        raise ImageFormatError("height must be positive", start)
    maxval, start, pos = _header_int(raw, pos, "maxval")
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}", start)
    if pos >= len(raw) or raw[pos] not in _WHITESPACE:
        raise ImageFormatError("expected one whitespace byte after maxval", pos)
    pos += 1

    expected = width * height * channels
    data = raw[pos:pos + expected]
    if len(data) < expected:
        raise ImageFormatError(f"pixel data truncated: {len(data)} of {expected} bytes", pos + len(data))
    pixels = np.frombuffer(data, dtype=np.uint8).reshape(height, width, channels)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def encode_image(image):
    """ [1,H,W] -> P5 bytes, [3,H,W] -> P6 bytes, values rounded from [0,1] to 8 bits """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ShapeError(f"write_image expects [1,H,W] or [3,H,W], got {arr.shape}")
    c, h, w = arr.shape
    magic = b"P5" if c == 1 else b"P6"
    pixels = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    return header + pixels.transpose(1, 2, 0).tobytes()


def read_image(path):
    return Tensor(decode_image(Path(path).read_bytes()))


def write_image(path, image):
    Path(path).write_bytes(encode_image(image))


def read_rgb(path):
    """ Read as [3,H,W], repeating grayscale across channels """
    arr = decode_image(Path(path).read_bytes())
    return np.repeat(arr, 3, axis=0) if arr.shape[0] == 1 else arr
