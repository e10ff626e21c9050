"""Grayscale image files: 8-bit PGM (P5) and PNG, plus an exact float64 dump.

8-bit values map to [0, 1] by v / 255; writing rounds half to even.
The raw dump is two little-endian uint64 (width, height) followed by the
row-major float64 intensities, little-endian.
"""

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import autodiff as ad


class ImageFormatError(ValueError):
    pass


def as_array(image):
    """H x W float64 intensities of an Image, Var or array."""
    return np.asarray(ad.value_of(getattr(image, "pixels", image)), dtype=np.float64)


def quantize(pixels):
    return np.rint(np.clip(as_array(pixels), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, pixels):
    q = quantize(pixels)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(q.tobytes())


def _header_fields(data, count):
    """First ``count`` whitespace-separated header fields and the offset after them.

    ``#`` starts a comment that runs to the end of the line.
    """
    fields, i = [], 0
    while len(fields) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise ImageFormatError("truncated PGM header")
        fields.append(data[start:i])
    return fields, i


def read_pgm(path):
    data = Path(path).read_bytes()
    (magic, *dims), end = _header_fields(data, 4)
    if magic != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = (int(x) for x in dims)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit PGM (maxval 255) is supported")
    body = data[end + 1 : end + 1 + w * h]  # one whitespace byte ends the header
    if len(body) != w * h:
        raise ImageFormatError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w) / 255.0


def write_png(path, pixels):
    PILImage.fromarray(quantize(pixels), mode="L").save(path)


def read_png(path):
    with PILImage.open(path) as im:
        if im.mode not in ("L", "1", "P", "LA", "I;16"):
            raise ImageFormatError(f"{path}: expected a grayscale PNG, got mode {im.mode}")
        if im.mode == "I;16":
            return np.asarray(im, dtype=np.float64) / 65535.0
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_raw(path, pixels):
    a = as_array(pixels)
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(np.array([w, h], dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_raw(path):
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ImageFormatError(f"{path}: raw dump shorter than its header")
    w, h = np.frombuffer(data[:16], dtype="<u8")
    body = np.frombuffer(data[16:], dtype="<f8")
    if body.size != w * h:
        raise ImageFormatError(f"{path}: expected {w * h} values, found {body.size}")
    return body.reshape(int(h), int(w)).astype(np.float64)


_WRITERS = {".pgm": write_pgm, ".png": write_png, ".raw": write_raw}
_READERS = {".pgm": read_pgm, ".png": read_png, ".raw": read_raw}


def write_image(path, pixels):
    """Write by extension: .pgm, .png or .raw."""
    suffix = Path(path).suffix.lower()
    if suffix not in _WRITERS:
        raise ImageFormatError(f"{path}: unsupported image extension {suffix!r}")
    _WRITERS[suffix](path, pixels)


def read_image(path):
    suffix = Path(path).suffix.lower()
    if suffix not in _READERS:
        raise ImageFormatError(f"{path}: unsupported image extension {suffix!r}")
    return _READERS[suffix](path)
