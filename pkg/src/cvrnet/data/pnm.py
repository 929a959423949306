"""Binary 8-bit Netpbm (P5 grayscale / P6 colour) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


_WHITESPACE = b" \t\n\r\x0b\x0c"


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments.

    Returns the tokens and the offset of the first payload byte (just past
    the single whitespace byte that ends the header).
    """
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and data[pos] in _WHITESPACE:
            pos += 1
        if pos < n and data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and data[pos] not in _WHITESPACE and data[pos] != ord("#"):
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed header: unexpected end of file")
        tokens.append(data[start:pos])
    if pos >= n or data[pos] not in _WHITESPACE:
        raise ImageFormatError("malformed header: missing whitespace before payload")
    return tokens, pos + 1


def decode_pnm(data: bytes) -> np.ndarray:
    """Decode P5/P6 bytes to float32 H x W x C (C = 1 or 3), scaled to [0, 1] by maxval."""
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {data[:2]!r}; expected P5 or P6")
    tokens, offset = _header_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"malformed header fields {tokens[1:]!r}") from None
    if width < 1 or height < 1:
        raise ImageFormatError(f"invalid image size {width}x{height}")
    if not 1 <= maxval <= 255:
        raise ImageFormatError(f"unsupported maxval {maxval}; only 8-bit images are accepted")
    channels = 1 if tokens[0] == b"P5" else 3
    need = width * height * channels
    payload = data[offset : offset + need]
    if len(payload) < need:
        raise ImageFormatError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    if pixels.max(initial=0) > maxval:
        raise ImageFormatError(f"sample value exceeds maxval {maxval}")
    return pixels.astype(np.float32) / np.float32(maxval)


def read_pnm(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def encode_pnm(pixels: np.ndarray, maxval: int = 255, comment: str | None = None) -> bytes:
    """Encode a uint8 H x W (x 1) or H x W x 3 array as P5 / P6."""
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected H x W, H x W x 1 or H x W x 3, got {arr.shape}")
    magic = b"P5" if arr.shape[2] == 1 else b"P6"
    h, w, _ = arr.shape
    head = magic + b"\n"
    if comment:
        head += b"# " + comment.encode("ascii") + b"\n"
    head += f"{w} {h}\n{maxval}\n".encode("ascii")
    return head + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def write_pnm(path, pixels: np.ndarray, maxval: int = 255) -> None:
    Path(path).write_bytes(encode_pnm(pixels, maxval))


def nearest_indices(src_extent: int, dst_extent: int) -> np.ndarray:
    """``floor((dst + 0.5) * src / dst)`` in exact integer arithmetic."""
    dst = np.arange(dst_extent, dtype=np.int64)
    return ((2 * dst + 1) * src_extent) // (2 * dst_extent)


def resize_nearest(img: np.ndarray, height: int, width: int) -> np.ndarray:
    rows = nearest_indices(img.shape[0], height)
    cols = nearest_indices(img.shape[1], width)
    return img[rows[:, None], cols[None, :]]
