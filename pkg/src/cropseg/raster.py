"""Dense 2-D rasters, multi-channel feature maps, and bit-exact grayscale I/O.

Supported on-disk formats: PGM (P2 ASCII / P5 binary, 8- or 16-bit),
PFM (grayscale float, scale sign encodes endianness, rows bottom-up),
and single-channel 8/16-bit PNG. Integer kinds round-trip bit-exactly;
PFM stores IEEE float32 payloads.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

KIND_DTYPES = {
    "byte8": np.dtype(np.uint8),
    "uint16": np.dtype(np.uint16),
    "float64": np.dtype(np.float64),
}
_DTYPE_KINDS = {v: k for k, v in KIND_DTYPES.items()}


class RasterIOError(ValueError):
    """Unreadable, unsupported, or truncated image file."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        parts = [message]
        if path is not None:
            loc = str(path)
            if offset is not None:
                loc += f" (byte {offset})"
            parts.append(f"[{loc}]")
        super().__init__(" ".join(parts))
        self.path = path
        self.offset = offset


@dataclass(frozen=True)
class Raster2D:
    """Single-channel image grid, row-major, top-left origin.

    ``kind`` is one of byte8 / uint16 / float64; float64 rasters must be
    finite everywhere.
    """

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"raster must be a non-empty 2-D grid, got shape {a.shape}")
        if a.dtype not in _DTYPE_KINDS:
            raise ValueError(f"unsupported raster dtype {a.dtype}")
        if a.dtype == np.float64 and not np.isfinite(a).all():
            raise ValueError("float64 raster contains non-finite values")
        object.__setattr__(self, "data", a)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def kind(self) -> str:
        return _DTYPE_KINDS[self.data.dtype]

    def astype_float(self) -> "Raster2D":
        if self.kind == "float64":
            return self
        return Raster2D(self.data.astype(np.float64))

    def __eq__(self, other):
        if not isinstance(other, Raster2D):
            return NotImplemented
        return self.data.dtype == other.data.dtype and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class FeatureMap:
    """C x H x W float64 tensor, all values finite."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 3 or min(a.shape) < 1:
            raise ValueError(f"feature map must be C x H x W, got shape {a.shape}")
        if not np.isfinite(a).all():
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "data", a)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def load_gray(path) -> Raster2D:
    """Load a single-channel image (PGM, PFM, or PNG) as a Raster2D.

    Bit depth maps onto kinds: 8-bit -> byte8, 16-bit -> uint16,
    PFM -> float64. PFM's bottom-up row order is flipped to top-down.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise RasterIOError(f"cannot read file: {e}", path=path) from e
    if len(blob) < 2:
        raise RasterIOError("file too short to identify format", path=path, offset=0)
    if blob.startswith(_PNG_MAGIC):
        return _load_png(blob, path)
    magic = blob[:2]
    if magic in (b"P2", b"P5"):
        return _load_pgm(blob, path)
    if magic in (b"Pf", b"PF"):
        return _load_pfm(blob, path)
    raise RasterIOError(f"unsupported format (magic {magic!r})", path=path, offset=0)


def save_gray(r: Raster2D, path, format: str) -> None:
    """Write a raster so that load_gray reads it back exactly.

    format: "pgm" (P5 binary), "pgm_ascii" (P2), "pfm", or "png".
    float64 rasters can only be written as PFM.
    """
    path = Path(path)
    if format == "pfm":
        if r.kind != "float64":
            raise RasterIOError(f"PFM requires float64 raster, got {r.kind}", path=path)
        _save_pfm(r, path)
    elif format in ("pgm", "pgm_ascii"):
        if r.kind == "float64":
            raise RasterIOError("float64 rasters must be saved as PFM", path=path)
        _save_pgm(r, path, ascii_=(format == "pgm_ascii"))
    elif format == "png":
        if r.kind == "float64":
            raise RasterIOError("float64 rasters must be saved as PFM", path=path)
        _save_png(r, path)
    else:
        raise RasterIOError(f"unknown format {format!r}", path=path)


def load_rgb(path) -> np.ndarray:
    """Load an RGB image as an H x W x 3 uint8 array (pass-through, no color management)."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise RasterIOError(f"cannot read RGB image: {e}", path=path) from e


def _load_png(blob: bytes, path) -> Raster2D:
    import io

    try:
        im = Image.open(io.BytesIO(blob))
        im.load()
    except OSError as e:
        raise RasterIOError(f"corrupt PNG: {e}", path=path, offset=0) from e
    if im.mode == "L":
        return Raster2D(np.asarray(im, dtype=np.uint8))
    if im.mode in ("I;16", "I;16B", "I"):
        a = np.asarray(im)
        if a.dtype != np.uint16:
            if a.min() < 0 or a.max() > 0xFFFF:
                raise RasterIOError("PNG sample values exceed 16 bits", path=path)
            a = a.astype(np.uint16)
        return Raster2D(a)
    raise RasterIOError(f"unsupported PNG mode {im.mode!r} (need single channel)", path=path)


def _save_png(r: Raster2D, path) -> None:
    if r.kind == "byte8":
        im = Image.fromarray(r.data, mode="L")
    else:
        im = Image.new("I;16", (r.data.shape[1], r.data.shape[0]))
        im.frombytes(r.data.astype("<u2").tobytes())
    im.save(path, format="PNG")


def _pgm_tokens(blob: bytes, path, n: int, start: int = 2):
    """Yield n whitespace-separated header tokens after `start`, skipping # comments."""
    tokens = []
    i = start
    while len(tokens) < n:
        while i < len(blob) and blob[i : i + 1].isspace():
            i += 1
        if i >= len(blob):
            raise RasterIOError("truncated header", path=path, offset=i)
        if blob[i : i + 1] == b"#":
            while i < len(blob) and blob[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(blob) and not blob[j : j + 1].isspace():
            j += 1
        tokens.append(blob[i:j])
        i = j
    return tokens, i


def _load_pgm(blob: bytes, path) -> Raster2D:
    magic = blob[:2]
    try:
        (w_tok, h_tok, max_tok), pos = _pgm_tokens(blob, path, 3)
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except ValueError as e:
        raise RasterIOError(f"malformed PGM header: {e}", path=path, offset=2) from e
    if width < 1 or height < 1 or not (0 < maxval < 65536):
        raise RasterIOError(f"invalid PGM dimensions {width}x{height} maxval {maxval}", path=path)
    dtype = np.uint8 if maxval < 256 else np.uint16
    n = width * height
    if magic == b"P2":
        try:
            vals = np.array(blob[pos:].split(), dtype=np.int64)
        except ValueError as e:
            raise RasterIOError(f"non-numeric P2 payload: {e}", path=path, offset=pos) from e
        if vals.size < n:
            raise RasterIOError(
                f"truncated P2 payload: {vals.size} of {n} samples", path=path, offset=pos
            )
        vals = vals[:n]
        if vals.min() < 0 or vals.max() > maxval:
            raise RasterIOError("P2 sample out of range", path=path, offset=pos)
        return Raster2D(vals.astype(dtype).reshape(height, width))
    # P5: exactly one whitespace byte separates header from payload
    pos += 1
    itemsize = np.dtype(dtype).itemsize
    need = n * itemsize
    payload = blob[pos : pos + need]
    if len(payload) < need:
        raise RasterIOError(
            f"truncated P5 payload: {len(payload)} of {need} bytes",
            path=path,
            offset=pos + len(payload),
        )
    arr = np.frombuffer(payload, dtype=np.dtype(dtype).newbyteorder(">"))
    return Raster2D(arr.astype(dtype).reshape(height, width))


def _save_pgm(r: Raster2D, path, ascii_: bool) -> None:
    maxval = 255 if r.kind == "byte8" else 65535
    header = f"{'P2' if ascii_ else 'P5'}\n{r.width} {r.height}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        if ascii_:
            lines = "\n".join(" ".join(str(v) for v in row) for row in r.data.tolist())
            f.write(lines.encode("ascii"))
            f.write(b"\n")
        else:
            f.write(r.data.astype(r.data.dtype.newbyteorder(">")).tobytes())


def _load_pfm(blob: bytes, path) -> Raster2D:
    if blob[:2] == b"PF":
        raise RasterIOError("color PFM not supported (grayscale 'Pf' only)", path=path, offset=0)
    try:
        (w_tok, h_tok, s_tok), pos = _pgm_tokens(blob, path, 3)
        width, height = int(w_tok), int(h_tok)
        scale = float(s_tok)
    except ValueError as e:
        raise RasterIOError(f"malformed PFM header: {e}", path=path, offset=2) from e
    if width < 1 or height < 1 or scale == 0:
        raise RasterIOError(f"invalid PFM header {width}x{height} scale {scale}", path=path)
    pos += 1  # single whitespace byte after the scale line
    endian = "<" if scale < 0 else ">"
    need = width * height * 4
    payload = blob[pos : pos + need]
    if len(payload) < need:
        raise RasterIOError(
            f"truncated PFM payload: {len(payload)} of {need} bytes",
            path=path,
            offset=pos + len(payload),
        )
    arr = np.frombuffer(payload, dtype=np.dtype(np.float32).newbyteorder(endian))
    arr = arr.reshape(height, width)[::-1].astype(np.float64)  # rows stored bottom-up
    if not np.isfinite(arr).all():
        raise RasterIOError("PFM payload contains non-finite values", path=path, offset=pos)
    return Raster2D(arr)


def _save_pfm(r: Raster2D, path) -> None:
    data32 = r.data.astype(np.float32)
    header = f"Pf\n{r.width} {r.height}\n-1.0\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(data32[::-1].astype("<f4").tobytes())


# ---------------------------------------------------------------------------
# Pixel operations
# ---------------------------------------------------------------------------

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


def sobel_magnitude(r: Raster2D) -> Raster2D:
    """Gradient magnitude sqrt(Gx^2 + Gy^2) with 3x3 Sobel kernels.

    Borders replicate the edge pixel, so a constant image yields zero
    everywhere (including 1x1 degenerate inputs).
    """
    a = r.astype_float().data
    gx = ndimage.convolve(a, _SOBEL_X, mode="nearest")
    gy = ndimage.convolve(a, _SOBEL_Y, mode="nearest")
    return Raster2D(np.hypot(gx, gy))


def _nearest_rank(sorted_vals: np.ndarray, p: float) -> float:
    """Nearest-rank percentile on a pre-sorted 1-D array."""
    n = sorted_vals.size
    if p <= 0:
        return float(sorted_vals[0])
    idx = math.ceil(p / 100.0 * n) - 1
    return float(sorted_vals[min(max(idx, 0), n - 1)])


def normalize_percentile(r: Raster2D, p_lo: float = 1.0, p_hi: float = 99.0) -> Raster2D:
    """Clip to the [p_lo, p_hi] nearest-rank percentiles, then map to [0, 1].

    A constant (or degenerate-range) raster maps to all 0.5 so downstream
    histogramming stays well-defined.
    """
    if not (0 <= p_lo < p_hi <= 100):
        raise ValueError(f"need 0 <= p_lo < p_hi <= 100, got ({p_lo}, {p_hi})")
    a = r.astype_float().data
    if a.size == 0:
        raise ValueError("empty raster")
    flat = np.sort(a, axis=None)
    lo = _nearest_rank(flat, p_lo)
    hi = _nearest_rank(flat, p_hi)
    if hi <= lo:
        return Raster2D(np.full_like(a, 0.5))
    return Raster2D((np.clip(a, lo, hi) - lo) / (hi - lo))
