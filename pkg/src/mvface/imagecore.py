"""Grayscale image values, integral images, noise injection and mean filtering.

Intensities are float64 in [0, 1]. Coordinates follow image convention:
``x`` is the column, ``y`` is the row, and arrays are indexed ``[y, x]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class ImageError(Exception):
    """Base class for image loading failures."""


class ImageReadError(ImageError):
    """The file is missing or its bytes cannot be decoded."""


class UnsupportedFormatError(ImageError):
    """The file is not an 8-bit P5 PGM or an 8-bit PNG."""


class EmptyImageError(ImageError):
    """The image has a zero dimension."""


@dataclass(frozen=True, eq=False)
class GrayImage:
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"GrayImage needs a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("GrayImage intensities must be finite")
        np.clip(arr, 0.0, 1.0, out=arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __hash__(self) -> int:
        return hash((self.data.shape, self.data.tobytes()))


@dataclass(frozen=True, eq=False)
class IntegralImage:
    """Inclusive prefix-sum table of a GrayImage.

    ``table[y, x]`` is the sum of intensities over rows ``0..y`` and columns
    ``0..x``. ``padded`` carries an extra leading zero row and column so that
    rectangle sums need no edge cases.
    """

    table: np.ndarray
    padded: np.ndarray

    @property
    def width(self) -> int:
        return self.table.shape[1]

    @property
    def height(self) -> int:
        return self.table.shape[0]

    def at(self, x: int, y: int) -> float:
        return float(self.table[y, x])


@dataclass(frozen=True)
class NoiseSpec:
    variance: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.variance >= 0.0:
            raise ValueError(f"noise variance must be >= 0, got {self.variance}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("noise seed must fit in 64 unsigned bits")


def _parse_pgm(raw: bytes, path: Path) -> np.ndarray:
    if not raw.startswith(b"P5"):
        raise UnsupportedFormatError(f"{path}: only binary P5 PGM is supported")
    fields: list[bytes] = []
    pos = 2
    n = len(raw)
    while len(fields) < 3:
        while pos < n and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageReadError(f"{path}: truncated PGM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise ImageReadError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: PGM maxval {maxval} (only 255 supported)")
    if width == 0 or height == 0:
        raise EmptyImageError(f"{path}: zero-dimension image {width}x{height}")
    body = raw[pos:pos + width * height]
    if len(body) != width * height:
        raise ImageReadError(f"{path}: PGM raster truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).astype(np.float64) / 255.0


def _parse_png(path: Path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode not in ("L", "RGB", "RGBA", "LA", "P"):
                raise UnsupportedFormatError(f"{path}: PNG mode {mode} is not 8-bit gray/RGB")
            if mode == "P":
                im = im.convert("RGB")
                mode = "RGB"
            arr = np.asarray(im, dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageReadError(f"{path}: cannot decode PNG ({exc})") from exc
    if arr.size == 0:
        raise EmptyImageError(f"{path}: zero-dimension image")
    if mode in ("L", "LA"):
        gray = arr if arr.ndim == 2 else arr[..., 0]
    else:
        r, g, b = LUMA_WEIGHTS
        gray = r * arr[..., 0] + g * arr[..., 1] + b * arr[..., 2]
    return gray / 255.0


def load_image(path: str | Path) -> GrayImage:
    """Read an 8-bit P5 PGM or an 8-bit gray/RGB PNG into [0, 1] intensities."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageReadError(f"{path}: {exc.strerror or exc}") from exc
    if raw.startswith(b"P5"):
        data = _parse_pgm(raw, path)
    elif raw.startswith(b"\x89PNG\r\n\x1a\n"):
        data = _parse_png(path)
    elif raw[:1] == b"P" and raw[1:2].isdigit():
        raise UnsupportedFormatError(f"{path}: netpbm variant {raw[:2].decode()} not supported")
    else:
        raise UnsupportedFormatError(f"{path}: not a PGM or PNG file")
    return GrayImage(data)


def to_uint8(img: GrayImage) -> np.ndarray:
    return np.rint(img.data * 255.0).astype(np.uint8)


def save_pgm(img: GrayImage, path: str | Path) -> None:
    """Write ``img`` as a binary P5 PGM with maxval 255."""
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + to_uint8(img).tobytes())


def integral_image(img: GrayImage) -> IntegralImage:
    table = np.cumsum(np.cumsum(img.data, axis=0), axis=1)
    padded = np.zeros((img.height + 1, img.width + 1), dtype=np.float64)
    padded[1:, 1:] = table
    table.setflags(write=False)
    padded.setflags(write=False)
    return IntegralImage(table=table, padded=padded)


def box_sum(ii: IntegralImage, x0: int, y0: int, x1: int, y1: int) -> float:
    """Sum of intensities over the inclusive rectangle ``[x0, x1] x [y0, y1]``."""
    if not (0 <= x0 <= x1 < ii.width and 0 <= y0 <= y1 < ii.height):
        raise IndexError(
            f"rectangle x[{x0},{x1}] y[{y0},{y1}] outside {ii.width}x{ii.height} image"
        )
    p = ii.padded
    return float(p[y1 + 1, x1 + 1] - p[y0, x1 + 1] - p[y1 + 1, x0] + p[y0, x0])


def box_sums(ii: IntegralImage, y0, x0, y1, x1) -> np.ndarray:
    """Vectorized inclusive rectangle sums; bounds are not checked."""
    p = ii.padded
    return p[y1 + 1, x1 + 1] - p[y0, x1 + 1] - p[y1 + 1, x0] + p[y0, x0]


def add_gaussian_noise(img: GrayImage, spec: NoiseSpec) -> GrayImage:
    """Add zero-mean white Gaussian noise of variance ``spec.variance``, then clamp."""
    if spec.variance == 0.0:
        return img
    rng = np.random.default_rng(int(spec.seed))
    noise = rng.normal(0.0, math.sqrt(spec.variance), size=img.shape)
    return GrayImage(img.data + noise)


def mean_filter(img: GrayImage, k: int = 3) -> GrayImage:
    """k x k box average with replicate padding at the borders."""
    if not isinstance(k, (int, np.integer)) or k < 1 or k % 2 == 0:
        raise ValueError(f"mean filter window must be an odd integer >= 1, got {k!r}")
    if k == 1:
        return img
    r = k // 2
    padded = np.pad(img.data, r, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    out = windows.mean(axis=(-2, -1))
    # the exact window mean lies in the input range; clip away summation round-off
    np.clip(out, img.data.min(), img.data.max(), out=out)
    return GrayImage(out)
