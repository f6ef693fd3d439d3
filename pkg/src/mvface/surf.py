"""SURF interest points and extended 128-d descriptors on integral images.

Detection follows the usual fast-Hessian construction: box-filter
approximations of the second-order Gaussian derivatives evaluated through
an integral image, a pyramid of filter sizes (9, 15, 21, 27 in the first
octave, doubling the size step and the sampling stride each octave),
3x3x3 non-maximum suppression and a quadratic sub-sample refinement.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .imagecore import GrayImage, IntegralImage, box_sums, integral_image

DESCRIPTOR_SIZE = 128
BASE_SCALE = 1.2  # Gaussian sigma approximated by the 9x9 filter
ORIENTATION_STEP = 0.15
ORIENTATION_WINDOW = math.pi / 3.0
TWO_PI = 2.0 * math.pi


class MarginError(ValueError):
    """A sampling window around an interest point leaves the image."""


@dataclass(frozen=True)
class DetectorConfig:
    octaves: int = 4
    intervals_per_octave: int = 4
    response_threshold: float = 5e-4
    hessian_weight: float = 0.9
    upright: bool = False

    def __post_init__(self) -> None:
        if self.octaves < 1:
            raise ValueError("octaves must be >= 1")
        if self.intervals_per_octave < 3:
            raise ValueError("intervals_per_octave must be >= 3")
        if self.response_threshold < 0:
            raise ValueError("response_threshold must be >= 0")
        if not 0.0 < self.hessian_weight <= 1.0:
            raise ValueError("hessian_weight must lie in (0, 1]")


@dataclass(frozen=True)
class HessianResponse:
    det: float
    laplacian_sign: int
    dxx: float = 0.0
    dyy: float = 0.0
    dxy: float = 0.0


@dataclass(frozen=True)
class InterestPoint:
    x: float
    y: float
    scale: float
    response: float
    laplacian_sign: int
    orientation: float = 0.0
    filter_size: int = 9


@dataclass(frozen=True, eq=False)
class Descriptor128:
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.shape != (128,):
            raise ValueError(f"descriptor must have 128 components, got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Descriptor128):
            return NotImplemented
        return bool(np.array_equal(self.values, other.values))

    def __hash__(self) -> int:
        return hash(self.values.tobytes())


Feature = tuple[InterestPoint, Descriptor128]


def filter_sizes(octave: int, intervals: int) -> list[int]:
    """Box-filter side lengths for a 0-based octave: 9,15,21,27 / 15,27,39,51 / ..."""
    return [3 * (2 ** (octave + 1) * (i + 1) + 1) for i in range(intervals)]


def _second_derivatives(ii: IntegralImage, rows, cols, size: int):
    """Area-normalized Dxx, Dyy, Dxy at (rows, cols); caller guarantees the footprint fits."""
    lobe = size // 3
    half = (size - 1) // 2
    mid = lobe // 2
    r, c = rows, cols
    dxx = box_sums(ii, r - lobe + 1, c - half, r + lobe - 1, c + half) - 3.0 * box_sums(
        ii, r - lobe + 1, c - mid, r + lobe - 1, c - mid + lobe - 1
    )
    dyy = box_sums(ii, r - half, c - lobe + 1, r + half, c + lobe - 1) - 3.0 * box_sums(
        ii, r - mid, c - lobe + 1, r - mid + lobe - 1, c + lobe - 1
    )
    # positive lobes where (x - c) and (y - r) share a sign, as for the true mixed derivative
    dxy = (
        box_sums(ii, r - lobe, c - lobe, r - 1, c - 1)
        + box_sums(ii, r + 1, c + 1, r + lobe, c + lobe)
        - box_sums(ii, r - lobe, c + 1, r - 1, c + lobe)
        - box_sums(ii, r + 1, c - lobe, r + lobe, c - 1)
    )
    inv_area = 1.0 / (size * size)
    return dxx * inv_area, dyy * inv_area, dxy * inv_area


def hessian_determinant(dxx: float, dyy: float, dxy: float, w: float = 0.9) -> float:
    return dxx * dyy - (w * dxy) ** 2


def laplacian_sign(trace: float) -> int:
    return 1 if trace >= 0 else -1


def hessian_response(ii: IntegralImage, x: int, y: int, filter_size: int, w: float = 0.9) -> HessianResponse:
    """Approximated Hessian determinant and Laplacian sign at pixel (x, y)."""
    if filter_size < 9 or filter_size % 2 == 0 or filter_size % 3 != 0:
        raise ValueError(f"filter size must be an odd multiple of 3 and >= 9, got {filter_size}")
    half = (filter_size - 1) // 2
    if not (half <= x < ii.width - half and half <= y < ii.height - half):
        raise MarginError(f"filter {filter_size} at ({x},{y}) exceeds {ii.width}x{ii.height} image")
    dxx, dyy, dxy = (float(v) for v in _second_derivatives(ii, np.int64(y), np.int64(x), filter_size))
    return HessianResponse(
        det=hessian_determinant(dxx, dyy, dxy, w),
        laplacian_sign=laplacian_sign(dxx + dyy),
        dxx=dxx,
        dyy=dyy,
        dxy=dxy,
    )


def _response_layer(ii: IntegralImage, size: int, step: int, w: float):
    """det and trace maps on the octave's sampling grid; NaN where the filter does not fit."""
    h, wd = ii.height, ii.width
    gr = np.arange(0, h, step)
    gc = np.arange(0, wd, step)
    det = np.full((gr.size, gc.size), np.nan)
    trace = np.full_like(det, np.nan)
    half = (size - 1) // 2
    rmask = (gr >= half) & (gr < h - half)
    cmask = (gc >= half) & (gc < wd - half)
    if rmask.any() and cmask.any():
        rr, cc = np.meshgrid(gr[rmask], gc[cmask], indexing="ij")
        dxx, dyy, dxy = _second_derivatives(ii, rr, cc, size)
        det[np.ix_(rmask, cmask)] = dxx * dyy - (w * dxy) ** 2
        trace[np.ix_(rmask, cmask)] = dxx + dyy
    return det, trace


def _local_maxima(stack: np.ndarray, threshold: float) -> np.ndarray:
    """(layer, row, col) indices strictly greater than all 26 neighbours and above threshold."""
    n, h, w = stack.shape
    if n < 3 or h < 3 or w < 3:
        return np.empty((0, 3), dtype=np.int64)
    centre = stack[1:-1, 1:-1, 1:-1]
    with np.errstate(invalid="ignore"):
        keep = centre > threshold
        for dl in (-1, 0, 1):
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dl == dr == dc == 0:
                        continue
                    nb = stack[1 + dl:n - 1 + dl, 1 + dr:h - 1 + dr, 1 + dc:w - 1 + dc]
                    keep &= centre > nb
    return np.argwhere(keep) + 1


def _refine(stack: np.ndarray, l: int, r: int, c: int):
    """Quadratic fit of the response around a discrete maximum; None when unstable."""
    v = stack[l, r, c]
    dx = (stack[l, r, c + 1] - stack[l, r, c - 1]) / 2.0
    dy = (stack[l, r + 1, c] - stack[l, r - 1, c]) / 2.0
    ds = (stack[l + 1, r, c] - stack[l - 1, r, c]) / 2.0
    dxx = stack[l, r, c + 1] + stack[l, r, c - 1] - 2 * v
    dyy = stack[l, r + 1, c] + stack[l, r - 1, c] - 2 * v
    dss = stack[l + 1, r, c] + stack[l - 1, r, c] - 2 * v
    dxy = (stack[l, r + 1, c + 1] - stack[l, r + 1, c - 1] - stack[l, r - 1, c + 1] + stack[l, r - 1, c - 1]) / 4.0
    dxs = (stack[l + 1, r, c + 1] - stack[l + 1, r, c - 1] - stack[l - 1, r, c + 1] + stack[l - 1, r, c - 1]) / 4.0
    dys = (stack[l + 1, r + 1, c] - stack[l + 1, r - 1, c] - stack[l - 1, r + 1, c] + stack[l - 1, r - 1, c]) / 4.0
    hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
    grad = np.array([dx, dy, ds])
    try:
        offset = -np.linalg.solve(hess, grad)
    except np.linalg.LinAlgError:
        return None
    # a vertex more than one sample away contradicts the discrete maximum
    if not np.all(np.isfinite(offset)) or np.any(np.abs(offset) > 1.0):
        return None
    # peaks between two layers land near +-0.5; keep them at the cell boundary
    return np.clip(offset, -0.5, 0.5)


def detect(img: GrayImage, cfg: DetectorConfig = DetectorConfig(), ii: IntegralImage | None = None) -> list[InterestPoint]:
    """Fast-Hessian interest points sorted by response (desc), then y, then x.

    Orientation is left at 0; see :func:`assign_orientation`.
    """
    if img.width < 32 or img.height < 32:
        raise ValueError(f"image {img.width}x{img.height} is smaller than the 32x32 minimum")
    if ii is None:
        ii = integral_image(img)
    points: list[InterestPoint] = []
    for octave in range(cfg.octaves):
        sizes = filter_sizes(octave, cfg.intervals_per_octave)
        step = 2 ** octave
        if sizes[0] > min(img.width, img.height):
            break
        layers = [_response_layer(ii, s, step, cfg.hessian_weight) for s in sizes]
        dets = np.stack([d for d, _ in layers])
        for l, r, c in _local_maxima(dets, cfg.response_threshold):
            offset = _refine(dets, l, r, c)
            if offset is None:
                continue
            size = sizes[l] + offset[2] * (sizes[1] - sizes[0])
            points.append(
                InterestPoint(
                    x=float((c + offset[0]) * step),
                    y=float((r + offset[1]) * step),
                    scale=float(BASE_SCALE * size / 9.0),
                    response=float(dets[l, r, c]),
                    laplacian_sign=laplacian_sign(float(layers[l][1][r, c])),
                    filter_size=sizes[l],
                )
            )
    points.sort(key=lambda p: (-p.response, p.y, p.x))
    return points


def _haar(ii: IntegralImage, rows: np.ndarray, cols: np.ndarray, half: int):
    """Centred Haar responses over a (2*half+1)-pixel square: right-minus-left, bottom-minus-top.

    The centre row/column is excluded so the wavelet pair is exactly
    symmetric under quarter turns of the image.
    """
    top, bot = rows - half, rows + half
    left, right = cols - half, cols + half
    hx = box_sums(ii, top, cols + 1, bot, right) - box_sums(ii, top, left, bot, cols - 1)
    hy = box_sums(ii, rows + 1, left, bot, right) - box_sums(ii, top, left, rows - 1, right)
    return hx, hy


def _check_fits(ii: IntegralImage, rows: np.ndarray, cols: np.ndarray, half: int, what: str) -> None:
    if rows.min() - half < 0 or rows.max() + half >= ii.height or cols.min() - half < 0 or cols.max() + half >= ii.width:
        raise MarginError(f"{what} window leaves the {ii.width}x{ii.height} image")


# sample offsets (units of scale) inside the radius-6 orientation disc
_ORI_I, _ORI_J = np.meshgrid(np.arange(-6, 7), np.arange(-6, 7), indexing="ij")
_ORI_MASK = _ORI_I**2 + _ORI_J**2 < 36
_ORI_DX = _ORI_I[_ORI_MASK]
_ORI_DY = _ORI_J[_ORI_MASK]
_ORI_GAUSS = np.exp(-(_ORI_DX**2 + _ORI_DY**2) / (2.0 * 2.5**2))


def assign_orientation(ii: IntegralImage, p: InterestPoint, upright: bool = False) -> float:
    """Dominant orientation in [0, 2*pi) from Gaussian-weighted Haar responses.

    Raises MarginError when the 6*scale disc plus wavelet support leaves the image.
    """
    if upright:
        return 0.0
    s = max(1, int(round(p.scale)))
    cx, cy = int(round(p.x)), int(round(p.y))
    rows = cy + _ORI_DY * s
    cols = cx + _ORI_DX * s
    half = 2 * s
    _check_fits(ii, rows, cols, half, "orientation")
    hx, hy = _haar(ii, rows, cols, half)
    rx = _ORI_GAUSS * hx
    ry = _ORI_GAUSS * hy
    angles = np.mod(np.arctan2(ry, rx), TWO_PI)

    best = -1.0
    orientation = 0.0
    for start in np.arange(0.0, TWO_PI, ORIENTATION_STEP):
        end = start + ORIENTATION_WINDOW
        if end > TWO_PI:
            sel = (angles >= start) | (angles < end - TWO_PI)
        else:
            sel = (angles >= start) & (angles < end)
        sx = float(rx[sel].sum())
        sy = float(ry[sel].sum())
        mag = sx * sx + sy * sy
        if mag > best:
            best = mag
            orientation = math.atan2(sy, sx) % TWO_PI
    return orientation


# 20x20 sample grid (units of scale) covering the descriptor window
_DESC_U = (np.arange(20) - 9.5)
_DESC_GU, _DESC_GV = np.meshgrid(_DESC_U, _DESC_U, indexing="xy")  # u along x, v along y
_DESC_SUB = (np.arange(20) // 5)
_DESC_CELL = (_DESC_SUB[:, None] * 4 + _DESC_SUB[None, :]).reshape(-1)  # row-block * 4 + col-block
_DESC_WEIGHT = np.exp(-(_DESC_GU**2 + _DESC_GV**2) / (2.0 * 3.3**2)).reshape(-1)


def describe(ii: IntegralImage, p: InterestPoint) -> Descriptor128:
    """Extended SURF descriptor: 4x4 cells x 8 sign-split Haar sums, unit norm.

    Raises MarginError if the oriented 20*scale window leaves the image and
    ValueError if the window is perfectly flat (no direction to normalize).
    """
    s = p.scale
    co, si = math.cos(p.orientation), math.sin(p.orientation)
    u = _DESC_GU.reshape(-1) * s
    v = _DESC_GV.reshape(-1) * s
    cols = np.rint(p.x + u * co - v * si).astype(np.int64)
    rows = np.rint(p.y + u * si + v * co).astype(np.int64)
    half = max(1, int(round(s)))
    _check_fits(ii, rows, cols, half, "descriptor")
    hx, hy = _haar(ii, rows, cols, half)
    # rotate image-frame responses into the keypoint frame
    dx = _DESC_WEIGHT * (hx * co + hy * si)
    dy = _DESC_WEIGHT * (-hx * si + hy * co)

    neg_y = dy < 0
    neg_x = dx < 0
    comps = np.stack(
        [
            np.where(neg_y, dx, 0.0), np.where(neg_y, np.abs(dx), 0.0),
            np.where(~neg_y, dx, 0.0), np.where(~neg_y, np.abs(dx), 0.0),
            np.where(neg_x, dy, 0.0), np.where(neg_x, np.abs(dy), 0.0),
            np.where(~neg_x, dy, 0.0), np.where(~neg_x, np.abs(dy), 0.0),
        ],
        axis=1,
    )
    cells = np.zeros((16, 8))
    np.add.at(cells, _DESC_CELL, comps)
    vec = cells.reshape(-1)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0 or not math.isfinite(norm):
        raise ValueError("flat descriptor window")
    return Descriptor128(vec / norm)


def extract_features(img: GrayImage, cfg: DetectorConfig = DetectorConfig()) -> tuple[list[Feature], int]:
    """Detect, orient and describe; returns the features and the count of skipped points."""
    ii = integral_image(img)
    features: list[Feature] = []
    skipped = 0
    for p in detect(img, cfg, ii):
        try:
            p = replace(p, orientation=assign_orientation(ii, p, cfg.upright))
            features.append((p, describe(ii, p)))
        except (MarginError, ValueError):
            skipped += 1
    return features, skipped


def match_descriptors(a: Sequence[Feature], b: Sequence[Feature], ratio: float = 0.8) -> list[tuple[int, int]]:
    """Nearest-neighbour ratio matching restricted to equal Laplacian signs.

    A pair (i, j) is kept when the nearest same-sign distance is at most
    ``ratio`` times the second-nearest (infinite when absent).
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    if not a or not b:
        return []
    da = np.stack([d.values for _, d in a])
    db = np.stack([d.values for _, d in b])
    sa = np.array([p.laplacian_sign for p, _ in a])
    sb = np.array([p.laplacian_sign for p, _ in b])
    dist = np.linalg.norm(da[:, None, :] - db[None, :, :], axis=2)
    dist[sa[:, None] != sb[None, :]] = np.inf
    matches = []
    for i in range(len(a)):
        order = np.argsort(dist[i], kind="stable")
        first = dist[i, order[0]]
        if not math.isfinite(first):
            continue
        second = dist[i, order[1]] if len(order) > 1 else math.inf
        if first <= ratio * second:
            matches.append((i, int(order[0])))
    return matches


def write_keypoints_csv(points: Sequence[InterestPoint], path: str | Path | None = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x", "y", "scale", "response", "sign", "orientation"])
    for p in points:
        writer.writerow([f"{p.x:.6f}", f"{p.y:.6f}", f"{p.scale:.6f}", f"{p.response:.6f}", p.laplacian_sign, f"{p.orientation:.6f}"])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


__all__ = [
    "DetectorConfig", "HessianResponse", "InterestPoint", "Descriptor128", "MarginError",
    "filter_sizes", "hessian_determinant", "hessian_response", "detect", "assign_orientation",
    "describe", "extract_features", "match_descriptors", "write_keypoints_csv",
]
