"""Deterministic synthetic multi-view faces.

Faces are parametric drawings: an elliptical head on a vertically graded
background, two dark eye blobs, a nose ridge and a mouth bar. Yaw is
simulated by compressing feature offsets about the face midline by
cos(yaw), sliding them toward the turned side by sin(yaw), and hiding the
far-side eye beyond 45 degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .imagecore import GrayImage, save_pgm

ALLOWED_YAWS = (-90, -45, 0, 45, 90)

# uniform ranges for the per-subject layout parameters
LAYOUT_RANGES = {
    "head_half_width": (30.0, 40.0),
    "head_half_height": (42.0, 52.0),
    "skin": (0.58, 0.78),
    "skin_gradient": (-0.12, 0.12),
    "background": (0.12, 0.3),
    "background_gradient": (-0.1, 0.1),
    "eye_spacing": (22.0, 38.0),
    "eye_height": (-22.0, -8.0),
    "eye_radius": (2.5, 4.5),
    "eye_depth": (0.3, 0.5),
    "eye_asymmetry": (0.12, 0.25),
    "brow_gap": (5.0, 9.0),
    "brow_length": (4.0, 9.0),
    "brow_depth": (0.15, 0.3),
    "nose_length": (10.0, 24.0),
    "nose_width": (1.5, 3.5),
    "nose_depth": (0.12, 0.3),
    "nostril_depth": (0.2, 0.35),
    "mouth_width": (12.0, 30.0),
    "mouth_offset": (6.0, 14.0),
    "mouth_thickness": (1.5, 3.5),
    "mouth_depth": (0.2, 0.4),
    "mouth_taper": (0.25, 0.45),
}


@dataclass(frozen=True)
class SubjectSpec:
    seed: int
    canvas: tuple[int, int] = (128, 128)  # (width, height)
    head_half_width: float = 35.0
    head_half_height: float = 47.0
    skin: float = 0.68
    skin_gradient: float = 0.0
    background: float = 0.2
    background_gradient: float = 0.0
    eye_spacing: float = 30.0
    eye_height: float = -15.0
    eye_radius: float = 3.5
    eye_depth: float = 0.4
    eye_asymmetry: float = 0.0
    brow_gap: float = 7.0
    brow_length: float = 6.0
    brow_depth: float = 0.2
    nose_length: float = 17.0
    nose_width: float = 2.5
    nose_depth: float = 0.2
    nostril_depth: float = 0.25
    mouth_width: float = 20.0
    mouth_offset: float = 10.0
    mouth_thickness: float = 2.5
    mouth_depth: float = 0.3
    mouth_taper: float = 0.0

    @classmethod
    def from_seed(cls, seed: int, canvas: tuple[int, int] = (128, 128)) -> "SubjectSpec":
        rng = np.random.default_rng(seed)
        params = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in LAYOUT_RANGES.items()}
        # signed: which eye is darker is itself a subject trait
        if rng.random() < 0.5:
            params["eye_asymmetry"] = -params["eye_asymmetry"]
        if rng.random() < 0.5:
            params["mouth_taper"] = -params["mouth_taper"]
        return cls(seed=seed, canvas=canvas, **params)


@dataclass(frozen=True)
class ViewSpec:
    yaw: int = 0
    jitter_seed: int = 0
    jitter: bool = True
    max_shift: float = 3.0
    max_rotation_deg: float = 3.0
    max_brightness: float = 0.05
    max_yaw_wobble: float = 8.0

    def __post_init__(self) -> None:
        if self.yaw not in ALLOWED_YAWS:
            raise ValueError(f"yaw must be one of {ALLOWED_YAWS}, got {self.yaw}")

    def draw_jitter(self) -> tuple[float, float, float, float, float]:
        """(dx, dy, rotation radians, brightness offset, yaw wobble degrees)."""
        if not self.jitter:
            return 0.0, 0.0, 0.0, 0.0, 0.0
        rng = np.random.default_rng(self.jitter_seed)
        dx, dy = rng.uniform(-self.max_shift, self.max_shift, size=2)
        rot = math.radians(rng.uniform(-self.max_rotation_deg, self.max_rotation_deg))
        bright = rng.uniform(-self.max_brightness, self.max_brightness)
        wobble = rng.uniform(-self.max_yaw_wobble, self.max_yaw_wobble)
        return float(dx), float(dy), float(rot), float(bright), float(wobble)


def _blob(x, y, cx, cy, sx, sy):
    return np.exp(-0.5 * (((x - cx) / sx) ** 2 + ((y - cy) / sy) ** 2))


def _bar(x, y, cx, cy, half_len, sx, sy, horizontal: bool, taper: float = 0.0):
    """Soft-ended bar: flat core of half length ``half_len`` with Gaussian cross-section.

    ``taper`` linearly thickens one end of a horizontal bar and thins the other.
    """
    if horizontal:
        along = np.maximum(np.abs(x - cx) - half_len, 0.0)
        rel = np.clip((x - cx) / max(half_len, 1e-6), -1.0, 1.0)
        thick = sy * (1.0 + taper * rel)
        return np.exp(-0.5 * ((along / sx) ** 2 + ((y - cy) / thick) ** 2))
    along = np.maximum(np.abs(y - cy) - half_len, 0.0)
    return np.exp(-0.5 * (((x - cx) / sx) ** 2 + (along / sy) ** 2))


def feature_layout(subject: SubjectSpec, yaw: float, nominal_yaw: int | None = None) -> dict[str, tuple[float, float] | None]:
    """Face-centred positions of eyes, nose and mouth under ``yaw`` (None when occluded).

    Occlusion follows the nominal view angle so that pose wobble never hides an eye.
    """
    nominal = round(yaw) if nominal_yaw is None else nominal_yaw
    t = math.radians(yaw)
    c, s = math.cos(t), math.sin(t)
    a = subject.head_half_width
    half = subject.eye_spacing / 2.0
    eye_shift = 0.25 * a * s
    layout: dict[str, tuple[float, float] | None] = {
        "left_eye": (-half * c + eye_shift, subject.eye_height),
        "right_eye": (half * c + eye_shift, subject.eye_height),
        "nose": (0.45 * a * s, subject.eye_height + 4.0 + subject.nose_length / 2.0),
        "mouth": (0.3 * a * s, subject.eye_height + 4.0 + subject.nose_length + subject.mouth_offset),
    }
    if abs(nominal) > 45:
        layout["right_eye" if nominal > 0 else "left_eye"] = None
    return layout


def _face(x: np.ndarray, y: np.ndarray, subject: SubjectSpec, yaw: float, nominal_yaw: int) -> np.ndarray:
    """Intensity of the untransformed face at face-centred coordinates (x, y)."""
    h = subject.canvas[1]
    t = math.radians(yaw)
    c, s = math.cos(t), math.sin(t)
    norm_y = y / (h / 2.0)
    img = subject.background + subject.background_gradient * norm_y

    head_a = subject.head_half_width * (0.5 + 0.5 * c)
    head_b = subject.head_half_height
    head_cx = 0.1 * subject.head_half_width * s
    r = np.sqrt(((x - head_cx) / head_a) ** 2 + (y / head_b) ** 2)
    head = 1.0 / (1.0 + np.exp((r - 1.0) * 25.0))
    skin = subject.skin + subject.skin_gradient * norm_y
    img = img + head * (skin - img)

    layout = feature_layout(subject, yaw, nominal_yaw)
    shade = np.zeros_like(x)
    squeeze = max(c, 0.35)
    for name, side in (("left_eye", -1.0), ("right_eye", 1.0)):
        pos = layout[name]
        if pos is None:
            continue
        depth = subject.eye_depth * (1.0 + 0.5 * side * subject.eye_asymmetry)
        shade += depth * _blob(x, y, pos[0], pos[1], subject.eye_radius * squeeze, subject.eye_radius)
        shade += subject.brow_depth * _bar(
            x, y, pos[0], pos[1] - subject.eye_radius - subject.brow_gap,
            subject.brow_length * squeeze, 1.5, 1.2, horizontal=True,
        )
    nx, ny = layout["nose"]
    shade += subject.nose_depth * _bar(x, y, nx, ny, subject.nose_length / 2.0, subject.nose_width, 2.0, horizontal=False)
    tip = ny + subject.nose_length / 2.0 + 1.5
    shade += subject.nostril_depth * _blob(x, y, nx, tip, 2.6 * squeeze, 2.2)
    mx, my = layout["mouth"]
    mouth_half = max(subject.mouth_width / 2.0 * c, 0.5)
    shade += subject.mouth_depth * _bar(
        x, y, mx, my, mouth_half, 2.0, subject.mouth_thickness, horizontal=True, taper=subject.mouth_taper
    )
    return img - head * shade


def render(subject: SubjectSpec, view: ViewSpec) -> GrayImage:
    """Rasterize one face view.

    Pose wobble perturbs the yaw before drawing; shift, in-plane rotation and
    brightness jitter are applied last.
    """
    w, h = subject.canvas
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    dx, dy, rot, bright, wobble = view.draw_jitter()
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map each output pixel into the face frame
    px = xs - cx - dx
    py = ys - cy - dy
    co, si = math.cos(rot), math.sin(rot)
    fx = co * px + si * py
    fy = -si * px + co * py
    return GrayImage(_face(fx, fy, subject, view.yaw + wobble, view.yaw) + bright)


def angle_dirname(angle: int) -> str:
    if angle == 0:
        return "0"
    return f"{'p' if angle > 0 else 'm'}{abs(angle)}"


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


def subject_name(index: int) -> str:
    return f"subj{index:03d}"


def generate_dataset(
    subjects: int,
    views: Iterable[int],
    samples_per_view: int,
    root_seed: int,
    out: str | Path,
    canvas: tuple[int, int] = (128, 128),
) -> list[Path]:
    """Write ``out/<subject>/<angle>/sNNN.pgm`` for every subject, view and sample.

    Returns the written paths in traversal order.
    """
    views = list(views)
    if subjects < 2:
        raise ValueError("need at least 2 subjects")
    if samples_per_view < 1:
        raise ValueError("need at least 1 sample per view")
    for v in views:
        if v not in ALLOWED_YAWS:
            raise ValueError(f"view angle {v} not in {ALLOWED_YAWS}")
    out = Path(out)
    written = []
    for si in range(subjects):
        spec = SubjectSpec.from_seed(derive_seed(root_seed, si), canvas)
        for yaw in views:
            leaf = out / subject_name(si) / angle_dirname(yaw)
            leaf.mkdir(parents=True, exist_ok=True)
            for k in range(samples_per_view):
                view = ViewSpec(yaw=yaw, jitter_seed=derive_seed(root_seed, si, yaw + 1000, k))
                path = leaf / f"s{k:03d}.pgm"
                save_pgm(render(spec, view), path)
                written.append(path)
    return written
