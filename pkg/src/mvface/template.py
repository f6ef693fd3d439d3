"""Fixed-length face templates, dataset ingestion, splits and persistence.

A template concatenates the descriptors of the K strongest interest points
(response descending, ties by y then x) and zero-fills missing slots.

Dataset layout::

    root/<subject_id>/<angle>/<sample>.pgm|png     angle in {m90, m45, 0, p45, p90}

Template file (``.mvbk``), little-endian::

    b"MVBK1" | u32 subjects | u32 templates | u32 K
    subjects x (u32 byte length, UTF-8 label)
    templates x (u32 subject index, i16 angle, u16 sample, K*128 float32)

The keypoint count is not stored; it is recovered as the number of
non-zero descriptor slots (real descriptors have unit norm).
"""

from __future__ import annotations

import csv
import io
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .imagecore import GrayImage, ImageError, load_image
from .surf import DESCRIPTOR_SIZE, DetectorConfig, Feature, extract_features

TEMPLATE_MAGIC = b"MVBK1"
ANGLE_DIRS = {"m90": -90, "m45": -45, "0": 0, "p45": 45, "p90": 90}
IMAGE_SUFFIXES = {".pgm", ".png"}


class DatasetError(Exception):
    """Ingestion failed; ``problems`` lists every offending path."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        head = "; ".join(self.problems[:5])
        more = f" (+{len(self.problems) - 5} more)" if len(self.problems) > 5 else ""
        super().__init__(f"{len(self.problems)} dataset problem(s): {head}{more}")


class TemplateFormatError(ValueError):
    pass


@dataclass(eq=False)
class FaceTemplate:
    subject_id: str
    view_angle: int
    sample_index: int
    features: np.ndarray
    keypoints: int = 0

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float32).reshape(-1)

    @property
    def degraded(self) -> bool:
        """True when no interest point survived and the template is all zeros."""
        return self.keypoints == 0

    def padded_slots(self, k: int) -> int:
        return max(0, k - self.keypoints)


@dataclass
class TemplateSet:
    templates: list[FaceTemplate]
    subjects: list[str]
    K: int
    sources: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        known = set(self.subjects)
        dim = self.K * DESCRIPTOR_SIZE
        for t in self.templates:
            if t.subject_id not in known:
                raise ValueError(f"template subject {t.subject_id!r} not in the subject list")
            if t.features.shape != (dim,):
                raise ValueError(f"template length {t.features.size} != K*128 = {dim}")

    def __len__(self) -> int:
        return len(self.templates)

    @property
    def dim(self) -> int:
        return self.K * DESCRIPTOR_SIZE

    def features(self) -> np.ndarray:
        if not self.templates:
            return np.zeros((0, self.dim))
        return np.stack([t.features for t in self.templates]).astype(np.float64)

    def labels(self) -> np.ndarray:
        index = {s: i for i, s in enumerate(self.subjects)}
        return np.array([index[t.subject_id] for t in self.templates], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "TemplateSet":
        srcs = [self.sources[i] for i in indices] if self.sources else []
        return TemplateSet([self.templates[i] for i in indices], list(self.subjects), self.K, srcs)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    seed: int = 0
    stratified: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


def _feature_key(feature: Feature):
    p, d = feature
    return (-p.response, p.y, p.x, d.values.tobytes())


def build_template(
    points: Sequence[Feature], K: int, label: str, angle: int = 0, sample_index: int = 0
) -> FaceTemplate:
    """Concatenate the K strongest descriptors, zero-filling missing slots."""
    if K < 1:
        raise ValueError("K must be >= 1")
    chosen = sorted(points, key=_feature_key)[:K]
    feats = np.zeros(K * DESCRIPTOR_SIZE, dtype=np.float32)
    for slot, (_, d) in enumerate(chosen):
        feats[slot * DESCRIPTOR_SIZE:(slot + 1) * DESCRIPTOR_SIZE] = d.values
    if not chosen:
        warnings.warn(f"no interest points for {label!r} (angle {angle}); template is all zeros", stacklevel=2)
    return FaceTemplate(label, int(angle), int(sample_index), feats, keypoints=len(chosen))


def template_from_image(
    img: GrayImage, K: int, label: str, angle: int = 0, sample_index: int = 0,
    detector: DetectorConfig = DetectorConfig(),
) -> FaceTemplate:
    features, _ = extract_features(img, detector)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_template(features, K, label, angle, sample_index)


@dataclass(frozen=True)
class ImageRecord:
    path: Path
    subject_id: str
    view_angle: int
    sample_index: int

    @property
    def relpath(self) -> str:
        return f"{self.subject_id}/{_angle_name(self.view_angle)}/{self.path.name}"


def _angle_name(angle: int) -> str:
    for name, value in ANGLE_DIRS.items():
        if value == angle:
            return name
    raise ValueError(f"unsupported view angle {angle}")


def scan_dataset(root: str | Path) -> list[ImageRecord]:
    """Walk the dataset tree in sorted order; raises DatasetError listing every problem."""
    root = Path(root)
    problems: list[str] = []
    if not root.is_dir():
        raise DatasetError([f"{root}: not a directory"])
    records: list[ImageRecord] = []
    subject_dirs = sorted(p for p in root.iterdir() if not p.name.startswith("."))
    for sdir in subject_dirs:
        if not sdir.is_dir():
            problems.append(f"{sdir}: expected a subject directory")
            continue
        for adir in sorted(p for p in sdir.iterdir() if not p.name.startswith(".")):
            if not adir.is_dir() or adir.name not in ANGLE_DIRS:
                problems.append(f"{adir}: malformed angle directory (expected one of {sorted(ANGLE_DIRS)})")
                continue
            files = sorted(p for p in adir.iterdir() if not p.name.startswith("."))
            for k, f in enumerate(files):
                if f.suffix.lower() not in IMAGE_SUFFIXES or not f.is_file():
                    problems.append(f"{f}: not a .pgm/.png image")
                    continue
                records.append(ImageRecord(f, sdir.name, ANGLE_DIRS[adir.name], k))
    if not records and not problems:
        problems.append(f"{root}: no images found")
    if problems:
        raise DatasetError(problems)
    return records


def extract_templates(
    records: Sequence[ImageRecord],
    K: int,
    detector: DetectorConfig = DetectorConfig(),
    threads: int = 1,
    transform: Callable[[int, GrayImage], GrayImage] | None = None,
) -> list[FaceTemplate]:
    """Templates for ``records`` in input order; ``transform(i, img)`` preprocesses image i.

    Raises DatasetError itemizing all unreadable images.
    """

    def work(item):
        i, rec = item
        try:
            img = load_image(rec.path)
        except ImageError as exc:
            return exc
        if transform is not None:
            img = transform(i, img)
        try:
            return template_from_image(img, K, rec.subject_id, rec.view_angle, rec.sample_index, detector)
        except ValueError as exc:
            return ImageError(f"{rec.path}: {exc}")

    items = list(enumerate(records))
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(it) for it in items]
    problems = [str(r) for r in results if isinstance(r, Exception)]
    if problems:
        raise DatasetError(problems)
    return results  # type: ignore[return-value]


def ingest_dataset(
    root: str | Path, K: int = 4, detector: DetectorConfig = DetectorConfig(), threads: int = 1
) -> TemplateSet:
    """One template per image under ``root``; all-or-nothing."""
    records = scan_dataset(root)
    templates = extract_templates(records, K, detector, threads)
    subjects = sorted({r.subject_id for r in records})
    return TemplateSet(templates, subjects, K, [r.relpath for r in records])


def split_indices(labels: Sequence[str], spec: SplitSpec) -> tuple[list[int], list[int]]:
    """Per-subject shuffled split; floor for train with at least one train and one test item."""
    rng = np.random.default_rng(spec.seed)
    labels = list(labels)
    train: list[int] = []
    if spec.stratified:
        groups: dict[str, list[int]] = {}
        for i, lab in enumerate(labels):
            groups.setdefault(lab, []).append(i)
        for lab in sorted(groups):
            idx = groups[lab]
            if len(idx) < 2:
                raise ValueError(f"subject {lab!r} has a single template; a stratified split needs >= 2")
            perm = rng.permutation(len(idx))
            n_train = min(max(int(np.floor(len(idx) * spec.train_fraction)), 1), len(idx) - 1)
            train.extend(idx[j] for j in perm[:n_train])
    else:
        perm = rng.permutation(len(labels))
        n_train = int(np.floor(len(labels) * spec.train_fraction))
        train.extend(int(j) for j in perm[:n_train])
    train_set = set(train)
    return sorted(train_set), [i for i in range(len(labels)) if i not in train_set]


def split(ts: TemplateSet, spec: SplitSpec) -> tuple[TemplateSet, TemplateSet]:
    train, test = split_indices([t.subject_id for t in ts.templates], spec)
    return ts.subset(train), ts.subset(test)


def write_templates(ts: TemplateSet, path: str | Path | None = None) -> bytes:
    index = {s: i for i, s in enumerate(ts.subjects)}
    out = io.BytesIO()
    out.write(TEMPLATE_MAGIC)
    out.write(struct.pack("<III", len(ts.subjects), len(ts.templates), ts.K))
    for s in ts.subjects:
        raw = s.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
    for t in ts.templates:
        out.write(struct.pack("<IhH", index[t.subject_id], t.view_angle, t.sample_index))
        out.write(t.features.astype("<f4").tobytes())
    data = out.getvalue()
    if path is not None:
        Path(path).write_bytes(data)
    return data


def read_templates(source: str | Path | bytes) -> TemplateSet:
    data = source if isinstance(source, bytes) else Path(source).read_bytes()
    if not data.startswith(TEMPLATE_MAGIC):
        raise TemplateFormatError("not a template file (bad magic)")
    try:
        pos = len(TEMPLATE_MAGIC)
        n_subj, n_tmpl, K = struct.unpack_from("<III", data, pos)
        pos += 12
        subjects = []
        for _ in range(n_subj):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            subjects.append(data[pos:pos + n].decode("utf-8"))
            pos += n
        dim = K * DESCRIPTOR_SIZE
        templates = []
        for _ in range(n_tmpl):
            si, angle, sample = struct.unpack_from("<IhH", data, pos)
            pos += 8
            feats = np.frombuffer(data, dtype="<f4", count=dim, offset=pos).astype(np.float32)
            pos += 4 * dim
            kp = int(np.count_nonzero(np.any(feats.reshape(K, DESCRIPTOR_SIZE) != 0, axis=1)))
            templates.append(FaceTemplate(subjects[si], angle, sample, feats, kp))
    except (struct.error, ValueError, IndexError, UnicodeDecodeError) as exc:
        raise TemplateFormatError(f"corrupt template file: {exc}") from exc
    if pos != len(data):
        raise TemplateFormatError("trailing bytes after template records")
    return TemplateSet(templates, subjects, K)


def templates_csv(ts: TemplateSet) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["subject", "angle", "sample", "keypoints"] + [f"f{i}" for i in range(ts.dim)])
    for t in ts.templates:
        writer.writerow([t.subject_id, t.view_angle, t.sample_index, t.keypoints] + [f"{v:.6f}" for v in t.features])
    return buf.getvalue()
