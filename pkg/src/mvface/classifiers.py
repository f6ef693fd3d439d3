"""MLP, LVQ and RBF base learners producing per-class score vectors.

All three share one hyperparameter block (hidden units, epochs, learning
rate). Trained parameters are stored as float32 so that a model written to
disk and read back predicts bit-identically; arithmetic runs in float64.

Model container (``.mvbm``), little-endian::

    b"MVBM1" | u32 model count | u32 class count | classes (u32 length, UTF-8)
    per model: u8 family tag | u32 input_dim | u32 hidden | f64 train_loss | f64 weight
               | u32 blob count | blobs (u32 rows, u32 cols, rows*cols float32)
"""

from __future__ import annotations

import io
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

MODEL_MAGIC = b"MVBM1"
MLP, LVQ, RBF = "MLP", "LVQ", "RBF"
FAMILIES = (MLP, LVQ, RBF)
_FAMILY_TAGS = {MLP: 1, LVQ: 2, RBF: 3}

BATCH_SIZE = 32
STD_FLOOR = 1e-8
KMEANS_ITERATIONS = 25
RIDGE_LAMBDA = 1e-6
WIDTH_NEIGHBOURS = 3


class TrainingError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    hidden_units: int = 500
    epochs: int = 300
    learning_rate: float = 0.03
    seed: int = 0

    def __post_init__(self) -> None:
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


def _f32(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float32)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check_training(X: np.ndarray, y: np.ndarray, n_classes: int, need_two_labels: bool = True) -> None:
    if X.ndim != 2 or len(X) != len(y) or len(X) == 0:
        raise TrainingError("training data must be a non-empty (n, d) matrix with one label per row")
    if not np.all(np.isfinite(X)):
        raise TrainingError("training features contain non-finite values")
    if n_classes < 2:
        raise TrainingError("training needs at least two classes")
    if np.any((y < 0) | (y >= n_classes)):
        raise TrainingError("labels outside the class list")
    if need_two_labels and len(np.unique(y)) < 2:
        raise TrainingError("training set holds a single class")


def _as_query(model, features) -> tuple[np.ndarray, bool]:
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.input_dim:
        raise ValueError(f"feature length {x.shape[1]} != model input_dim {model.input_dim}")
    return x, single


# ---------------------------------------------------------------------------
# MLP


@dataclass(eq=False)
class MlpModel:
    classes: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    w1: np.ndarray  # (input_dim, hidden)
    b1: np.ndarray
    w2: np.ndarray  # (hidden, classes)
    b2: np.ndarray
    train_loss: float = float("nan")
    loss_history: list[float] = field(default_factory=list, repr=False)

    family = MLP

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_units(self) -> int:
        return self.w1.shape[1]

    def blobs(self) -> list[np.ndarray]:
        return [self.mean, self.std, self.w1, self.b1, self.w2, self.b2]

    def scores(self, X: np.ndarray) -> np.ndarray:
        z = (np.asarray(X, dtype=np.float64) - self.mean) / self.std
        h = _sigmoid(z @ self.w1.astype(np.float64) + self.b1)
        return softmax(h @ self.w2.astype(np.float64) + self.b2)


def mlp_loss_and_grads(params: Sequence[np.ndarray], Z: np.ndarray, Y: np.ndarray):
    """Mean cross-entropy and its gradients for standardized inputs Z and one-hot Y."""
    w1, b1, w2, b2 = params
    h = _sigmoid(Z @ w1 + b1)
    p = softmax(h @ w2 + b2)
    n = len(Z)
    loss = -float(np.sum(Y * np.log(np.maximum(p, 1e-300)))) / n
    d_out = (p - Y) / n
    g_w2 = h.T @ d_out
    g_b2 = d_out.sum(axis=0)
    d_h = (d_out @ w2.T) * h * (1.0 - h)
    g_w1 = Z.T @ d_h
    g_b1 = d_h.sum(axis=0)
    return loss, [g_w1, g_b1, g_w2, g_b2]


def init_mlp_params(input_dim: int, hidden: int, n_classes: int, rng: np.random.Generator) -> list[np.ndarray]:
    lim1 = math.sqrt(6.0 / (input_dim + hidden))
    lim2 = math.sqrt(6.0 / (hidden + n_classes))
    w1 = rng.uniform(-lim1, lim1, size=(input_dim, hidden))
    w2 = rng.uniform(-lim2, lim2, size=(hidden, n_classes))
    return [w1, np.zeros(hidden), w2, np.zeros(n_classes)]


def train_mlp_arrays(X: np.ndarray, y: np.ndarray, classes: Sequence[str], cfg: TrainConfig) -> MlpModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    C = len(classes)
    _check_training(X, y, C)
    rng = np.random.default_rng(cfg.seed)
    mean = X.mean(axis=0)
    std = np.maximum(X.std(axis=0), STD_FLOOR)
    Z = (X - mean) / std
    Y = np.eye(C)[y]
    params = init_mlp_params(X.shape[1], cfg.hidden_units, C, rng)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(Z))
        for start in range(0, len(Z), BATCH_SIZE):
            batch = order[start:start + BATCH_SIZE]
            _, grads = mlp_loss_and_grads(params, Z[batch], Y[batch])
            for p, g in zip(params, grads):
                p -= cfg.learning_rate * g
        history.append(mlp_loss_and_grads(params, Z, Y)[0])
    if not all(np.all(np.isfinite(p)) for p in params):
        raise TrainingError("MLP training diverged (non-finite weights)")
    w1, b1, w2, b2 = (_f32(p) for p in params)
    model = MlpModel(tuple(classes), _f32(mean), _f32(std), w1, b1, w2, b2)
    Zs = (X - model.mean) / model.std
    model.train_loss = mlp_loss_and_grads([w1.astype(np.float64), b1, w2.astype(np.float64), b2], Zs, Y)[0]
    model.loss_history = history
    return model


def predict_mlp(model: MlpModel, features) -> np.ndarray:
    x, single = _as_query(model, features)
    s = model.scores(x)
    return s[0] if single else s


# ---------------------------------------------------------------------------
# LVQ


@dataclass(eq=False)
class LvqModel:
    classes: tuple[str, ...]
    prototypes: np.ndarray  # (hidden, input_dim)
    labels: np.ndarray  # (hidden,) class indices

    family = LVQ
    train_loss: float = float("nan")

    @property
    def input_dim(self) -> int:
        return self.prototypes.shape[1]

    @property
    def hidden_units(self) -> int:
        return self.prototypes.shape[0]

    def blobs(self) -> list[np.ndarray]:
        return [self.prototypes, self.labels.astype(np.float32)]

    def class_distances(self, X: np.ndarray) -> np.ndarray:
        P = self.prototypes.astype(np.float64)
        X = np.asarray(X, dtype=np.float64)
        d = np.sqrt(np.maximum(
            (X**2).sum(1)[:, None] - 2.0 * X @ P.T + (P**2).sum(1)[None, :], 0.0
        ))
        out = np.full((len(X), len(self.classes)), np.inf)
        for c in range(len(self.classes)):
            mask = self.labels == c
            if mask.any():
                out[:, c] = d[:, mask].min(axis=1)
        return out

    def scores(self, X: np.ndarray) -> np.ndarray:
        d = self.class_distances(X)
        tau = np.maximum(d.mean(axis=1, keepdims=True), 1e-8)
        return softmax(-d / tau)


def allocate_prototypes(counts: Sequence[int], total: int) -> list[int]:
    """Largest-remainder allocation proportional to ``counts`` with at least one each."""
    counts = np.asarray(counts, dtype=np.float64)
    C = len(counts)
    if total < C:
        raise TrainingError(f"{total} prototypes cannot cover {C} classes")
    extra = total - C
    share = extra * counts / counts.sum()
    alloc = np.floor(share).astype(int)
    remainder = extra - int(alloc.sum())
    order = sorted(range(C), key=lambda c: (-(share[c] - alloc[c]), c))
    for c in order[:remainder]:
        alloc[c] += 1
    return [int(a) + 1 for a in alloc]


def lvq1_step(prototypes: np.ndarray, labels: np.ndarray, x: np.ndarray, label: int, lr: float) -> int:
    """Move the nearest prototype toward (same label) or away from x in place; returns its index."""
    diff = x - prototypes
    j = int(np.argmin(np.einsum("ij,ij->i", diff, diff)))
    if labels[j] == label:
        prototypes[j] += lr * diff[j]
    else:
        prototypes[j] -= lr * diff[j]
    return j


def train_lvq_arrays(X: np.ndarray, y: np.ndarray, classes: Sequence[str], cfg: TrainConfig) -> LvqModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    C = len(classes)
    _check_training(X, y, C)
    counts = np.bincount(y, minlength=C)
    if np.any(counts == 0):
        missing = [classes[c] for c in np.where(counts == 0)[0]]
        raise TrainingError(f"classes without training samples: {missing}")
    rng = np.random.default_rng(cfg.seed)
    alloc = allocate_prototypes(counts, cfg.hidden_units)
    protos, labels = [], []
    for c in range(C):
        members = np.where(y == c)[0]
        # cycle through a seeded permutation when a class owns more prototypes than samples
        reps = -(-alloc[c] // len(members))
        picks = np.concatenate([rng.permutation(members) for _ in range(reps)])[:alloc[c]]
        protos.append(X[picks])
        labels.extend([c] * alloc[c])
    P = np.concatenate(protos)
    L = np.asarray(labels, dtype=np.int64)
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * (1.0 - epoch / cfg.epochs)
        for i in rng.permutation(len(X)):
            lvq1_step(P, L, X[i], y[i], lr)
    if not np.all(np.isfinite(P)):
        raise TrainingError("LVQ prototypes became non-finite")
    return LvqModel(tuple(classes), _f32(P), L)


def predict_lvq(model: LvqModel, features) -> np.ndarray:
    x, single = _as_query(model, features)
    s = model.scores(x)
    return s[0] if single else s


# ---------------------------------------------------------------------------
# RBF


@dataclass(eq=False)
class RbfModel:
    classes: tuple[str, ...]
    centers: np.ndarray  # (k, input_dim)
    widths: np.ndarray  # (k,)
    weights: np.ndarray  # (k + 1, classes); last row is the bias

    family = RBF
    train_loss: float = float("nan")

    @property
    def input_dim(self) -> int:
        return self.centers.shape[1]

    @property
    def hidden_units(self) -> int:
        return self.centers.shape[0]

    def blobs(self) -> list[np.ndarray]:
        return [self.centers, self.widths, self.weights]

    def activations(self, X: np.ndarray) -> np.ndarray:
        return rbf_design(np.asarray(X, dtype=np.float64), self.centers.astype(np.float64), self.widths.astype(np.float64))

    def outputs(self, X: np.ndarray) -> np.ndarray:
        return self.activations(X) @ self.weights.astype(np.float64)

    def scores(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.outputs(X))


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.maximum((A**2).sum(1)[:, None] - 2.0 * A @ B.T + (B**2).sum(1)[None, :], 0.0)


def rbf_design(X: np.ndarray, centers: np.ndarray, widths: np.ndarray) -> np.ndarray:
    """Gaussian activations plus a trailing bias column."""
    phi = np.exp(-_sq_dists(X, centers) / (2.0 * widths**2))
    return np.hstack([phi, np.ones((len(X), 1))])


def kmeans(X: np.ndarray, k: int, rng: np.random.Generator, iterations: int = KMEANS_ITERATIONS) -> np.ndarray:
    """Lloyd iterations from k distinct seeded samples; empty clusters take the farthest points."""
    centers = X[rng.choice(len(X), size=k, replace=False)].copy()
    for _ in range(iterations):
        d = _sq_dists(X, centers)
        assign = d.argmin(axis=1)
        nearest = d[np.arange(len(X)), assign]
        counts = np.bincount(assign, minlength=k)
        new = np.zeros_like(centers)
        np.add.at(new, assign, X)
        filled = counts > 0
        new[filled] /= counts[filled, None]
        empty = np.where(~filled)[0]
        if empty.size:
            far = np.argsort(-nearest, kind="stable")[:empty.size]
            new[empty] = X[far]
        if np.array_equal(new, centers):
            break
        centers = new
    return centers


def rbf_widths(centers: np.ndarray) -> np.ndarray:
    k = len(centers)
    if k == 1:
        return np.ones(1)
    d = np.sqrt(_sq_dists(centers, centers))
    np.fill_diagonal(d, np.inf)
    m = min(WIDTH_NEIGHBOURS, k - 1)
    near = np.sort(d, axis=1)[:, :m]
    return np.maximum(near.mean(axis=1), 1e-6)


def train_rbf_arrays(X: np.ndarray, y: np.ndarray, classes: Sequence[str], cfg: TrainConfig) -> RbfModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    C = len(classes)
    # a one-label training set is a legal (constant) regression target here
    _check_training(X, y, C, need_two_labels=False)
    if len(X) < C:
        raise TrainingError(f"{len(X)} samples for {C} classes")
    k = cfg.hidden_units
    if k > len(X):
        warnings.warn(f"RBF hidden_units {k} exceeds {len(X)} training samples; using {len(X)}", stacklevel=2)
        k = len(X)
    rng = np.random.default_rng(cfg.seed)
    centers = _f32(kmeans(X, k, rng))
    widths = _f32(rbf_widths(centers.astype(np.float64)))
    phi = rbf_design(X, centers.astype(np.float64), widths.astype(np.float64))
    Y = np.eye(C)[y]
    A = phi.T @ phi + RIDGE_LAMBDA * np.eye(phi.shape[1])
    W = np.linalg.solve(A, phi.T @ Y)
    if not np.all(np.isfinite(W)):
        raise TrainingError("RBF output weights are non-finite")
    model = RbfModel(tuple(classes), centers, widths, _f32(W))
    model.train_loss = float(np.mean((model.outputs(X) - Y) ** 2))
    return model


def predict_rbf(model: RbfModel, features) -> np.ndarray:
    x, single = _as_query(model, features)
    s = model.scores(x)
    return s[0] if single else s


# ---------------------------------------------------------------------------
# TemplateSet-facing entry points and persistence

Model = Union[MlpModel, LvqModel, RbfModel]
_TRAINERS = {MLP: train_mlp_arrays, LVQ: train_lvq_arrays, RBF: train_rbf_arrays}


def train_model(family: str, train, cfg: TrainConfig) -> Model:
    """Train one base learner of ``family`` on a TemplateSet."""
    try:
        trainer = _TRAINERS[family]
    except KeyError:
        raise ValueError(f"unknown classifier family {family!r}") from None
    return trainer(train.features(), train.labels(), train.subjects, cfg)


def train_mlp(train, cfg: TrainConfig) -> MlpModel:
    return train_model(MLP, train, cfg)


def train_lvq(train, cfg: TrainConfig) -> LvqModel:
    return train_model(LVQ, train, cfg)


def train_rbf(train, cfg: TrainConfig) -> RbfModel:
    return train_model(RBF, train, cfg)


def predict(model: Model, features) -> np.ndarray:
    x, single = _as_query(model, features)
    s = model.scores(x)
    return s[0] if single else s


def _write_blob(out: io.BytesIO, a: np.ndarray) -> None:
    a = np.asarray(a)
    rows, cols = (a.shape[0], a.shape[1]) if a.ndim == 2 else (1, a.size)
    out.write(struct.pack("<II", rows, cols))
    out.write(a.astype("<f4").tobytes())


_MODEL_HEADER = "<BIIdd"


def write_models(models: Sequence[Model], path: str | Path | None = None, weights: Sequence[float] | None = None) -> bytes:
    """Serialize models sharing one class list; ``weights`` default to uniform."""
    if not models:
        raise ValueError("nothing to write")
    if weights is None:
        weights = [1.0 / len(models)] * len(models)
    if len(weights) != len(models):
        raise ValueError("one weight per model required")
    classes = models[0].classes
    out = io.BytesIO()
    out.write(MODEL_MAGIC)
    out.write(struct.pack("<II", len(models), len(classes)))
    for c in classes:
        raw = c.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
    for m, w in zip(models, weights):
        if m.classes != classes:
            raise ValueError("all models in one container must share the class list")
        blobs = m.blobs()
        out.write(struct.pack(_MODEL_HEADER, _FAMILY_TAGS[m.family], m.input_dim, m.hidden_units, m.train_loss, float(w)))
        out.write(struct.pack("<I", len(blobs)))
        for b in blobs:
            _write_blob(out, b)
    data = out.getvalue()
    if path is not None:
        Path(path).write_bytes(data)
    return data


def read_models(source: str | Path | bytes) -> list[Model]:
    return read_model_bundle(source)[0]


def read_model_bundle(source: str | Path | bytes) -> tuple[list[Model], list[float]]:
    """Models and their stored member weights."""
    data = source if isinstance(source, bytes) else Path(source).read_bytes()
    if not data.startswith(MODEL_MAGIC):
        raise ModelFormatError("not a model file (bad magic)")
    tags = {v: k for k, v in _FAMILY_TAGS.items()}
    models: list[Model] = []
    weights: list[float] = []
    try:
        pos = len(MODEL_MAGIC)
        n_models, n_classes = struct.unpack_from("<II", data, pos)
        pos += 8
        classes = []
        for _ in range(n_classes):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            classes.append(data[pos:pos + n].decode("utf-8"))
            pos += n
        classes_t = tuple(classes)
        for _ in range(n_models):
            tag, input_dim, hidden, loss, weight = struct.unpack_from(_MODEL_HEADER, data, pos)
            pos += struct.calcsize(_MODEL_HEADER)
            weights.append(weight)
            (n_blobs,) = struct.unpack_from("<I", data, pos)
            pos += 4
            blobs = []
            for _ in range(n_blobs):
                rows, cols = struct.unpack_from("<II", data, pos)
                pos += 8
                arr = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=pos).astype(np.float32)
                pos += 4 * rows * cols
                blobs.append(arr.reshape(rows, cols))
            family = tags[tag]
            if family == MLP:
                mean, std, w1, b1, w2, b2 = blobs
                m: Model = MlpModel(classes_t, mean[0], std[0], w1, b1[0], w2, b2[0], loss)
            elif family == LVQ:
                protos, labels = blobs
                m = LvqModel(classes_t, protos, labels[0].astype(np.int64), loss)
            else:
                centers, widths, out_w = blobs
                m = RbfModel(classes_t, centers, widths[0], out_w, loss)
            if m.input_dim != input_dim or m.hidden_units != hidden:
                raise ModelFormatError("model header disagrees with parameter shapes")
            models.append(m)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"corrupt model file: {exc}") from exc
    if pos != len(data):
        raise ModelFormatError("trailing bytes after model records")
    return models, weights
