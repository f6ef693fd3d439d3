"""Combined classifiers: seeded same-family ensembles and their fusion rules.

Four rules combine the members' score vectors for one probe:

* ``MV``     each member votes its argmax; most votes wins, ties go to the
             larger summed score, then to the smaller label.
* ``WSUM``   weighted sum of scores; ties go to the smaller label.
* ``PROD``   product of scores floored at 1e-12, renormalized.
* ``BORDA``  member rankings earn C-1-r points at rank r; ties go to WSUM,
             then to the smaller label.

Sums and products are evaluated with ``math.fsum`` (products as sums of
logs), which is exactly rounded and therefore independent of member order.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .classifiers import FAMILIES, Model, TrainConfig, TrainingError, read_model_bundle, train_model, write_models
from .template import SplitSpec, TemplateSet, split_indices

PROD_FLOOR = 1e-12
WEIGHT_TOLERANCE = 1e-9
HOLDOUT_FRACTION = 0.2


class FusionRule(str, Enum):
    MV = "MV"
    WSUM = "WSUM"
    PROD = "PROD"
    BORDA = "BORDA"


RULES = tuple(FusionRule)


@dataclass(frozen=True)
class Decision:
    predicted_class: str
    fused_scores: np.ndarray
    rule: FusionRule


@dataclass(eq=False)
class Ensemble:
    family: str
    members: list[Model]
    member_weights: np.ndarray

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        first = self.members[0]
        for i, m in enumerate(self.members):
            if m.family != self.family:
                raise ValueError(f"member {i} is {m.family}, ensemble is {self.family}")
            if m.classes != first.classes or m.input_dim != first.input_dim:
                raise ValueError(f"member {i} disagrees on class list or input dimension")
        self.member_weights = check_weights(self.member_weights, len(self.members))

    @property
    def classes(self) -> tuple[str, ...]:
        return self.members[0].classes

    @property
    def size(self) -> int:
        return len(self.members)

    def member_scores(self, X: np.ndarray) -> np.ndarray:
        """Scores of every member for every row of X, shape (M, N, C)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.stack([m.scores(X) for m in self.members])

    def decide(self, X: np.ndarray, rule: FusionRule | str) -> list[Decision]:
        S = self.member_scores(X)
        return [fuse(S[:, n, :], rule, self.member_weights, self.classes) for n in range(S.shape[1])]


def check_weights(weights, m: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (m,):
        raise ValueError(f"expected {m} weights, got {w.size}")
    if np.any(w < 0) or not np.all(np.isfinite(w)) or abs(math.fsum(w) - 1.0) > WEIGHT_TOLERANCE:
        raise ValueError("weights must be non-negative and sum to 1")
    return w


def _train_member(family: str, train: TemplateSet, cfg: TrainConfig, i: int) -> Model:
    try:
        return train_model(family, train, replace(cfg, seed=cfg.seed + i))
    except TrainingError as exc:
        raise TrainingError(f"{family} member {i}: {exc}") from exc


def train_ensemble(
    family: str,
    train: TemplateSet,
    cfg: TrainConfig,
    M: int = 5,
    accuracy_weights: bool = False,
    threads: int = 1,
) -> Ensemble:
    """Train M members with seeds cfg.seed + i.

    With ``accuracy_weights`` the members are fit on 80% of ``train`` and
    weighted by their accuracy on the held-out 20%; otherwise weights are
    uniform and members see all of ``train``.
    """
    if M < 1:
        raise ValueError("ensemble size M must be >= 1")
    fit_set, holdout = train, None
    if accuracy_weights:
        fit_idx, hold_idx = split_indices(train.labels(), SplitSpec(1.0 - HOLDOUT_FRACTION, seed=cfg.seed))
        fit_set, holdout = train.subset(fit_idx), train.subset(hold_idx)
    if threads > 1 and M > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            members = list(pool.map(lambda i: _train_member(family, fit_set, cfg, i), range(M)))
    else:
        members = [_train_member(family, fit_set, cfg, i) for i in range(M)]
    weights = np.full(M, 1.0 / M)
    if holdout is not None:
        X, y = holdout.features(), holdout.labels()
        acc = np.array([np.mean(m.scores(X).argmax(axis=1) == y) for m in members])
        total = math.fsum(acc)
        if total > 0:
            weights = acc / total
    return Ensemble(family, members, weights)


def diversity(e: Ensemble, validation: TemplateSet) -> np.ndarray:
    """Pairwise disagreement: fraction of templates where members i and j differ in argmax."""
    if len(validation) == 0:
        raise ValueError("diversity needs a non-empty validation set")
    preds = e.member_scores(validation.features()).argmax(axis=2)
    return (preds[:, None, :] != preds[None, :, :]).mean(axis=2)


def _best(values: Sequence[float], candidates: Sequence[int]) -> list[int]:
    top = max(values[c] for c in candidates)
    return [c for c in candidates if values[c] == top]


def _smallest_label(candidates: Sequence[int], labels: Sequence[str]) -> int:
    return min(candidates, key=lambda c: labels[c])


def _member_argmax(row: np.ndarray, labels: Sequence[str]) -> int:
    return _smallest_label(np.flatnonzero(row == row.max()).tolist(), labels)


def _wsum(S: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.array([math.fsum(w * S[:, c]) for c in range(S.shape[1])])


def fuse(
    member_scores,
    rule: FusionRule | str,
    weights=None,
    classes: Sequence[str] | None = None,
) -> Decision:
    """Fuse an (M, C) block of member score vectors into one Decision."""
    rule = FusionRule(rule)
    S = np.atleast_2d(np.asarray(member_scores, dtype=np.float64))
    M, C = S.shape
    if M == 0 or C == 0:
        raise ValueError("fusion needs at least one member and one class")
    labels = list(classes) if classes is not None else [str(c) for c in range(C)]
    if len(labels) != C:
        raise ValueError(f"{C} scores per member but {len(labels)} class labels")
    w = np.full(M, 1.0 / M) if weights is None else check_weights(weights, M)
    everyone = list(range(C))

    if rule is FusionRule.MV:
        votes = np.zeros(C)
        for row in S:
            votes[_member_argmax(row, labels)] += 1
        tied = _best(votes, everyone)
        if len(tied) > 1:
            sums = [math.fsum(S[:, c]) for c in range(C)]
            tied = _best(sums, tied)
        winner = _smallest_label(tied, labels)
        fused = votes / M
    elif rule is FusionRule.WSUM:
        fused = _wsum(S, w)
        winner = _smallest_label(_best(fused, everyone), labels)
        total = math.fsum(fused)
        fused = fused / total if total > 0 else np.full(C, 1.0 / C)
    elif rule is FusionRule.PROD:
        logs = np.array([math.fsum(np.log(np.maximum(S[:, c], PROD_FLOOR))) for c in range(C)])
        winner = _smallest_label(_best(logs, everyone), labels)
        e = np.exp(logs - logs.max())
        fused = e / e.sum()
    else:
        points = np.zeros(C)
        for row in S:
            order = sorted(everyone, key=lambda c: (-row[c], labels[c]))
            for r, c in enumerate(order):
                points[c] += C - 1 - r
        tied = _best(points, everyone)
        if len(tied) > 1:
            tied = _best(_wsum(S, w), tied)
        winner = _smallest_label(tied, labels)
        total = points.sum()
        fused = points / total if total > 0 else np.full(C, 1.0 / C)
    return Decision(labels[winner], fused, rule)


def fuse_views(per_view, rule: FusionRule | str, classes: Sequence[str] | None = None) -> Decision:
    """Pool the members of every (view_angle, (M, C) scores) entry, then fuse with uniform weights."""
    blocks = [np.atleast_2d(np.asarray(scores, dtype=np.float64)) for _, scores in per_view]
    if not blocks:
        raise ValueError("fuse_views needs at least one view")
    widths = {b.shape[1] for b in blocks}
    if len(widths) != 1:
        raise ValueError("views disagree on the number of classes")
    return fuse(np.vstack(blocks), rule, None, classes)


# ---------------------------------------------------------------------------
# persistence and decision logs


def write_ensembles(ensembles: Sequence[Ensemble], path: str | Path | None = None) -> bytes:
    """All members of all ensembles in one model container, grouped by family."""
    models = [m for e in ensembles for m in e.members]
    weights = [float(w) for e in ensembles for w in e.member_weights]
    return write_models(models, path, weights)


def read_ensembles(source: str | Path | bytes) -> list[Ensemble]:
    models, weights = read_model_bundle(source)
    groups: dict[str, tuple[list, list]] = {}
    for m, w in zip(models, weights):
        ms, ws = groups.setdefault(m.family, ([], []))
        ms.append(m)
        ws.append(w)
    return [Ensemble(f, ms, np.asarray(ws)) for f, (ms, ws) in groups.items()]


LOG_HEADER = ("probe_id", "true_class", "rule", "family", "predicted", "correct")


@dataclass(frozen=True)
class DecisionRecord:
    probe_id: str
    true_class: str
    rule: str
    family: str
    predicted: str

    @property
    def correct(self) -> bool:
        return self.predicted == self.true_class


def decision_log_csv(records: Iterable[DecisionRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in records:
        w.writerow((r.probe_id, r.true_class, r.rule, r.family, r.predicted, int(r.correct)))
    return buf.getvalue()


def read_decision_log(path: str | Path) -> list[DecisionRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [DecisionRecord(r["probe_id"], r["true_class"], r["rule"], r["family"], r["predicted"]) for r in rows]


__all__ = [
    "FusionRule", "RULES", "Decision", "Ensemble", "train_ensemble", "diversity", "fuse", "fuse_views",
    "write_ensembles", "read_ensembles", "DecisionRecord", "decision_log_csv", "read_decision_log",
    "check_weights",
]
