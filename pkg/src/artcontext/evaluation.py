"""Painting-to-sentence retrieval evaluation: ranked candidates, per-query
precision-recall curves upper-enveloped on a shared recall grid, pointwise
macro averaging, and plot-data export."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embeddings import EmbeddingMatrix, _cosine_scores
from .errors import (
    EmptyCandidates,
    EmptyInput,
    GridMismatch,
    NoPositives,
    ValidationError,
)
from .io_utils import atomic_write_text

RECALL_GRID: tuple[float, ...] = tuple(i / 100.0 for i in range(101))
MIN_CANDIDATES = 10


@dataclass
class EvalQuery:
    """One painting's labeled candidate list."""

    qid: str
    candidate_ids: list[str]
    scores: list[float]
    labels: list[int]

    def validate(self) -> None:
        if not (len(self.candidate_ids) == len(self.scores) == len(self.labels)):
            raise ValidationError(f"query {self.qid}: mismatched vector lengths")
        if len(self.candidate_ids) < MIN_CANDIDATES:
            raise ValidationError(
                f"query {self.qid}: needs >= {MIN_CANDIDATES} candidates"
            )
        if any(l not in (0, 1) for l in self.labels):
            raise ValidationError(f"query {self.qid}: labels must be 0/1")
        if not any(self.labels):
            raise NoPositives(f"query {self.qid} has no positive label")

    @staticmethod
    def from_json(d: dict) -> "EvalQuery":
        return EvalQuery(
            qid=d["qid"],
            candidate_ids=list(d["candidate_ids"]),
            scores=[float(s) for s in d.get("scores", [])],
            labels=[int(l) for l in d["labels"]],
        )

    def to_json(self) -> dict:
        return {
            "qid": self.qid,
            "candidate_ids": self.candidate_ids,
            "scores": self.scores,
            "labels": self.labels,
        }


@dataclass
class PRCurve:
    """Precision sampled on the shared recall grid, non-increasing."""

    precision: tuple[float, ...]
    recall_grid: tuple[float, ...] = field(default=RECALL_GRID)

    def __post_init__(self):
        self.precision = tuple(float(p) for p in self.precision)
        self.recall_grid = tuple(float(r) for r in self.recall_grid)
        if len(self.precision) != len(self.recall_grid):
            raise GridMismatch("precision and recall grid lengths differ")
        if any(p < 0.0 or p > 1.0 for p in self.precision):
            raise ValidationError("precision values must lie in [0, 1]")


def _ranking(scores, labels) -> list[int]:
    """Indices sorted by score descending; ties keep input order."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValidationError("scores must be a non-empty vector")
    if scores.size != len(labels):
        raise ValidationError("scores and labels lengths differ")
    return list(np.argsort(-scores, kind="stable"))


def pr_points(scores, labels) -> list[tuple[float, float]]:
    """(recall, precision) at every rank of the score-descending walk."""
    order = _ranking(scores, labels)
    total_pos = int(sum(labels))
    if total_pos == 0:
        raise NoPositives("no positive labels")
    points = []
    tp = 0
    for k, idx in enumerate(order, start=1):
        tp += int(labels[idx])
        points.append((tp / total_pos, tp / k))
    return points


def envelope_on_grid(points: list[tuple[float, float]]) -> PRCurve:
    """Upper envelope sampled on the shared grid.

    P(r) = max precision over all points whose recall is >= r. Output is
    non-increasing in r by construction.
    """
    if not points:
        raise EmptyInput("no PR points to envelope")
    ordered = sorted(points, key=lambda rp: rp[0])
    recalls = np.array([rp[0] for rp in ordered])
    precisions = np.array([rp[1] for rp in ordered])
    # suffix max: best precision at or beyond each point
    suffix = np.maximum.accumulate(precisions[::-1])[::-1]
    values = []
    for r in RECALL_GRID:
        i = int(np.searchsorted(recalls, r, side="left"))
        if i >= len(recalls):
            raise ValidationError(f"no PR point covers recall {r}")
        values.append(float(suffix[i]))
    return PRCurve(precision=tuple(values))


def macro_average(curves: list[PRCurve]) -> PRCurve:
    """Pointwise arithmetic mean of curves sharing the recall grid."""
    if not curves:
        raise EmptyInput("no curves to average")
    grid = curves[0].recall_grid
    for c in curves[1:]:
        if c.recall_grid != grid:
            raise GridMismatch("curves are on different recall grids")
    stacked = np.array([c.precision for c in curves], dtype=np.float64)
    return PRCurve(precision=tuple(stacked.mean(axis=0)), recall_grid=grid)


def average_precision(scores, labels) -> float:
    """Mean of precision@k over the ranks k holding positives."""
    order = _ranking(scores, labels)
    total_pos = int(sum(labels))
    if total_pos == 0:
        raise NoPositives("no positive labels")
    tp = 0
    precisions = []
    for k, idx in enumerate(order, start=1):
        if labels[idx]:
            tp += 1
            precisions.append(tp / k)
    return float(np.mean(precisions))


def rank_candidates(query_emb, cand_embs: EmbeddingMatrix, k: int) -> list[tuple[str, float]]:
    """Top-k (id, cosine score) pairs, score descending, ties by lowest index."""
    if len(cand_embs) == 0:
        raise EmptyCandidates("no candidate rows")
    if k < 1 or k > len(cand_embs):
        raise ValidationError(f"k={k} out of range 1..{len(cand_embs)}")
    scores = _cosine_scores(np.asarray(query_emb, dtype=np.float64), cand_embs)
    order = np.argsort(-scores, kind="stable")[:k]
    return [(cand_embs.ids[int(i)], float(scores[int(i)])) for i in order]


def emit_plot_data(baseline: PRCurve, adapted: PRCurve, path) -> None:
    """CSV with header recall,precision_baseline,precision_adapted; 101 data
    rows, six decimal places, LF line endings."""
    if baseline.recall_grid != adapted.recall_grid:
        raise GridMismatch("curves are on different recall grids")
    lines = ["recall,precision_baseline,precision_adapted"]
    for r, pb, pa in zip(baseline.recall_grid, baseline.precision, adapted.precision):
        lines.append(f"{r:.6f},{pb:.6f},{pa:.6f}")
    atomic_write_text(path, "\n".join(lines) + "\n")
