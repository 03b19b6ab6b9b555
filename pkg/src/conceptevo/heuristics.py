"""Pairwise class-confusion heuristics over prediction logits.

Every heuristic maps an (N, |Y|) logit matrix to a symmetric |Y| x |Y|
report with zero diagonal. Label-free heuristics read only the logits;
the labeled confusion matrix is the one exception and is kept separate.
Negative correlations are preserved here; clamping to zero is the pair
sampler's job.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from . import _kernels
from .adapter import PredictionMatrix
from .errors import DegenerateColumn, ShapeError


@dataclass(frozen=True)
class ConfusionReport:
    r: np.ndarray  # (|Y|, |Y|) float64, symmetric, zero diagonal
    heuristic: str
    iteration: int = 0

    def __post_init__(self):
        if self.r.ndim != 2 or self.r.shape[0] != self.r.shape[1]:
            raise ShapeError("confusion report must be square")
        if not np.all(np.isfinite(self.r)):
            raise ShapeError("confusion report contains non-finite entries")

    def n_classes(self) -> int:
        return self.r.shape[0]

    def to_json(self, labels: list[str] | tuple[str, ...]) -> dict:
        return {
            "iteration": self.iteration,
            "heuristic": self.heuristic,
            "labels": list(labels),
            "r": self.r.tolist(),
        }

    def save(self, path: str | Path, labels: list[str] | tuple[str, ...]) -> None:
        Path(path).write_text(
            json.dumps(self.to_json(labels), sort_keys=True), encoding="utf-8"
        )


def _finish(r: np.ndarray, heuristic: str, iteration: int) -> ConfusionReport:
    np.fill_diagonal(r, 0.0)
    return ConfusionReport(r=r, heuristic=heuristic, iteration=iteration)


def topk_confusion(pred: PredictionMatrix, k: int, *, iteration: int = 0) -> ConfusionReport:
    """Count, for each pair, the images whose k best-scoring classes contain both."""
    n_classes = pred.n_classes
    if not 2 <= k <= n_classes:
        raise ValueError(f"k must be in [2, {n_classes}], got {k}")
    top = _kernels.topk_indices(pred.logits, k)
    r = np.zeros((n_classes, n_classes), dtype=np.float64)
    for row in top:
        for a, b in combinations(row, 2):
            r[a, b] += 1.0
            r[b, a] += 1.0
    return _finish(r, f"topk(k={k})", iteration)


def _column_stds(logits: np.ndarray) -> np.ndarray:
    stds = logits.std(axis=0)
    for idx in np.flatnonzero(stds == 0.0):
        raise DegenerateColumn(int(idx))
    return stds


def pearson_confusion(pred: PredictionMatrix, *, iteration: int = 0) -> ConfusionReport:
    """Pearson correlation between logit columns."""
    logits = pred.logits.astype(np.float64)
    if logits.shape[0] < 2:
        raise ShapeError("pearson confusion needs at least 2 images")
    _column_stds(logits)
    r = np.corrcoef(logits, rowvar=False)
    r = np.clip((r + r.T) / 2.0, -1.0, 1.0)  # corrcoef is not bit-symmetric
    return _finish(r, "pearson", iteration)


def labeled_confusion(
    pred: PredictionMatrix, labels: np.ndarray | list[int], *, iteration: int = 0
) -> ConfusionReport:
    """Symmetrized misprediction counts from a labeled confusion matrix."""
    y = np.asarray(labels, dtype=np.int64)
    n_classes = pred.n_classes
    counts = np.zeros((n_classes, n_classes), dtype=np.float64)
    np.add.at(counts, (y, pred.argmax), 1.0)
    r = counts + counts.T
    return _finish(r, "labeled_confusion", iteration)


def agglomerative_confusion(
    pred: PredictionMatrix, n_clusters: int, *, iteration: int = 0
) -> ConfusionReport:
    """Average-linkage clustering of logit columns under 1 - pearson distance.

    The earliest merge scores 1.0 and each later merge (M - rank + 1)/M for
    M = |Y| - 1 total possible merges; pairs still separate at the
    n_clusters cut score 0.
    """
    n_classes = pred.n_classes
    if not 1 <= n_clusters <= n_classes:
        raise ValueError(f"n_clusters must be in [1, {n_classes}]")
    logits = pred.logits.astype(np.float64)
    _column_stds(logits)
    corr = np.clip(np.corrcoef(logits, rowvar=False), -1.0, 1.0)
    dist = 1.0 - corr

    clusters: list[list[int]] = [[i] for i in range(n_classes)]
    total_merges = n_classes - 1
    allowed = n_classes - n_clusters
    r = np.zeros((n_classes, n_classes), dtype=np.float64)
    for rank in range(1, allowed + 1):
        best = None
        best_d = np.inf
        for a, b in combinations(range(len(clusters)), 2):
            d = float(np.mean([dist[i, j] for i in clusters[a] for j in clusters[b]]))
            if d < best_d:
                best_d = d
                best = (a, b)
        a, b = best
        value = (total_merges - rank + 1) / total_merges
        for i in clusters[a]:
            for j in clusters[b]:
                r[i, j] = value
                r[j, i] = value
        clusters[a] = clusters[a] + clusters[b]
        del clusters[b]
    return _finish(r, f"agglomerative(n_clusters={n_clusters})", iteration)


def emd_confusion(pred: PredictionMatrix, *, iteration: int = 0) -> ConfusionReport:
    """1/(1 + W1) over empirical column distributions.

    For equal-mass 1-D distributions W1 is the mean absolute difference of
    the sorted samples, so identical columns score exactly 1.
    """
    logits = pred.logits.astype(np.float64)
    if logits.shape[0] < 2:
        raise ShapeError("emd confusion needs at least 2 images")
    sorted_cols = np.sort(logits, axis=0)
    w1 = _kernels.pairwise_sorted_l1(sorted_cols)
    r = 1.0 / (1.0 + w1)
    return _finish(r, "emd", iteration)


def pca_corr_confusion(
    pred: PredictionMatrix, n_components: int, *, iteration: int = 0
) -> ConfusionReport:
    """Correlation of logit columns inside the top principal subspace.

    Columns are centered once (in image space); similarity is the cosine of
    the projected columns, which for the full-rank projection reproduces
    plain Pearson correlation.
    """
    logits = pred.logits.astype(np.float64)
    n, m = logits.shape
    if not 1 <= n_components <= min(n, m):
        raise ValueError(f"n_components must be in [1, {min(n, m)}]")
    centered = logits - logits.mean(axis=0, keepdims=True)
    u, _, _ = np.linalg.svd(centered, full_matrices=False)
    proj = u[:, :n_components].T @ centered  # (p, |Y|)
    norms = np.linalg.norm(proj, axis=0)
    for idx in np.flatnonzero(norms < 1e-12):
        raise DegenerateColumn(int(idx))
    r = (proj.T @ proj) / np.outer(norms, norms)
    r = np.clip((r + r.T) / 2.0, -1.0, 1.0)
    return _finish(r, f"pca_corr(n_components={n_components})", iteration)


def random_report(
    n_classes: int, rng: np.random.Generator, *, iteration: int = 0
) -> ConfusionReport:
    """Uninformative symmetric report for the critic-ablation runs."""
    upper = rng.uniform(0.0, 1.0, size=(n_classes, n_classes))
    r = np.triu(upper, k=1)
    r = r + r.T
    return _finish(r, "random", iteration)
