"""Concept-bottleneck classifier: fixed block-diagonal weights or a trained
linear adapter.

Zero-shot weights give every concept of a class the uniform weight
1/|concepts of that class| and zero elsewhere, so the class logit is the
mean of its own concept scores. The trained adapter minimizes softmax
cross-entropy plus an optional L1 term with plain mini-batch SGD; scores
are stored f32 but all accumulation happens in f64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from ._rng import SALT_FEWSHOT, SALT_FIT, rng_for
from .concepts import ConceptLibrary
from .errors import DivergedLoss, NoLabels, ShapeError
from .scoring import ScoreMatrix

MODE_ZERO_SHOT = "zero_shot"
MODE_TRAINED = "trained"


@dataclass(frozen=True)
class AdapterWeights:
    matrix: np.ndarray  # (|C|, |Y|) float32
    mode: str
    l1_lambda: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.matrix)):
            raise ShapeError("adapter weights contain non-finite entries")

    def save(self, bin_path: str | Path, header_path: str | Path, iteration: int) -> None:
        mat = np.ascontiguousarray(self.matrix, dtype=np.float32)
        Path(bin_path).write_bytes(mat.tobytes())
        header = {
            "iteration": iteration,
            "mode": self.mode,
            "shape": list(mat.shape),
            "seed": self.seed,
            "l1_lambda": self.l1_lambda,
        }
        Path(header_path).write_text(json.dumps(header, sort_keys=True), encoding="utf-8")

    @staticmethod
    def load(bin_path: str | Path, header_path: str | Path) -> "AdapterWeights":
        header = json.loads(Path(header_path).read_text(encoding="utf-8"))
        shape = tuple(header["shape"])
        mat = np.frombuffer(Path(bin_path).read_bytes(), dtype=np.float32).reshape(shape)
        return AdapterWeights(
            matrix=mat.copy(),
            mode=header["mode"],
            l1_lambda=header["l1_lambda"],
            seed=header["seed"],
        )


@dataclass(frozen=True)
class PredictionMatrix:
    logits: np.ndarray  # (N, |Y|) float64
    argmax: np.ndarray  # (N,) int64, ties broken toward the lower class index

    @property
    def n_classes(self) -> int:
        return self.logits.shape[1]


def zero_shot_weights(lib: ConceptLibrary) -> AdapterWeights:
    """Block-diagonal uniform weights; every column sums to exactly 1."""
    n_concepts = lib.total_concepts()
    n_classes = len(lib.labels)
    mat = np.zeros((n_concepts, n_classes), dtype=np.float64)
    row = 0
    for class_idx, concepts in enumerate(lib.per_class):
        block = len(concepts)
        mat[row : row + block, class_idx] = 1.0 / block
        row += block
    return AdapterWeights(matrix=mat, mode=MODE_ZERO_SHOT)


def evaluate(weights: AdapterWeights, scores: ScoreMatrix) -> PredictionMatrix:
    """logits = scores @ weights, accumulated in f64."""
    if scores.values.shape[1] != weights.matrix.shape[0]:
        raise ShapeError(
            f"scores have {scores.values.shape[1]} columns but weights have "
            f"{weights.matrix.shape[0]} rows"
        )
    logits = scores.values.astype(np.float64) @ weights.matrix.astype(np.float64)
    return PredictionMatrix(logits=logits, argmax=np.argmax(logits, axis=1).astype(np.int64))


def accuracy(pred: PredictionMatrix, labels: np.ndarray | list[int]) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != pred.argmax.shape[0]:
        raise ShapeError("label count does not match prediction count")
    return float(np.mean(pred.argmax == labels))


def ce_objective(w: np.ndarray, x: np.ndarray, y: np.ndarray, l1_lambda: float = 0.0) -> float:
    """Full-batch mean cross-entropy plus L1 penalty, f64."""
    return _kernels._np_full_objective(
        np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64),
        np.asarray(w, dtype=np.float64), l1_lambda,
    )


def ce_gradient(w: np.ndarray, x: np.ndarray, y: np.ndarray, l1_lambda: float = 0.0) -> np.ndarray:
    """Analytic full-batch gradient of ce_objective with respect to w."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    w = np.asarray(w, dtype=np.float64)
    p = _kernels._np_softmax(x @ w)
    p[np.arange(x.shape[0]), y] -= 1.0
    grad = x.T @ p / x.shape[0]
    if l1_lambda > 0.0:
        grad = grad + l1_lambda * np.sign(w)
    return grad


@dataclass(frozen=True)
class FitConfig:
    lr: float = 1e-2
    epochs: int = 50
    batch_size: int = 32
    l1_lambda: float = 0.0
    seed: int = 0


def fit(
    init: AdapterWeights,
    scores: ScoreMatrix,
    labels: np.ndarray | list[int] | None,
    cfg: FitConfig,
) -> AdapterWeights:
    """Mini-batch SGD on softmax cross-entropy, deterministic given the seed.

    Weights come back as f32 so the in-memory state matches the persisted
    checkpoint exactly (resume continues bit-identically).
    """
    if labels is None:
        raise NoLabels("fit requires labels; zero-shot mode never trains")
    y = np.asarray(labels, dtype=np.int64)
    x = scores.values.astype(np.float64)
    if x.shape[0] != y.shape[0]:
        raise ShapeError("label count does not match score rows")
    if x.shape[1] != init.matrix.shape[0]:
        raise ShapeError("initial weights do not match score columns")
    w0 = init.matrix.astype(np.float64)
    if cfg.epochs == 0:
        return AdapterWeights(
            matrix=init.matrix.astype(np.float32).copy(),
            mode=MODE_TRAINED, l1_lambda=cfg.l1_lambda, seed=cfg.seed,
        )
    rng = rng_for(SALT_FIT, cfg.seed)
    perms = np.stack([rng.permutation(x.shape[0]) for _ in range(cfg.epochs)]).astype(np.int64)
    w, losses = _kernels.sgd_train(
        x, y, w0, float(cfg.lr), float(cfg.l1_lambda), int(cfg.batch_size), perms
    )
    if not np.all(np.isfinite(losses)) or not np.all(np.isfinite(w)):
        raise DivergedLoss(f"non-finite training loss at lr={cfg.lr}")
    return AdapterWeights(
        matrix=w.astype(np.float32), mode=MODE_TRAINED, l1_lambda=cfg.l1_lambda, seed=cfg.seed
    )


def warm_start(
    prev: AdapterWeights,
    prev_col_ids: list[str] | tuple[str, ...],
    new_col_ids: list[str] | tuple[str, ...],
) -> AdapterWeights:
    """Carry trained rows forward; rows for newly-added concepts start at 0."""
    n_classes = prev.matrix.shape[1]
    out = np.zeros((len(new_col_ids), n_classes), dtype=np.float32)
    by_id = {cid: i for i, cid in enumerate(prev_col_ids)}
    for row, cid in enumerate(new_col_ids):
        old_row = by_id.get(cid)
        if old_row is not None:
            out[row] = prev.matrix[old_row]
    return AdapterWeights(matrix=out, mode=prev.mode, l1_lambda=prev.l1_lambda, seed=prev.seed)


def few_shot_indices(labels: np.ndarray | list[int], n_per_class: int, seed: int) -> np.ndarray:
    """Label-balanced seeded subsample: n_per_class rows per class."""
    y = np.asarray(labels, dtype=np.int64)
    rng = rng_for(SALT_FEWSHOT, seed)
    picked: list[np.ndarray] = []
    for cls in np.unique(y):
        rows = np.flatnonzero(y == cls)
        if rows.shape[0] > n_per_class:
            rows = rng.choice(rows, size=n_per_class, replace=False)
        picked.append(np.sort(rows))
    return np.concatenate(picked)
