"""Binarization and structure-recovery metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

THRESHOLD = 0.05


@dataclass(frozen=True)
class BinaryGraph:
    edges: np.ndarray

    def __post_init__(self):
        e = np.array(self.edges, dtype=bool)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ConfigError("adjacency must be square")
        np.fill_diagonal(e, False)
        object.__setattr__(self, "edges", e)

    @property
    def dim(self) -> int:
        return self.edges.shape[0]

    @property
    def n_edges(self) -> int:
        return int(self.edges.sum())


def binarize(weights, threshold: float = THRESHOLD) -> BinaryGraph:
    if threshold < 0:
        raise ConfigError("threshold must be non-negative")
    w = np.asarray(getattr(weights, "weights", weights), dtype=float)
    return BinaryGraph(np.abs(w) > threshold)


def _check(pred, truth):
    if pred.dim != truth.dim:
        raise ConfigError("graphs differ in dimension")


def precision_recall_f1(pred: BinaryGraph, truth: BinaryGraph):
    """Directed-edge precision, recall and F1; empty denominators give 0."""
    _check(pred, truth)
    tp = int((pred.edges & truth.edges).sum())
    n_pred = pred.n_edges
    n_true = truth.n_edges
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_true if n_true else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def shd(pred: BinaryGraph, truth: BinaryGraph, reversal: str = "one") -> int:
    """Structural Hamming distance over unordered node pairs.

    Each pair whose edge status differs costs one edit, except that a
    reversed edge costs two under ``reversal="two"``.
    """
    _check(pred, truth)
    if reversal not in ("one", "two"):
        raise ConfigError("reversal must be 'one' or 'two'")
    p, t = pred.edges, truth.edges
    iu = np.triu_indices(pred.dim, 1)
    pf, pb = p[iu], p.T[iu]
    tf, tb = t[iu], t.T[iu]
    differ = (pf != tf) | (pb != tb)
    total = int(differ.sum())
    if reversal == "two":
        reversed_ = (pf & ~pb & tb & ~tf) | (pb & ~pf & tf & ~tb)
        total += int(reversed_.sum())
    return total


def evaluate(weights, truth, threshold: float = THRESHOLD, reversal: str = "one") -> dict:
    pred = binarize(weights, threshold)
    true = binarize(truth, 0.0)
    precision, recall, f1 = precision_recall_f1(pred, true)
    return {
        "threshold": threshold,
        "n_pred": pred.n_edges,
        "n_true": true.n_edges,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "shd": shd(pred, true, reversal),
    }
