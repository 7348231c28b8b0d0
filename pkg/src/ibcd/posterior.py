"""Posterior summaries: mean graph, edge inclusion probabilities, calibration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError

EPSILON = 0.05
LOG_FLOOR = 1e-6


def _as_graphs(draws) -> np.ndarray:
    """Accept PosteriorDraws or an array of shape (..., D, D)."""
    if hasattr(draws, "graphs"):
        g = draws.graphs()
    else:
        g = np.asarray(draws, dtype=float)
        if g.ndim < 2 or g.shape[-1] != g.shape[-2]:
            raise ConfigError("draws must end in square D x D matrices")
        g = g.reshape(-1, g.shape[-2], g.shape[-1])
    if g.shape[0] == 0:
        raise ConfigError("no draws")
    return g


def posterior_mean_graph(draws) -> np.ndarray:
    g = _as_graphs(draws)
    out = g.mean(axis=0)
    np.fill_diagonal(out, 0.0)
    return out


def pip(draws, epsilon: float = EPSILON) -> np.ndarray:
    """Fraction of draws with |G_ij| > epsilon."""
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    g = _as_graphs(draws)
    out = (np.abs(g) > epsilon).mean(axis=0)
    np.fill_diagonal(out, 0.0)
    return out


@dataclass
class PosteriorSummary:
    mean_g: np.ndarray
    pip: np.ndarray
    epsilon: float = EPSILON

    @classmethod
    def from_draws(cls, draws, epsilon: float = EPSILON):
        return cls(posterior_mean_graph(draws), pip(draws, epsilon), epsilon)


@dataclass
class CalibrationRow:
    bin: int
    low: float
    high: float
    mean_pip: float
    precision: float
    count: int


def calibration_curve(pip_matrix, truth, bins: int = 10) -> list[CalibrationRow]:
    """Bucket off-diagonal edges by PIP and report the share of true edges per bucket.

    Buckets are [k/bins, (k+1)/bins) with the last one closed, so they
    partition [0, 1]. Empty buckets are reported with count 0 and NaN stats.
    """
    p = np.asarray(pip_matrix, dtype=float)
    t = np.asarray(getattr(truth, "weights", truth))
    if p.shape != t.shape:
        raise ConfigError("PIP and truth shapes differ")
    if bins < 1:
        raise ConfigError("need at least one bin")
    off = ~np.eye(p.shape[0], dtype=bool)
    vals = p[off]
    real = t[off] != 0
    if vals.size == 0:
        raise ConfigError("no edges to calibrate")
    idx = np.minimum((vals * bins).astype(int), bins - 1)
    rows = []
    for k in range(bins):
        sel = idx == k
        n = int(sel.sum())
        rows.append(
            CalibrationRow(
                k,
                k / bins,
                (k + 1) / bins,
                float(vals[sel].mean()) if n else float("nan"),
                float(real[sel].mean()) if n else float("nan"),
                n,
            )
        )
    return rows


def pip_agreement(pip_a, pip_b, floor: float = LOG_FLOOR) -> float:
    """Pearson correlation of log PIPs over off-diagonal edges."""
    a = np.asarray(pip_a, dtype=float)
    b = np.asarray(pip_b, dtype=float)
    if a.shape != b.shape:
        raise ConfigError("PIP matrices differ in shape")
    off = ~np.eye(a.shape[0], dtype=bool)
    la = np.log(np.maximum(a[off], floor))
    lb = np.log(np.maximum(b[off], floor))
    if np.ptp(la) == 0 or np.ptp(lb) == 0:
        raise NumericalError("log PIPs have zero variance")
    return float(np.corrcoef(la, lb)[0, 1])
