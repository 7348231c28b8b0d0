"""Preparation of external expression-style matrices.

Covariates are regressed out gene by gene, then residuals are standardized
within each group (batch) against that group's control rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError


@dataclass
class CovariateSpec:
    covariates: np.ndarray
    group_labels: np.ndarray
    control_mask: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.covariates, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        self.covariates = c
        self.group_labels = np.asarray(self.group_labels)
        self.control_mask = np.asarray(self.control_mask, dtype=bool)
        n = c.shape[0]
        if c.shape[1] < 1:
            raise ConfigError("need at least one covariate")
        if self.group_labels.shape != (n,) or self.control_mask.shape != (n,):
            raise ConfigError("group labels and control mask must have one entry per row")
        for g in np.unique(self.group_labels):
            if np.sum(self.control_mask & (self.group_labels == g)) < 2:
                raise ConfigError(f"group '{g}' has fewer than two control rows")

    @property
    def n_rows(self) -> int:
        return self.covariates.shape[0]


def residualize(y, cov: CovariateSpec) -> np.ndarray:
    """Residuals of each column of ``y`` after least squares on [1, covariates].

    Covariates that are identically zero carry no information and are dropped
    before the rank check.
    """
    y = np.asarray(y, dtype=float)
    if y.shape[0] != cov.n_rows:
        raise ConfigError("y and covariates differ in row count")
    c = cov.covariates
    keep = np.any(c != 0, axis=0)
    x = np.column_stack([np.ones(y.shape[0]), c[:, keep]])
    coef, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    if rank < x.shape[1]:
        raise NumericalError("covariate design is rank deficient")
    return y - x @ coef


def ntc_standardize(resid, cov: CovariateSpec) -> np.ndarray:
    """(resid - control mean) / control SD per column and group (ddof=1)."""
    r = np.asarray(resid, dtype=float)
    if r.shape[0] != cov.n_rows:
        raise ConfigError("residuals and covariate spec differ in row count")
    out = np.empty_like(r)
    for g in np.unique(cov.group_labels):
        rows = cov.group_labels == g
        ctrl = r[rows & cov.control_mask]
        mu = ctrl.mean(axis=0)
        sd = ctrl.std(axis=0, ddof=1)
        if np.any(sd <= 0):
            j = int(np.flatnonzero(sd <= 0)[0])
            raise NumericalError(f"zero control SD for column {j} in group '{g}'")
        out[rows] = (r[rows] - mu) / sd
    return out


def instrument_filter(z, targets, control_mask, min_effect: float = -0.75, min_cells: int = 50):
    """Columns kept for analysis.

    ``targets[c]`` is the variable index perturbed in row c (-1 for controls
    or untargeted rows). A variable is kept when at least ``min_cells`` rows
    target it and its mean standardized value in those rows is at or below
    ``min_effect`` (a knock-down of that many control SDs).
    """
    z = np.asarray(z, dtype=float)
    targets = np.asarray(targets)
    control_mask = np.asarray(control_mask, dtype=bool)
    keep = np.zeros(z.shape[1], dtype=bool)
    for j in range(z.shape[1]):
        rows = (targets == j) & ~control_mask
        if rows.sum() >= min_cells and z[rows, j].mean() <= min_effect:
            keep[j] = True
    return keep
