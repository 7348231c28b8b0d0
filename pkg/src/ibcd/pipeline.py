"""End-to-end fit: dataset -> total-effect summary -> edge prior -> NUTS draws."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import evalmetrics, posterior, priorfit, tce
from .errors import ConfigError
from .model import PosteriorDensity
from .sampler import NutsConfig, PosteriorDraws, diagnostics, run_nuts
from .simcore import Dataset

PRIOR_MODES = ("er", "sf", "oracle", "global-uniform")


def build_prior(summary, control_y, mode: str = "er", truth=None, topology: str = "ER",
                triangle: str = "full") -> priorfit.EdgePriorField:
    """``global-uniform`` is the global EM fit of ``topology`` without localization."""
    mode = mode.lower()
    if mode in ("er", "sf"):
        return priorfit.fit_prior(summary, control_y, mode.upper(), localize=True, triangle=triangle)
    if mode == "global-uniform":
        return priorfit.fit_prior(summary, control_y, topology, localize=False)
    if mode == "oracle":
        if truth is None:
            raise ConfigError("oracle prior needs the true graph")
        return priorfit.oracle_prior(truth)
    raise ConfigError(f"unknown prior mode {mode!r}; expected one of {PRIOR_MODES}")


@dataclass
class FitResult:
    summary: tce.TceSummary
    prior: priorfit.EdgePriorField
    draws: PosteriorDraws
    mean_graph: np.ndarray
    pip: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def evaluate(self, truth, threshold: float = evalmetrics.THRESHOLD, reversal: str = "one") -> dict:
        return evalmetrics.evaluate(self.mean_graph, truth, threshold, reversal)


def fit(data: Dataset, prior_mode: str = "er", nuts: NutsConfig | None = None, truth=None,
        method: str = "iv", epsilon: float = posterior.EPSILON, topology: str = "ER") -> FitResult:
    nuts = nuts or NutsConfig()
    summary = tce.build_summary(data, method=method)
    prior = build_prior(summary, data.Y[data.control_rows], prior_mode, truth=truth, topology=topology)
    density = PosteriorDensity.from_summary(summary, prior)
    draws = run_nuts(density, nuts)
    graphs = draws.graphs()
    return FitResult(
        summary=summary,
        prior=prior,
        draws=draws,
        mean_graph=posterior.posterior_mean_graph(graphs),
        pip=posterior.pip(graphs, epsilon),
        diagnostics=diagnostics(draws),
    )
