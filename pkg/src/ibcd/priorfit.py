"""Empirical-Bayes edge priors.

A global inclusion level is fitted first, either from a normal scale mixture
over the off-diagonal total effects (ER form) or from a row/column marginal
matching problem on the squared effects (SF form). The global level is then
spread over edges using squared control-data covariances as local evidence.

All routines here are deterministic functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ConvergenceError, NumericalError

SIGMA0_SQ = 1e-3
TAU = 0.1
ALPHA = 2.0


def default_slab_grid(k: int = 10, low: float = 1e-2, high: float = 1.0) -> np.ndarray:
    """Log-spaced slab variances.

    The lower end sits above the spike variance so the spike stays the
    narrowest component.
    """
    return np.logspace(np.log10(low), np.log10(high), k)


@dataclass
class MixtureGrid:
    sigma0_sq: float
    slab_variances: np.ndarray
    weights: np.ndarray  # [pi0, pi1, ..., piK]
    objective: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    alpha: float = ALPHA

    def __post_init__(self):
        self.slab_variances = np.asarray(self.slab_variances, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.weights) != len(self.slab_variances) + 1:
            raise ConfigError("need one weight per slab plus the spike")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1) > 1e-10:
            raise NumericalError("mixture weights must be a probability vector")
        if not self.sigma0_sq < self.slab_variances.min():
            raise ConfigError("spike variance must be below every slab variance")

    @property
    def pi0(self) -> float:
        return float(self.weights[0])


def _component_logpdf(w, s2, variances):
    # N x (K+1) matrix of log N(w; 0, var + s^2)
    tot = variances[None, :] + s2[:, None]
    return -0.5 * (np.log(2 * np.pi * tot) + w[:, None] ** 2 / tot)


def _logsumexp_rows(a):
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def penalized_objective(weights, logf, alpha=ALPHA) -> float:
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    ll = _logsumexp_rows(logf + logw[None, :]).sum()
    return float(ll + (alpha - 1) * logw[1:].sum())


def em_fit_global(
    effects,
    ses,
    grid=None,
    alpha: float = ALPHA,
    sigma0_sq: float = SIGMA0_SQ,
    tol: float = 1e-8,
    max_iter: int = 500,
    init=None,
) -> MixtureGrid:
    """Penalized EM for spike weight and slab weights over a fixed variance grid.

    ``effects`` and ``ses`` are flat arrays of equal length (typically the
    off-diagonal total effects and their standard errors). The penalty
    ``(alpha - 1) * sum(log pi_k)`` acts on the slab weights only.
    """
    w = np.asarray(effects, dtype=float).ravel()
    s = np.asarray(ses, dtype=float).ravel()
    if w.size == 0:
        raise ConfigError("no effects to fit")
    if w.shape != s.shape:
        raise ConfigError("effects and standard errors differ in length")
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(s))):
        raise NumericalError("non-finite effect or standard error")
    grid = default_slab_grid() if grid is None else np.asarray(grid, dtype=float)
    if grid.size < 1:
        raise ConfigError("slab grid is empty")
    if alpha < 1:
        raise ConfigError("alpha must be at least 1")
    variances = np.concatenate([[sigma0_sq], grid])
    k = grid.size
    n = w.size
    logf = _component_logpdf(w, s**2, variances)

    pi = np.full(k + 1, 1.0 / (k + 1)) if init is None else np.asarray(init, dtype=float)
    trace = [penalized_objective(pi, logf, alpha)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        with np.errstate(divide="ignore"):
            lp = logf + np.log(pi)[None, :]
        resp = np.exp(lp - _logsumexp_rows(lp)[:, None])
        counts = resp.sum(axis=0)
        denom = n + (alpha - 1) * k
        pi = np.empty(k + 1)
        pi[0] = counts[0] / denom
        pi[1:] = (counts[1:] + alpha - 1) / denom
        pi /= pi.sum()  # removes rounding drift only
        obj = penalized_objective(pi, logf, alpha)
        if not np.isfinite(obj):
            raise NumericalError("EM objective became non-finite")
        trace.append(obj)
        if abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
    return MixtureGrid(sigma0_sq, grid, pi, trace, it, converged, alpha)


@dataclass
class InteractionStrength:
    xi: np.ndarray
    sigma: np.ndarray
    pre_clamp_max: float


def interaction_strength(control_y) -> InteractionStrength:
    """Squared control covariances, normalized by the squared Frobenius norm."""
    y = np.asarray(control_y, dtype=float)
    if y.ndim != 2 or y.shape[0] < 2:
        raise ConfigError("need at least two control rows")
    sigma = np.cov(y, rowvar=False, ddof=1)
    sigma = np.atleast_2d(sigma)
    if np.any(np.diag(sigma) <= 0):
        bad = int(np.flatnonzero(np.diag(sigma) <= 0)[0])
        raise NumericalError(f"control column {bad} is constant")
    sq = sigma * sigma
    xi = sq / np.sum(sq * sq)
    raw_max = float(xi.max())
    return InteractionStrength(np.clip(xi, 0.0, 1.0), sigma, raw_max)


@dataclass
class EdgePriorField:
    pi0: np.ndarray
    tau: float = TAU
    sigma0_sq: float = SIGMA0_SQ
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.array(self.pi0, dtype=float)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise ConfigError("pi0 must be a square matrix")
        if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
            raise NumericalError("spike weights must lie in [0, 1]")
        np.fill_diagonal(p, 1.0)
        self.pi0 = p
        if self.tau <= 0 or self.sigma0_sq <= 0:
            raise ConfigError("tau and sigma0_sq must be positive")

    @property
    def dim(self) -> int:
        return self.pi0.shape[0]

    def off_diagonal(self) -> np.ndarray:
        return self.pi0[~np.eye(self.dim, dtype=bool)]


def project_capped_sum(target, total: float, tol: float = 1e-12) -> np.ndarray:
    """Euclidean projection of ``target`` onto {x in [0,1]^n : sum(x) = total}.

    The solution is clip(target - mu, 0, 1) for a scalar mu; mu is bracketed
    by bisection and then solved exactly on the final free set.
    """
    t = np.asarray(target, dtype=float)
    n = t.size
    if n == 0:
        if abs(total) > tol:
            raise ConfigError("sum constraint on an empty set")
        return t.copy()
    if total < -tol or total > n + tol:
        raise ConfigError(f"sum {total} is infeasible for {n} entries in [0, 1]")
    total = min(max(total, 0.0), float(n))

    def excess(mu):
        return np.clip(t - mu, 0.0, 1.0).sum() - total

    lo, hi = t.min() - 1.0, t.max()
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
    mu = 0.5 * (lo + hi)
    x = np.clip(t - mu, 0.0, 1.0)
    free = (t - mu > 0) & (t - mu < 1)
    if free.any():
        # exact multiplier for the identified active set
        mu = (t[free].sum() - (total - (~free & (t - mu >= 1)).sum())) / free.sum()
        x_new = np.clip(t - mu, 0.0, 1.0)
        if abs(x_new.sum() - total) <= abs(x.sum() - total):
            x = x_new
    return x


def localize_er(xi, global_pi0: float, **kw) -> EdgePriorField:
    """Spread a global spike weight over edges in proportion to local evidence.

    Solves min sum_{i!=j} (pi_k - xi)^2 + (pi_0 - (1 - xi))^2 with
    pi_0 + pi_k = 1, box constraints and sum_{i!=j} pi_0 = global_pi0 (D^2 - D).
    Eliminating pi_k leaves a projection of 1 - xi.
    """
    xi = np.asarray(xi, dtype=float)
    d = xi.shape[0]
    if not 0.0 <= global_pi0 <= 1.0:
        raise ConfigError("global spike weight must lie in [0, 1]")
    off = ~np.eye(d, dtype=bool)
    pi0 = np.ones((d, d))
    pi0[off] = project_capped_sum(1.0 - xi[off], global_pi0 * (d * d - d))
    info = {"mode": "er", "global_pi0": float(global_pi0)}
    return EdgePriorField(pi0, info=info, **kw)


@dataclass
class SfWeights:
    theta: np.ndarray
    phi: np.ndarray
    p_matrix: np.ndarray
    n_iter: int = 0
    grad_map_norm: float = 0.0

    def node_sparsity(self, triangle: str = "full") -> np.ndarray:
        """Per-node spike level: mean of 1 - P over the node's constrained entries."""
        d = self.p_matrix.shape[0]
        out = np.ones(d)
        for i, cols in enumerate(_row_sets(d, triangle)):
            if cols.size:
                out[i] = np.mean(1.0 - self.p_matrix[i, cols])
        return out


def _row_sets(d, triangle):
    if triangle == "full":
        return [np.array([j for j in range(d) if j != i], dtype=int) for i in range(d)]
    if triangle == "upper":
        return [np.arange(i + 1, d) for i in range(d)]
    raise ConfigError(f"unknown triangle mode {triangle!r}")


def sf_objective(p, theta, phi) -> float:
    r = p.sum(axis=1) - theta
    c = p.sum(axis=0) - phi
    return float(r @ r + c @ c)


def sf_edge_inclusion(
    r_hat, tol: float = 1e-10, max_iter: int = 100_000, step=None, start=None
) -> SfWeights:
    """Edge inclusion probabilities whose row/column sums match squared-effect marginals.

    Projected gradient on the box [0,1] with P_ii pinned to 0. The default
    step 1/(2D) is below 2/L for the Lipschitz constant L = 4(D-1).
    """
    r = np.asarray(r_hat, dtype=float)
    if not np.all(np.isfinite(r)):
        raise NumericalError("non-finite total effects")
    d = r.shape[0]
    off = ~np.eye(d, dtype=bool)
    a = np.where(off, r**2, 0.0)
    theta = a.sum(axis=1)
    phi = a.sum(axis=0)
    eta = 1.0 / (2 * d) if step is None else float(step)
    p = np.zeros((d, d)) if start is None else np.where(off, np.clip(start, 0, 1), 0.0)
    gnorm = np.inf
    for it in range(1, max_iter + 1):
        grad = 2.0 * ((p.sum(axis=1) - theta)[:, None] + (p.sum(axis=0) - phi)[None, :])
        nxt = np.where(off, np.clip(p - eta * grad, 0.0, 1.0), 0.0)
        gnorm = float(np.linalg.norm(nxt - p) / eta)
        p = nxt
        if gnorm < tol:
            return SfWeights(theta, phi, p, it, gnorm)
    raise ConvergenceError(
        f"edge-inclusion fit did not converge in {max_iter} iterations "
        f"(gradient-mapping norm {gnorm:.3g})"
    )


def localize_sf(xi, sf: SfWeights, triangle: str = "full", **kw) -> EdgePriorField:
    """Row-wise localization with per-node sparsity from the SF fit.

    ``triangle="full"`` constrains every off-diagonal entry of row i to
    average the node's spike level. ``triangle="upper"`` constrains only
    j > i in the given variable order; unconstrained entries take their
    unconstrained optimum clip(1 - xi, 0, 1).
    """
    xi = np.asarray(xi, dtype=float)
    d = xi.shape[0]
    levels = sf.node_sparsity(triangle)
    pi0 = np.clip(1.0 - xi, 0.0, 1.0)
    for i, cols in enumerate(_row_sets(d, triangle)):
        if cols.size:
            pi0[i, cols] = project_capped_sum(1.0 - xi[i, cols], levels[i] * cols.size)
    np.fill_diagonal(pi0, 1.0)
    info = {"mode": "sf", "triangle": triangle, "node_pi0": levels.tolist()}
    return EdgePriorField(pi0, info=info, **kw)


def oracle_prior(truth, **kw) -> EdgePriorField:
    """Uniform spike weight equal to the fraction of absent edges in the truth."""
    g = np.asarray(getattr(truth, "weights", truth), dtype=float)
    d = g.shape[0]
    off = ~np.eye(d, dtype=bool)
    level = float(np.mean(g[off] == 0)) if d > 1 else 1.0
    pi0 = np.full((d, d), level)
    return EdgePriorField(pi0, info={"mode": "oracle", "global_pi0": level}, **kw)


def uniform_prior(d: int, level: float, **kw) -> EdgePriorField:
    return EdgePriorField(np.full((d, d), float(level)), info={"mode": "uniform", "global_pi0": float(level)}, **kw)


def fit_prior(
    summary,
    control_y=None,
    topology: str = "ER",
    localize: bool = True,
    grid=None,
    alpha: float = ALPHA,
    triangle: str = "full",
    tau: float = TAU,
    sigma0_sq: float = SIGMA0_SQ,
) -> EdgePriorField:
    """Global fit followed by optional localization.

    ``summary`` needs ``r_hat`` and ``se``; ``control_y`` is required when
    ``localize`` is set.
    """
    topology = topology.upper()
    r = np.asarray(summary.r_hat, dtype=float)
    d = r.shape[0]
    off = ~np.eye(d, dtype=bool)
    kw = {"tau": tau, "sigma0_sq": sigma0_sq}
    if localize:
        if control_y is None:
            raise ConfigError("localization needs control data")
        strength = interaction_strength(control_y)
        xi = strength.xi
    else:
        xi = np.zeros((d, d))
    if topology == "ER":
        mix = em_fit_global(r[off], np.asarray(summary.se)[off], grid, alpha, sigma0_sq)
        field_ = localize_er(xi, mix.pi0, **kw)
        field_.info.update(
            slab_variances=mix.slab_variances.tolist(),
            mixture_weights=mix.weights.tolist(),
            em_iterations=mix.n_iter,
            alpha=alpha,
        )
    elif topology == "SF":
        sf = sf_edge_inclusion(r)
        if localize:
            field_ = localize_sf(xi, sf, triangle=triangle, **kw)
        else:
            field_ = EdgePriorField(1.0 - sf.p_matrix, info={"mode": "sf"}, **kw)
        field_.info.update(sf_iterations=sf.n_iter)
    else:
        raise ConfigError(f"unknown prior topology {topology!r}")
    field_.info["localized"] = bool(localize)
    if localize:
        field_.info["xi_pre_clamp_max"] = strength.pre_clamp_max
    return field_
