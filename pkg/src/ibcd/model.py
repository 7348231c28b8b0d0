"""Posterior over direct-effect graphs given total-effect summaries.

The likelihood treats the estimated total-effect matrix as matrix normal
around R = (I - G)^-1 with row covariance U and column covariance V. Each
off-diagonal G_ij carries a spike-and-slab prior whose slab is a horseshoe:
conditional on its local scale lambda_ij,

    p(G_ij | lambda_ij) = pi0 N(0, sigma0^2) + (1 - pi0) N(0, tau^2 lambda_ij^2)

with lambda_ij ~ HalfCauchy(1) sampled on the log scale. This keeps the
marginal of the spike/slab mixture while giving a density that is smooth in
every latent coordinate.

Latent vector layout: [G off-diagonals (row-major), log lambda (same order)].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import _kernels
from .errors import ConfigError, NumericalError

LOG_2PI = float(np.log(2 * np.pi))
COND_LIMIT = 1e12


def off_diagonal_index(d: int):
    """Row-major (rows, cols) of the off-diagonal entries of a d x d matrix."""
    return np.nonzero(~np.eye(d, dtype=bool))


def total_effect_from_graph(g) -> np.ndarray:
    """R = (I - G)^-1 from one dense solve.

    Raises NumericalError when I - G is singular or its 1-norm condition
    number exceeds 1e12.
    """
    w = np.asarray(getattr(g, "weights", g), dtype=float)
    a = np.eye(w.shape[0]) - w
    try:
        r = np.linalg.inv(a)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("I - G is singular") from exc
    cond = np.abs(a).sum(axis=0).max() * np.abs(r).sum(axis=0).max()
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise NumericalError(f"I - G is ill-conditioned (cond ~ {cond:.3g})")
    return r


def matrix_normal_logpdf(x, mean, chol_u, chol_v) -> float:
    """log MN(x; mean, U, V) with U = L_u L_u^T (rows) and V = L_v L_v^T (columns)."""
    x = np.asarray(x, dtype=float)
    diff = x - np.asarray(mean, dtype=float)
    if not np.all(np.isfinite(diff)):
        raise NumericalError("non-finite matrix-normal argument")
    n, p = diff.shape
    a = solve_triangular(chol_u, diff, lower=True)
    b = solve_triangular(chol_v, a.T, lower=True)  # (L_u^-1 diff L_v^-T)^T
    logdet_u = 2 * np.log(np.diag(chol_u)).sum()
    logdet_v = 2 * np.log(np.diag(chol_v)).sum()
    return float(-0.5 * np.sum(b * b) - 0.5 * p * logdet_u - 0.5 * n * logdet_v - 0.5 * n * p * LOG_2PI)


def _jittered_cholesky(m, rel):
    m = np.asarray(m, dtype=float)
    m = 0.5 * (m + m.T)
    d = m.shape[0]
    jitter = rel * np.trace(m) / d
    try:
        return np.linalg.cholesky(m + jitter * np.eye(d))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance is not positive definite") from exc


@dataclass
class LatentState:
    g_free: np.ndarray
    log_lambda: np.ndarray

    @classmethod
    def from_vector(cls, theta):
        theta = np.asarray(theta, dtype=float)
        m = theta.size // 2
        return cls(theta[:m].copy(), theta[m:].copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.g_free, self.log_lambda])

    def graph(self, d: int) -> np.ndarray:
        g = np.zeros((d, d))
        g[off_diagonal_index(d)] = self.g_free
        return g

    @classmethod
    def from_graph(cls, g, log_lambda=None):
        g = np.asarray(g, dtype=float)
        free = g[off_diagonal_index(g.shape[0])]
        lam = np.zeros_like(free) if log_lambda is None else np.asarray(log_lambda, dtype=float)
        return cls(free, lam)


def _edge_terms(g, log_lam, pi0, tau, sigma0_sq):
    """Per-edge log prior pieces and their weights; shared by value and gradient."""
    lam2 = np.exp(2 * log_lam)
    slab_var = tau * tau * lam2
    with np.errstate(divide="ignore"):
        a = np.log(pi0) - 0.5 * (LOG_2PI + np.log(sigma0_sq) + g * g / sigma0_sq)
        b = np.log1p(-pi0) - 0.5 * (LOG_2PI + np.log(slab_var) + g * g / slab_var)
    mix = np.logaddexp(a, b)
    # log HalfCauchy(lambda; 1) + log |d lambda / d log lambda|
    scale = np.log(2 / np.pi) - np.logaddexp(0.0, 2 * log_lam) + log_lam
    return a, b, mix, scale, slab_var, lam2


def log_prior(state: LatentState, prior, sigma0_sq=None, tau=None) -> float:
    pi0 = prior.off_diagonal()
    s0 = prior.sigma0_sq if sigma0_sq is None else sigma0_sq
    t = prior.tau if tau is None else tau
    _, _, mix, scale, _, _ = _edge_terms(state.g_free, state.log_lambda, pi0, t, s0)
    return float(mix.sum() + scale.sum())


class PosteriorDensity:
    """Unnormalized log posterior with cached covariance factorizations.

    Immutable after construction, so one instance can be shared across chains.
    """

    def __init__(self, r_hat, u, v, prior, jitter: float = 1e-8, compiled: bool = True):
        self.compiled = compiled
        self.r_hat = np.array(r_hat, dtype=float)
        d = self.r_hat.shape[0]
        if self.r_hat.shape != (d, d):
            raise ConfigError("total-effect matrix must be square")
        if prior.dim != d:
            raise ConfigError("prior dimension does not match summary")
        self.dim = d
        self.prior = prior
        self.jitter = jitter
        self.chol_u = _jittered_cholesky(u, jitter)
        self.chol_v = _jittered_cholesky(v, jitter)
        eye = np.eye(d)
        self.u_inv = cho_solve((self.chol_u, True), eye)
        self.v_inv = cho_solve((self.chol_v, True), eye)
        self.u_inv = 0.5 * (self.u_inv + self.u_inv.T)
        self.v_inv = 0.5 * (self.v_inv + self.v_inv.T)
        self.logdet_u = 2 * float(np.log(np.diag(self.chol_u)).sum())
        self.logdet_v = 2 * float(np.log(np.diag(self.chol_v)).sum())
        self._norm = -0.5 * d * (self.logdet_u + self.logdet_v) - 0.5 * d * d * LOG_2PI
        self._rows, self._cols = (np.ascontiguousarray(x, dtype=np.int64) for x in off_diagonal_index(d))
        self._pi0 = prior.off_diagonal()
        self._eye = eye
        with np.errstate(divide="ignore"):
            self._log_spike = np.log(self._pi0) - 0.5 * (LOG_2PI + np.log(prior.sigma0_sq))
            self._log_slab = np.log1p(-self._pi0) - 0.5 * LOG_2PI - np.log(prior.tau)
        self._scale_const = float(np.log(2 / np.pi))
        for arr in (self.r_hat, self.u_inv, self.v_inv, self._pi0):
            arr.setflags(write=False)

    @classmethod
    def from_summary(cls, summary, prior, jitter: float = 1e-8, compiled: bool = True):
        return cls(summary.r_hat, summary.u, summary.v, prior, jitter, compiled)

    @property
    def n_edges(self) -> int:
        return self.dim * (self.dim - 1)

    @property
    def n_params(self) -> int:
        return 2 * self.n_edges

    def graph(self, theta) -> np.ndarray:
        g = np.zeros((self.dim, self.dim))
        g[self._rows, self._cols] = theta[: self.n_edges]
        return g

    def _total_effects(self, g):
        try:
            return total_effect_from_graph(g)
        except NumericalError:
            return None

    def log_likelihood(self, g) -> float:
        r = self._total_effects(g)
        if r is None:
            return -np.inf
        diff = self.r_hat - r
        return float(self._norm - 0.5 * np.sum(diff * (self.u_inv @ diff @ self.v_inv)))

    def log_prior(self, theta) -> float:
        m = self.n_edges
        _, _, mix, scale, _, _ = _edge_terms(
            theta[:m], theta[m:], self._pi0, self.prior.tau, self.prior.sigma0_sq
        )
        return float(mix.sum() + scale.sum())

    def log_posterior(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        ll = self.log_likelihood(self.graph(theta))
        if not np.isfinite(ll):
            return -np.inf
        return ll + self.log_prior(theta)

    def __call__(self, theta) -> float:
        return self.log_posterior(theta)

    def logp_and_grad(self, theta):
        """Value and gradient; (-inf, nan-vector) when I - G is unusable."""
        if not self.compiled:
            return self.logp_and_grad_reference(theta)
        theta = np.ascontiguousarray(theta, dtype=float)
        grad = np.empty_like(theta)
        value = _kernels.logp_grad(
            theta, grad, self.r_hat, self.u_inv, self.v_inv, self._rows, self._cols,
            self._log_spike, self._log_slab, self.prior.sigma0_sq, self.prior.tau,
            self._norm, self._scale_const, COND_LIMIT,
        )
        return float(value), grad

    def jit_target(self):
        """(compiled function, argument tuple) for the compiled sampler backend."""
        return _kernels.logp_grad, (
            self.r_hat, self.u_inv, self.v_inv, self._rows, self._cols,
            self._log_spike, self._log_slab, float(self.prior.sigma0_sq), float(self.prior.tau),
            float(self._norm), self._scale_const, COND_LIMIT,
        )

    def logp_and_grad_reference(self, theta):
        """Vectorized numpy version of ``logp_and_grad``."""
        theta = np.asarray(theta, dtype=float)
        m = self.n_edges
        g_free, log_lam = theta[:m], theta[m:]
        a = self._eye.copy()
        a[self._rows, self._cols] = -g_free
        try:
            r = np.linalg.inv(a)
        except np.linalg.LinAlgError:
            return -np.inf, np.full(theta.shape, np.nan)
        cond = np.abs(a).sum(axis=0).max() * np.abs(r).sum(axis=0).max()
        if not cond <= COND_LIMIT:
            return -np.inf, np.full(theta.shape, np.nan)
        diff = self.r_hat - r
        w = self.u_inv @ diff @ self.v_inv
        ll = self._norm - 0.5 * np.sum(diff * w)
        grad_g = (r.T @ w @ r.T)[self._rows, self._cols]

        # spike/slab mixture in log space; weights wa + wb = 1
        s0 = self.prior.sigma0_sq
        g2 = g_free * g_free
        inv_slab = np.exp(-2 * log_lam) / (self.prior.tau * self.prior.tau)
        la = self._log_spike - 0.5 * g2 / s0
        lb = self._log_slab - log_lam - 0.5 * g2 * inv_slab
        mix = np.logaddexp(la, lb)
        wa = np.exp(la - mix)
        wb = np.exp(lb - mix)
        lam2 = np.exp(2 * log_lam)
        grad_g -= g_free * (wa / s0 + wb * inv_slab)
        grad_l = wb * (g2 * inv_slab - 1.0) - 2 * lam2 / (1 + lam2) + 1.0
        scale = self._scale_const - np.logaddexp(0.0, 2 * log_lam) + log_lam
        value = float(ll + mix.sum() + scale.sum())
        return value, np.concatenate([grad_g, grad_l])

    def grad_log_posterior(self, theta) -> np.ndarray:
        return self.logp_and_grad(theta)[1]

    def state(self, theta) -> LatentState:
        return LatentState.from_vector(theta)


def sample_prior(prior, rng, size=None):
    """Draw latent vectors from the prior; returns shape (size, 2*(D^2-D)) or a single vector."""
    n = 1 if size is None else int(size)
    pi0 = prior.off_diagonal()
    m = pi0.size
    lam = np.abs(rng.standard_cauchy((n, m)))
    lam = np.maximum(lam, np.finfo(float).tiny)
    spike = rng.random((n, m)) < pi0[None, :]
    eps = rng.standard_normal((n, m))
    g = np.where(spike, np.sqrt(prior.sigma0_sq) * eps, prior.tau * lam * eps)
    out = np.concatenate([g, np.log(lam)], axis=1)
    return out[0] if size is None else out
