"""Total-causal-effect summaries from interventional data.

Each variable i is treated as an exposure instrumented by the interventions
that target it. For every exposure the estimator has the two-stage linear form

    yhat_i = first-stage fitted values on the rows where the instrument varies,
    R_ij   = yhat_i' y_j / yhat_i' y_i,

with yhat_i embedded into a length-N vector (zeros off its rows) so that all
exposures share one sample index. The sampling covariance of two entries is

    S_ijkl = (yhat_i' yhat_k) Cov(e_ij, e_kl) / (|yhat_i|^2 |yhat_k|^2),

which is the usual  Cov(yhat_i, yhat_k) Cov(e_ij, e_kl) / (n Var(yhat_i) Var(yhat_k))
after cancelling n. It factors approximately as U_ik V_jl.

First-stage modes
-----------------
``control_mean="estimated"`` (default) regresses y_i on an intercept and the
instrument(s) over the control rows plus the instrumented rows. With one binary
instrument this is the Wald ratio of group-mean differences. The shared control
rows make estimates for different exposures weakly correlated, which shows up
as small off-diagonal entries of U.

``control_mean="known"`` assumes the control mean is exactly zero (true after
standardize_controls) and projects without an intercept onto the instrumented
rows only. Estimates are identical to the default mode on standardized data,
but U is diagonal for single-target designs and the variance omits the
control-mean term.

``method="ols_hard"`` uses plain OLS over each exposure's intervened rows, which
identifies total effects under hard interventions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError, WeakInstrumentError
from .simcore import Dataset

WEAK_R2 = 1e-6
PSD_FLOOR = 1e-8


@dataclass
class Projections:
    """Embedded first-stage fits for every exposure."""

    yhat: np.ndarray  # N x D
    rows: list  # rows where each first stage is supported
    noise_rows: list  # rows used to estimate residual covariances
    method: str = "iv"

    @property
    def norms(self) -> np.ndarray:
        return np.einsum("nd,nd->d", self.yhat, self.yhat)


@dataclass
class ResidualField:
    """Residuals e_ij = y_j - R_ij y_i, produced on demand.

    Storing all D^2 residual vectors is never needed: covariances over a set of
    rows follow from the data covariance on those rows.
    """

    Y: np.ndarray
    r_hat: np.ndarray
    noise_rows: list
    _cov_cache: dict = field(default_factory=dict, repr=False)

    def vector(self, i: int, j: int) -> np.ndarray:
        return self.Y[:, j] - self.r_hat[i, j] * self.Y[:, i]

    def common_rows(self, i: int, k: int) -> np.ndarray:
        if i == k:
            return self.noise_rows[i]
        return np.intersect1d(self.noise_rows[i], self.noise_rows[k], assume_unique=True)

    def data_cov(self, i: int, k: int) -> np.ndarray:
        rows = self.common_rows(i, k)
        key = (rows.size, hash(rows.tobytes()))
        if key not in self._cov_cache:
            if rows.size < 2:
                raise NumericalError(f"fewer than two common rows for exposures {i} and {k}")
            self._cov_cache[key] = np.cov(self.Y[rows], rowvar=False)
        return self._cov_cache[key]

    def cov_block(self, i: int, k: int) -> np.ndarray:
        """Matrix over (j, l) of Cov(e_ij, e_kl) on the rows shared by i and k."""
        c = self.data_cov(i, k)
        ri, rk = self.r_hat[i], self.r_hat[k]
        return (c - np.outer(c[:, k], rk) - np.outer(ri, c[i, :])
                + c[i, k] * np.outer(ri, rk))

    def cov(self, i: int, j: int, k: int, l: int) -> float:
        c = self.data_cov(i, k)
        rij, rkl = self.r_hat[i, j], self.r_hat[k, l]
        return float(c[j, l] - rkl * c[j, k] - rij * c[i, l] + rij * rkl * c[i, k])


@dataclass
class TceSummary:
    r_hat: np.ndarray
    se: np.ndarray
    u: np.ndarray
    v: np.ndarray
    n_obs: int
    options: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.r_hat.shape[0]


# first stage ---------------------------------------------------------------


def _check_index(data: Dataset, *idx: int):
    for i in idx:
        if not 0 <= i < data.dim:
            raise ConfigError(f"variable index {i} out of range for D={data.dim}")


def first_stage(data: Dataset, i: int, control_mean: str = "estimated"):
    """Fitted exposure values for variable ``i``.

    Returns ``(yhat, rows)`` with ``yhat`` of length N, zero off ``rows``.
    Normal equations on the instrument columns, the N x N projection is never
    formed. For a single binary instrument the centered fit is
    (mean_treated - mean_control) * (x - x_bar).
    """
    _check_index(data, i)
    if control_mean not in ("estimated", "known"):
        raise ConfigError(f"unknown control_mean mode {control_mean!r}")
    design = data.design
    inst = design.instruments_for(i)
    if inst.size == 0:
        raise WeakInstrumentError(i, message=f"variable {i} has no instrument")
    x = design.assignment[:, inst].astype(float)
    treated = np.flatnonzero(x.sum(axis=1) > 0)
    if control_mean == "estimated":
        rows = np.union1d(data.control_rows, treated)
        z = np.column_stack([np.ones(rows.size), x[rows]])
    else:
        rows = treated
        z = x[rows]
    if rows.size == 0:
        raise WeakInstrumentError(i, message=f"variable {i} has no intervened samples")
    y = data.Y[rows, i]
    coef, *_ = np.linalg.lstsq(z, y, rcond=None)
    fit = z @ coef
    if control_mean == "estimated":
        fit = fit - fit.mean()
        total = np.sum((y - y.mean()) ** 2)
    else:
        total = np.sum(y * y)
    ss = float(fit @ fit)
    r2 = ss / total if total > 0 else 0.0
    if not r2 >= WEAK_R2:
        raise WeakInstrumentError(i, r2)
    yhat = np.zeros(data.n_samples)
    yhat[rows] = fit
    return yhat, rows


def estimate_2sls(data: Dataset, i: int, j: int, control_mean: str = "estimated"):
    """Two-stage least squares total effect of ``i`` on ``j``; returns (R_ij, yhat_i)."""
    _check_index(data, j)
    yhat, _ = first_stage(data, i, control_mean)
    r = float(yhat @ data.Y[:, j]) / float(yhat @ data.Y[:, i])
    return r, yhat


def _hard_rows(data: Dataset, i: int) -> np.ndarray:
    inst = data.design.instruments_for(i)
    if inst.size == 0:
        raise WeakInstrumentError(i, message=f"variable {i} has no intervened samples")
    rows = np.flatnonzero(data.design.assignment[:, inst].sum(axis=1) > 0)
    if rows.size == 0:
        raise WeakInstrumentError(i, message=f"variable {i} has no intervened samples")
    return rows


def estimate_ols_hard(data: Dataset, i: int, j: int) -> float:
    """OLS of y_j on y_i over the rows where i was (hard) intervened on."""
    _check_index(data, i, j)
    rows = _hard_rows(data, i)
    yi, yj = data.Y[rows, i], data.Y[rows, j]
    denom = float(yi @ yi)
    if not denom > WEAK_R2 * rows.size:
        raise NumericalError(f"exposure {i} is degenerate on its intervened rows")
    return float(yi @ yj) / denom


def compute_projections(data: Dataset, method: str = "iv", control_mean: str = "estimated") -> Projections:
    d = data.dim
    yhat = np.zeros((data.n_samples, d))
    rows, noise = [], []
    for i in range(d):
        if method == "iv":
            yhat[:, i], r = first_stage(data, i, control_mean)
            rows.append(r)
            noise.append(data.control_rows)
        elif method == "ols_hard":
            r = _hard_rows(data, i)
            yi = data.Y[r, i]
            if not float(yi @ yi) > WEAK_R2 * r.size:
                raise NumericalError(f"exposure {i} is degenerate on its intervened rows")
            yhat[r, i] = yi
            rows.append(r)
            noise.append(r)
        else:
            raise ConfigError(f"unknown estimation method {method!r}")
    return Projections(yhat, rows, noise, method)


def total_effect_matrix(data: Dataset, proj: Projections) -> np.ndarray:
    num = proj.yhat.T @ data.Y
    r = num / np.diag(num)[:, None]
    np.fill_diagonal(r, 1.0)
    return r


# covariance ----------------------------------------------------------------


def covariance_entry(res: ResidualField, proj: Projections, i: int, j: int, k: int, l: int) -> float:
    """Plug-in Cov(R_ij, R_kl)."""
    norms = proj.norms
    if not (norms[i] > 0 and norms[k] > 0):
        raise NumericalError(f"zero first-stage variance for exposure {i if norms[i] <= 0 else k}")
    cross = float(proj.yhat[:, i] @ proj.yhat[:, k])
    if cross == 0.0:
        return 0.0
    return cross * res.cov(i, j, k, l) / (norms[i] * norms[k])


def estimate_row_cov_u(proj: Projections) -> np.ndarray:
    """U_ik = yhat_i' yhat_k / (|yhat_i|^2 |yhat_k|^2)."""
    norms = proj.norms
    if np.any(~(norms > 0)):
        raise NumericalError(f"zero first-stage variance for exposure(s) {np.flatnonzero(~(norms > 0)).tolist()}")
    gram = proj.yhat.T @ proj.yhat
    u = gram / np.outer(norms, norms)
    return 0.5 * (u + u.T)


def instrument_sharing(data: Dataset) -> np.ndarray:
    """Boolean D x D: exposures i and k share at least one instrument (always true for i == k)."""
    tm = data.design.target_matrix().astype(int)
    share = (tm.T @ tm) > 0
    np.fill_diagonal(share, True)
    return share


def estimate_col_cov_v(res: ResidualField, pattern: np.ndarray) -> np.ndarray:
    """Average of Cov(e_ij, e_kl) over exposure pairs (i, k) flagged in ``pattern``.

    Pairs with i == j or k == l are skipped: the residual of a variable on
    itself is identically zero. An off-diagonal entry with no usable pair
    (only possible for D = 2 with unshared instruments) is set to 0.
    """
    d = res.r_hat.shape[0]
    total = np.zeros((d, d))
    count = np.zeros((d, d))
    for i, k in zip(*np.nonzero(pattern)):
        mask = np.ones((d, d))
        mask[i, :] = 0.0
        mask[:, k] = 0.0
        total += mask * res.cov_block(i, k)
        count += mask
    if np.any(np.diag(count) == 0):
        raise NumericalError("empty averaging set for the column covariance")
    v = np.divide(total, count, out=np.zeros((d, d)), where=count > 0)
    return 0.5 * (v + v.T)


def psd_repair(mat: np.ndarray, floor: float = PSD_FLOOR) -> np.ndarray:
    """Symmetrize and clip eigenvalues below floor * max eigenvalue."""
    sym = 0.5 * (mat + mat.T)
    w, q = np.linalg.eigh(sym)
    top = w.max()
    if not top > 0:
        raise NumericalError("covariance factor has no positive eigenvalue")
    w = np.maximum(w, floor * top)
    out = (q * w) @ q.T
    return 0.5 * (out + out.T)


def build_summary(data: Dataset, method: str = "iv", control_mean: str = "estimated") -> TceSummary:
    if not data.design.is_complete():
        missing = np.flatnonzero(~data.design.target_matrix().any(axis=0))
        raise WeakInstrumentError(int(missing[0]), message=f"variable {int(missing[0])} has no instrument")
    proj = compute_projections(data, method, control_mean)
    r_hat = total_effect_matrix(data, proj)
    res = ResidualField(data.Y, r_hat, proj.noise_rows)
    norms = proj.norms

    d = data.dim
    se = np.zeros((d, d))
    for i in range(d):
        var_e = np.diag(res.cov_block(i, i))
        se[i] = np.sqrt(np.maximum(var_e, 0.0) / norms[i])
    np.fill_diagonal(se, 0.0)
    off = ~np.eye(d, dtype=bool)
    if not np.all(np.isfinite(se)) or np.any(se[off] <= 0):
        bad = np.argwhere(off & ~(se > 0))
        raise NumericalError(f"non-positive standard error at {tuple(bad[0])}")

    u_raw = estimate_row_cov_u(proj)
    v_raw = estimate_col_cov_v(res, instrument_sharing(data))
    options = {"method": method, "control_mean": control_mean, "psd_floor": PSD_FLOOR}
    return TceSummary(r_hat, se, psd_repair(u_raw), psd_repair(v_raw), data.n_samples, options)
