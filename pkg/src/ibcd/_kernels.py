"""Compiled log-posterior kernel used by the sampler's hot loop.

Mirrors ``PosteriorDensity.logp_and_grad_reference`` operation for
operation; the test suite checks the two agree to rounding.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _invert(a, out):
    """Gauss-Jordan inverse with partial pivoting. Returns False if singular."""
    n = a.shape[0]
    m = a.copy()
    for i in range(n):
        for j in range(n):
            out[i, j] = 1.0 if i == j else 0.0
    for c in range(n):
        p = c
        best = abs(m[c, c])
        for r in range(c + 1, n):
            if abs(m[r, c]) > best:
                best = abs(m[r, c])
                p = r
        if best == 0.0 or not math.isfinite(best):
            return False
        if p != c:
            for j in range(n):
                t = m[c, j]
                m[c, j] = m[p, j]
                m[p, j] = t
                t = out[c, j]
                out[c, j] = out[p, j]
                out[p, j] = t
        piv = 1.0 / m[c, c]
        for j in range(n):
            m[c, j] *= piv
            out[c, j] *= piv
        for r in range(n):
            if r != c:
                f = m[r, c]
                if f != 0.0:
                    for j in range(n):
                        m[r, j] -= f * m[c, j]
                        out[r, j] -= f * out[c, j]
    return True


@njit(cache=True)
def _norm1(a):
    n = a.shape[0]
    best = 0.0
    for j in range(n):
        s = 0.0
        for i in range(n):
            s += abs(a[i, j])
        if s > best:
            best = s
    return best


@njit(cache=True)
def _logaddexp(x, y):
    if x == -np.inf:
        return y
    if y == -np.inf:
        return x
    if x > y:
        return x + math.log1p(math.exp(y - x))
    return y + math.log1p(math.exp(x - y))


@njit(cache=True)
def logp_grad(theta, grad, r_hat, u_inv, v_inv, rows, cols, log_spike, log_slab,
              sigma0_sq, tau, norm_const, scale_const, cond_limit):
    d = r_hat.shape[0]
    m = rows.shape[0]
    a = np.eye(d)
    for k in range(m):
        a[rows[k], cols[k]] = -theta[k]
    r = np.empty((d, d))
    if not _invert(a, r):
        grad[:] = np.nan
        return -np.inf
    cond = _norm1(a) * _norm1(r)
    if not cond <= cond_limit:
        grad[:] = np.nan
        return -np.inf
    diff = r_hat - r
    w = u_inv @ diff @ v_inv
    ll = norm_const - 0.5 * np.sum(diff * w)
    gmat = r.T @ w @ r.T
    tau2 = tau * tau
    total = ll
    for k in range(m):
        g = theta[k]
        ll_ = theta[m + k]
        g2 = g * g
        t = 2.0 * ll_
        # e = lambda^-2, shared by the slab precision and the half-Cauchy terms
        if t > 0:
            e = math.exp(-t)
            softplus = t + math.log1p(e)  # log(1 + lambda^2)
        else:
            e_inv = math.exp(t)
            e = 1.0 / e_inv
            softplus = math.log1p(e_inv)
        inv_slab = e / tau2
        lam2_ratio = 1.0 / (1.0 + e)  # lambda^2 / (1 + lambda^2)
        la = log_spike[k] - 0.5 * g2 / sigma0_sq
        lb = log_slab[k] - ll_ - 0.5 * g2 * inv_slab
        if la == -np.inf:
            mix, wb = lb, 1.0
        elif lb == -np.inf:
            mix, wb = la, 0.0
        elif lb >= la:
            z = math.exp(la - lb)
            mix = lb + math.log1p(z)
            wb = 1.0 / (1.0 + z)
        else:
            z = math.exp(lb - la)
            mix = la + math.log1p(z)
            wb = z / (1.0 + z)
        wa = 1.0 - wb
        total += mix + scale_const - softplus + ll_
        grad[k] = gmat[rows[k], cols[k]] - g * (wa / sigma0_sq + wb * inv_slab)
        grad[m + k] = wb * (g2 * inv_slab - 1.0) - 2.0 * lam2_ratio + 1.0
    return total
