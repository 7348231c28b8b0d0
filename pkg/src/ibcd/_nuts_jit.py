"""Compiled NUTS transition.

Same algorithm as the recursive version in ``sampler``: leaves are produced
in the same order and subtrees are merged at the same points, but the
recursion is unrolled into a stack of completed subtrees per level. The
log density is a compiled function ``fn(theta, grad_out, *args) -> logp``.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _dot(a, b):
    s = 0.0
    for i in range(a.size):
        s += a[i] * b[i]
    return s


@njit(cache=True)
def _copy(dst, src):
    # explicit loop; numba's slice assignment is several times slower here
    for i in range(src.size):
        dst[i] = src[i]


@njit(cache=True)
def _kinetic(p, inv_mass):
    s = 0.0
    for i in range(p.size):
        s += inv_mass[i] * p[i] * p[i]
    return 0.5 * s


@njit(cache=True)
def _no_uturn(p_left, p_right, rho, inv_mass):
    a = 0.0
    b = 0.0
    for i in range(rho.size):
        a += inv_mass[i] * p_left[i] * rho[i]
        b += inv_mass[i] * p_right[i] * rho[i]
    return a > 0.0 and b > 0.0


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
def leapfrog(fn, args, theta, p, grad, eps, inv_mass, out_theta, out_p, out_grad):
    n = theta.size
    for i in range(n):
        out_p[i] = p[i] + 0.5 * eps * grad[i]
        out_theta[i] = theta[i] + eps * inv_mass[i] * out_p[i]
    logp = fn(out_theta, out_grad, *args)
    if not math.isfinite(logp):
        return -np.inf
    for i in range(n):
        if not math.isfinite(out_grad[i]):
            return -np.inf
    for i in range(n):
        out_p[i] += 0.5 * eps * out_grad[i]
    return logp


@njit(cache=True)
def _merged_turning(e_pl, e_pr, e_rho, l_pl, l_pr, l_rho, rho, tmp, inv_mass):
    """U-turn test for early+late, including the two seam checks."""
    if not _no_uturn(e_pl, l_pr, rho, inv_mass):
        return True
    for i in range(rho.size):
        tmp[i] = e_rho[i] + l_pl[i]
    if not _no_uturn(e_pl, l_pl, tmp, inv_mass):
        return True
    for i in range(rho.size):
        tmp[i] = l_rho[i] + e_pr[i]
    if not _no_uturn(e_pr, l_pr, tmp, inv_mass):
        return True
    return False


@njit(cache=True)
def transition(fn, args, theta, grad, logp, eps, inv_mass, max_depth, threshold, rng,
               out_theta, out_grad):
    """One NUTS step. Writes the new state into out_theta/out_grad.

    Returns (logp, accept_stat, depth, n_leapfrog, divergent).
    """
    n = theta.size
    p0 = rng.standard_normal(n)
    for i in range(n):
        p0[i] = p0[i] / math.sqrt(inv_mass[i])
    h0 = -logp + _kinetic(p0, inv_mass)

    # full trajectory: ends, summed momentum, proposal, total log weight
    lt = theta.copy()
    lp = p0.copy()
    lg = grad.copy()
    ll = logp
    rt = theta.copy()
    rp = p0.copy()
    rg = grad.copy()
    rl = logp
    rho = p0.copy()
    _copy(out_theta, theta)
    _copy(out_grad, grad)
    prop_logp = logp
    log_w = 0.0

    # per-level stacks of completed subtrees (in build order)
    sb_p = np.empty((max_depth + 1, n))  # momentum at first-built leaf
    se_p = np.empty((max_depth + 1, n))  # momentum at last-built leaf
    s_rho = np.empty((max_depth + 1, n))
    s_theta = np.empty((max_depth + 1, n))
    s_grad = np.empty((max_depth + 1, n))
    s_logp = np.empty(max_depth + 1)
    s_logw = np.empty(max_depth + 1)

    # current subtree being assembled
    tb_p = np.empty(n)
    te_p = np.empty(n)
    t_rho = np.empty(n)
    t_theta = np.empty(n)
    t_grad = np.empty(n)

    cur_t = np.empty(n)
    cur_p = np.empty(n)
    cur_g = np.empty(n)
    nxt_t = np.empty(n)
    nxt_p = np.empty(n)
    nxt_g = np.empty(n)
    tmp = np.empty(n)
    new_rho = np.empty(n)

    sum_accept = 0.0
    n_lf = 0
    divergent = False
    depth = 0
    for depth in range(max_depth):
        direction = 1 if rng.random() < 0.5 else -1
        if direction > 0:
            _copy(cur_t, rt)
            _copy(cur_p, rp)
            _copy(cur_g, rg)
            cur_l = rl
        else:
            _copy(cur_t, lt)
            _copy(cur_p, lp)
            _copy(cur_g, lg)
            cur_l = ll
        step = direction * eps
        n_leaves = 1 << depth
        aborted = False
        t_logp = 0.0
        t_logw = 0.0
        for k in range(n_leaves):
            new_l = leapfrog(fn, args, cur_t, cur_p, cur_g, step, inv_mass, nxt_t, nxt_p, nxt_g)
            n_lf += 1
            if math.isfinite(new_l):
                delta = (-new_l + _kinetic(nxt_p, inv_mass)) - h0
                if not math.isfinite(delta):
                    delta = np.inf
            else:
                delta = np.inf
            if math.isfinite(delta):
                sum_accept += math.exp(min(0.0, -delta))
            _copy(cur_t, nxt_t)
            _copy(cur_p, nxt_p)
            _copy(cur_g, nxt_g)
            cur_l = new_l
            if delta > threshold:
                divergent = True
                aborted = True
                break
            # single-leaf tree
            _copy(tb_p, nxt_p)
            _copy(te_p, nxt_p)
            _copy(t_rho, nxt_p)
            _copy(t_theta, nxt_t)
            _copy(t_grad, nxt_g)
            t_logp = new_l
            t_logw = -delta
            level = 0
            kk = k
            while kk & 1:
                # stack[level] was built first, the current tree second
                lw = _logaddexp(s_logw[level], t_logw)
                if not (math.log(rng.random()) < t_logw - lw):
                    _copy(t_theta, s_theta[level])
                    _copy(t_grad, s_grad[level])
                    t_logp = s_logp[level]
                for i in range(n):
                    new_rho[i] = s_rho[level, i] + t_rho[i]
                if direction > 0:
                    turning = _merged_turning(sb_p[level], se_p[level], s_rho[level],
                                              tb_p, te_p, t_rho, new_rho, tmp, inv_mass)
                else:
                    turning = _merged_turning(te_p, tb_p, t_rho,
                                              se_p[level], sb_p[level], s_rho[level],
                                              new_rho, tmp, inv_mass)
                _copy(tb_p, sb_p[level])
                _copy(t_rho, new_rho)
                t_logw = lw
                if turning:
                    aborted = True
                    break
                kk >>= 1
                level += 1
            if aborted:
                break
            if k < n_leaves - 1:
                _copy(sb_p[level], tb_p)
                _copy(se_p[level], te_p)
                _copy(s_rho[level], t_rho)
                _copy(s_theta[level], t_theta)
                _copy(s_grad[level], t_grad)
                s_logp[level] = t_logp
                s_logw[level] = t_logw
        if aborted:
            break
        # biased progressive sampling toward the new subtree
        if math.log(rng.random()) < t_logw - log_w:
            _copy(out_theta, t_theta)
            _copy(out_grad, t_grad)
            prop_logp = t_logp
        log_w = _logaddexp(log_w, t_logw)
        for i in range(n):
            new_rho[i] = rho[i] + t_rho[i]
        if direction > 0:
            turning = _merged_turning(lp, rp, rho, tb_p, te_p, t_rho, new_rho, tmp, inv_mass)
            _copy(rt, cur_t)
            _copy(rp, cur_p)
            _copy(rg, cur_g)
            rl = cur_l
        else:
            turning = _merged_turning(te_p, tb_p, t_rho, lp, rp, rho, new_rho, tmp, inv_mass)
            _copy(lt, cur_t)
            _copy(lp, cur_p)
            _copy(lg, cur_g)
            ll = cur_l
        _copy(rho, new_rho)
        if turning:
            break
    accept = sum_accept / max(n_lf, 1)
    return prop_logp, accept, depth + 1, n_lf, divergent
