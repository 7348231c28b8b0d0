"""No-U-Turn sampler with dual-averaging step size and diagonal mass adaptation.

Trajectories are built by repeated doubling. Within a trajectory the
proposal is drawn multinomially with weights exp(-H); subtrees are merged
with progressive sampling biased toward the newer half at the top level.
Termination uses the generalized no-U-turn criterion on summed momenta,
including the extra checks across the seam between merged subtrees.

Any object with ``logp_and_grad(theta) -> (float, ndarray)`` and ``n_params``
can be sampled. Prior-based initialization additionally needs
``draw_prior(rng, size)`` or a ``prior`` attribute usable by
``model.sample_prior``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _rng
from .errors import ConfigError, ConvergenceError, NumericalError

INIT_STRATEGIES = ("prior_median_of_3", "prior_ranked_median_of_3", "zero", "supplied")


@dataclass
class NutsConfig:
    target_accept: float = 0.7
    max_tree_depth: int = 10
    n_chains: int = 3
    n_warmup: int = 300
    n_samples: int = 1000
    seed: int = 0
    init_strategy: str = "prior_median_of_3"
    init_values: object = None
    adapt_mass: bool = True
    divergence_threshold: float = 1000.0
    init_retries: int = 100
    n_jobs: int = 1
    backend: str = "auto"  # auto | python | compiled
    # dual averaging constants
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75

    def __post_init__(self):
        if not 0 < self.target_accept < 1:
            raise ConfigError("target_accept must lie in (0, 1)")
        if self.max_tree_depth < 1:
            raise ConfigError("max_tree_depth must be at least 1")
        if self.n_chains < 1 or self.n_samples < 1 or self.n_warmup < 0:
            raise ConfigError("chain and draw counts must be positive")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ConfigError(f"unknown init strategy {self.init_strategy!r}")
        if self.init_strategy == "supplied" and self.init_values is None:
            raise ConfigError("init_strategy 'supplied' needs init_values")


@dataclass
class PosteriorDraws:
    """Sampled latent vectors, chain-major: samples[chain, draw, coordinate].

    The first ``n_graph`` coordinates are the off-diagonal entries of G in
    row-major order (``n_graph = D*D - D``); the rest are auxiliary.
    """

    samples: np.ndarray
    divergent: np.ndarray
    accept_stat: np.ndarray
    tree_depth: np.ndarray
    n_leapfrog: np.ndarray
    step_size: np.ndarray
    inv_mass: np.ndarray
    seed: int = 0
    dim: int | None = None
    warmup_divergences: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def n_chains(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def n_graph(self) -> int:
        return self.samples.shape[2] if self.dim is None else self.dim * (self.dim - 1)

    def graph_draws(self) -> np.ndarray:
        """Off-diagonal G vectors, shape (n_chains, n_samples, D*D - D)."""
        return self.samples[:, :, : self.n_graph]

    def graphs(self) -> np.ndarray:
        """Full G matrices, shape (n_chains * n_samples, D, D)."""
        if self.dim is None:
            raise ConfigError("draws carry no graph dimension")
        d = self.dim
        flat = self.graph_draws().reshape(-1, self.n_graph)
        out = np.zeros((flat.shape[0], d, d))
        rows, cols = np.nonzero(~np.eye(d, dtype=bool))
        out[:, rows, cols] = flat
        return out


class _Leaf:
    __slots__ = ("theta", "p", "grad", "logp")

    def __init__(self, theta, p, grad, logp):
        self.theta, self.p, self.grad, self.logp = theta, p, grad, logp


class _Tree:
    __slots__ = (
        "left", "right", "ps_left", "ps_right", "rho", "proposal",
        "log_w", "sum_accept", "n", "divergent", "turning",
    )


def _no_uturn(ps_left, ps_right, rho):
    return float(ps_left @ rho) > 0 and float(ps_right @ rho) > 0


class _Integrator:
    def __init__(self, density, inv_mass, threshold):
        self.density = density
        self.inv_mass = inv_mass
        self.threshold = threshold

    def kinetic(self, p):
        return 0.5 * float(np.sum(self.inv_mass * p * p))

    def leapfrog(self, leaf, eps):
        p = leaf.p + 0.5 * eps * leaf.grad
        theta = leaf.theta + eps * self.inv_mass * p
        logp, grad = self.density.logp_and_grad(theta)
        if not np.isfinite(logp) or not np.all(np.isfinite(grad)):
            return _Leaf(theta, p, grad, -np.inf)
        p = p + 0.5 * eps * grad
        return _Leaf(theta, p, grad, float(logp))

    def single(self, leaf, eps, h0):
        new = self.leapfrog(leaf, eps)
        t = _Tree()
        h = -new.logp + self.kinetic(new.p) if np.isfinite(new.logp) else np.inf
        delta = h - h0
        if not np.isfinite(delta):
            delta = np.inf
        t.left = t.right = new
        ps = self.inv_mass * new.p
        t.ps_left = t.ps_right = ps
        t.rho = new.p.copy()
        t.proposal = new
        t.log_w = -delta
        t.sum_accept = math.exp(min(0.0, -delta)) if np.isfinite(delta) else 0.0
        t.n = 1
        t.divergent = delta > self.threshold
        t.turning = False
        return t


def _merge(early, late, proposal, log_w):
    t = _Tree()
    t.left, t.ps_left = early.left, early.ps_left
    t.right, t.ps_right = late.right, late.ps_right
    t.rho = early.rho + late.rho
    t.proposal = proposal
    t.log_w = log_w
    t.sum_accept = early.sum_accept + late.sum_accept
    t.n = early.n + late.n
    t.divergent = False
    t.turning = not (
        _no_uturn(early.ps_left, late.ps_right, t.rho)
        and _no_uturn(early.ps_left, late.ps_left, early.rho + late.left.p)
        and _no_uturn(early.ps_right, late.ps_right, late.rho + early.right.p)
    )
    return t


def _build(integ, leaf, direction, depth, eps, h0, rng):
    if depth == 0:
        return integ.single(leaf, direction * eps, h0)
    first = _build(integ, leaf, direction, depth - 1, eps, h0, rng)
    if first.divergent or first.turning:
        return first
    start = first.right if direction > 0 else first.left
    second = _build(integ, start, direction, depth - 1, eps, h0, rng)
    if second.divergent or second.turning:
        second.sum_accept += first.sum_accept
        second.n += first.n
        return second
    log_w = np.logaddexp(first.log_w, second.log_w)
    # uniform progressive sampling inside a subtree
    proposal = second.proposal if math.log(rng.random()) < second.log_w - log_w else first.proposal
    early, late = (first, second) if direction > 0 else (second, first)
    return _merge(early, late, proposal, log_w)


def nuts_transition(integ, leaf, eps, max_depth, rng):
    """One NUTS step from ``leaf`` (momentum resampled here).

    Returns (new leaf, accept statistic, depth, n_leapfrog, divergent).
    """
    p = rng.standard_normal(leaf.theta.shape) / np.sqrt(integ.inv_mass)
    start = _Leaf(leaf.theta, p, leaf.grad, leaf.logp)
    h0 = -start.logp + integ.kinetic(p)
    tree = _Tree()
    tree.left = tree.right = start
    tree.ps_left = tree.ps_right = integ.inv_mass * p
    tree.rho = p.copy()
    tree.proposal = start
    tree.log_w = 0.0
    tree.sum_accept = 0.0
    tree.n = 0
    tree.divergent = tree.turning = False
    sum_accept, n_lf, divergent, depth = 0.0, 0, False, 0
    proposal = start
    for depth in range(max_depth):
        direction = 1 if rng.random() < 0.5 else -1
        edge = tree.right if direction > 0 else tree.left
        new = _build(integ, edge, direction, depth, eps, h0, rng)
        sum_accept += new.sum_accept
        n_lf += new.n
        if new.divergent:
            divergent = True
            break
        if new.turning:
            break
        # biased progressive sampling toward the new subtree
        if math.log(rng.random()) < new.log_w - tree.log_w:
            proposal = new.proposal
        log_w = np.logaddexp(tree.log_w, new.log_w)
        early, late = (tree, new) if direction > 0 else (new, tree)
        tree = _merge(early, late, proposal, log_w)
        if tree.turning:
            break
    accept = sum_accept / max(n_lf, 1)
    return proposal, accept, depth + 1, n_lf, divergent


class DualAveraging:
    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10 * eps0)
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.t = 0
        self.h_bar = 0.0
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0

    def update(self, accept):
        self.t += 1
        t = self.t
        w = 1.0 / (t + self.t0)
        self.h_bar = (1 - w) * self.h_bar + w * (self.target - accept)
        self.log_eps = self.mu - math.sqrt(t) / self.gamma * self.h_bar
        eta = t ** (-self.kappa)
        self.log_eps_bar = eta * self.log_eps + (1 - eta) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def final(self):
        return math.exp(self.log_eps_bar)


def warmup_windows(n_warmup, init_buffer=75, term_buffer=50, base_window=25):
    """Slow-adaptation windows as (start, end) pairs within the warmup.

    Fast buffers at both ends tune only the step size; the middle is split
    into doubling windows, the last stretched to meet the terminal buffer.
    """
    if n_warmup < 20:
        return []
    if init_buffer + term_buffer + base_window > n_warmup:
        init_buffer = int(0.15 * n_warmup)
        term_buffer = int(0.1 * n_warmup)
        base_window = n_warmup - init_buffer - term_buffer
    windows = []
    start, size = init_buffer, base_window
    end_slow = n_warmup - term_buffer
    while start < end_slow:
        end = start + size
        if end + 2 * size > end_slow:
            end = end_slow
        windows.append((start, end))
        start, size = end, 2 * size
    return windows


def find_reasonable_step(kernel, theta, grad, logp, rng, eps=1.0):
    """Double or halve eps until one leapfrog step crosses acceptance 0.5."""
    p = rng.standard_normal(theta.shape) / np.sqrt(kernel.inv_mass)
    h0 = -logp + kernel.kinetic(p)

    def log_ratio(e):
        _, p_new, _, logp_new = kernel.leapfrog(theta, p, grad, e)
        if not np.isfinite(logp_new):
            return -np.inf
        return h0 - (-logp_new + kernel.kinetic(p_new))

    a = log_ratio(eps)
    direction = 1 if a > math.log(0.5) else -1
    for _ in range(100):
        nxt = eps * (2.0 ** direction)
        a = log_ratio(nxt)
        crossed = (a <= math.log(0.5)) if direction > 0 else (a > math.log(0.5))
        if crossed:
            return eps if direction > 0 else nxt
        eps = nxt
        if eps < 1e-12 or eps > 1e7:
            break
    return eps


class _PythonKernel:
    """Recursive tree building over any ``logp_and_grad`` density."""

    def __init__(self, density, config):
        self.density = density
        self.max_depth = config.max_tree_depth
        self.threshold = config.divergence_threshold
        self.set_mass(np.ones(density.n_params))

    def set_mass(self, inv_mass):
        self.inv_mass = np.asarray(inv_mass, dtype=float)
        self.integ = _Integrator(self.density, self.inv_mass, self.threshold)

    def kinetic(self, p):
        return self.integ.kinetic(p)

    def leapfrog(self, theta, p, grad, eps):
        new = self.integ.leapfrog(_Leaf(theta, p, grad, 0.0), eps)
        return new.theta, new.p, new.grad, new.logp

    def step(self, theta, grad, logp, eps, rng):
        leaf = _Leaf(theta, None, grad, logp)
        new, accept, depth, n_lf, div = nuts_transition(self.integ, leaf, eps, self.max_depth, rng)
        return new.theta, new.grad, new.logp, accept, depth, n_lf, div


class _CompiledKernel:
    """Same transition compiled with numba; needs ``density.jit_target()``."""

    def __init__(self, density, config):
        from . import _nuts_jit

        self._jit = _nuts_jit
        self.fn, self.args = density.jit_target()
        self.max_depth = config.max_tree_depth
        self.threshold = float(config.divergence_threshold)
        self.set_mass(np.ones(density.n_params))

    def set_mass(self, inv_mass):
        self.inv_mass = np.ascontiguousarray(inv_mass, dtype=float)

    def kinetic(self, p):
        return self._jit._kinetic(np.ascontiguousarray(p), self.inv_mass)

    def leapfrog(self, theta, p, grad, eps):
        n = theta.size
        out_t, out_p, out_g = np.empty(n), np.empty(n), np.empty(n)
        logp = self._jit.leapfrog(self.fn, self.args, theta, p, grad, float(eps), self.inv_mass,
                                  out_t, out_p, out_g)
        return out_t, out_p, out_g, logp

    def step(self, theta, grad, logp, eps, rng):
        out_t = np.empty_like(theta)
        out_g = np.empty_like(theta)
        logp_new, accept, depth, n_lf, div = self._jit.transition(
            self.fn, self.args, theta, grad, float(logp), float(eps), self.inv_mass,
            self.max_depth, self.threshold, rng, out_t, out_g,
        )
        return out_t, out_g, logp_new, accept, depth, n_lf, div


def make_kernel(density, config):
    backend = config.backend
    if backend == "auto":
        usable = hasattr(density, "jit_target") and getattr(density, "compiled", True)
        backend = "compiled" if usable else "python"
    if backend == "compiled":
        if not hasattr(density, "jit_target"):
            raise ConfigError("compiled backend needs a density with jit_target()")
        return _CompiledKernel(density, config)
    if backend == "python":
        return _PythonKernel(density, config)
    raise ConfigError(f"unknown sampler backend {backend!r}")


def _prior_draws(density, rng, n):
    if hasattr(density, "draw_prior"):
        return np.asarray(density.draw_prior(rng, n), dtype=float)
    if hasattr(density, "prior"):
        from .model import sample_prior

        return sample_prior(density.prior, rng, n)
    raise ConfigError("prior initialization needs a density with a prior")


def initial_point(density, config: NutsConfig, chain: int, rng):
    strategy = config.init_strategy
    if strategy == "zero":
        candidates = [np.zeros(density.n_params)]
    elif strategy == "supplied":
        vals = np.asarray(config.init_values, dtype=float)
        candidates = [vals[chain] if vals.ndim == 2 else vals]
    else:
        candidates = None
    if candidates is not None:
        theta = candidates[0].copy()
        logp, grad = density.logp_and_grad(theta)
        if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
            raise NumericalError(f"{strategy} initial point has non-finite density")
        return theta, logp, grad
    for _ in range(config.init_retries):
        draws = _prior_draws(density, rng, 3)
        if strategy == "prior_median_of_3":
            theta = np.median(draws, axis=0)
        else:
            vals = np.array([density.logp_and_grad(d)[0] for d in draws])
            vals = np.where(np.isfinite(vals), vals, -np.inf)
            theta = draws[np.argsort(vals, kind="stable")[1]]
        logp, grad = density.logp_and_grad(theta)
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            return theta, logp, grad
    raise NumericalError(f"no finite initial point after {config.init_retries} prior draws")


def _run_chain(density, config: NutsConfig, chain: int):
    rng = _rng.stream(config.seed, "nuts", chain)
    theta, logp, grad = initial_point(density, config, chain, rng)
    theta = np.ascontiguousarray(theta, dtype=float)
    grad = np.ascontiguousarray(grad, dtype=float)
    n_par = theta.size
    kernel = make_kernel(density, config)
    eps = find_reasonable_step(kernel, theta, grad, logp, rng)
    da = DualAveraging(eps, config.target_accept, config.gamma, config.t0, config.kappa)
    windows = warmup_windows(config.n_warmup) if config.adapt_mass else []
    window_ends = {end for _, end in windows}
    window_starts = {start for start, _ in windows}
    acc_mean = acc_m2 = None
    acc_n = 0
    warm_div = 0

    for it in range(config.n_warmup):
        if it in window_starts:
            acc_mean, acc_m2, acc_n = np.zeros(n_par), np.zeros(n_par), 0
        theta, grad, logp, accept, _, _, div = kernel.step(theta, grad, logp, eps, rng)
        warm_div += int(div)
        eps = da.update(accept)
        if acc_mean is not None:
            acc_n += 1
            delta = theta - acc_mean
            acc_mean += delta / acc_n
            acc_m2 += delta * (theta - acc_mean)
        if it + 1 in window_ends:
            var = acc_m2 / max(acc_n - 1, 1)
            var = (acc_n / (acc_n + 5.0)) * var + 1e-3 * (5.0 / (acc_n + 5.0))
            kernel.set_mass(var)
            acc_mean = None
            eps = find_reasonable_step(kernel, theta, grad, logp, rng, eps)
            da = DualAveraging(eps, config.target_accept, config.gamma, config.t0, config.kappa)
    if config.n_warmup > 0:
        if warm_div == config.n_warmup:
            raise ConvergenceError("every warmup transition diverged")
        eps = da.final

    s = config.n_samples
    out = np.empty((s, n_par))
    divergent = np.zeros(s, dtype=bool)
    accept_stat = np.empty(s)
    depth = np.empty(s, dtype=np.int16)
    n_lf = np.empty(s, dtype=np.int32)
    for it in range(s):
        theta, grad, logp, accept, dep, nl, div = kernel.step(theta, grad, logp, eps, rng)
        out[it] = theta
        divergent[it] = div
        accept_stat[it] = accept
        depth[it] = dep
        n_lf[it] = nl
    return out, divergent, accept_stat, depth, n_lf, eps, kernel.inv_mass.copy(), warm_div


def _job_count(config):
    env = os.environ.get("IBCD_THREADS")
    n = config.n_jobs
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError("IBCD_THREADS must be an integer") from exc
    return max(1, min(n, config.n_chains))


def run_nuts(density, config: NutsConfig | None = None) -> PosteriorDraws:
    """Run ``config.n_chains`` independent chains.

    Chain c uses its own Philox stream derived from (seed, c), so results do
    not depend on whether chains run serially or in worker processes.
    """
    config = config or NutsConfig()
    jobs = _job_count(config)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [pool.submit(_run_chain, density, config, c) for c in range(config.n_chains)]
            results = [f.result() for f in futs]
    else:
        results = [_run_chain(density, config, c) for c in range(config.n_chains)]
    parts = list(zip(*results))
    return PosteriorDraws(
        samples=np.stack(parts[0]),
        divergent=np.stack(parts[1]),
        accept_stat=np.stack(parts[2]),
        tree_depth=np.stack(parts[3]),
        n_leapfrog=np.stack(parts[4]),
        step_size=np.array(parts[5]),
        inv_mass=np.stack(parts[6]),
        seed=config.seed,
        dim=getattr(density, "dim", None),
        warmup_divergences=np.array(parts[7]),
    )


# ---------------------------------------------------------------- diagnostics


def _split(x):
    """(chains, draws) -> (2*chains, draws//2), dropping a middle draw if odd."""
    x = np.asarray(x, dtype=float)
    n = x.shape[1] // 2
    return np.concatenate([x[:, :n], x[:, x.shape[1] - n :]], axis=0)


def _rank_normalize(x):
    from scipy.special import ndtri
    from scipy.stats import rankdata

    flat = x.ravel()
    r = rankdata(flat, method="average").reshape(x.shape)
    return ndtri((r - 0.375) / (flat.size + 0.25))


def _rhat_basic(x):
    m, n = x.shape
    if n < 2:
        return np.nan
    means = x.mean(axis=1)
    w = x.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if w <= 0:
        return 1.0 if b <= 0 else np.inf
    return float(np.sqrt(((n - 1) / n * w + b / n) / w))


def split_rhat(x) -> float:
    """Rank-normalized split R-hat: max of the bulk and folded versions."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ConfigError("R-hat needs at least two chains")
    s = _split(x)
    bulk = _rhat_basic(_rank_normalize(s))
    folded = _rhat_basic(_rank_normalize(np.abs(s - np.median(s))))
    return float(max(bulk, folded))


def _autocov(x):
    n = x.shape[-1]
    size = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, size, axis=-1)
    ac = np.fft.irfft(f * np.conj(f), size, axis=-1)[..., :n]
    return ac / n


def ess(x) -> float:
    """Effective sample size of a (chains, draws) array with Geyer's monotone sequence."""
    x = np.asarray(x, dtype=float)
    m, n = x.shape
    if n < 4:
        return float(m * n)
    acov = _autocov(x)
    chain_var = acov[:, 0] * n / (n - 1)
    w = chain_var.mean()
    var_plus = w * (n - 1) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if var_plus <= 0:
        return float(m * n)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # sum adjacent pairs while positive, enforcing monotone decrease
    pairs = []
    t = 0
    while t + 1 < n:
        p = rho[t] + rho[t + 1]
        if p < 0:
            break
        if pairs and p > pairs[-1]:
            p = pairs[-1]
        pairs.append(p)
        t += 2
    tau = -1.0 + 2.0 * sum(pairs) if pairs else 1.0
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def ess_bulk(x) -> float:
    return ess(_rank_normalize(_split(np.asarray(x, dtype=float))))


def diagnostics(draws: PosteriorDraws, coords=None, rhat_limit: float = 1.05) -> dict:
    """Per-coordinate split R-hat and bulk ESS plus divergence summary.

    ``coords`` defaults to the graph coordinates.
    """
    if draws.n_chains < 2:
        raise ConfigError("R-hat needs at least two chains")
    x = draws.samples if coords is None else draws.samples[:, :, coords]
    if coords is None:
        x = x[:, :, : draws.n_graph]
    rhat = np.array([split_rhat(x[:, :, k]) for k in range(x.shape[2])])
    bulk = np.array([ess_bulk(x[:, :, k]) for k in range(x.shape[2])])
    finite = rhat[np.isfinite(rhat)]
    frac_bad = float(np.mean(~(rhat <= rhat_limit))) if rhat.size else 0.0
    div_rate = float(draws.divergent.mean())
    return {
        "rhat": rhat,
        "ess_bulk": bulk,
        "max_rhat": float(finite.max()) if finite.size else float("nan"),
        "min_ess_bulk": float(bulk.min()) if bulk.size else float("nan"),
        "frac_rhat_above_limit": frac_bad,
        "rhat_flag": frac_bad > 0.01,
        "divergence_rate": div_rate,
        "divergence_flag": div_rate > 0.02,
        "mean_accept": float(draws.accept_stat.mean()),
        "mean_tree_depth": float(draws.tree_depth.mean()),
        "step_size": draws.step_size.tolist(),
    }
