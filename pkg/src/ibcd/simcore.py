"""Ground-truth graphs and synthetic interventional datasets.

Data follow the linear model with soft (shift) interventions,

    Y = (X beta + eps) (I - G)^{-1},

with one intervention per variable, standard-normal exogenous noise, and all
columns standardized to mean 0 / variance 1 over the control rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from ._rng import stream
from .errors import ConfigError, NumericalError

# Edge-inclusion parameters that give a mean total degree of ~5 at each D,
# as calibrated for the scale-free generator. Used as the anchor of the
# p -> edge-density link in generate_sf_dag.
SF_CALIBRATION = {50: 0.066, 150: 0.108, 250: 0.124, 500: 0.139}
ER_CALIBRATION = {50: 0.10, 150: 0.033, 250: 0.02, 500: 0.01}
TARGET_DEGREE = 5.0


@dataclass(frozen=True)
class GraphSpec:
    dim: int
    topology: str = "ER"
    p: float = 0.1
    v: float = 0.25
    seed: int = 0
    # SF only: parent choice weight is (out_degree + 1) ** attachment_power
    attachment_power: float = 1.0

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigError(f"dimension must be >= 2, got {self.dim}")
        if self.topology not in ("ER", "SF"):
            raise ConfigError(f"unknown topology {self.topology!r}")
        if not 0.0 < self.p < 1.0:
            raise ConfigError(f"edge probability must lie in (0, 1), got {self.p}")
        if self.v <= 0:
            raise ConfigError(f"weight scale v must be positive, got {self.v}")


@dataclass
class WeightedGraph:
    """Weighted adjacency, ``weights[i, j]`` is the direct effect of i on j."""

    weights: np.ndarray
    is_dag: bool = True

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ConfigError(f"adjacency must be square, got shape {w.shape}")
        if np.any(np.diag(w) != 0):
            raise ConfigError("adjacency diagonal must be zero")
        self.weights = w
        if self.is_dag and not is_acyclic(w):
            raise ConfigError("graph flagged as DAG contains a cycle")

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @property
    def n_edges(self) -> int:
        return int(np.count_nonzero(self.weights))

    def support(self) -> np.ndarray:
        return self.weights != 0


@dataclass
class InterventionDesign:
    """Sample-by-intervention assignment plus known targets.

    ``targets[m]`` is the tuple of variables hit by intervention m; the usual
    single-target design has one variable per intervention.
    """

    assignment: np.ndarray
    targets: list
    beta: np.ndarray

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment).astype(np.int8)
        self.targets = [tuple(int(t) for t in np.atleast_1d(tg)) for tg in self.targets]
        self.beta = np.asarray(self.beta, dtype=float)
        n_int = self.assignment.shape[1]
        if len(self.targets) != n_int or self.beta.shape[0] != n_int:
            raise ConfigError("assignment, targets and beta disagree on the number of interventions")
        if np.any((self.assignment != 0) & (self.assignment != 1)):
            raise ConfigError("assignment matrix must be binary")
        off_target = (self.beta != 0) & ~self.target_matrix()
        if np.any(off_target):
            raise ConfigError("beta has nonzero entries outside the declared targets")

    @property
    def n_samples(self) -> int:
        return self.assignment.shape[0]

    @property
    def n_interventions(self) -> int:
        return self.assignment.shape[1]

    @property
    def dim(self) -> int:
        return self.beta.shape[1]

    def target_matrix(self) -> np.ndarray:
        tm = np.zeros((len(self.targets), self.beta.shape[1]), dtype=bool)
        for m, tg in enumerate(self.targets):
            tm[m, list(tg)] = True
        return tm

    def instruments_for(self, variable: int) -> np.ndarray:
        return np.flatnonzero(self.target_matrix()[:, variable])

    def is_single_guide(self) -> bool:
        return bool(np.all(self.assignment.sum(axis=1) <= 1))

    def is_complete(self) -> bool:
        return bool(np.all(self.target_matrix().any(axis=0)))

    def control_rows(self) -> np.ndarray:
        return np.flatnonzero(self.assignment.sum(axis=1) == 0)


@dataclass
class Dataset:
    Y: np.ndarray
    design: InterventionDesign
    control_rows: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float)
        self.control_rows = np.asarray(self.control_rows, dtype=np.int64)
        if self.Y.shape[0] != self.design.n_samples:
            raise ConfigError("Y and design disagree on the number of samples")
        if np.any(self.design.assignment[self.control_rows].sum(axis=1) != 0):
            raise ConfigError("control rows must carry no intervention")

    @property
    def dim(self) -> int:
        return self.Y.shape[1]

    @property
    def n_samples(self) -> int:
        return self.Y.shape[0]

    def subset(self, rows: Sequence[int]) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        design = InterventionDesign(self.design.assignment[rows], self.design.targets, self.design.beta)
        return Dataset(self.Y[rows], design, design.control_rows(), dict(self.meta))


# graph utilities -----------------------------------------------------------


def is_acyclic(weights: np.ndarray) -> bool:
    """Kahn peel: True iff every node can be removed in topological order."""
    adj = np.asarray(weights) != 0
    indeg = adj.sum(axis=0).astype(int)
    queue = [i for i in range(adj.shape[0]) if indeg[i] == 0]
    seen = 0
    while queue:
        node = queue.pop()
        seen += 1
        for child in np.flatnonzero(adj[node]):
            indeg[child] -= 1
            if indeg[child] == 0:
                queue.append(child)
    return seen == adj.shape[0]


def mean_degree(weights: np.ndarray) -> float:
    """Average total (in + out) degree."""
    return 2.0 * np.count_nonzero(weights) / weights.shape[0]


def pert_weights(v: float, size, rng: np.random.Generator) -> np.ndarray:
    """Signed PERT(v/2, v, 2v) magnitudes with equiprobable signs."""
    if v <= 0:
        raise ConfigError(f"v must be positive, got {v}")
    lo, mode, hi = 0.5 * v, v, 2.0 * v
    a = 1.0 + 4.0 * (mode - lo) / (hi - lo)
    b = 1.0 + 4.0 * (hi - mode) / (hi - lo)
    mag = lo + (hi - lo) * rng.beta(a, b, size=size)
    sign = np.where(rng.random(size=size) < 0.5, -1.0, 1.0)
    return sign * mag


def draw_pert_weight(v: float, rng: np.random.Generator) -> float:
    return float(pert_weights(v, None, rng))


def pert_mean(v: float) -> float:
    return (0.5 * v + 4.0 * v + 2.0 * v) / 6.0


def generate_er_dag(spec: GraphSpec) -> WeightedGraph:
    if spec.topology != "ER":
        raise ConfigError("generate_er_dag needs an ER spec")
    rng = stream(spec.seed, "simcore", "graph", "ER")
    d = spec.dim
    order = rng.permutation(d)
    upper = np.triu(rng.random((d, d)) < spec.p, k=1)
    w = np.zeros((d, d))
    rows, cols = np.nonzero(upper)
    w[order[rows], order[cols]] = pert_weights(spec.v, rows.size, rng)
    return WeightedGraph(w, is_dag=True)


def sf_reference_p(dim: int) -> float:
    """Edge parameter giving mean degree 5 for the SF generator at ``dim``.

    Piecewise linear in log(D) through SF_CALIBRATION, extrapolated with the
    end-segment slopes and floored at 1e-3.
    """
    ds = np.array(sorted(SF_CALIBRATION), dtype=float)
    ps = np.array([SF_CALIBRATION[int(d)] for d in ds])
    x = math.log(dim)
    lx = np.log(ds)
    if x <= lx[0]:
        slope = (ps[1] - ps[0]) / (lx[1] - lx[0])
        p = ps[0] + slope * (x - lx[0])
    elif x >= lx[-1]:
        slope = (ps[-1] - ps[-2]) / (lx[-1] - lx[-2])
        p = ps[-1] + slope * (x - lx[-1])
    else:
        p = float(np.interp(x, lx, ps))
    return max(float(p), 1e-3)


def _sf_parent_counts(n_edges: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    # spread edges evenly over nodes 1..D-1, node t can take at most t parents
    counts = np.zeros(dim, dtype=int)
    remaining = n_edges
    for t in range(1, dim):
        quota = remaining / (dim - t)
        k = int(math.floor(quota))
        if rng.random() < quota - k:
            k += 1
        k = min(k, t, remaining)
        counts[t] = k
        remaining -= k
    return counts


def generate_sf_dag(spec: GraphSpec) -> WeightedGraph:
    """Directed preferential attachment with out-hub bias.

    Nodes arrive in a random order; node t picks its parents among earlier
    nodes with weight (out_degree + 1) ** attachment_power, so early nodes
    become out-hubs. The edge budget is Binomial with mean D * 2.5 * p / p_ref(D),
    where p_ref is the calibrated degree-5 parameter (see sf_reference_p).
    """
    if spec.topology != "SF":
        raise ConfigError("generate_sf_dag needs an SF spec")
    rng = stream(spec.seed, "simcore", "graph", "SF")
    d = spec.dim
    n_pairs = d * (d - 1) // 2
    expected = 0.5 * TARGET_DEGREE * d * spec.p / sf_reference_p(d)
    n_edges = int(rng.binomial(n_pairs, min(1.0, expected / n_pairs)))
    counts = _sf_parent_counts(n_edges, d, rng)
    order = rng.permutation(d)
    out_deg = np.zeros(d)
    w = np.zeros((d, d))
    for t in range(1, d):
        k = counts[t]
        if k == 0:
            continue
        kernel = (out_deg[:t] + 1.0) ** spec.attachment_power
        parents = rng.choice(t, size=k, replace=False, p=kernel / kernel.sum())
        out_deg[parents] += 1
        w[order[parents], order[t]] = pert_weights(spec.v, k, rng)
    return WeightedGraph(w, is_dag=True)


def generate_graph(spec: GraphSpec) -> WeightedGraph:
    if spec.topology == "ER":
        return generate_er_dag(spec)
    return generate_sf_dag(spec)


def default_p(dim: int, topology: str) -> float:
    """Edge parameter targeting mean degree 5."""
    if topology == "ER":
        if dim in ER_CALIBRATION:
            return ER_CALIBRATION[dim]
        return min(TARGET_DEGREE / (dim - 1), 0.99)
    return sf_reference_p(dim)


def calibrate_p(dim: int, topology: str, target_degree: float = TARGET_DEGREE, n_rep: int = 20,
                seed: int = 0, tol: float = 0.05, max_iter: int = 40) -> float:
    """Bisection on p so the simulated mean degree over ``n_rep`` graphs hits the target."""

    def avg_degree(p):
        return np.mean([mean_degree(generate_graph(GraphSpec(dim, topology, p, seed=seed + r)).weights)
                        for r in range(n_rep)])

    lo, hi = 1e-6, 1.0 - 1e-6
    if avg_degree(hi) < target_degree:
        raise ConfigError(f"target degree {target_degree} unreachable at D={dim}")
    p = 0.5 * (lo + hi)
    for _ in range(max_iter):
        p = 0.5 * (lo + hi)
        deg = avg_degree(p)
        if abs(deg - target_degree) < tol:
            break
        if deg < target_degree:
            lo = p
        else:
            hi = p
    return p


# effects in standardized units ---------------------------------------------


def total_effects(weights: np.ndarray) -> np.ndarray:
    d = weights.shape[0]
    try:
        return np.linalg.inv(np.eye(d) - weights)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("I - G is singular") from exc


def control_scale(weights: np.ndarray, noise_var: float = 1.0) -> np.ndarray:
    """Population standard deviation of each variable among control samples."""
    r = total_effects(weights)
    return np.sqrt(noise_var * np.sum(r * r, axis=0))


def standardized_graph(graph: WeightedGraph) -> WeightedGraph:
    """Direct effects expressed in control-standardized units: s_i G_ij / s_j."""
    s = control_scale(graph.weights)
    return WeightedGraph(graph.weights * s[:, None] / s[None, :], is_dag=graph.is_dag)


def standardized_total_effects(graph: WeightedGraph) -> np.ndarray:
    s = control_scale(graph.weights)
    return total_effects(graph.weights) * s[:, None] / s[None, :]


# data ----------------------------------------------------------------------


def single_target_design(dim: int, n_per_intervention: int, n_control: int,
                         beta: np.ndarray) -> InterventionDesign:
    """Controls first, then one block of ``n_per_intervention`` rows per variable."""
    n = n_control + dim * n_per_intervention
    x = np.zeros((n, dim), dtype=np.int8)
    for m in range(dim):
        start = n_control + m * n_per_intervention
        x[start:start + n_per_intervention, m] = 1
    b = np.zeros((dim, dim))
    b[np.arange(dim), np.arange(dim)] = beta
    return InterventionDesign(x, list(range(dim)), b)


def simulate_dataset(graph: WeightedGraph, n_per_intervention: int = 100, n_control: int | None = None,
                     beta_strength: float = -2.0, seed: int = 0, intervention: str = "soft",
                     standardize: bool = True) -> Dataset:
    """Draw Y = (X beta + eps)(I - G)^{-1}.

    ``beta_strength`` is in control standard deviations of the target, so the
    raw shift of variable m is beta_strength * s_m. With ``intervention="hard"``
    the incoming edges of the target are cut in its intervened rows.
    """
    d = graph.dim
    if n_control is None:
        n_control = 100 * d
    if n_per_intervention < 1 or n_control < 2:
        raise ConfigError("need at least one intervened and two control samples per group")
    if intervention not in ("soft", "hard"):
        raise ConfigError(f"unknown intervention type {intervention!r}")
    g = graph.weights
    r = total_effects(g)
    if not np.all(np.isfinite(r)):
        raise NumericalError("I - G is singular")
    scale = np.sqrt(np.sum(r * r, axis=0))
    design = single_target_design(d, n_per_intervention, n_control, beta_strength * scale)

    rng = stream(seed, "simcore", "noise")
    eps = rng.standard_normal((design.n_samples, d))
    shift = design.assignment.astype(float) @ design.beta
    if intervention == "soft":
        y = (shift + eps) @ r
    else:
        y = np.empty_like(eps)
        ctrl = design.control_rows()
        y[ctrl] = eps[ctrl] @ r
        for m in range(d):
            rows = np.flatnonzero(design.assignment[:, m])
            g_cut = g.copy()
            g_cut[:, m] = 0.0
            y[rows] = (shift[rows] + eps[rows]) @ total_effects(g_cut)
    data = Dataset(y, design, design.control_rows(),
                   {"seed": seed, "beta_strength": beta_strength, "intervention": intervention,
                    "n_per_intervention": n_per_intervention, "n_control": n_control})
    return standardize_controls(data) if standardize else data


def standardize_controls(data: Dataset) -> Dataset:
    """Affine per-column map making control rows mean 0, variance 1 (ddof=0)."""
    if data.control_rows.size < 2:
        raise ConfigError("need at least two control rows to standardize")
    ctrl = data.Y[data.control_rows]
    mu = ctrl.mean(axis=0)
    sd = ctrl.std(axis=0)
    bad = np.flatnonzero(~(sd > 0))
    if bad.size:
        raise NumericalError(f"zero control variance in column(s) {bad.tolist()}")
    y = (data.Y - mu) / sd
    meta = dict(data.meta)
    meta["standardized"] = True
    return replace(data, Y=y, meta=meta)


def split_dataset(data: Dataset, n_folds: int, seed: int = 0) -> list[Dataset]:
    """Stratified split: every intervention group and the controls are dealt across folds."""
    if n_folds < 2:
        raise ConfigError("need at least two folds")
    rng = stream(seed, "simcore", "split")
    x = data.design.assignment
    labels = np.where(x.sum(axis=1) == 0, -1, np.argmax(x, axis=1))
    fold_of = np.empty(data.n_samples, dtype=int)
    for lab in np.unique(labels):
        rows = rng.permutation(np.flatnonzero(labels == lab))
        fold_of[rows] = np.arange(rows.size) % n_folds
    return [data.subset(np.flatnonzero(fold_of == f)) for f in range(n_folds)]


def replicate_graphs(dim: int, topology: str, seeds: Iterable[int], p: float | None = None,
                     v: float = 0.25) -> list[WeightedGraph]:
    p = default_p(dim, topology) if p is None else p
    return [generate_graph(GraphSpec(dim, topology, p, v, seed=s)) for s in seeds]
