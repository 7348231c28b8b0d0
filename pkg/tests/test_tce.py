import math

import numpy as np
import pytest
from scipy import stats

from ibcd import simcore, tce
from ibcd.errors import NumericalError, WeakInstrumentError
from ibcd.simcore import Dataset, GraphSpec, InterventionDesign, WeightedGraph

from conftest import path_sum_effects


def two_var_dataset(y, treated_rows, n):
    """Variable 0 instrumented on ``treated_rows``; variable 1 on nothing unless given."""
    x = np.zeros((n, 1), dtype=np.int8)
    x[treated_rows, 0] = 1
    design = InterventionDesign(x, [0], np.array([[1.0, 0.0]]))
    return Dataset(y, design, design.control_rows())


def test_noiseless_wald_ratio_is_exact():
    n = 40
    treated = np.arange(20, 40)
    y = np.zeros((n, 2))
    y[treated, 0] = 1.0
    y[:, 1] = 2.0 * y[:, 0]
    data = two_var_dataset(y, treated, n)
    for mode in ("estimated", "known"):
        r, yhat = tce.estimate_2sls(data, 0, 1, control_mean=mode)
        assert r == pytest.approx(2.0, abs=1e-14)
        assert yhat.shape == (n,)


def test_zero_first_stage_is_weak_instrument():
    rng = np.random.default_rng(0)
    base = rng.standard_normal(20)
    y = np.column_stack([np.concatenate([base, base]), rng.standard_normal(40)])
    data = two_var_dataset(y, np.arange(20, 40), 40)
    with pytest.raises(WeakInstrumentError) as err:
        tce.first_stage(data, 0)
    assert err.value.variable == 0


def test_missing_instrument_names_variable():
    y = np.random.default_rng(1).standard_normal((30, 2))
    data = two_var_dataset(y, np.arange(10, 30), 30)
    with pytest.raises(WeakInstrumentError, match="variable 1"):
        tce.build_summary(data)


def _chain(weight=0.5):
    w = np.zeros((2, 2))
    w[0, 1] = weight
    return WeightedGraph(w)


@pytest.fixture(scope="module")
def chain_replicates():
    g = _chain()
    truth = simcore.standardized_total_effects(g)[0, 1]
    z = []
    for rep in range(200):
        data = simcore.simulate_dataset(g, 5000, 5000, seed=1000 + rep)
        s = tce.build_summary(data)
        z.append((s.r_hat[0, 1] - truth) / s.se[0, 1])
    return np.array(z)


def test_chain_coverage(chain_replicates):
    assert np.mean(np.abs(chain_replicates) < 3) >= 0.99


def test_chain_standardized_errors_are_normal(chain_replicates):
    assert stats.kstest(chain_replicates, "norm").pvalue > 0.01


def test_ols_hard_exact_ratio():
    n = 30
    rng = np.random.default_rng(2)
    y = rng.standard_normal((n, 2))
    treated = np.arange(10, 30)
    y[treated, 1] = 0.7 * y[treated, 0]
    data = two_var_dataset(y, treated, n)
    assert tce.estimate_ols_hard(data, 0, 1) == pytest.approx(0.7, abs=1e-14)


def test_ols_hard_independent_is_zero():
    n = 20000
    rng = np.random.default_rng(3)
    y = rng.standard_normal((n, 2))
    treated = np.arange(n // 2, n)
    data = two_var_dataset(y, treated, n)
    est = tce.estimate_ols_hard(data, 0, 1)
    se = 1.0 / math.sqrt(np.sum(y[treated, 0] ** 2))
    assert abs(est) < 3 * se


def test_ols_hard_matches_cut_graph_path_sums():
    g = simcore.generate_graph(GraphSpec(5, "ER", 0.6, seed=2))
    data = simcore.simulate_dataset(g, 20000, 1000, seed=2, intervention="hard", standardize=False)
    for i in range(5):
        cut = g.weights.copy()
        cut[:, i] = 0.0
        r = path_sum_effects(cut)
        rows = np.flatnonzero(data.design.assignment[:, i])
        yi = data.Y[rows, i]
        for j in range(5):
            if j == i:
                continue
            est = tce.estimate_ols_hard(data, i, j)
            resid = data.Y[rows, j] - est * yi
            se = math.sqrt(resid.var() / (yi @ yi))
            assert abs(est - r[i, j]) < 3 * se + 1e-12


def test_hard_and_soft_estimates_differ_under_confounding():
    # 2 -> 0 and 2 -> 1 confound the 0 -> 1 effect only in OLS on soft data
    w = np.zeros((3, 3))
    w[2, 0], w[2, 1], w[0, 1] = 0.8, 0.8, 0.3
    data = simcore.simulate_dataset(WeightedGraph(w), 2000, 3000, seed=4)
    iv = tce.build_summary(data, method="iv")
    ols = tce.build_summary(data, method="ols_hard")
    assert abs(iv.r_hat[0, 1] - ols.r_hat[0, 1]) > 5 * iv.se[0, 1]


@pytest.fixture(scope="module")
def d5():
    g = simcore.generate_graph(GraphSpec(5, "ER", 0.5, seed=3))
    data = simcore.simulate_dataset(g, 300, 1500, seed=3)
    proj = tce.compute_projections(data)
    r = tce.total_effect_matrix(data, proj)
    res = tce.ResidualField(data.Y, r, proj.noise_rows)
    return g, data, proj, r, res


def test_residuals_orthogonal_to_fit(d5):
    _, data, proj, r, res = d5
    n = data.n_samples
    for i in range(5):
        for j in range(5):
            assert abs(proj.yhat[:, i] @ res.vector(i, j)) < 1e-8 * n


def test_covariance_entry_diagonal_is_classical_variance(d5):
    _, data, proj, r, res = d5
    summary = tce.build_summary(data)
    for i, j in [(0, 1), (2, 4), (3, 0)]:
        s = tce.covariance_entry(res, proj, i, j, i, j)
        rows = proj.noise_rows[i]
        e = res.vector(i, j)[rows]
        yhat = proj.yhat[:, i]
        classical = e.var(ddof=1) / (yhat @ yhat)
        assert s == pytest.approx(classical, rel=1e-12)
        assert s == pytest.approx(summary.se[i, j] ** 2, rel=1e-12)


def test_covariance_entry_exchangeable(d5):
    _, _, proj, _, res = d5
    rng = np.random.default_rng(0)
    for _ in range(30):
        i, j, k, l = rng.integers(0, 5, 4)
        a = tce.covariance_entry(res, proj, i, j, k, l)
        b = tce.covariance_entry(res, proj, k, l, i, j)
        assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


def test_single_guide_cross_exposure_covariance_is_zero_with_known_control_mean(d5):
    _, data, _, _, _ = d5
    proj = tce.compute_projections(data, control_mean="known")
    r = tce.total_effect_matrix(data, proj)
    res = tce.ResidualField(data.Y, r, proj.noise_rows)
    assert tce.covariance_entry(res, proj, 0, 1, 2, 3) == 0.0
    u = tce.estimate_row_cov_u(proj)
    np.testing.assert_array_equal(u - np.diag(np.diag(u)), 0.0)
    assert np.all(np.diag(u) > 0)


def test_shared_instrument_gives_offdiagonal_u():
    rng = np.random.default_rng(5)
    d, n_c, n_t = 3, 400, 200
    n = n_c + 2 * n_t
    x = np.zeros((n, 2), dtype=np.int8)
    x[n_c:n_c + n_t, 0] = 1
    x[n_c + n_t:, 1] = 1
    # intervention 0 hits variables 0 and 1, intervention 1 hits variable 2
    beta = np.array([[-1.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    design = InterventionDesign(x, [(0, 1), (2,)], beta)
    y = x.astype(float) @ beta + rng.standard_normal((n, d))
    data = Dataset(y, design, design.control_rows())
    proj = tce.compute_projections(data, control_mean="known")
    u = tce.estimate_row_cov_u(proj)
    a, b = proj.yhat[:, 0], proj.yhat[:, 1]
    direct = (a @ b) / ((a @ a) * (b @ b))
    assert u[0, 1] == pytest.approx(direct, rel=1e-12)
    assert u[0, 1] != 0
    assert u[0, 2] == 0 and u[1, 2] == 0
    share = tce.instrument_sharing(data)
    assert share[0, 1] and not share[0, 2]


def test_v_near_diagonal_for_independent_noise():
    g = WeightedGraph(np.zeros((4, 4)))
    data = simcore.simulate_dataset(g, 500, 20000, seed=6)
    s = tce.build_summary(data)
    n_c = data.control_rows.size
    off = ~np.eye(4, dtype=bool)
    # off-diagonal of a covariance between independent unit-variance noises has SE ~ 1/sqrt(n)
    assert np.all(np.abs(s.v[off]) < 3 / math.sqrt(n_c))
    assert np.all(np.diag(s.v) > 0)


def test_summary_invariants(d5):
    _, data, _, _, _ = d5
    s = tce.build_summary(data)
    np.testing.assert_array_equal(np.diag(s.r_hat), 1.0)
    for m in (s.u, s.v):
        np.testing.assert_allclose(m, m.T, atol=1e-10)
        assert np.linalg.eigvalsh(m).min() >= -1e-10
    off = ~np.eye(5, dtype=bool)
    assert np.all(np.isfinite(s.se)) and np.all(s.se[off] > 0)
    assert s.n_obs == data.n_samples


def test_two_variable_summary_matches_scalar_runs():
    data = simcore.simulate_dataset(_chain(0.6), 200, 400, seed=9)
    s = tce.build_summary(data)
    assert s.r_hat[0, 1] == pytest.approx(tce.estimate_2sls(data, 0, 1)[0], rel=1e-12)
    assert s.r_hat[1, 0] == pytest.approx(tce.estimate_2sls(data, 1, 0)[0], rel=1e-12)


def test_scale_shapes_d50():
    g = simcore.generate_graph(GraphSpec(50, "ER", 0.10, seed=0))
    s = tce.build_summary(simcore.simulate_dataset(g, 100, seed=0))
    assert s.r_hat.shape == s.u.shape == s.v.shape == s.se.shape == (50, 50)
    off = ~np.eye(50, dtype=bool)
    assert np.all(s.se[off] > 0)


def test_estimation_error_shrinks_with_n():
    errs = {n: [] for n in (5, 25, 100)}
    for seed in range(10):
        g = simcore.generate_graph(GraphSpec(10, "ER", 5 / 9, seed=seed))
        truth = simcore.standardized_total_effects(g)
        for n in errs:
            s = tce.build_summary(simcore.simulate_dataset(g, n, seed=seed))
            errs[n].append(np.linalg.norm(s.r_hat - truth) / np.linalg.norm(truth))
    means = [np.mean(errs[n]) for n in (5, 25, 100)]
    assert means[0] > means[1] > means[2]


def test_psd_repair_clips_negative_eigenvalues():
    m = np.array([[1.0, 2.0], [2.0, 1.0]])
    out = tce.psd_repair(m)
    w = np.linalg.eigvalsh(out)
    assert w.min() == pytest.approx(1e-8 * 3.0)
    with pytest.raises(NumericalError):
        tce.psd_repair(-np.eye(2))
