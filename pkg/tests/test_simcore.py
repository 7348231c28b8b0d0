import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ibcd import simcore
from ibcd.errors import ConfigError, NumericalError
from ibcd.simcore import GraphSpec, WeightedGraph, generate_graph

from conftest import has_cycle_bruteforce, path_sum_effects


def test_er_edge_count_binomial():
    g = generate_graph(GraphSpec(50, "ER", 0.10, seed=11))
    n_pairs = 50 * 49 // 2
    mean = 0.10 * n_pairs
    sd = math.sqrt(n_pairs * 0.10 * 0.90)
    assert abs(g.n_edges - mean) <= 3 * sd


def test_er_tiny_p_gives_empty_graph():
    g = generate_graph(GraphSpec(10, "ER", 1e-9, seed=0))
    assert g.n_edges == 0
    np.testing.assert_array_equal(simcore.total_effects(g.weights), np.eye(10))


@pytest.mark.parametrize("seed", range(5))
def test_er_acyclic_bruteforce(seed):
    g = generate_graph(GraphSpec(6, "ER", 0.5, seed=seed))
    assert g.n_edges > 0
    assert not has_cycle_bruteforce(g.weights)


def test_bruteforce_detects_cycle():
    w = np.zeros((4, 4))
    w[0, 1] = w[1, 2] = w[2, 0] = 0.3
    assert has_cycle_bruteforce(w)
    assert not simcore.is_acyclic(w)
    with pytest.raises(ConfigError):
        WeightedGraph(w, is_dag=True)


@pytest.mark.parametrize("topology", ["ER", "SF"])
@pytest.mark.parametrize("dim", [50, 150, 250, 500])
def test_calibrated_mean_degree(topology, dim):
    cal = simcore.ER_CALIBRATION if topology == "ER" else simcore.SF_CALIBRATION
    degs = [simcore.mean_degree(generate_graph(GraphSpec(dim, topology, cal[dim], seed=s)).weights)
            for s in range(20)]
    assert abs(np.mean(degs) - 5.0) <= 0.5


def test_sf_two_nodes():
    for s in range(20):
        g = generate_graph(GraphSpec(2, "SF", 0.5, seed=s))
        assert g.n_edges <= 1
        assert simcore.is_acyclic(g.weights)


def test_sf_heavier_out_degree_tail_than_er():
    wins = 0
    for s in range(50):
        sf = generate_graph(GraphSpec(50, "SF", 0.066, seed=s))
        er = generate_graph(GraphSpec(50, "ER", 0.10, seed=s))
        wins += (sf.support().sum(axis=1).max() > er.support().sum(axis=1).max())
    assert wins >= 40


def test_pert_bounds_and_mean():
    rng = np.random.default_rng(0)
    w = simcore.pert_weights(0.25, 100_000, rng)
    assert np.all(np.abs(w) >= 0.125) and np.all(np.abs(w) <= 0.5)
    assert abs(np.abs(w).mean() - 0.2708) < 0.01
    assert simcore.pert_mean(0.25) == pytest.approx((0.125 + 1.0 + 0.5) / 6)
    # signs equiprobable
    assert abs(np.mean(w > 0) - 0.5) < 0.01


def test_pert_tiny_scale():
    g = generate_graph(GraphSpec(8, "ER", 0.5, v=1e-12, seed=1))
    assert np.max(np.abs(g.weights)) <= 2e-12
    np.testing.assert_allclose(simcore.total_effects(g.weights), np.eye(8), atol=1e-10)


def test_pert_rejects_nonpositive_scale():
    with pytest.raises(ConfigError):
        simcore.pert_weights(0.0, 3, np.random.default_rng(0))


@pytest.mark.parametrize("kw", [dict(dim=1), dict(dim=5, p=0.0), dict(dim=5, p=1.0), dict(dim=5, topology="XX")])
def test_graph_spec_validation(kw):
    base = dict(dim=5, topology="ER", p=0.3)
    base.update(kw)
    with pytest.raises(ConfigError):
        GraphSpec(**base)


def test_generation_is_bit_reproducible():
    for top in ("ER", "SF"):
        a = generate_graph(GraphSpec(30, top, 0.2, seed=7)).weights
        b = generate_graph(GraphSpec(30, top, 0.2, seed=7)).weights
        assert a.tobytes() == b.tobytes()
    g = generate_graph(GraphSpec(10, "ER", 0.3, seed=7))
    d1 = simcore.simulate_dataset(g, 20, seed=3)
    d2 = simcore.simulate_dataset(g, 20, seed=3)
    assert d1.Y.tobytes() == d2.Y.tobytes()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), dim=st.integers(2, 25), p=st.floats(0.01, 0.99),
       top=st.sampled_from(["ER", "SF"]))
def test_generated_graphs_are_dags(seed, dim, p, top):
    g = generate_graph(GraphSpec(dim, top, p, seed=seed))
    assert np.all(np.diag(g.weights) == 0)
    assert simcore.is_acyclic(g.weights)


def test_dataset_shape_at_scale():
    g = generate_graph(GraphSpec(50, "ER", 0.10, seed=0))
    data = simcore.simulate_dataset(g, 100, 5000, seed=0)
    assert data.Y.shape == (10_000, 50)
    assert data.control_rows.size == 5000
    assert data.design.is_single_guide() and data.design.is_complete()


def test_empty_graph_intervention_shift():
    g = WeightedGraph(np.zeros((4, 4)))
    data = simcore.simulate_dataset(g, 100, 4000, beta_strength=-2.0, seed=2)
    x = data.design.assignment
    for m in range(4):
        rows = np.flatnonzero(x[:, m])
        means = data.Y[rows].mean(axis=0)
        assert abs(means[m] + 2.0) < 3 / math.sqrt(100)
        others = np.delete(means, m)
        assert np.all(np.abs(others) < 3 / math.sqrt(100))


def test_chain_shift_propagates():
    w = np.zeros((2, 2))
    w[0, 1] = 0.5
    data = simcore.simulate_dataset(WeightedGraph(w), 2000, 20000, beta_strength=-2.0, seed=4)
    rows = np.flatnonzero(data.design.assignment[:, 0])
    # column 1 has control SD sqrt(1 + 0.5^2); the shift of column 0 is -2 SDs = -2 raw units
    expected = -2.0 * 0.5 / math.sqrt(1.25)
    se = data.Y[rows, 1].std() / math.sqrt(rows.size)
    assert abs(data.Y[rows, 1].mean() - expected) < 3 * se


def test_standardize_controls_properties():
    g = generate_graph(GraphSpec(6, "ER", 0.4, seed=1))
    raw = simcore.simulate_dataset(g, 30, 200, seed=1, standardize=False)
    std = simcore.standardize_controls(raw)
    ctrl = std.Y[std.control_rows]
    np.testing.assert_allclose(ctrl.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(ctrl.var(axis=0), 1, atol=1e-12)
    again = simcore.standardize_controls(std)
    np.testing.assert_allclose(again.Y, std.Y, atol=1e-12)


def test_standardize_constant_column_fails():
    g = WeightedGraph(np.zeros((3, 3)))
    raw = simcore.simulate_dataset(g, 5, 10, seed=0, standardize=False)
    y = raw.Y.copy()
    y[:, 1] = 3.0
    from dataclasses import replace

    with pytest.raises(NumericalError):
        simcore.standardize_controls(replace(raw, Y=y))


def test_structural_regression_recovers_beta():
    g = generate_graph(GraphSpec(6, "ER", 0.5, seed=8))
    data = simcore.simulate_dataset(g, 500, 3000, seed=8, standardize=False)
    x = data.design.assignment.astype(float)
    for j in range(6):
        parents = np.flatnonzero(g.weights[:, j])
        design = np.column_stack([x[:, j], data.Y[:, parents]])
        coef, *_ = np.linalg.lstsq(design, data.Y[:, j], rcond=None)
        resid = data.Y[:, j] - design @ coef
        sigma2 = resid @ resid / (design.shape[0] - design.shape[1])
        se = np.sqrt(sigma2 * np.diag(np.linalg.inv(design.T @ design)))
        assert abs(coef[0] - data.design.beta[j, j]) < 3 * se[0]
        np.testing.assert_array_less(np.abs(coef[1:] - g.weights[parents, j]), 3 * se[1:] + 1e-12)


def test_hard_intervention_cuts_incoming_edges():
    w = np.zeros((2, 2))
    w[0, 1] = 0.8
    data = simcore.simulate_dataset(WeightedGraph(w), 4000, 4000, seed=1, intervention="hard",
                                    standardize=False)
    rows = np.flatnonzero(data.design.assignment[:, 1])
    # with the 0 -> 1 edge cut, column 1 no longer tracks column 0
    assert abs(np.corrcoef(data.Y[rows, 0], data.Y[rows, 1])[0, 1]) < 0.05
    ctrl = data.control_rows
    assert np.corrcoef(data.Y[ctrl, 0], data.Y[ctrl, 1])[0, 1] > 0.5


def test_standardized_graph_matches_scaled_path_sums():
    g = generate_graph(GraphSpec(7, "ER", 0.5, seed=3))
    r = path_sum_effects(g.weights)
    s = np.sqrt((r ** 2).sum(axis=0))
    np.testing.assert_allclose(simcore.standardized_total_effects(g), r * s[:, None] / s[None, :], atol=1e-12)
    gs = simcore.standardized_graph(g)
    assert np.array_equal(gs.support(), g.support())


def test_split_dataset_is_stratified_partition():
    g = generate_graph(GraphSpec(5, "ER", 0.4, seed=0))
    data = simcore.simulate_dataset(g, 20, 100, seed=0)
    folds = simcore.split_dataset(data, 2, seed=1)
    assert sum(f.n_samples for f in folds) == data.n_samples
    for f in folds:
        assert f.design.is_complete()
        assert f.control_rows.size == 50
    with pytest.raises(ConfigError):
        simcore.split_dataset(data, 1)


def test_singular_graph_rejected():
    w = np.array([[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(NumericalError):
        simcore.simulate_dataset(WeightedGraph(w, is_dag=False), 5, 5)
