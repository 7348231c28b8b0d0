import numpy as np
import pytest

from ibcd import ingest
from ibcd.errors import ConfigError, NumericalError


@pytest.fixture
def batch():
    rng = np.random.default_rng(0)
    n = 300
    groups = np.repeat(["a", "b", "c"], 100)
    control = np.zeros(n, dtype=bool)
    control[::3] = True
    cov = np.column_stack([rng.poisson(5, n), rng.random(n)])
    y = rng.standard_normal((n, 4)) + cov @ rng.standard_normal((2, 4)) + (groups == "b")[:, None] * 3
    return y, ingest.CovariateSpec(cov, groups, control)


def test_residuals_orthogonal_to_covariates(batch):
    y, spec = batch
    r = ingest.residualize(y, spec)
    x = np.column_stack([np.ones(y.shape[0]), spec.covariates])
    np.testing.assert_allclose(x.T @ r, 0, atol=1e-9)


def test_zero_covariate_dropped(batch):
    y, spec = batch
    wider = ingest.CovariateSpec(np.column_stack([spec.covariates, np.zeros(y.shape[0])]),
                                 spec.group_labels, spec.control_mask)
    np.testing.assert_allclose(ingest.residualize(y, wider), ingest.residualize(y, spec), atol=1e-12)


def test_rank_deficient_design_fails(batch):
    y, spec = batch
    dup = ingest.CovariateSpec(np.column_stack([spec.covariates, 2 * spec.covariates[:, 0]]),
                               spec.group_labels, spec.control_mask)
    with pytest.raises(NumericalError):
        ingest.residualize(y, dup)


def test_control_standardization_per_group(batch):
    y, spec = batch
    z = ingest.ntc_standardize(ingest.residualize(y, spec), spec)
    for g in "abc":
        ctrl = z[(spec.group_labels == g) & spec.control_mask]
        np.testing.assert_allclose(ctrl.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(ctrl.std(axis=0, ddof=1), 1, atol=1e-12)


def test_constant_control_column_fails(batch):
    y, spec = batch
    r = ingest.residualize(y, spec)
    r[(spec.group_labels == "b") & spec.control_mask, 2] = 0.5
    with pytest.raises(NumericalError, match="column 2 in group 'b'"):
        ingest.ntc_standardize(r, spec)


def test_spec_validation():
    with pytest.raises(ConfigError):
        ingest.CovariateSpec(np.ones((4, 1)), ["a"] * 3, [True] * 4)
    with pytest.raises(ConfigError, match="fewer than two"):
        ingest.CovariateSpec(np.ones((4, 1)), ["a", "a", "b", "b"], [True, True, True, False])


def test_instrument_filter():
    rng = np.random.default_rng(1)
    n = 400
    targets = np.full(n, -1)
    targets[100:200] = 0
    targets[200:300] = 1
    targets[300:330] = 2  # too few cells
    control = targets == -1
    z = rng.standard_normal((n, 3)) * 0.1
    z[100:200, 0] -= 1.0  # strong knock-down
    z[200:300, 1] -= 0.5  # too weak
    z[300:330, 2] -= 2.0
    keep = ingest.instrument_filter(z, targets, control)
    assert keep.tolist() == [True, False, False]
    assert ingest.instrument_filter(z, targets, control, min_cells=30).tolist() == [True, False, True]
