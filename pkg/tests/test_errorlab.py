import json

import numpy as np
import pytest

from srcr.errorlab import (
    SyntheticLayerSpec,
    case_ab_experiment,
    delta_estimation_experiment,
    error_ratios,
    generate_layer,
    records_to_csv,
    records_to_json,
    run_experiments,
)
from srcr.exceptions import DataError


def test_generate_layer_is_deterministic():
    a = generate_layer(SyntheticLayerSpec(7, 8, 8, 32, calib_correlation=0.3))
    b = generate_layer(SyntheticLayerSpec(7, 8, 8, 32, calib_correlation=0.3))
    assert all(u.tobytes() == v.tobytes() for u, v in zip(a, b))


def test_uncorrelated_hessian_is_nearly_diagonal():
    _, x = generate_layer(SyntheticLayerSpec(0, 1, 6, 100_000))
    h = x @ x.T
    off = np.abs(h - np.diag(np.diag(h))).max()
    assert off / np.diag(h).min() < 0.05


def test_correlated_features():
    _, x = generate_layer(SyntheticLayerSpec(0, 1, 6, 100_000, calib_correlation=0.9))
    c = np.corrcoef(x)[np.triu_indices(6, 1)]
    assert np.all((c >= 0.85) & (c <= 0.95))


def test_spec_validation():
    with pytest.raises(DataError):
        SyntheticLayerSpec(0, calib_correlation=1.0)
    with pytest.raises(DataError):
        SyntheticLayerSpec(0, out_dim=0)


def test_error_ratios_edge_cases():
    assert error_ratios([0.0, 1.0, 2.0], [0.0, 0.0, 4.0]).tolist() == [1.0, np.inf, 0.5]


def test_zero_sparsity_traces_match():
    res = case_ab_experiment(SyntheticLayerSpec(1, 16, 32, 128, calib_correlation=0.5), 0, 4)
    assert res.trace_a.per_column_error.tobytes() == res.trace_b.per_column_error.tobytes()
    assert np.all(res.ratio_per_column == 1)


def test_active_terms_follow_density():
    spec = SyntheticLayerSpec(2, 32, 32, 256, calib_correlation=0.5)
    res = case_ab_experiment(spec, "1/4", 4)
    assert np.array_equal(res.trace_b.active_terms, res.mask.sum(axis=0))
    assert res.trace_b.active_terms.sum() == 32 * 24
    assert np.all(res.trace_a.active_terms == 32)


@pytest.mark.parametrize("rho", [0.0, 0.5, 0.9])
def test_ratio_drifts_from_one_with_sparsity(rho):
    spec = SyntheticLayerSpec(42, calib_correlation=rho)
    dist = [abs(np.median(case_ab_experiment(spec, s, 4).ratio_per_column) - 1) for s in (0, 0.05, 0.1, 0.25)]
    assert all(a <= b for a, b in zip(dist, dist[1:]))


def test_low_sparsity_cases_agree():
    rel = []
    for seed in range(20):
        r = case_ab_experiment(SyntheticLayerSpec(seed, calib_correlation=0.5), 0.05, 4)
        rel.append(abs(r.trace_a.layer_objective - r.trace_b.layer_objective) / r.trace_a.layer_objective)
    assert np.median(rel) < 0.05


def test_delta_rows_and_bit_ordering():
    for seed in range(5):
        rows = delta_estimation_experiment(SyntheticLayerSpec(seed), (0, 0), (4, 8))
        assert [r.simple_scheme for r in rows] == ["nf4", "int8_absmax"]
        assert rows[1].e_simple_total < rows[0].e_simple_total
        assert all(np.isfinite(r.delta_measured) for r in rows)
        assert all(r.e_model_total > 0 for r in rows)


def test_delta_levels_must_pair():
    with pytest.raises(DataError):
        delta_estimation_experiment(SyntheticLayerSpec(0, 8, 8, 16), (0, 0.5), (4,))


def test_run_experiments_parallel_matches_serial():
    specs = [SyntheticLayerSpec(s, 8, 16, 64, calib_correlation=0.5) for s in (3, 1, 2)]
    serial = run_experiments("case_ab", specs, 1, sparsity="1/4", bits=3, group_size=8)
    parallel = run_experiments("case_ab", specs, 3, sparsity="1/4", bits=3, group_size=8)
    assert records_to_json(serial) == records_to_json(parallel)
    assert [r["spec"]["seed"] for r in serial] == [1, 2, 3]
    assert records_to_csv(serial).count("\n") == 4
    json.loads(records_to_json(serial))
    with pytest.raises(DataError):
        run_experiments("other", specs)
