from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srcr.errorlab import SyntheticLayerSpec, generate_layer
from srcr.exceptions import DataError
from srcr.metrics import CompressionConfig, NMPattern
from srcr.pruning import (
    magnitude_mask,
    mask_overhead_bits,
    prune_config,
    pruned_per_row,
    sparsegpt_prune,
    validate_mask,
)
from srcr.quantization import layer_objective

ROW = np.array([[0.1, -0.5, 0.3, 0.2]])


def test_identity_calibration_example():
    rep = sparsegpt_prune(ROW, np.eye(4), prune_config("1/4"))
    assert rep.mask.tolist() == [[False, True, True, True]]
    assert np.allclose(rep.pruned_weights, [[0.0, -0.5, 0.3, 0.2]])
    rep = sparsegpt_prune(ROW, np.eye(4), prune_config(None, "1:4"))
    assert rep.mask.tolist() == [[False, True, True, True]]


def test_zero_sparsity_is_noop():
    rep = sparsegpt_prune(ROW, np.eye(4), CompressionConfig())
    assert rep.mask.all() and np.array_equal(rep.pruned_weights, ROW)
    assert magnitude_mask(ROW, CompressionConfig()).all()


def test_magnitude_examples():
    w = np.array([[1.0, -2.0, 3.0, -4.0]])
    assert magnitude_mask(w, prune_config("1/2")).tolist() == [[False, False, True, True]]
    assert magnitude_mask(w, prune_config(None, "2:4")).tolist() == [[False, False, True, True]]


def test_magnitude_ties_go_to_lower_index():
    w = np.ones((1, 4))
    assert magnitude_mask(w, prune_config("1/2")).tolist() == [[False, False, True, True]]


def test_overhead_bits():
    assert mask_overhead_bits("2:8") == pytest.approx(0.6009, abs=1e-4)
    assert mask_overhead_bits(NMPattern(2, 4)) == pytest.approx(0.6462, abs=1e-4)
    assert mask_overhead_bits(NMPattern(0, 4)) == 0
    assert mask_overhead_bits("unstructured") == 1.0


def test_validate_mask_examples():
    assert validate_mask(np.array([[False, False, True, True]]), "1:4").violations[0].zeros == 2
    assert validate_mask(np.ones((3, 8), bool), "none", 0).valid
    rep = sparsegpt_prune(*generate_layer(SyntheticLayerSpec(0, 8, 16, 64)), prune_config(None, "1:4"))
    assert validate_mask(rep.mask, "1:4").valid


def test_validate_mask_flags_ragged_group_and_density():
    assert not validate_mask(np.ones((2, 6), bool), "1:4").valid
    mask = np.ones((2, 8), bool)
    mask[0, :4] = False
    report = validate_mask(mask, "unstructured", Fraction(1, 4))
    assert [v.row for v in report.violations] == [0, 1]


def test_nm_requires_divisible_width():
    with pytest.raises(DataError):
        sparsegpt_prune(np.ones((2, 6)), np.eye(6), prune_config(None, "2:4"))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["2:4", "1:4", "2:8", "2:6", "1:3"]), st.integers(1, 48))
def test_nm_masks_always_comply(seed, pattern, block):
    w, x = generate_layer(SyntheticLayerSpec(seed, 6, 24, 48, calib_correlation=0.5))
    target = prune_config(None, pattern)
    for mask in (sparsegpt_prune(w, x, target, block_size=block).mask, magnitude_mask(w, target)):
        report = validate_mask(mask, pattern)
        assert report.valid
        assert report.achieved_sparsity == float(target.sparsity)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.fractions(0, 1, max_denominator=20), st.integers(1, 30), st.integers(1, 30))
def test_unstructured_rows_hit_target(seed, s, cols, block):
    w, x = generate_layer(SyntheticLayerSpec(seed, 4, cols, 40))
    target = CompressionConfig(s, 16)
    mask = sparsegpt_prune(w, x, target, block_size=block).mask
    zeros = (~mask).sum(axis=1)
    assert np.all(zeros == pruned_per_row(s, cols))
    assert np.all(np.abs(zeros - float(s) * cols) <= 0.5 + 1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["1/4", "1/2", "2:4", "2:8"]))
def test_identity_calibration_matches_magnitude(seed, target):
    rng = np.random.default_rng(seed)
    w = rng.permutation(np.arange(1, 33, dtype=float)).reshape(4, 8) * rng.choice([-1, 1], (4, 8))
    cfg = prune_config(None, target) if ":" in target else prune_config(target)
    assert np.array_equal(sparsegpt_prune(w, np.eye(8), cfg).mask, magnitude_mask(w, cfg))


def test_processed_columns_are_frozen():
    w, x = generate_layer(SyntheticLayerSpec(3, 8, 16, 64, calib_correlation=0.8))
    rep = sparsegpt_prune(w, x, prune_config("1/2"), block_size=4)
    kept = rep.pruned_weights[rep.mask]
    assert np.all(rep.pruned_weights[~rep.mask] == 0)
    # updates only ever flow rightwards, so the first column is untouched where kept
    first = rep.mask[:, 0]
    assert np.array_equal(rep.pruned_weights[first, 0], w[first, 0])
    assert kept.size == rep.mask.sum()


def test_second_order_beats_magnitude_on_correlated_layers():
    wins = 0
    for seed in range(100):
        w, x = generate_layer(SyntheticLayerSpec(seed, 8, 8, 256, calib_correlation=0.9))
        target = prune_config("1/2")
        rep = sparsegpt_prune(w, x, target)
        mag = np.where(magnitude_mask(w, target), w, 0.0)
        wins += rep.layer_objective_delta <= layer_objective(w, mag, x)
    assert wins >= 90


def test_deterministic():
    w, x = generate_layer(SyntheticLayerSpec(9, 16, 32, 128, calib_correlation=0.5))
    a = sparsegpt_prune(w, x, prune_config("1/3"))
    b = sparsegpt_prune(w, x, prune_config("1/3"))
    assert a.pruned_weights.tobytes() == b.pruned_weights.tobytes()
