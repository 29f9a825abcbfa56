"""Calibration statistics: reservoirs, quantile thresholds, mode estimation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scap.calib import (
    CalibrationError,
    LayerStats,
    MergeError,
    ModeEstimator,
    merge,
    report_entry,
)

KDE = ModeEstimator(kind="kde")
MEAN = ModeEstimator(kind="mean")
MEDIAN = ModeEstimator(kind="median")


def _stats(values, capacity=1 << 16, seed=0, layer_id="t"):
    st_ = LayerStats(layer_id, capacity=capacity, seed=seed)
    st_.observe(np.asarray(values, dtype=np.float32))
    return st_


# ---------------------------------------------------------------------------
# observe / reservoir behaviour


def test_observe_counts_elements():
    st_ = LayerStats("l", capacity=16, seed=1)
    st_.observe(np.ones((2, 2), dtype=np.float32))
    assert st_.seen_count == 4


def test_below_capacity_reservoir_is_exhaustive():
    vals = np.arange(10, dtype=np.float32)
    st_ = LayerStats("l", capacity=10, seed=1)
    st_.observe(vals)
    assert sorted(st_.raw_reservoir.tolist()) == sorted(vals.tolist())
    assert sorted(st_.abs_reservoir.tolist()) == sorted(np.abs(vals).tolist())


def test_reservoir_is_unbiased_over_long_stream():
    rng = np.random.default_rng(123)
    st_ = LayerStats("l", capacity=1000, seed=5)
    for _ in range(10):
        st_.observe(rng.standard_normal(100_000).astype(np.float32))
    assert st_.seen_count == 1_000_000
    assert abs(float(np.mean(st_.raw_reservoir))) < 0.1


def test_reservoir_positions_uniform():
    # feed indices 0..n-1; mean of an unbiased sample is n/2 within 3 sigma
    n = 200_000
    st_ = LayerStats("l", capacity=2000, seed=11)
    st_.observe(np.arange(n, dtype=np.float32))
    se = n / np.sqrt(12.0) / np.sqrt(2000)
    assert abs(float(np.mean(st_.raw_reservoir, dtype=np.float64)) - n / 2) < 3 * se


def test_observe_is_deterministic():
    data = np.random.default_rng(2).standard_normal(50_000).astype(np.float32)
    a = _stats(data, capacity=512, seed=9)
    b = _stats(data, capacity=512, seed=9)
    assert np.array_equal(a.raw_reservoir, b.raw_reservoir)
    assert np.array_equal(a.abs_reservoir, b.abs_reservoir)


# ---------------------------------------------------------------------------
# quantile thresholds


def test_quantile_examples():
    st_ = _stats([1, 2, 3, 4, 5])
    assert st_.quantile_threshold(0.0) == 1.0
    assert st_.quantile_threshold(0.5) == 3.0
    assert st_.quantile_threshold(0.25) == 2.0  # linear-interpolation oracle


def test_quantile_empty_reservoir_errors():
    st_ = LayerStats("l", capacity=4, seed=0)
    with pytest.raises(CalibrationError):
        st_.quantile_threshold(0.5)


def test_quantile_rejects_bad_target():
    st_ = _stats([1.0])
    with pytest.raises(ValueError):
        st_.quantile_threshold(1.5)


@settings(max_examples=40, deadline=None, derandomize=True)
@given(
    st.lists(st.floats(-100, 100, allow_nan=False, width=32), min_size=1, max_size=200),
    st.floats(0, 1),
    st.floats(0, 1),
)
def test_quantile_monotone_in_target(values, s1, s2):
    st_ = _stats(values)
    lo, hi = sorted((s1, s2))
    assert st_.quantile_threshold(lo) <= st_.quantile_threshold(hi)
    assert st_.quantile_threshold(lo) >= 0.0


def test_quantile_self_consistency():
    rng = np.random.default_rng(17)
    st_ = _stats(rng.standard_normal(5000))
    reservoir = st_.abs_reservoir
    n = reservoir.size
    for s in np.arange(0.1, 0.95, 0.1):
        tau = st_.quantile_threshold(float(s))
        frac = float(np.mean(reservoir <= tau))
        assert abs(frac - s) <= 1.0 / n + 1e-12


# ---------------------------------------------------------------------------
# mode estimation


@pytest.mark.parametrize("estimator", [MEAN, MEDIAN, KDE])
def test_mode_of_constant_data(estimator):
    st_ = _stats(np.full(100, 2.5))
    assert st_.estimate_mode(estimator) == pytest.approx(2.5, abs=1e-7)


def test_median_example():
    st_ = _stats([-1.0, 0.0, 0.0, 0.0, 1.0])
    assert st_.estimate_mode(MEDIAN) == 0.0


def test_mode_empty_reservoir_errors():
    st_ = LayerStats("l", capacity=4, seed=0)
    with pytest.raises(CalibrationError):
        st_.estimate_mode(MEAN)


def _shifted_gelu_mixture(n, seed):
    """Sharp spike near -0.17 plus a broad positive lobe."""
    rng = np.random.default_rng(seed)
    n_main = int(0.9 * n)
    main = rng.normal(-0.17, 0.05, size=n_main)
    tail = rng.normal(1.0, 0.3, size=n - n_main)
    return np.concatenate([main, tail]).astype(np.float32)


def _kde_mode_oracle(values, grid_points=4096):
    """Direct (unbinned) Gaussian KDE argmax on a fine grid, Scott bandwidth."""
    v = np.sort(values.astype(np.float64))
    h = float(np.std(v, ddof=1)) * v.size ** (-0.2)
    grid = np.linspace(v.min(), v.max(), grid_points)
    density = np.empty(grid_points)
    # 8h cutoff keeps the pairwise slab small without visible argmax error
    for i in range(0, grid_points, 256):
        g = grid[i : i + 256]
        lo = np.searchsorted(v, g[0] - 8 * h)
        hi = np.searchsorted(v, g[-1] + 8 * h)
        window = v[lo:hi]
        density[i : i + 256] = np.exp(
            -0.5 * ((g[:, None] - window[None, :]) / h) ** 2
        ).sum(axis=1)
    return float(grid[int(np.argmax(density))])


def test_kde_mode_on_shifted_mixture():
    values = _shifted_gelu_mixture(10_000, seed=31)
    st_ = _stats(values)
    est = st_.estimate_mode(KDE)
    assert est == pytest.approx(-0.17, abs=0.03)
    # binned estimate agrees with the exact-evaluation oracle
    oracle = _kde_mode_oracle(st_.raw_reservoir)
    assert abs(est - oracle) <= 0.01


def test_kde_silverman_and_fixed_bandwidth():
    values = _shifted_gelu_mixture(10_000, seed=33)
    st_ = _stats(values)
    silverman = st_.estimate_mode(ModeEstimator(kind="kde", kde_bandwidth="silverman"))
    fixed = st_.estimate_mode(ModeEstimator(kind="kde", kde_bandwidth=0.05))
    assert silverman == pytest.approx(-0.17, abs=0.03)
    assert fixed == pytest.approx(-0.17, abs=0.03)


def test_mode_translation_equivariance():
    rng = np.random.default_rng(5)
    base = rng.normal(0.3, 0.2, size=4000).astype(np.float32)
    shift = 1.7
    for est in (MEAN, MEDIAN):
        a = _stats(base).estimate_mode(est)
        b = _stats(base + np.float32(shift)).estimate_mode(est)
        assert b == pytest.approx(a + shift, abs=1e-5)
    sa = _stats(base)
    sb = _stats(base + np.float32(shift))
    grid_step = (base.max() - base.min()) / (KDE.kde_grid_points - 1)
    assert sb.estimate_mode(KDE) == pytest.approx(
        sa.estimate_mode(KDE) + shift, abs=2 * grid_step + 1e-5
    )


def test_estimator_validation():
    with pytest.raises(ValueError):
        ModeEstimator(kind="argmax")
    with pytest.raises(ValueError):
        ModeEstimator(kind="kde", kde_grid_points=1)
    with pytest.raises(ValueError):
        ModeEstimator(kind="kde", kde_bandwidth=0.0)
    with pytest.raises(ValueError):
        ModeEstimator(kind="kde", kde_bandwidth="isj")


# ---------------------------------------------------------------------------
# merge


def test_merge_identity_element():
    data = np.random.default_rng(1).standard_normal(500).astype(np.float32)
    s = _stats(data, capacity=1024, seed=3)
    empty = LayerStats("t", capacity=1024, seed=4)
    merged = merge(empty, s)
    assert merged.seen_count == s.seen_count
    assert sorted(merged.raw_reservoir.tolist()) == sorted(s.raw_reservoir.tolist())


def test_merge_below_capacity_is_union():
    a = _stats([1.0, 2.0], capacity=16, seed=1)
    b = _stats([3.0, 4.0, 5.0], capacity=16, seed=2, layer_id="t")
    merged = merge(a, b)
    assert merged.seen_count == 5
    assert sorted(merged.raw_reservoir.tolist()) == [1.0, 2.0, 3.0, 4.0, 5.0]


def test_merge_rejects_mismatches():
    a = LayerStats("x", capacity=8, seed=0)
    with pytest.raises(MergeError):
        merge(a, LayerStats("y", capacity=8, seed=0))
    with pytest.raises(MergeError):
        merge(a, LayerStats("x", capacity=16, seed=0))


def test_merge_statistics_match_pooled_stream():
    rng = np.random.default_rng(8)
    stream_a = rng.normal(0.0, 1.0, size=100_000).astype(np.float32)
    stream_b = rng.normal(3.0, 1.0, size=100_000).astype(np.float32)
    a = _stats(stream_a, capacity=1000, seed=21)
    b = _stats(stream_b, capacity=1000, seed=22, layer_id="t")
    merged = merge(a, b)
    assert merged.seen_count == 200_000
    assert merged.raw_reservoir.size == 1000
    pooled_mean = float(np.mean(np.concatenate([stream_a, stream_b]), dtype=np.float64))
    pooled_var = float(np.var(np.concatenate([stream_a, stream_b]), dtype=np.float64))
    se = np.sqrt(pooled_var / 1000)
    assert abs(float(np.mean(merged.raw_reservoir, dtype=np.float64)) - pooled_mean) < 3 * se


def test_merged_stats_accept_further_observations():
    a = _stats(np.zeros(600), capacity=1000, seed=1)
    b = _stats(np.ones(600), capacity=1000, seed=2, layer_id="t")
    merged = merge(a, b)
    merged.observe(np.full(100, 2.0, dtype=np.float32))
    assert merged.seen_count == 1300
    assert merged.raw_reservoir.size == 1000


# ---------------------------------------------------------------------------
# report serialization entry


def test_report_entry_structure():
    st_ = _stats(np.random.default_rng(0).standard_normal(4000), layer_id="down")
    entry = report_entry(st_, [0.3, 0.5])
    assert entry["layer_id"] == "down"
    assert entry["seen_count"] == 4000
    assert set(entry["tau_by_sparsity"]) == {"0.3", "0.5"}
    assert entry["tau_by_sparsity"]["0.3"] <= entry["tau_by_sparsity"]["0.5"]
    assert set(entry["eta"]) == {"mean", "median", "kde"}
    assert isinstance(entry["seed"], int)
