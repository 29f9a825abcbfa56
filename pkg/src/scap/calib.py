"""Activation-statistics collection and threshold / mode-shift calibration.

``LayerStats`` accumulates a bounded uniform sample of the activation values
flowing through one pruning location (plus a parallel sample of their
magnitudes) via seeded reservoir sampling, so calibrations over arbitrarily
long streams stay within a fixed memory budget. From the reservoirs we derive

* ``quantile_threshold``: tau as the target-sparsity quantile of |X|,
* ``estimate_mode``: eta as the empirical mean, median, or the argmax of a
  Gaussian-kernel density over an evenly spaced grid.

Parallel calibration shards are combined with ``merge``, which draws a
hypergeometric split so the merged reservoir is again a uniform sample of
the pooled stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_RESERVOIR_CAPACITY = 1 << 20
DEFAULT_KDE_GRID_POINTS = 2048
DEFAULT_SEED = 2025


class CalibrationError(RuntimeError):
    """Raised when statistics are insufficient for the requested estimate."""


class MergeError(ValueError):
    """Raised when two LayerStats shards are not merge-compatible."""


@dataclass(frozen=True)
class ModeEstimator:
    """Configuration for the eta estimator.

    kind: "mean", "median", or "kde".
    kde_grid_points: evaluation grid size for the KDE argmax.
    kde_bandwidth: "scott", "silverman", or a fixed positive bandwidth.
    """

    kind: str = "mean"
    kde_grid_points: int = DEFAULT_KDE_GRID_POINTS
    kde_bandwidth: str | float = "scott"

    def __post_init__(self):
        if self.kind not in ("mean", "median", "kde"):
            raise ValueError(f"unknown estimator kind: {self.kind!r}")
        if self.kind == "kde" and self.kde_grid_points < 2:
            raise ValueError("kde_grid_points must be >= 2")
        if isinstance(self.kde_bandwidth, str):
            if self.kde_bandwidth not in ("scott", "silverman"):
                raise ValueError(f"unknown bandwidth rule: {self.kde_bandwidth!r}")
        elif not self.kde_bandwidth > 0:
            raise ValueError("fixed bandwidth must be positive")


class _Reservoir:
    """Uniform sample of a value stream (vectorized Algorithm R)."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        self.capacity = capacity
        self._rng = rng
        self._buf = np.empty(capacity, dtype=np.float32)
        self.filled = 0
        self.seen = 0

    def extend(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float32).ravel()
        n = values.size
        if n == 0:
            return
        take = min(self.capacity - self.filled, n)
        if take:
            self._buf[self.filled : self.filled + take] = values[:take]
            self.filled += take
            self.seen += take
            values = values[take:]
            n -= take
        if n:
            # item at stream position t replaces slot j ~ U[0, t) iff j < capacity;
            # fancy assignment applies duplicates in order, matching sequential R
            positions = self.seen + 1 + np.arange(n, dtype=np.int64)
            j = self._rng.integers(0, positions)
            accept = j < self.capacity
            self._buf[j[accept]] = values[accept]
            self.seen += n

    def values(self) -> np.ndarray:
        return self._buf[: self.filled]

    def _replace(self, values: np.ndarray, seen: int) -> None:
        values = np.asarray(values, dtype=np.float32)
        self._buf[: values.size] = values
        self.filled = values.size
        self.seen = seen


class LayerStats:
    """Per-layer calibration accumulator.

    Holds two reservoirs over the same element stream: one of |X| for
    threshold quantiles, one of raw X for mode estimation. Sampling is
    driven by generators spawned deterministically from ``seed``.
    """

    def __init__(
        self,
        layer_id: str,
        capacity: int = DEFAULT_RESERVOIR_CAPACITY,
        seed: int = DEFAULT_SEED,
    ):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.layer_id = layer_id
        self.capacity = capacity
        self.seed = int(seed)
        abs_ss, raw_ss = np.random.SeedSequence(self.seed).spawn(2)
        self._abs = _Reservoir(capacity, np.random.default_rng(abs_ss))
        self._raw = _Reservoir(capacity, np.random.default_rng(raw_ss))

    @property
    def seen_count(self) -> int:
        return self._raw.seen

    @property
    def abs_reservoir(self) -> np.ndarray:
        return self._abs.values()

    @property
    def raw_reservoir(self) -> np.ndarray:
        return self._raw.values()

    def observe(self, activations: np.ndarray) -> "LayerStats":
        """Fold an activation tensor's elements into both reservoirs."""
        flat = np.asarray(activations, dtype=np.float32).ravel()
        self._abs.extend(np.abs(flat))
        self._raw.extend(flat)
        return self

    def quantile_threshold(self, target_sparsity: float) -> float:
        """tau = linear-interpolation quantile of the |X| reservoir."""
        if not 0.0 <= target_sparsity <= 1.0:
            raise ValueError(f"target_sparsity must lie in [0, 1], got {target_sparsity}")
        if self._abs.filled == 0:
            raise CalibrationError(f"{self.layer_id}: no observations recorded")
        return float(np.quantile(self.abs_reservoir, target_sparsity))

    def centered_quantile_threshold(self, target_sparsity: float, eta: float) -> float:
        """tau for a mode-shifted pruner: quantile of |X - eta|."""
        if not 0.0 <= target_sparsity <= 1.0:
            raise ValueError(f"target_sparsity must lie in [0, 1], got {target_sparsity}")
        if self._raw.filled == 0:
            raise CalibrationError(f"{self.layer_id}: no observations recorded")
        if eta == 0.0:
            return self.quantile_threshold(target_sparsity)
        shifted = np.abs(self.raw_reservoir.astype(np.float64) - eta)
        return float(np.quantile(shifted, target_sparsity))

    def estimate_mode(self, estimator: ModeEstimator = ModeEstimator()) -> float:
        """eta from the raw reservoir, per the configured estimator."""
        vals = self.raw_reservoir
        if vals.size == 0:
            raise CalibrationError(f"{self.layer_id}: no observations recorded")
        if estimator.kind == "mean":
            return float(np.mean(vals, dtype=np.float64))
        if estimator.kind == "median":
            return float(np.quantile(vals, 0.5))
        return _kde_mode(vals, estimator.kde_grid_points, estimator.kde_bandwidth)


def merge(a: LayerStats, b: LayerStats) -> LayerStats:
    """Combine two calibration shards into a valid pooled-stream sample.

    The number of merged slots drawn from each shard follows the
    hypergeometric law of a uniform k-subset of the concatenated streams,
    so the result is distributed exactly like a single reservoir over the
    union (given that both inputs are uniform samples).
    """
    if a.layer_id != b.layer_id:
        raise MergeError(f"layer_id mismatch: {a.layer_id!r} vs {b.layer_id!r}")
    if a.capacity != b.capacity:
        raise MergeError(f"capacity mismatch: {a.capacity} vs {b.capacity}")
    out = LayerStats(
        a.layer_id,
        a.capacity,
        seed=int(np.random.SeedSequence([a.seed, b.seed, 0x6D72]).generate_state(1)[0]),
    )
    mix_rng = np.random.default_rng(
        np.random.SeedSequence([a.seed, b.seed, 0x6D31])
    )
    for res_out, res_a, res_b in ((out._abs, a._abs, b._abs), (out._raw, a._raw, b._raw)):
        merged = _merge_reservoirs(res_a, res_b, a.capacity, mix_rng)
        res_out._replace(merged, res_a.seen + res_b.seen)
    return out


def _merge_reservoirs(ra: _Reservoir, rb: _Reservoir, capacity: int, rng) -> np.ndarray:
    va, vb = ra.values(), rb.values()
    k = min(capacity, va.size + vb.size)
    if k == va.size + vb.size:
        return np.concatenate([va, vb])
    # k < va+vb implies both sides non-empty; clamps guard subsampled shards
    m_a = int(rng.hypergeometric(ra.seen, rb.seen, k))
    m_a = min(m_a, va.size)
    m_a = max(m_a, k - vb.size)
    pick_a = rng.choice(va, size=m_a, replace=False) if m_a else va[:0]
    pick_b = rng.choice(vb, size=k - m_a, replace=False) if k - m_a else vb[:0]
    merged = np.concatenate([pick_a, pick_b])
    rng.shuffle(merged)
    return merged


def _kde_mode(values: np.ndarray, grid_points: int, bandwidth: str | float) -> float:
    """Argmax of a Gaussian-kernel density over [min, max] of the sample.

    The sample is binned to the evaluation grid and convolved with the
    kernel, which matches direct evaluation to well below grid resolution
    while staying O(n + grid * kernel_width).
    """
    vals = values.astype(np.float64)
    lo, hi = float(vals.min()), float(vals.max())
    if lo == hi:
        return lo
    n = vals.size
    sigma = float(np.std(vals, ddof=1))
    if isinstance(bandwidth, str):
        factor = n ** (-0.2) if bandwidth == "scott" else (3.0 * n / 4.0) ** (-0.2)
        h = sigma * factor
    else:
        h = float(bandwidth)
    if h <= 0.0:
        return lo  # degenerate spread; lo == hi handled above
    grid = np.linspace(lo, hi, grid_points)
    step = (hi - lo) / (grid_points - 1)
    idx = np.rint((vals - lo) / step).astype(np.int64)
    counts = np.bincount(idx, minlength=grid_points).astype(np.float64)
    radius = min(grid_points - 1, max(1, int(np.ceil(4.0 * h / step))))
    offsets = np.arange(-radius, radius + 1) * step
    kernel = np.exp(-0.5 * (offsets / h) ** 2)
    density = np.convolve(counts, kernel, mode="same")
    return float(grid[int(np.argmax(density))])


def report_entry(
    stats: LayerStats,
    sparsity_grid: list[float],
    kde_estimator: ModeEstimator | None = None,
) -> dict:
    """Serializable calibration summary for one layer group."""
    kde_cfg = kde_estimator or ModeEstimator(kind="kde")
    return {
        "layer_id": stats.layer_id,
        "seen_count": stats.seen_count,
        "tau_by_sparsity": {
            repr(float(s)): stats.quantile_threshold(s) for s in sparsity_grid
        },
        "eta": {
            "mean": stats.estimate_mode(ModeEstimator(kind="mean")),
            "median": stats.estimate_mode(ModeEstimator(kind="median")),
            "kde": stats.estimate_mode(kde_cfg),
        },
        "seed": stats.seed,
    }
