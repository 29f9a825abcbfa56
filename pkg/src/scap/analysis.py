"""Analysis harnesses: sparsity measurement, overlap decay, sweeps, ablation.

Everything here runs on synthetic activation streams (the desk-scale
calibration set is 64 sequences of 256 feature vectors) and emits plain
dict / CSV-row payloads so results can be persisted byte-identically.

Quality throughout is the negated relative L2 reconstruction error of the
pruned stack against its dense twin on held-out data; higher is better.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .calib import (
    DEFAULT_RESERVOIR_CAPACITY,
    DEFAULT_SEED,
    LayerStats,
    ModeEstimator,
)
from .model import DOWN_INPUT, SITES, UP_GATE_INPUT, FfnStack, HookPoint
from .prune import PruneSpec

CALIB_SEQUENCES = 64
CALIB_SEQUENCE_LEN = 256


# ---------------------------------------------------------------------------
# synthetic streams


def synthetic_stream(
    d_model: int,
    n_sequences: int = CALIB_SEQUENCES,
    sequence_len: int = CALIB_SEQUENCE_LEN,
    scale: float = 1.0,
    seed: int = DEFAULT_SEED,
) -> list[np.ndarray]:
    """Deterministic list of (sequence_len x d_model) float32 batches."""
    rng = np.random.default_rng(seed)
    return [
        (scale * rng.standard_normal((sequence_len, d_model))).astype(np.float32)
        for _ in range(n_sequences)
    ]


class CorrelatedBatches:
    """Beam-search proxy: rows share a base vector plus per-row noise.

    Each ``batch(k)`` call draws a fresh base b and returns rows
    ``sqrt(rho) * b + sqrt(1 - rho) * n_i``, so any two rows have
    correlation ``rho``; rho=0 gives independent rows.
    """

    def __init__(self, d_model: int, rho: float = 0.0, scale: float = 1.0, seed: int = DEFAULT_SEED):
        if not 0.0 <= rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {rho}")
        self.d_model = d_model
        self.rho = rho
        self.scale = scale
        self._rng = np.random.default_rng(seed)

    def batch(self, n_rows: int) -> np.ndarray:
        base = self._rng.standard_normal(self.d_model)
        noise = self._rng.standard_normal((n_rows, self.d_model))
        rows = np.sqrt(self.rho) * base + np.sqrt(1.0 - self.rho) * noise
        return (self.scale * rows).astype(np.float32)


# ---------------------------------------------------------------------------
# calibration plumbing


@dataclass
class CalibrationResult:
    """Per-group activation statistics plus the hook -> group aliasing."""

    stats: dict[str, LayerStats]
    group_of: dict[HookPoint, str]


def calibrate(
    model: FfnStack,
    calib_stream,
    capacity: int = DEFAULT_RESERVOIR_CAPACITY,
    seed: int = DEFAULT_SEED,
    per_layer: bool = False,
    specs: dict[HookPoint, PruneSpec] | None = None,
) -> CalibrationResult:
    """Stream calibration batches through the model, hooks observing.

    By default activations are pooled per location group (all blocks' Up/Gate
    inputs together, all Down inputs together) so one threshold serves a
    uniform target per group; ``per_layer=True`` keeps one accumulator per
    hook instead. Passing ``specs`` routes the capture through the pruned
    view, so statistics reflect the distributions a deployed model sees.
    """
    hooks = model.hook_points()
    runner = model if not specs else model.apply_prune_specs(specs)
    group_of = {h: (h.label if per_layer else h.site) for h in hooks}
    stats: dict[str, LayerStats] = {}
    for i, gid in enumerate(sorted(set(group_of.values()))):
        gseed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        stats[gid] = LayerStats(gid, capacity=capacity, seed=gseed)
    for batch in calib_stream:
        _, captured = runner.forward_with_hooks(batch, hooks)
        for h in hooks:
            stats[group_of[h]].observe(captured[h])
    return CalibrationResult(stats=stats, group_of=group_of)


def make_specs(
    model: FfnStack,
    calibration: CalibrationResult,
    targets: dict[str, float],
    center_sites: tuple[str, ...] = (),
    estimator: ModeEstimator = ModeEstimator(),
) -> dict[HookPoint, PruneSpec]:
    """Derive per-hook PruneSpecs from calibrated statistics.

    ``targets`` maps a site name to its target sparsity; sites absent from
    the map stay dense. Sites listed in ``center_sites`` get a mode shift
    eta, with tau recalibrated on the shifted magnitudes.
    """
    specs = {}
    for hook in model.hook_points():
        s = targets.get(hook.site)
        if s is None:
            continue
        st = calibration.stats[calibration.group_of[hook]]
        if hook.site in center_sites:
            eta = st.estimate_mode(estimator)
            tau = st.centered_quantile_threshold(s, eta)
        else:
            eta = 0.0
            tau = st.quantile_threshold(s)
        specs[hook] = PruneSpec(
            layer_id=st.layer_id, tau=tau, eta=eta, target_sparsity=s
        )
    return specs


def plan_specs(
    model: FfnStack,
    calib_stream,
    targets: dict[str, float],
    capacity: int = DEFAULT_RESERVOIR_CAPACITY,
    seed: int = DEFAULT_SEED,
    per_layer: bool = False,
    center_sites: tuple[str, ...] = (),
    estimator: ModeEstimator = ModeEstimator(),
) -> dict[HookPoint, PruneSpec]:
    """Two-pass calibration: Down thresholds see the upstream pruning.

    Pruning the Up/Gate inputs perturbs the gated tensors, so Down
    thresholds quantiled on dense captures land above their target (the
    effect is small at production widths but grows as 1/sqrt(d) at desk
    scale). The first pass calibrates the Up/Gate group on dense captures;
    the second re-streams with those specs applied and derives the Down
    group from the distributions the deployed model will actually prune.
    """
    calib_stream = list(calib_stream)
    first = calibrate(
        model, calib_stream, capacity=capacity, seed=seed, per_layer=per_layer
    )
    up_targets = {k: v for k, v in targets.items() if k == UP_GATE_INPUT}
    specs = make_specs(
        model, first, up_targets, center_sites=center_sites, estimator=estimator
    )
    if DOWN_INPUT not in targets:
        return specs
    second = calibrate(
        model,
        calib_stream,
        capacity=capacity,
        seed=seed + 1,
        per_layer=per_layer,
        specs=specs,
    )
    down_specs = make_specs(
        model,
        second,
        {DOWN_INPUT: targets[DOWN_INPUT]},
        center_sites=center_sites,
        estimator=estimator,
    )
    return {**specs, **down_specs}


# ---------------------------------------------------------------------------
# sparsity measurement


@dataclass
class HookObservation:
    target_sparsity: float
    observed_sparsity: float
    pruned: int
    total: int


@dataclass
class SparsityReport:
    """Observed sparsities and MAC accounting over an evaluation stream."""

    hooks: dict[str, HookObservation]
    site_sparsity: dict[str, float]
    ffn_sparsity: float
    macs_ratio: float
    macs: int
    dense_macs: int
    sample_count: int

    def to_payload(self) -> dict:
        return {
            "hooks": {
                label: {
                    "target_sparsity": obs.target_sparsity,
                    "observed_sparsity": obs.observed_sparsity,
                    "pruned": obs.pruned,
                    "total": obs.total,
                }
                for label, obs in self.hooks.items()
            },
            "site_sparsity": dict(self.site_sparsity),
            "ffn_sparsity": self.ffn_sparsity,
            "macs_ratio": self.macs_ratio,
            "macs": self.macs,
            "dense_macs": self.dense_macs,
            "sample_count": self.sample_count,
        }


def measure_sparsity(
    model: FfnStack, specs: dict[HookPoint, PruneSpec], eval_stream
) -> SparsityReport:
    """Run the pruned stack over a stream, tallying masks and op counts."""
    sparse = model.apply_prune_specs(specs)
    pruned = {h.label: 0 for h in model.hook_points()}
    total = dict.fromkeys(pruned, 0)
    macs = dense_macs = rows = 0
    for batch in eval_stream:
        _, records = sparse.forward(batch)
        rows += batch.shape[0]
        for b, rec in enumerate(records):
            for site in SITES:
                label = HookPoint(b, site).label
                pruned[label] += rec.pruned[site]
                total[label] += rec.total[site]
            macs += rec.ops.macs
            dense_macs += rec.dense_macs
    if rows == 0:
        raise ValueError("evaluation stream is empty")
    hooks = {}
    for hook in model.hook_points():
        label = hook.label
        spec = specs.get(hook)
        hooks[label] = HookObservation(
            target_sparsity=spec.target_sparsity if spec else 0.0,
            observed_sparsity=pruned[label] / total[label],
            pruned=pruned[label],
            total=total[label],
        )
    site_sparsity = {}
    for site in SITES:
        p = sum(pruned[HookPoint(b, site).label] for b in range(model.config.n_blocks))
        t = sum(total[HookPoint(b, site).label] for b in range(model.config.n_blocks))
        site_sparsity[site] = p / t
    if model.config.ffn == "swiglu":
        ffn = kernels.ffn_sparsity(
            site_sparsity[UP_GATE_INPUT], site_sparsity[DOWN_INPUT]
        )
    else:
        ffn = kernels.mlp_ffn_sparsity(
            site_sparsity[UP_GATE_INPUT], site_sparsity[DOWN_INPUT]
        )
    return SparsityReport(
        hooks=hooks,
        site_sparsity=site_sparsity,
        ffn_sparsity=ffn,
        macs_ratio=macs / dense_macs,
        macs=macs,
        dense_macs=dense_macs,
        sample_count=rows,
    )


def reconstruction_error(
    model: FfnStack, specs: dict[HookPoint, PruneSpec], eval_stream,
    dense_outputs: list[np.ndarray] | None = None,
) -> float:
    """Relative L2 distance between pruned and dense stack outputs."""
    sparse = model.apply_prune_specs(specs)
    if dense_outputs is None:
        dense_outputs = [model.forward(batch) for batch in eval_stream]
    num = den = 0.0
    for batch, y_dense in zip(eval_stream, dense_outputs):
        y_sparse, _ = sparse.forward(batch)
        diff = y_sparse.astype(np.float64) - y_dense.astype(np.float64)
        num += float(np.sum(diff * diff))
        den += float(np.sum(y_dense.astype(np.float64) ** 2))
    return float(np.sqrt(num / den)) if den else 0.0


# ---------------------------------------------------------------------------
# overlapping (structured) sparsity


def overlap_sparsity(masks) -> float:
    """Fraction of positions pruned in every vector of the batch.

    ``masks`` is a list of equal-length boolean kept-masks (True = kept);
    the result is the structured fraction a batched kernel could skip.
    """
    arr = np.asarray(masks)
    if arr.dtype == object:
        raise ValueError("masks must share one length")
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError("masks must be a non-empty list of boolean vectors")
    return float(np.mean(~arr.any(axis=0)))


@dataclass
class OverlapCurve:
    batch_sizes: list[int]
    overlap_sparsity: list[float]
    per_vector_sparsity: float
    rho: float = 0.0

    def independent_baseline(self) -> list[float]:
        s = self.per_vector_sparsity
        return [float(s**k) for k in self.batch_sizes]

    def to_payload(self) -> dict:
        return {
            "batch_sizes": list(self.batch_sizes),
            "overlap_sparsity": list(self.overlap_sparsity),
            "per_vector_sparsity": self.per_vector_sparsity,
            "independent_baseline": self.independent_baseline(),
            "rho": self.rho,
        }


def overlap_curve(
    model: FfnStack,
    specs: dict[HookPoint, PruneSpec],
    batches: CorrelatedBatches,
    batch_sizes: list[int],
    hook: HookPoint | None = None,
    n_batches: int = 16,
) -> OverlapCurve:
    """Average structured sparsity at one hook across nested batch prefixes.

    For each repetition one batch of max(batch_sizes) correlated rows is
    generated and its prefixes reused for every smaller size, so the curve
    is exactly non-increasing per construction.
    """
    if list(batch_sizes) != sorted(batch_sizes) or min(batch_sizes) < 1:
        raise ValueError("batch_sizes must be ascending positive integers")
    sparse = model.apply_prune_specs(specs)
    if hook is None:
        hook = next(iter(sorted(specs, key=lambda h: (h.block, h.site))), None)
        if hook is None:
            raise ValueError("no specs given and no hook selected")
    k_max = max(batch_sizes)
    sums = np.zeros(len(batch_sizes))
    vec_sum = 0.0
    for _ in range(n_batches):
        x = batches.batch(k_max)
        _, records = sparse.forward(x, collect_masks=[hook])
        mask = records[hook.block].masks[hook.site]
        vec_sum += float(np.mean(~mask))
        for j, k in enumerate(batch_sizes):
            sums[j] += overlap_sparsity(mask[:k])
    return OverlapCurve(
        batch_sizes=list(batch_sizes),
        overlap_sparsity=[float(v / n_batches) for v in sums],
        per_vector_sparsity=vec_sum / n_batches,
        rho=batches.rho,
    )


# ---------------------------------------------------------------------------
# Pareto sweep


@dataclass
class SweepEntry:
    target_up_gate: float
    target_down: float
    report: SparsityReport
    error: float
    quality: float | None = None  # defaults to -error

    def __post_init__(self):
        if self.quality is None:
            self.quality = -self.error


@dataclass
class SweepResult:
    entries: list[SweepEntry]
    pareto_indices: list[int]

    def to_payload(self) -> dict:
        return {
            "entries": [
                {
                    "target_up_gate": e.target_up_gate,
                    "target_down": e.target_down,
                    "error": e.error,
                    "quality": e.quality,
                    "report": e.report.to_payload(),
                }
                for e in self.entries
            ],
            "pareto_indices": list(self.pareto_indices),
        }


def _max_workers(n_tasks: int) -> int:
    cap = os.environ.get("SCAP_THREADS")
    if cap:
        return max(1, min(n_tasks, int(cap)))
    return max(1, min(n_tasks, os.cpu_count() or 1))


def pareto_sweep(
    model: FfnStack,
    calib_stream,
    eval_stream,
    grid_up: list[float],
    grid_down: list[float],
    capacity: int = DEFAULT_RESERVOIR_CAPACITY,
    seed: int = DEFAULT_SEED,
    center_sites: tuple[str, ...] = (),
    estimator: ModeEstimator = ModeEstimator(),
    eval_fn=None,
) -> SweepResult:
    """Grid search over (up/gate, down) targets with Pareto-front extraction.

    Quality defaults to the negated relative reconstruction error against the
    dense model; pass ``eval_fn(model, specs) -> float`` (higher is better)
    to rank grid points by a different metric.

    Up/Gate statistics are collected once on dense captures; for each Up
    target a second calibration pass collects the Down-input distribution
    with that pruning applied (see ``plan_specs``). Every grid point then
    measures sparsity and reconstruction error on shared held-out data, and
    the non-dominated subset under (maximize ffn_sparsity, maximize quality)
    is reported. Grid points run on a thread pool capped by the SCAP_THREADS
    environment variable; results are merged in grid order, so output is
    scheduling-independent.
    """
    calib_batches = list(calib_stream)
    first = calibrate(model, calib_batches, capacity=capacity, seed=seed)
    eval_batches = list(eval_stream)
    dense_outputs = [model.forward(b) for b in eval_batches]

    up_specs = {}
    down_stats = {}
    for su in grid_up:
        up_specs[su] = make_specs(
            model,
            first,
            {UP_GATE_INPUT: su},
            center_sites=center_sites,
            estimator=estimator,
        )
        down_stats[su] = calibrate(
            model,
            calib_batches,
            capacity=capacity,
            seed=seed + 1,
            specs=up_specs[su],
        )
    points = [(su, sd) for su in grid_up for sd in grid_down]

    def run_point(point):
        su, sd = point
        specs = dict(up_specs[su])
        specs.update(
            make_specs(
                model,
                down_stats[su],
                {DOWN_INPUT: sd},
                center_sites=center_sites,
                estimator=estimator,
            )
        )
        report = measure_sparsity(model, specs, eval_batches)
        err = reconstruction_error(model, specs, eval_batches, dense_outputs)
        quality = eval_fn(model, specs) if eval_fn is not None else -err
        return SweepEntry(su, sd, report, err, quality)

    with ThreadPoolExecutor(max_workers=_max_workers(len(points))) as pool:
        entries = list(pool.map(run_point, points))
    return SweepResult(entries=entries, pareto_indices=pareto_front(entries))


def pareto_front(entries: list[SweepEntry]) -> list[int]:
    """Indices of entries not dominated under (ffn_sparsity, quality)."""

    def dominates(a: SweepEntry, b: SweepEntry) -> bool:
        af, bf = a.report.ffn_sparsity, b.report.ffn_sparsity
        return (
            af >= bf
            and a.quality >= b.quality
            and (af > bf or a.quality > b.quality)
        )

    return [
        i
        for i, e in enumerate(entries)
        if not any(dominates(o, e) for j, o in enumerate(entries) if j != i)
    ]


# ---------------------------------------------------------------------------
# mode-centering ablation


@dataclass
class AblationPoint:
    target_sparsity: float
    observed_with: float
    observed_without: float
    err_with: float
    err_without: float


@dataclass
class AblationResult:
    points: list[AblationPoint]
    eta: float

    def to_payload(self) -> dict:
        return {
            "eta": self.eta,
            "points": [
                {
                    "target_sparsity": p.target_sparsity,
                    "observed_with": p.observed_with,
                    "observed_without": p.observed_without,
                    "err_with": p.err_with,
                    "err_without": p.err_without,
                }
                for p in self.points
            ],
            "iso_error_gain": iso_error_gain(self.points),
        }


def mode_centering_ablation(
    model: FfnStack,
    calib_stream,
    eval_stream,
    sparsity_grid: list[float],
    estimator: ModeEstimator = ModeEstimator(kind="kde"),
    capacity: int = DEFAULT_RESERVOIR_CAPACITY,
    seed: int = DEFAULT_SEED,
) -> AblationResult:
    """Down-input pruning with eta = estimated mode versus eta = 0.

    For each target sparsity, thresholds are calibrated on |h - eta| and on
    |h| respectively; both variants report observed Down-input sparsity and
    output reconstruction error on the same held-out stream.
    """
    calres = calibrate(model, calib_stream, capacity=capacity, seed=seed)
    down_stats = calres.stats[
        calres.group_of[HookPoint(0, DOWN_INPUT)]
    ]
    eta = down_stats.estimate_mode(estimator)
    eval_batches = list(eval_stream)
    dense_outputs = [model.forward(b) for b in eval_batches]
    points = []
    for s in sparsity_grid:
        row = {}
        for tag, eta_use in (("with", eta), ("without", 0.0)):
            tau = down_stats.centered_quantile_threshold(s, eta_use)
            specs = {
                hook: PruneSpec(
                    layer_id=down_stats.layer_id,
                    tau=tau,
                    eta=eta_use,
                    target_sparsity=s,
                )
                for hook in model.hook_points()
                if hook.site == DOWN_INPUT
            }
            report = measure_sparsity(model, specs, eval_batches)
            err = reconstruction_error(model, specs, eval_batches, dense_outputs)
            row[tag] = (report.site_sparsity[DOWN_INPUT], err)
        points.append(
            AblationPoint(
                target_sparsity=s,
                observed_with=row["with"][0],
                observed_without=row["without"][0],
                err_with=row["with"][1],
                err_without=row["without"][1],
            )
        )
    return AblationResult(points=points, eta=eta)


def iso_error_gain(points: list[AblationPoint]) -> float:
    """Best sparsity advantage of centering at any matched error budget.

    For each candidate budget, each variant contributes the highest observed
    sparsity among its points within budget (zero sparsity is always
    achievable at zero error); returns the maximum with-minus-without gap.
    """
    budgets = sorted({p.err_with for p in points} | {p.err_without for p in points})
    best = 0.0
    for b in budgets:
        s_with = max((p.observed_with for p in points if p.err_with <= b), default=0.0)
        s_wo = max((p.observed_without for p in points if p.err_without <= b), default=0.0)
        best = max(best, s_with - s_wo)
    return best


def window_sparsity_gain(values: np.ndarray, tau: float, eta: float) -> float:
    """Sparsity gained at fixed tau by shifting values by eta before pruning."""
    v = np.asarray(values, dtype=np.float64).ravel()
    with_eta = float(np.mean(np.abs(v - eta) <= tau))
    without = float(np.mean(np.abs(v) <= tau))
    return with_eta - without


# ---------------------------------------------------------------------------
# tabular emission


def sweep_rows(result: SweepResult) -> tuple[list[str], list[list]]:
    header = [
        "target_up_gate",
        "target_down",
        "obs_up",
        "obs_gate",
        "obs_down",
        "ffn_sparsity",
        "macs_ratio",
        "error",
        "quality",
        "pareto",
    ]
    pareto = set(result.pareto_indices)
    rows = []
    for i, e in enumerate(result.entries):
        s_up = e.report.site_sparsity[UP_GATE_INPUT]
        rows.append(
            [
                e.target_up_gate,
                e.target_down,
                s_up,
                s_up,
                e.report.site_sparsity[DOWN_INPUT],
                e.report.ffn_sparsity,
                e.report.macs_ratio,
                e.error,
                e.quality,
                int(i in pareto),
            ]
        )
    return header, rows


def overlap_rows(curve: OverlapCurve) -> tuple[list[str], list[list]]:
    header = ["batch_size", "overlap_sparsity", "independent_baseline"]
    base = curve.independent_baseline()
    rows = [
        [k, o, b]
        for k, o, b in zip(curve.batch_sizes, curve.overlap_sparsity, base)
    ]
    return header, rows


def ablation_rows(result: AblationResult) -> tuple[list[str], list[list]]:
    header = [
        "target_sparsity",
        "observed_with",
        "observed_without",
        "err_with",
        "err_without",
    ]
    rows = [
        [p.target_sparsity, p.observed_with, p.observed_without, p.err_with, p.err_without]
        for p in result.points
    ]
    return header, rows
