"""Evaluation metrics: per-class compactness and Pearson correlation, plus
the spread-sweep experiment relating compactness to adaptation gain."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import t as t_dist

from .core import Array
from .errors import InvalidArgumentError


@dataclass
class CompactnessReport:
    """Inverse of the mean sample-to-class-center distance.

    Classes with fewer than two samples are reported absent. A dataset where
    every class collapses to a point gets the +inf sentinel.
    """

    per_class_mean_dist: dict[int, float]
    per_class_count: dict[int, int]
    mean_dist: float
    compactness: float


@dataclass
class CorrelationReport:
    xs: list[float]
    ys: list[float]
    r: float
    p_value: float


def compactness(features: Array, labels: Array) -> CompactnessReport:
    """Compactness of a labeled point cloud, Euclidean distances to the
    unnormalized per-class mean."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise InvalidArgumentError("features must be (n, d) with one label each")
    per_dist: dict[int, float] = {}
    per_count: dict[int, int] = {}
    for c in np.unique(labels):
        rows = features[labels == c]
        per_count[int(c)] = rows.shape[0]
        if rows.shape[0] < 2:
            continue
        center = rows.mean(axis=0)
        per_dist[int(c)] = float(np.linalg.norm(rows - center, axis=1).mean())
    if not per_dist:
        raise InvalidArgumentError("no class has at least two samples")
    mean_dist = float(np.mean(list(per_dist.values())))
    comp = math.inf if mean_dist == 0.0 else 1.0 / mean_dist
    return CompactnessReport(per_dist, per_count, mean_dist, comp)


def pearson(xs, ys) -> tuple[float, float]:
    """Sample Pearson r and the two-sided p-value from the t approximation
    t = r * sqrt((n - 2) / (1 - r^2))."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise InvalidArgumentError("need two equal-length 1-D sequences")
    n = xs.size
    if n < 3:
        raise InvalidArgumentError("need at least 3 points")
    if np.var(xs) == 0.0 or np.var(ys) == 0.0:
        raise InvalidArgumentError("zero variance on one axis")
    r = float(np.corrcoef(xs, ys)[0, 1])
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    p = float(2.0 * t_dist.sf(abs(t), n - 2))
    return r, p


@dataclass
class SweepPoint:
    spread: float
    compactness_test: float
    compactness_cached: float | None
    zero_shot_acc: float
    adapted_acc: float

    @property
    def gain_points(self) -> float:
        return 100.0 * (self.adapted_acc - self.zero_shot_acc)


@dataclass
class SweepReport:
    points: list[SweepPoint]
    correlation_test: CorrelationReport
    correlation_cached: CorrelationReport | None


DEFAULT_SWEEP_SPREADS = (0.5, 0.65, 0.8, 0.95, 1.1, 1.3, 1.6, 2.0)


def compactness_gain_sweep(
    spreads=None,
    num_classes: int = 6,
    dim: int = 48,
    num_samples: int = 1000,
    shift: float = 1.0,
    min_angle_deg: float = 12.0,
    cluster_scale: float = 0.5,
    seed: int = 0,
    config=None,
) -> SweepReport:
    """Generate one dataset per spread level, run the adaptation engine and
    the text-only baseline on each, and correlate the compactness of the test
    data (and of the cached samples) with the accuracy gain in points.

    All datasets share the same seed, so the class geometry and the noise
    draws are identical and only the spread magnitude varies between them.
    """
    from .caches import RELIABLE, cache_matrices
    from .config import RunConfig
    from .runner import run_records
    from .synth import SynthSpec, generate

    if spreads is None:
        spreads = DEFAULT_SWEEP_SPREADS
    if len(spreads) < 3:
        raise InvalidArgumentError("need at least 3 spread levels")
    cfg = config or RunConfig(
        mode="mcp",
        tau=0.05,
        e_gate_frac=0.45,
        h_low_frac=0.5,
        h_high_frac=0.75,
        alpha2=0.25,
        alpha3=0.1,
    )
    points = []
    for spread in sorted(spreads):
        spec = SynthSpec(
            num_classes=num_classes,
            dim=dim,
            num_samples=num_samples,
            views_per_sample=1,
            spread=float(spread),
            shift=shift,
            min_angle_deg=min_angle_deg,
            cluster_scale=cluster_scale,
            seed=seed,
        )
        header, records = generate(spec)
        feats = np.stack([r.views[0] for r in records])
        labels = np.array([r.label for r in records])
        comp_test = compactness(feats, labels).compactness

        zs = run_records(
            RunConfig(
                mode="mcp",
                use_visual_term=False,
                use_cache_term=False,
                use_entropy_cache=False,
                use_align_cache=False,
                use_negative_cache=False,
            ),
            header,
            iter(records),
        )
        adapted, bank = run_records(cfg, header, iter(records), return_bank=True)
        rel = cache_matrices(bank, RELIABLE)
        comp_cached = None
        if rel.features.shape[0] >= 2:
            cached_labels = rel.labels.argmax(axis=1)
            try:
                comp_cached = compactness(rel.features, cached_labels).compactness
            except InvalidArgumentError:
                comp_cached = None
        points.append(
            SweepPoint(
                spread=float(spread),
                compactness_test=comp_test,
                compactness_cached=comp_cached,
                zero_shot_acc=zs["accuracy"],
                adapted_acc=adapted["accuracy"],
            )
        )

    xs = [p.compactness_test for p in points]
    ys = [p.gain_points for p in points]
    r, p = pearson(xs, ys)
    corr_test = CorrelationReport(xs, ys, r, p)
    corr_cached = None
    cached_pts = [p_ for p_ in points if p_.compactness_cached is not None]
    if len(cached_pts) >= 3:
        xs_c = [p_.compactness_cached for p_ in cached_pts]
        ys_c = [p_.gain_points for p_ in cached_pts]
        try:
            r_c, p_c = pearson(xs_c, ys_c)
            corr_cached = CorrelationReport(xs_c, ys_c, r_c, p_c)
        except InvalidArgumentError:
            corr_cached = None
    return SweepReport(points, corr_test, corr_cached)
