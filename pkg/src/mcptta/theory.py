"""Desk-scale Monte-Carlo checks of two distributional arguments.

Retention-ratio consistency: when an acceptance filter is statistically
independent of a region condition, the acceptance rate among region-
conditioned samples matches the overall acceptance rate as n grows.

Local density constants: conditioning a distribution on a region of
probability P scales its local mass in any interior ball by exactly 1/P, so
the conditioned distribution's density lower bound strictly dominates the
unconditioned one whenever P < 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError


@dataclass
class RetentionReport:
    n_total: int
    n_region: int
    rate_overall: float     # accepted / total
    rate_region: float      # accepted-and-in-region / in-region
    gap: float


def retention_ratio_sim(
    n_total: int,
    accept_prob: float,
    region_prob: float,
    seed: int = 0,
    dependent: bool = False,
) -> RetentionReport:
    """Simulate i.i.d. samples with an acceptance event and a region event.

    Independent by construction unless `dependent`, in which case acceptance
    is exactly the region event, showing the independence premise matters.
    """
    if not (0.0 < accept_prob <= 1.0 and 0.0 < region_prob < 1.0):
        raise InvalidArgumentError("need accept_prob in (0,1] and region_prob in (0,1)")
    rng = np.random.default_rng(seed)
    in_region = rng.random(n_total) < region_prob
    if dependent:
        accepted = in_region.copy()
    else:
        accepted = rng.random(n_total) < accept_prob
    n_region = int(in_region.sum())
    if n_region == 0:
        raise InvalidArgumentError("no samples landed in the region; increase n")
    rate_overall = float(accepted.mean())
    rate_region = float(accepted[in_region].mean())
    return RetentionReport(
        n_total=n_total,
        n_region=n_region,
        rate_overall=rate_overall,
        rate_region=rate_region,
        gap=abs(rate_overall - rate_region),
    )


@dataclass
class MixtureSpec:
    """Isotropic Gaussian mixture in the plane (or any small dimension)."""

    weights: tuple
    means: tuple          # tuple of coordinate tuples
    sigmas: tuple

    def __post_init__(self):
        if not (len(self.weights) == len(self.means) == len(self.sigmas)):
            raise InvalidArgumentError("mixture component lists must align")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise InvalidArgumentError("mixture weights must sum to 1")

    @classmethod
    def standard(cls, dim: int = 2) -> "MixtureSpec":
        return cls(weights=(1.0,), means=((0.0,) * dim,), sigmas=(1.0,))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=np.asarray(self.weights))
        dim = len(self.means[0])
        out = rng.standard_normal((n, dim))
        for k in range(len(self.weights)):
            rows = comp == k
            out[rows] = out[rows] * self.sigmas[k] + np.asarray(self.means[k])
        return out


@dataclass
class DensityReport:
    region_prob: float
    c_target: float          # density lower bound of the raw distribution
    c_aligned: float         # density lower bound of the region-conditioned one
    ratio: float
    expected_ratio: float    # 1 / region probability
    equality_case: bool      # region probability ~ 1, the two coincide

    @property
    def dominates(self) -> bool:
        """The conditioned constant strictly exceeds the raw one (the claim
        under test whenever the region has probability below one)."""
        return self.equality_case or self.c_aligned > self.c_target


def density_constants_sim(
    mixture: MixtureSpec | None = None,
    d0: float = 1.1774,
    seed: int = 0,
    n_samples: int = 1_000_000,
    n_balls: int = 5,
    ball_radius_frac: float = 0.25,
    anchor: tuple | None = None,
) -> DensityReport:
    """Estimate ball-mass density lower bounds for a distribution and its
    conditioning on a distance-to-anchor region.

    Ball masses for the conditioned distribution come from an independent
    rejection-sampled draw, so the ratio against 1/P(region) is a genuine
    Monte-Carlo check and not an identity of the counting.
    """
    mixture = mixture or MixtureSpec.standard()
    rng = np.random.default_rng(seed)
    mu = np.asarray(anchor if anchor is not None else mixture.means[0], dtype=np.float64)
    dim = mu.shape[0]

    base = mixture.sample(rng, n_samples)
    dist = np.linalg.norm(base - mu, axis=1)
    region_prob = float((dist <= d0).mean())
    if region_prob == 0.0:
        raise InvalidArgumentError("region has no mass at this d0")

    if region_prob >= 1.0 or not math.isfinite(d0):
        # conditioning on a probability-one region changes nothing
        r = 1.0
        unit_ball_vol = math.pi ** (dim / 2) / math.gamma(dim / 2 + 1)
        vol = unit_ball_vol * r**dim
        mass = float((np.linalg.norm(base - mu, axis=1) <= r).mean())
        c = mass / vol
        return DensityReport(1.0, c, c, 1.0, 1.0, True)

    # independent conditioned draw by rejection
    aligned_rows = []
    needed = max(50_000, n_samples // 10)
    while sum(len(a) for a in aligned_rows) < needed:
        batch = mixture.sample(rng, n_samples // 4)
        keep = batch[np.linalg.norm(batch - mu, axis=1) <= d0]
        aligned_rows.append(keep)
    aligned = np.concatenate(aligned_rows)[:needed]

    r = ball_radius_frac * d0
    # ball centers inside the region with margin so each ball stays interior
    centers = []
    max_off = d0 - r
    while len(centers) < n_balls:
        cand = mu + rng.uniform(-max_off, max_off, size=dim)
        if np.linalg.norm(cand - mu) <= max_off:
            centers.append(cand)
    unit_ball_vol = math.pi ** (dim / 2) / math.gamma(dim / 2 + 1)
    vol = unit_ball_vol * r**dim

    def min_density(points: np.ndarray) -> float:
        best = math.inf
        for c in centers:
            mass = float(
                (np.linalg.norm(points - c, axis=1) <= r).mean()
            )
            best = min(best, mass / vol)
        return best

    c_t = min_density(base)
    c_a = min_density(aligned)
    ratio = c_a / c_t if c_t > 0 else math.inf
    return DensityReport(
        region_prob=region_prob,
        c_target=c_t,
        c_aligned=c_a,
        ratio=ratio,
        expected_ratio=1.0 / region_prob,
        equality_case=False,
    )
