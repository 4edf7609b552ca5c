"""Dimension-checked vector math every other module composes.

All arithmetic is 64-bit; stream files quantize to 32-bit on disk. Feature
vectors are plain float64 ndarrays; probability vectors are ndarrays whose
entries lie in [0, 1] and sum to 1 within 1e-9.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError

Array = np.ndarray

PROB_SUM_TOL = 1e-9
UNIT_NORM_TOL = 1e-6


def softmax(logits: Array, tau: float = 1.0) -> Array:
    """Temperature softmax over the last axis, computed with max-subtraction.

    Raises InvalidArgumentError on non-finite input or tau <= 0.
    """
    z = np.asarray(logits, dtype=np.float64)
    if tau <= 0:
        raise InvalidArgumentError(f"softmax temperature must be positive, got {tau}")
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("softmax input must be finite")
    e = np.exp((z - z.max(axis=-1, keepdims=True)) / tau)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(logits: Array) -> Array:
    # unchecked fast path for internal batched use, temperature 1
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def check_prob_vector(p: Array) -> Array:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise InvalidArgumentError("probability vector must be 1-D")
    if not np.all(np.isfinite(p)):
        raise InvalidArgumentError("probability vector must be finite")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise InvalidArgumentError("probability entries must lie in [0, 1]")
    if abs(p.sum() - 1.0) > PROB_SUM_TOL:
        raise InvalidArgumentError(f"probabilities sum to {p.sum()!r}, expected 1")
    return p


def entropy(p: Array) -> float:
    """Shannon entropy in nats, with 0 * ln 0 := 0."""
    p = check_prob_vector(p)
    return float(entropy_rows(p[None, :])[0])


def entropy_rows(p: Array) -> Array:
    # unchecked row-wise entropy for internal batched use
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0.0, p * np.log(p), 0.0)
    return -t.sum(axis=-1)


def cosine(a: Array, b: Array) -> float:
    """Cosine similarity, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise InvalidArgumentError("cosine undefined for zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def affinity(x, alpha: float, beta: float):
    """Similarity-to-weight transform alpha * exp(-beta * (1 - x)).

    Monotone increasing in x; callers are expected to pass x in [-1, 1].
    Accepts scalars or arrays.
    """
    return alpha * np.exp(-beta * (1.0 - np.asarray(x, dtype=np.float64)))


def l2_normalize(v: Array) -> Array:
    """Scale to unit L2 norm; raises DegenerateInputError near zero."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n <= 1e-12:
        raise DegenerateInputError(f"cannot normalize vector with norm {n}")
    return v / n


def is_unit(v: Array, tol: float = UNIT_NORM_TOL) -> bool:
    return abs(float(np.linalg.norm(v)) - 1.0) <= tol


@dataclass(frozen=True)
class HyperParams:
    """All numeric knobs of the engine, with validated defaults."""

    tau: float = 0.01            # zero-shot softmax temperature (1 / logit scale)
    alpha: float = 1.0           # affinity scale
    beta: float = 5.5            # affinity sharpness
    w: float = 0.8               # visual weight in the prototype center blend
    alpha1: float = 1.0          # fusion weight: text matching
    alpha2: float = 1.0          # fusion weight: visual/negative contrast
    alpha3: float = 1.0          # fusion weight: cache retrieval
    lam: float = 0.5             # alignment loss weight
    gamma: float = 0.2           # negative-contrast loss weight
    rho_delta: float = 0.1       # confident-view keep fraction
    eps: float = 1e-6            # contrast log stabilizer
    lr: float = 1e-4             # residual learning rate
    h_low_frac: float = 0.2      # negative band lower edge, fraction of ln C
    h_high_frac: float = 0.5     # negative band upper edge, fraction of ln C
    e_gate_frac: float = 0.1     # low-entropy routing gate, fraction of ln C
    p_mask: float = 0.03         # negative class-mask probability threshold
    m_entropy: int = 10          # per-class entropy cache capacity
    m_align: int = 10            # per-class align cache capacity
    m_negative: int = 3          # per-class negative cache capacity
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    norm_variant: str = "standardize"  # one of: standardize, l2, softmax

    def __post_init__(self):
        if self.tau <= 0:
            raise InvalidArgumentError("tau must be > 0")
        if self.alpha <= 0 or self.beta <= 0:
            raise InvalidArgumentError("alpha and beta must be > 0")
        for name in ("w", "rho_delta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidArgumentError(f"{name} must lie in [0, 1], got {v}")
        if not (0.0 <= self.h_low_frac < self.h_high_frac <= 1.0):
            raise InvalidArgumentError(
                "need 0 <= h_low_frac < h_high_frac <= 1, got "
                f"{self.h_low_frac}, {self.h_high_frac}"
            )
        for name in ("m_entropy", "m_align", "m_negative"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        if self.norm_variant not in ("standardize", "l2", "softmax"):
            raise InvalidArgumentError(f"unknown norm_variant {self.norm_variant!r}")
