"""Textual and visual class prototypes, blended centers, learnable residuals.

Prototypes are a pure function of (cache bank, prompt embeddings, blend
weight, residuals): rebuilding after replaying the same stream is
bit-identical. Classes with no cached visual features fall back to the text
prototype as their center and are excluded from the visual-side losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .caches import ALIGN, ENTROPY, CacheBank
from .core import Array, l2_normalize
from .errors import DegenerateInputError, InvalidArgumentError


@dataclass
class PrototypeState:
    """Per-class prototype matrices plus residuals and validity flags."""

    text: Array            # C x d unit rows
    visual: Array          # C x d, unit rows where valid, zero rows otherwise
    r_text: Array          # C x d learnable residuals
    r_visual: Array        # C x d learnable residuals
    mu: Array              # C x d blended centers
    valid_visual: Array    # C bools

    @classmethod
    def initial(cls, text: Array) -> "PrototypeState":
        c, d = text.shape
        zeros = np.zeros((c, d))
        return cls(
            text=text,
            visual=zeros.copy(),
            r_text=zeros.copy(),
            r_visual=zeros.copy(),
            mu=text.copy(),
            valid_visual=np.zeros(c, dtype=bool),
        )

    def reset_residuals(self) -> None:
        self.r_text[:] = 0.0
        self.r_visual[:] = 0.0


def text_prototypes(prompt_embeddings: list[Array]) -> Array:
    """Average each class's prompt embeddings and renormalize.

    prompt_embeddings holds one (P_c x d) array per class, P_c >= 1.
    """
    if not prompt_embeddings:
        raise InvalidArgumentError("need at least one class")
    rows = []
    for c, prompts in enumerate(prompt_embeddings):
        prompts = np.asarray(prompts, dtype=np.float64)
        if prompts.ndim != 2 or prompts.shape[0] < 1:
            raise InvalidArgumentError(f"class {c} has no prompt embeddings")
        try:
            rows.append(l2_normalize(prompts.mean(axis=0)))
        except DegenerateInputError as e:
            raise DegenerateInputError(
                f"class {c} prompt embeddings average to a zero vector"
            ) from e
    return np.stack(rows)


def visual_prototypes(bank: CacheBank) -> tuple[Array, Array]:
    """Mean of each class's pooled entropy+align features, renormalized.

    Classes with no cached features (or a numerically degenerate mean) are
    flagged invalid and get a zero row.
    """
    c, d = bank.num_classes, bank.dim
    visual = np.zeros((c, d))
    valid = np.zeros(c, dtype=bool)
    for cls in range(c):
        feats = []
        for kind in (ENTROPY, ALIGN):
            if bank.enabled[kind]:
                feats.extend(s.feature for s in bank.caches[kind][cls].slots)
        if not feats:
            continue
        mean = np.mean(feats, axis=0)
        if np.linalg.norm(mean) <= 1e-12:
            continue
        visual[cls] = l2_normalize(mean)
        valid[cls] = True
    return visual, valid


def prototype_center(
    text: Array, visual: Array, valid_visual: Array, w: float
) -> Array:
    """Blend visual and textual prototypes per class and renormalize.

    mu_c = normalize(w * visual_c + (1 - w) * text_c) where the class has a
    visual prototype; mu_c = text_c otherwise.
    """
    if not 0.0 <= w <= 1.0:
        raise InvalidArgumentError(f"w must lie in [0, 1], got {w}")
    mu = text.copy()
    for c in np.flatnonzero(valid_visual):
        mu[c] = l2_normalize(w * visual[c] + (1.0 - w) * text[c])
    return mu


def apply_residuals(state: PrototypeState) -> tuple[Array, Array]:
    """Add residuals to both prototype matrices and renormalize rows.

    Rows whose residual is exactly zero are passed through unchanged, so a
    zero-residual state refines to the original prototypes bit-for-bit.
    Invalid visual rows stay zero.
    """
    t_ref = state.text.copy()
    for c in range(state.text.shape[0]):
        if np.any(state.r_text[c] != 0.0):
            t_ref[c] = l2_normalize(state.text[c] + state.r_text[c])
    v_ref = state.visual.copy()
    for c in np.flatnonzero(state.valid_visual):
        if np.any(state.r_visual[c] != 0.0):
            v_ref[c] = l2_normalize(state.visual[c] + state.r_visual[c])
    return t_ref, v_ref


def rebuild(state: PrototypeState, bank: CacheBank, w: float) -> None:
    """Recompute visual prototypes and centers from the current bank."""
    state.visual, state.valid_visual = visual_prototypes(bank)
    state.mu = prototype_center(state.text, state.visual, state.valid_visual, w)
