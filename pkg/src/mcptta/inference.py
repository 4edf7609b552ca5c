"""The prediction path: adaptive retrieval, negative-calibrated visual score,
three-term fusion, and the per-sample pipeline with an auditable breakdown.

Prediction is sequential per stream because it mutates the cache bank; the
stated order is: zero-shot scoring, cache routing, prototype rebuild,
optional residual tuning, fusion on the original view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .caches import (
    ALIGN,
    ENTROPY,
    NEGATIVE,
    RELIABLE,
    CacheBank,
    Routing,
    cache_matrices,
    reflect,
)
from .core import Array, HyperParams, affinity, entropy_rows, softmax_rows
from .errors import InvalidArgumentError
from .prototypes import PrototypeState, apply_residuals, rebuild

VAR_FLOOR = 1e-24


@dataclass
class LogitsBreakdown:
    """The three fusion inputs kept separately for ablation and audit."""

    text_term: Array         # raw text-prototype dots, length C
    visual_neg_term: Array   # visual-minus-negative affinity score, length C
    cache_term: Array        # retrieval feature dots, length C
    fused: Array             # weighted sum of the normalized terms
    probs: Array
    pred: int
    zero_shot_probs: Array
    zero_shot_entropy: float


@dataclass
class PredictSettings:
    mode: str = "mcp"                 # "mcp" or "mcp++"
    use_text_term: bool = True
    use_visual_term: bool = True
    use_cache_term: bool = True
    use_align_loss: bool = True
    use_contrast_loss: bool = True
    persist_residuals: bool = False
    view_average: bool = False


def normalize_rows(x: Array, variant: str = "standardize") -> Array:
    """Per-row normalization applied to each fusion term across the class axis.

    standardize: zero mean, unit variance (rows with ~zero variance become
    zero rows, so empty terms stay inert). l2: unit L2 rows. softmax: row
    softmax at temperature 1. All variants preserve each row's argmax.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if variant == "standardize":
        m = x.mean(axis=-1, keepdims=True)
        var = ((x - m) ** 2).mean(axis=-1, keepdims=True)
        out = np.zeros_like(x)
        ok = var[:, 0] > VAR_FLOOR
        out[ok] = (x[ok] - m[ok]) / np.sqrt(var[ok])
        return out
    if variant == "l2":
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        out = np.zeros_like(x)
        ok = n[:, 0] > 1e-12
        out[ok] = x[ok] / n[ok]
        return out
    if variant == "softmax":
        return softmax_rows(x)
    raise InvalidArgumentError(f"unknown norm variant {variant!r}")


def retrieve_adaptive(f_test: Array, bank: CacheBank, hp: HyperParams) -> Array:
    """Per-class affinity-weighted sums of the reliable cached features.

    Returns a C x d matrix; classes with no cached features get a zero row.
    """
    mats = cache_matrices(bank, RELIABLE)
    if mats.empty:
        return np.zeros((bank.num_classes, bank.dim))
    sims = mats.features @ np.asarray(f_test, dtype=np.float64)
    weighted = affinity(sims, hp.alpha, hp.beta)[:, None] * mats.features
    return mats.labels.T @ weighted


def visual_negative_score(
    f_test: Array,
    v_refined: Array,
    valid_visual: Array,
    q_negative: Array,
    l_negative: Array,
    hp: HyperParams,
) -> Array:
    """Visual-prototype affinity minus the masked negative-cache affinity.

    The positive side is masked to classes that actually have a visual
    prototype; the negative side subtracts each stored negative's affinity
    from every class its mask flags.
    """
    f_test = np.asarray(f_test, dtype=np.float64)
    c = v_refined.shape[0]
    if v_refined.shape[1] != f_test.shape[0]:
        raise InvalidArgumentError("visual prototype dimension mismatch")
    pos = affinity(v_refined @ f_test, hp.alpha, hp.beta) * valid_visual
    if q_negative.shape[0] == 0:
        return pos
    if q_negative.shape[1] != f_test.shape[0] or l_negative.shape != (
        q_negative.shape[0],
        c,
    ):
        raise InvalidArgumentError("negative cache matrix shape mismatch")
    neg = affinity(q_negative @ f_test, hp.alpha, hp.beta) @ l_negative
    return pos - neg


def fuse_logits(
    f_test: Array,
    t_refined: Array,
    visual_neg: Array,
    f_retrieved: Array,
    hp: HyperParams,
    settings: PredictSettings | None = None,
    zero_shot_probs: Array | None = None,
) -> LogitsBreakdown:
    """Normalize the three score vectors and combine them with the fusion
    weights; disabled terms contribute exactly zero."""
    settings = settings or PredictSettings()
    f_test = np.asarray(f_test, dtype=np.float64)
    text = t_refined @ f_test
    cache = f_retrieved @ f_test
    a1 = hp.alpha1 if settings.use_text_term else 0.0
    a2 = hp.alpha2 if settings.use_visual_term else 0.0
    a3 = hp.alpha3 if settings.use_cache_term else 0.0
    v = hp.norm_variant
    fused = (
        a1 * normalize_rows(text, v)[0]
        + a2 * normalize_rows(visual_neg, v)[0]
        + a3 * normalize_rows(cache, v)[0]
    )
    probs = softmax_rows(fused[None, :])[0]
    if zero_shot_probs is None:
        zero_shot_probs = softmax_rows((text / hp.tau)[None, :])[0]
    return LogitsBreakdown(
        text_term=text,
        visual_neg_term=np.asarray(visual_neg, dtype=np.float64),
        cache_term=cache,
        fused=fused,
        probs=probs,
        pred=int(np.argmax(fused)),
        zero_shot_probs=zero_shot_probs,
        zero_shot_entropy=float(entropy_rows(zero_shot_probs[None, :])[0]),
    )


def route_sample(
    feature: Array,
    zero_shot_probs: Array,
    state: PrototypeState,
    bank: CacheBank,
    hp: HyperParams,
) -> dict:
    """Cache routing for one arriving sample.

    Low-entropy samples (at or below the gate fraction of ln C) attempt
    entropy-cache admission and an align-cache admission against the current
    class center. Samples the entropy cache rejects, and all samples above
    the gate, go through the reflecting mechanism and the negative-band
    three-way rule; samples the reflection deems reliable get one
    entropy-cache reconsideration with their calibrated probabilities.
    """
    h0 = float(entropy_rows(zero_shot_probs[None, :])[0])
    gate = hp.e_gate_frac * math.log(bank.num_classes)
    info: dict = {"zero_shot_entropy": h0, "reflected": False}
    to_reflect = False
    if h0 <= gate:
        if bank.enabled[ENTROPY]:
            dec = bank.entropy_update(feature, zero_shot_probs)
            info["entropy_admission"] = dec.status.value
            if not dec.accepted:
                to_reflect = True
        if bank.enabled[ALIGN]:
            label = int(np.argmax(zero_shot_probs))
            dec = bank.align_update(feature, zero_shot_probs, state.mu[label])
            info["align_admission"] = dec.status.value
    else:
        to_reflect = True
    if to_reflect and bank.enabled[NEGATIVE]:
        calibrated, h_prime = reflect(feature, bank, state.text, hp)
        info["reflected"] = True
        info["calibrated_entropy"] = h_prime
        decision = bank.negative_update(feature, calibrated, h_prime, hp)
        info["routing"] = decision.routing.value
        if decision.routing is Routing.RECONSIDER_ENTROPY and bank.enabled[ENTROPY]:
            dec = bank.entropy_update(feature, calibrated)
            info["entropy_admission"] = dec.status.value
    return info


def predict(
    views: Array,
    state: PrototypeState,
    bank: CacheBank,
    hp: HyperParams,
    settings: PredictSettings | None = None,
    opt_state=None,
) -> LogitsBreakdown:
    """Run the full per-sample pipeline and return the fusion breakdown.

    views is an N x d matrix of unit feature rows, row 0 being the original
    view. The bank and prototype state are updated in place.
    """
    settings = settings or PredictSettings()
    views = np.atleast_2d(np.asarray(views, dtype=np.float64))
    if views.shape[1] != bank.dim:
        raise InvalidArgumentError(
            f"views have dimension {views.shape[1]}, bank expects {bank.dim}"
        )
    f = views[0]
    text_dots = state.text @ f
    zero_shot_probs = softmax_rows((text_dots / hp.tau)[None, :])[0]

    route_sample(f, zero_shot_probs, state, bank, hp)
    rebuild(state, bank, hp.w)

    if settings.mode == "mcp++":
        from . import tuning

        if not settings.persist_residuals:
            state.reset_residuals()
            if opt_state is not None:
                opt_state.reset()
        tuning.tune_step(views, state, bank, hp, settings, opt_state)

    t_ref, v_ref = apply_residuals(state)
    neg = cache_matrices(bank, NEGATIVE, hp.p_mask)
    f_r = retrieve_adaptive(f, bank, hp)
    p_score = visual_negative_score(
        f, v_ref, state.valid_visual.astype(np.float64), neg.features,
        neg.neg_mask if neg.neg_mask is not None else np.zeros((0, bank.num_classes)),
        hp,
    )
    breakdown = fuse_logits(
        f, t_ref, p_score, f_r, hp, settings, zero_shot_probs=zero_shot_probs
    )
    if settings.view_average and views.shape[0] > 1:
        breakdown = _confident_view_average(views, t_ref, v_ref, state, bank, neg, hp, settings, breakdown)
    return breakdown


def _confident_view_average(
    views, t_ref, v_ref, state, bank, neg, hp, settings, base: LogitsBreakdown
) -> LogitsBreakdown:
    # average fused logits over the most confident view fraction (>= 1 view)
    n = views.shape[0]
    fused_rows = np.zeros((n, bank.num_classes))
    fused_rows[0] = base.fused
    for i in range(1, n):
        f_i = views[i]
        f_r = retrieve_adaptive(f_i, bank, hp)
        p_i = visual_negative_score(
            f_i, v_ref, state.valid_visual.astype(np.float64), neg.features,
            neg.neg_mask if neg.neg_mask is not None else np.zeros((0, bank.num_classes)),
            hp,
        )
        fused_rows[i] = fuse_logits(f_i, t_ref, p_i, f_r, hp, settings).fused
    ent = entropy_rows(softmax_rows(fused_rows))
    k = max(1, int(hp.rho_delta * n))
    keep = np.argsort(ent, kind="stable")[:k]
    fused = fused_rows[keep].mean(axis=0)
    probs = softmax_rows(fused[None, :])[0]
    return LogitsBreakdown(
        text_term=base.text_term,
        visual_neg_term=base.visual_neg_term,
        cache_term=base.cache_term,
        fused=fused,
        probs=probs,
        pred=int(np.argmax(fused)),
        zero_shot_probs=base.zero_shot_probs,
        zero_shot_entropy=base.zero_shot_entropy,
    )
