"""Residual fine-tuning: the three-part objective, its analytic gradients
with respect to the prototype residuals, and a one-step decoupled-decay Adam
update, plus the finite-difference harness that verifies the gradients.

The view-selection set of the entropy objective is treated as constant during
differentiation (straight-through), which is exact wherever the selection is
locally stable; the gradcheck harness only generates instances with a
selection margin.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .caches import NEGATIVE, RELIABLE, CacheBank, cache_matrices
from .core import Array, HyperParams, affinity, entropy_rows, softmax_rows
from .errors import InvalidArgumentError
from .inference import VAR_FLOOR, PredictSettings
from .prototypes import PrototypeState

TINY = 1e-300


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adam moment accumulators shaped like the two residual matrices."""

    m_text: Array
    v_text: Array
    m_visual: Array
    v_visual: Array
    step: int = 0
    skipped: int = 0  # non-finite gradients encountered and skipped
    clamps: int = 0   # contrast-loss log-argument clamp events

    @classmethod
    def zeros(cls, num_classes: int, dim: int) -> "OptimizerState":
        z = lambda: np.zeros((num_classes, dim))
        return cls(z(), z(), z(), z())

    def reset(self) -> None:
        for m in (self.m_text, self.v_text, self.m_visual, self.v_visual):
            m[:] = 0.0
        self.step = 0


def adamw_step(
    opt: OptimizerState,
    state: PrototypeState,
    grad_text: Array,
    grad_visual: Array,
    hp: HyperParams,
) -> bool:
    """One decoupled-weight-decay Adam update of both residual matrices.

    Returns False (and counts a skip) if any gradient entry is non-finite.
    """
    if not (np.all(np.isfinite(grad_text)) and np.all(np.isfinite(grad_visual))):
        opt.skipped += 1
        return False
    opt.step += 1
    b1, b2 = hp.adam_beta1, hp.adam_beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for param, g, m, v in (
        (state.r_text, grad_text, opt.m_text, opt.v_text),
        (state.r_visual, grad_visual, opt.m_visual, opt.v_visual),
    ):
        m[:] = b1 * m + (1.0 - b1) * g
        v[:] = b2 * v + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + hp.adam_eps)
        param -= hp.lr * (update + hp.weight_decay * param)
    return True


# ---------------------------------------------------------------------------
# loss context


@dataclass
class TuningContext:
    """Everything that stays constant while the residuals are optimized."""

    text: Array        # C x d unit rows
    visual: Array      # C x d, zero rows where invalid
    valid: Array       # C bools
    views: Array       # N x d unit rows, row 0 = original
    g_rel: Array       # K x d reliable cached features
    y_rel: Array       # K x C one-hot labels
    q_neg: Array       # Kn x d negative features
    l_neg: Array       # Kn x C negative class mask
    neg_means: Array   # C x d per-class mean negative feature (rows meaningful
                       # only where has_neg)
    has_neg: Array     # C bools
    hp: HyperParams
    use_text_term: bool = True
    use_visual_term: bool = True
    use_cache_term: bool = True
    use_align_loss: bool = True
    use_contrast_loss: bool = True


def negative_class_means(bank: CacheBank) -> tuple[Array, Array]:
    """Per-class mean of negative-cache features, with a validity mask."""
    means = np.zeros((bank.num_classes, bank.dim))
    has = np.zeros(bank.num_classes, dtype=bool)
    if not bank.enabled[NEGATIVE]:
        return means, has
    for c in range(bank.num_classes):
        slots = bank.caches[NEGATIVE][c].slots
        if slots:
            means[c] = np.mean([s.feature for s in slots], axis=0)
            has[c] = True
    return means, has


def build_context(
    views: Array,
    state: PrototypeState,
    bank: CacheBank,
    hp: HyperParams,
    settings: PredictSettings | None = None,
) -> TuningContext:
    settings = settings or PredictSettings()
    rel = cache_matrices(bank, RELIABLE)
    neg = cache_matrices(bank, NEGATIVE, hp.p_mask)
    means, has = negative_class_means(bank)
    return TuningContext(
        text=state.text,
        visual=state.visual,
        valid=state.valid_visual,
        views=np.atleast_2d(np.asarray(views, dtype=np.float64)),
        g_rel=rel.features,
        y_rel=rel.labels,
        q_neg=neg.features,
        l_neg=neg.neg_mask if neg.neg_mask is not None else np.zeros((0, bank.num_classes)),
        neg_means=means,
        has_neg=has,
        hp=hp,
        use_text_term=settings.use_text_term,
        use_visual_term=settings.use_visual_term,
        use_cache_term=settings.use_cache_term,
        use_align_loss=settings.use_align_loss,
        use_contrast_loss=settings.use_contrast_loss,
    )


# ---------------------------------------------------------------------------
# standalone loss pieces (the public single-purpose entry points)


def select_confident(view_probs: Array, rho: float) -> Array:
    """Indices of the keep-fraction most confident views (at least one).

    Confidence is low entropy; ties break toward the earlier view.
    """
    view_probs = np.atleast_2d(view_probs)
    n = view_probs.shape[0]
    if n < 1:
        raise InvalidArgumentError("need at least one view")
    k = max(1, int(rho * n))
    ent = entropy_rows(view_probs)
    return np.argsort(ent, kind="stable")[:k]


def loss_entropy(view_probs: Array, hp: HyperParams) -> float:
    """Entropy of the averaged prediction of the most confident views."""
    view_probs = np.atleast_2d(np.asarray(view_probs, dtype=np.float64))
    sel = select_confident(view_probs, hp.rho_delta)
    pbar = view_probs[sel].mean(axis=0)
    return float(entropy_rows(pbar[None, :])[0])


def loss_align(t_refined: Array, v_refined: Array, valid: Array) -> float:
    """Symmetric two-direction contrastive alignment of the valid prototype
    pairs, at temperature 1."""
    va = np.flatnonzero(valid)
    if va.size == 0:
        return 0.0
    s = t_refined[va] @ v_refined[va].T
    a_row = softmax_rows(s)
    a_col = softmax_rows(s.T).T
    diag = np.arange(va.size)
    return float((-np.log(a_row[diag, diag]) - np.log(a_col[diag, diag])).mean())


def loss_contrast(
    v_refined: Array, neg_means: Array, mask: Array, hp: HyperParams
) -> tuple[float, bool]:
    """Pushes visual prototypes away from their class's mean negative feature.

    Returns (loss, clamped). The log argument is floored when it is not
    positive; the caller is expected to count clamp events.
    """
    cn = np.flatnonzero(mask)
    if cn.size == 0:
        return 0.0, False
    v = v_refined[cn]
    m = neg_means[cn]
    vn = np.linalg.norm(v, axis=1)
    mn = np.linalg.norm(m, axis=1)
    cos = np.clip((v * m).sum(axis=1) / (vn * mn), -1.0, 1.0)
    arg = 1.0 - float(cos.mean()) + hp.eps
    clamped = arg <= 0.0
    if clamped:
        arg = hp.eps if hp.eps > 0 else TINY
    return float(-np.log(arg)), clamped


# ---------------------------------------------------------------------------
# fused forward/backward


def _norm_forward(x: Array, variant: str):
    if variant == "standardize":
        m = x.mean(axis=-1, keepdims=True)
        var = ((x - m) ** 2).mean(axis=-1, keepdims=True)
        ok = var[:, 0] > VAR_FLOOR
        sd = np.sqrt(np.where(var > VAR_FLOOR, var, 1.0))
        out = np.where(ok[:, None], (x - m) / sd, 0.0)
        return out, (out, sd, ok)
    if variant == "l2":
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        ok = n[:, 0] > 1e-12
        nn = np.where(n > 1e-12, n, 1.0)
        out = np.where(ok[:, None], x / nn, 0.0)
        return out, (out, nn, ok)
    if variant == "softmax":
        y = softmax_rows(x)
        return y, (y, None, None)
    raise InvalidArgumentError(f"unknown norm variant {variant!r}")


def _norm_backward(g: Array, cache, variant: str) -> Array:
    if variant == "standardize":
        xhat, sd, ok = cache
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return np.where(ok[:, None], (g - gm - xhat * gx) / sd, 0.0)
    if variant == "l2":
        xhat, n, ok = cache
        dot = (g * xhat).sum(axis=-1, keepdims=True)
        return np.where(ok[:, None], (g - dot * xhat) / n, 0.0)
    if variant == "softmax":
        y, _, _ = cache
        return y * (g - (g * y).sum(axis=-1, keepdims=True))
    raise InvalidArgumentError(f"unknown norm variant {variant!r}")


@dataclass
class LossReport:
    total: float
    entropy: float
    align: float
    contrast: float
    clamped: bool
    selected: Array
    grad_text: Array | None = None
    grad_visual: Array | None = None


def loss_and_grad(
    ctx: TuningContext, r_text: Array, r_visual: Array, want_grad: bool = True
) -> LossReport:
    """Evaluate the joint objective at the given residuals; optionally also
    return its analytic gradients.

    The forward pass here is the exact function the finite-difference harness
    probes, so the two must stay in lockstep.
    """
    hp = ctx.hp
    variant = hp.norm_variant
    c_num, d = ctx.text.shape
    views = ctx.views
    n = views.shape[0]
    validf = ctx.valid.astype(np.float64)

    # refined prototypes on the unit sphere
    u_t = ctx.text + r_text
    n_t = np.linalg.norm(u_t, axis=1)
    t_p = u_t / n_t[:, None]
    u_v = ctx.visual + r_visual
    n_v_raw = np.linalg.norm(u_v, axis=1)
    n_v = np.where(ctx.valid, np.where(n_v_raw > 0, n_v_raw, 1.0), 1.0)
    v_p = np.where(ctx.valid[:, None], u_v / n_v[:, None], 0.0)

    # raw fusion terms for every view
    z_t = views @ t_p.T
    x_v = views @ v_p.T
    a_v = hp.alpha * np.exp(-hp.beta * (1.0 - x_v))
    z_p = a_v * validf[None, :]
    if ctx.q_neg.shape[0]:
        z_p = z_p - affinity(views @ ctx.q_neg.T, hp.alpha, hp.beta) @ ctx.l_neg
    if ctx.g_rel.shape[0]:
        s_rel = views @ ctx.g_rel.T
        z_r = (affinity(s_rel, hp.alpha, hp.beta) * s_rel) @ ctx.y_rel
    else:
        z_r = np.zeros((n, c_num))

    a1 = hp.alpha1 if ctx.use_text_term else 0.0
    a2 = hp.alpha2 if ctx.use_visual_term else 0.0
    a3 = hp.alpha3 if ctx.use_cache_term else 0.0
    t_hat, t_cache = _norm_forward(z_t, variant)
    p_hat, p_cache = _norm_forward(z_p, variant)
    r_hat, _ = _norm_forward(z_r, variant)
    fused = a1 * t_hat + a2 * p_hat + a3 * r_hat
    probs = softmax_rows(fused)

    sel = select_confident(probs, hp.rho_delta)
    pbar = probs[sel].mean(axis=0)
    l_entropy = float(-(pbar * np.log(pbar)).sum())

    va = np.flatnonzero(ctx.valid)
    l_align_raw = 0.0
    a_row = a_col = None
    if ctx.use_align_loss and va.size > 0:
        s_mat = t_p[va] @ v_p[va].T
        a_row = softmax_rows(s_mat)
        a_col = softmax_rows(s_mat.T).T
        diag = np.arange(va.size)
        l_align_raw = float(
            (-np.log(a_row[diag, diag]) - np.log(a_col[diag, diag])).mean()
        )

    cn = np.flatnonzero(ctx.valid & ctx.has_neg)
    l_contrast_raw = 0.0
    clamped = False
    if ctx.use_contrast_loss and cn.size > 0:
        m_rows = ctx.neg_means[cn]
        m_n = np.linalg.norm(m_rows, axis=1)
        v_rows = v_p[cn]
        v_n = np.linalg.norm(v_rows, axis=1)
        cos_raw = (v_rows * m_rows).sum(axis=1) / (v_n * m_n)
        cos = np.clip(cos_raw, -1.0, 1.0)
        arg = 1.0 - float(cos.mean()) + hp.eps
        clamped = arg <= 0.0
        if clamped:
            arg = hp.eps if hp.eps > 0 else TINY
        l_contrast_raw = float(-np.log(arg))

    total = l_entropy + hp.lam * l_align_raw + hp.gamma * l_contrast_raw
    report = LossReport(
        total=total,
        entropy=l_entropy,
        align=l_align_raw,
        contrast=l_contrast_raw,
        clamped=clamped,
        selected=sel,
    )
    if not want_grad:
        return report

    d_tp = np.zeros((c_num, d))
    d_vp = np.zeros((c_num, d))

    # entropy objective, selection set held fixed
    d_probs = np.zeros((n, c_num))
    d_probs[sel] = -(np.log(pbar) + 1.0)[None, :] / sel.size
    d_fused = probs * (d_probs - (d_probs * probs).sum(axis=1, keepdims=True))
    d_zt = _norm_backward(a1 * d_fused, t_cache, variant)
    d_zp = _norm_backward(a2 * d_fused, p_cache, variant)
    d_tp += d_zt.T @ views
    d_vp += (d_zp * validf[None, :] * hp.beta * a_v).T @ views

    # alignment objective on the valid submatrix
    if ctx.use_align_loss and va.size > 0 and hp.lam != 0.0:
        eye = np.eye(va.size)
        d_s = (hp.lam / va.size) * ((a_row - eye) + (a_col - eye))
        d_tp[va] += d_s @ v_p[va]
        d_vp[va] += d_s.T @ t_p[va]

    # negative-contrast objective
    if ctx.use_contrast_loss and cn.size > 0 and hp.gamma != 0.0 and not clamped:
        m_rows = ctx.neg_means[cn]
        m_n = np.linalg.norm(m_rows, axis=1)
        v_rows = v_p[cn]
        v_n = np.linalg.norm(v_rows, axis=1)
        cos_raw = (v_rows * m_rows).sum(axis=1) / (v_n * m_n)
        inside = (np.abs(cos_raw) < 1.0).astype(np.float64)
        cos = np.clip(cos_raw, -1.0, 1.0)
        arg = 1.0 - float(cos.mean()) + hp.eps
        coeff = (hp.gamma / arg) / cn.size * inside
        m_hat = m_rows / m_n[:, None]
        d_vp[cn] += coeff[:, None] * (
            m_hat - cos[:, None] * v_rows / v_n[:, None]
        ) / v_n[:, None]

    # through the row renormalizations down to the residuals
    dot_t = (d_tp * t_p).sum(axis=1, keepdims=True)
    report.grad_text = (d_tp - dot_t * t_p) / n_t[:, None]
    dot_v = (d_vp * v_p).sum(axis=1, keepdims=True)
    report.grad_visual = np.where(
        ctx.valid[:, None], (d_vp - dot_v * v_p) / n_v[:, None], 0.0
    )
    return report


def total_loss(
    views: Array,
    state: PrototypeState,
    bank: CacheBank,
    hp: HyperParams,
    settings: PredictSettings | None = None,
) -> float:
    ctx = build_context(views, state, bank, hp, settings)
    return loss_and_grad(ctx, state.r_text, state.r_visual, want_grad=False).total


def grad_residuals(
    views: Array,
    state: PrototypeState,
    bank: CacheBank,
    hp: HyperParams,
    settings: PredictSettings | None = None,
) -> tuple[Array, Array]:
    ctx = build_context(views, state, bank, hp, settings)
    rep = loss_and_grad(ctx, state.r_text, state.r_visual)
    return rep.grad_text, rep.grad_visual


def tune_step(
    views: Array,
    state: PrototypeState,
    bank: CacheBank,
    hp: HyperParams,
    settings: PredictSettings | None = None,
    opt: OptimizerState | None = None,
) -> LossReport:
    """One gradient step on the residuals for the current sample's views."""
    ctx = build_context(views, state, bank, hp, settings)
    rep = loss_and_grad(ctx, state.r_text, state.r_visual)
    if opt is None:
        opt = OptimizerState.zeros(*state.r_text.shape)
    if rep.clamped:
        opt.clamps += 1
    adamw_step(opt, state, rep.grad_text, rep.grad_visual, hp)
    return rep


# ---------------------------------------------------------------------------
# finite-difference verification harness


def finite_diff_grads(
    ctx: TuningContext, r_text: Array, r_visual: Array, h: float = 1e-5
) -> tuple[Array, Array]:
    """Central-difference gradients of the joint objective, the independent
    oracle for the analytic pass."""

    def f(rt, rv):
        return loss_and_grad(ctx, rt, rv, want_grad=False).total

    out = []
    for which, base in (("t", r_text), ("v", r_visual)):
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            minus = base.copy()
            plus[idx] += h
            minus[idx] -= h
            if which == "t":
                g[idx] = (f(plus, r_visual) - f(minus, r_visual)) / (2 * h)
            else:
                g[idx] = (f(r_text, plus) - f(r_text, minus)) / (2 * h)
        out.append(g)
    return out[0], out[1]


def _unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def make_random_instance(
    rng: np.random.Generator, c_num: int, d: int, n_views: int, hp: HyperParams | None = None
) -> tuple[TuningContext, Array, Array]:
    """A random, margin-checked tuning instance.

    Rejection-samples until the confident-view selection has an entropy
    margin and every standardized term row has healthy variance, so the
    straight-through assumptions hold in a neighborhood of the point.
    """
    hp = hp or HyperParams()
    for _ in range(200):
        text = _unit_rows(rng, c_num, d)
        valid = rng.random(c_num) < 0.8
        if not valid.any():
            valid[int(rng.integers(c_num))] = True
        visual = np.where(valid[:, None], _unit_rows(rng, c_num, d), 0.0)
        views = _unit_rows(rng, n_views, d)
        k_rel = int(rng.integers(1, 2 * c_num + 1))
        g_rel = _unit_rows(rng, k_rel, d)
        y_rel = np.zeros((k_rel, c_num))
        y_rel[np.arange(k_rel), rng.integers(0, c_num, k_rel)] = 1.0
        k_neg = int(rng.integers(0, c_num + 1))
        q_neg = _unit_rows(rng, k_neg, d) if k_neg else np.zeros((0, d))
        l_neg = (rng.random((k_neg, c_num)) < 0.5).astype(np.float64)
        has_neg = valid & (rng.random(c_num) < 0.7)
        neg_means = np.where(has_neg[:, None], _unit_rows(rng, c_num, d), 0.0)
        ctx = TuningContext(
            text=text, visual=visual, valid=valid, views=views,
            g_rel=g_rel, y_rel=y_rel, q_neg=q_neg, l_neg=l_neg,
            neg_means=neg_means, has_neg=has_neg, hp=hp,
        )
        r_text = 0.05 * rng.standard_normal((c_num, d))
        r_visual = 0.05 * rng.standard_normal((c_num, d))
        if _margins_ok(ctx, r_text, r_visual):
            return ctx, r_text, r_visual
    raise RuntimeError("could not generate a margin-stable instance")


def _margins_ok(ctx, r_text, r_visual) -> bool:
    """Reject points too close to a non-differentiable branch boundary:
    thin view-selection entropy gaps, near-constant term rows, or near-clipped
    contrast cosines."""
    hp = ctx.hp
    u_t = ctx.text + r_text
    t_p = u_t / np.linalg.norm(u_t, axis=1, keepdims=True)
    u_v = ctx.visual + r_visual
    n_v_raw = np.linalg.norm(u_v, axis=1)
    n_v = np.where(ctx.valid, np.where(n_v_raw > 0, n_v_raw, 1.0), 1.0)
    v_p = np.where(ctx.valid[:, None], u_v / n_v[:, None], 0.0)
    z_t = ctx.views @ t_p.T
    x_v = ctx.views @ v_p.T
    z_p = hp.alpha * np.exp(-hp.beta * (1.0 - x_v)) * ctx.valid
    if ctx.q_neg.shape[0]:
        z_p = z_p - affinity(ctx.views @ ctx.q_neg.T, hp.alpha, hp.beta) @ ctx.l_neg
    if ctx.g_rel.shape[0]:
        s_rel = ctx.views @ ctx.g_rel.T
        z_r = (affinity(s_rel, hp.alpha, hp.beta) * s_rel) @ ctx.y_rel
    else:
        z_r = np.zeros_like(z_t)

    def rowvar(x):
        m = x.mean(axis=1, keepdims=True)
        return ((x - m) ** 2).mean(axis=1)

    if ctx.use_text_term and hp.alpha1 != 0.0 and rowvar(z_t).min() < 1e-6:
        return False
    if ctx.use_visual_term and hp.alpha2 != 0.0 and rowvar(z_p).min() < 1e-6:
        return False

    if ctx.use_contrast_loss and hp.gamma != 0.0:
        cn = np.flatnonzero(ctx.valid & ctx.has_neg)
        if cn.size:
            m_rows = ctx.neg_means[cn]
            cos = (v_p[cn] * m_rows).sum(axis=1) / (
                np.linalg.norm(v_p[cn], axis=1) * np.linalg.norm(m_rows, axis=1)
            )
            if np.abs(cos).max() > 0.99:
                return False

    n = ctx.views.shape[0]
    k = max(1, int(hp.rho_delta * n))
    a1 = hp.alpha1 if ctx.use_text_term else 0.0
    a2 = hp.alpha2 if ctx.use_visual_term else 0.0
    a3 = hp.alpha3 if ctx.use_cache_term else 0.0
    if k < n and (a1, a2, a3) != (0.0, 0.0, 0.0):
        fused = (
            a1 * _norm_forward(z_t, hp.norm_variant)[0]
            + a2 * _norm_forward(z_p, hp.norm_variant)[0]
            + a3 * _norm_forward(z_r, hp.norm_variant)[0]
        )
        ent = np.sort(entropy_rows(softmax_rows(fused)))
        if float(ent[k] - ent[k - 1]) < 1e-3:
            return False
    return True


@dataclass
class GradCheckResult:
    instances: int
    max_rel_error: float
    per_term: dict
    seconds: float


def gradcheck_report(
    n_instances: int = 50,
    seed: int = 0,
    h: float = 1e-5,
    class_counts=(2, 3, 5),
    dims=(4, 8, 16),
    view_counts=(1, 4, 8),
) -> GradCheckResult:
    """Compare analytic and central-difference gradients on random instances.

    Reports the scale-relative infinity-norm error, overall and per objective
    term (each term checked in isolation by zeroing the other weights). The
    error is normalized by the largest gradient magnitude with a 1e-6 floor,
    so instances whose true gradient vanishes (two-class standardization has
    a zero Jacobian) are judged on absolute agreement instead.
    """
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    hp_total = HyperParams()
    term_hps = {
        "entropy": HyperParams(lam=0.0, gamma=0.0),
        "align": HyperParams(lam=1.0, gamma=0.0, alpha1=0.0, alpha2=0.0, alpha3=0.0),
        "contrast": HyperParams(lam=0.0, gamma=1.0, alpha1=0.0, alpha2=0.0, alpha3=0.0),
        "total": hp_total,
    }
    per_term = {k: 0.0 for k in term_hps}
    worst = 0.0
    for i in range(n_instances):
        c_num = int(rng.choice(class_counts))
        d = int(rng.choice(dims))
        n = int(rng.choice(view_counts))
        for term, hp in term_hps.items():
            ctx, r_t, r_v = make_random_instance(rng, c_num, d, n, hp)
            rep = loss_and_grad(ctx, r_t, r_v)
            fd_t, fd_v = finite_diff_grads(ctx, r_t, r_v, h)
            scale = max(
                np.abs(fd_t).max(),
                np.abs(fd_v).max(),
                np.abs(rep.grad_text).max(),
                np.abs(rep.grad_visual).max(),
                1e-6,
            )
            err = max(
                np.abs(rep.grad_text - fd_t).max(),
                np.abs(rep.grad_visual - fd_v).max(),
            ) / scale
            per_term[term] = max(per_term[term], err)
            worst = max(worst, err)
    return GradCheckResult(
        instances=n_instances,
        max_rel_error=worst,
        per_term=per_term,
        seconds=time.perf_counter() - t0,
    )
