import math

import numpy as np
import pytest

from mcptta.core import HyperParams, l2_normalize, softmax_rows
from mcptta.prototypes import PrototypeState
from mcptta.tuning import (
    OptimizerState,
    TuningContext,
    adamw_step,
    finite_diff_grads,
    gradcheck_report,
    loss_align,
    loss_and_grad,
    loss_contrast,
    loss_entropy,
    make_random_instance,
    select_confident,
)


def unit(rng, d=8):
    return l2_normalize(rng.standard_normal(d))


# -- entropy objective ------------------------------------------------------


def test_loss_entropy_single_view():
    p = np.array([0.6, 0.3, 0.1])
    expected = -sum(x * math.log(x) for x in p)
    assert loss_entropy(p[None, :], HyperParams()) == pytest.approx(expected)


def test_loss_entropy_identical_views_equals_per_view_entropy():
    p = np.array([0.5, 0.25, 0.25])
    batch = np.tile(p, (12, 1))
    expected = -sum(x * math.log(x) for x in p)
    assert loss_entropy(batch, HyperParams()) == pytest.approx(expected)


def test_selection_keeps_three_of_thirty_two():
    rng = np.random.default_rng(0)
    probs = softmax_rows(rng.standard_normal((32, 5)))
    sel = select_confident(probs, 0.1)
    assert sel.size == 3
    from mcptta.core import entropy_rows

    ent = entropy_rows(probs)
    assert set(sel.tolist()) == set(np.argsort(ent, kind="stable")[:3].tolist())


def test_selection_minimum_one_view():
    rng = np.random.default_rng(1)
    probs = softmax_rows(rng.standard_normal((4, 3)))
    assert select_confident(probs, 0.1).size == 1


# -- alignment objective -----------------------------------------------------


def test_loss_align_single_valid_class_is_zero():
    rng = np.random.default_rng(2)
    t = np.stack([unit(rng) for _ in range(3)])
    v = np.stack([unit(rng) for _ in range(3)])
    valid = np.array([False, True, False])
    assert loss_align(t, v, valid) == pytest.approx(0.0, abs=1e-15)


def test_loss_align_orthonormal_two_class_closed_form():
    t = np.eye(2)
    v = np.eye(2)
    valid = np.array([True, True])
    expected = -2.0 * math.log(math.e / (math.e + 1.0))
    assert loss_align(t, v, valid) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.62652, abs=1e-5)


def test_loss_align_matches_naive_double_softmax():
    rng = np.random.default_rng(3)
    c, d = 4, 8
    t = np.stack([unit(rng, d) for _ in range(c)])
    v = np.stack([unit(rng, d) for _ in range(c)])
    valid = np.ones(c, dtype=bool)
    got = loss_align(t, v, valid)
    total = 0.0
    for i in range(c):
        s_iv = [float(t[i] @ v[j]) for j in range(c)]
        row = math.exp(s_iv[i]) / sum(math.exp(x) for x in s_iv)
        s_tv = [float(t[j] @ v[i]) for j in range(c)]
        col = math.exp(s_tv[i]) / sum(math.exp(x) for x in s_tv)
        total += -math.log(row) - math.log(col)
    assert abs(got - total / c) < 1e-10


def test_loss_align_empty_contributes_zero():
    t = np.eye(3)
    v = np.zeros((3, 3))
    assert loss_align(t, v, np.zeros(3, dtype=bool)) == 0.0


# -- contrast objective -------------------------------------------------------


def test_loss_contrast_no_negatives():
    rng = np.random.default_rng(4)
    v = np.stack([unit(rng) for _ in range(3)])
    loss, clamped = loss_contrast(v, np.zeros((3, 8)), np.zeros(3, dtype=bool), HyperParams())
    assert loss == 0.0 and not clamped


def test_loss_contrast_orthogonal_negatives():
    hp = HyperParams()
    v = np.eye(4)[:2]
    negs = np.eye(4)[2:]
    loss, clamped = loss_contrast(v, negs, np.array([True, True]), hp)
    assert loss == pytest.approx(-math.log(1.0 + hp.eps))
    assert not clamped


def test_loss_contrast_identical_hits_floor_value():
    hp = HyperParams()
    rng = np.random.default_rng(5)
    v = np.stack([unit(rng) for _ in range(2)])
    loss, clamped = loss_contrast(v, v.copy(), np.array([True, True]), hp)
    assert loss == pytest.approx(-math.log(hp.eps))
    assert not clamped  # eps keeps the argument strictly positive


def test_loss_contrast_clamp_triggers_at_zero_eps():
    hp = HyperParams(eps=0.0)
    rng = np.random.default_rng(6)
    v = np.stack([unit(rng) for _ in range(2)])
    loss, clamped = loss_contrast(v, v.copy(), np.array([True, True]), hp)
    assert clamped and math.isfinite(loss)


# -- joint objective and gradients ---------------------------------------


def test_total_loss_reduces_to_entropy_when_weights_zero():
    rng = np.random.default_rng(7)
    hp = HyperParams(lam=0.0, gamma=0.0)
    ctx, r_t, r_v = make_random_instance(rng, 3, 8, 4, hp)
    rep = loss_and_grad(ctx, r_t, r_v, want_grad=False)
    assert rep.total == rep.entropy
    hp_d = HyperParams()
    ctx2, r_t2, r_v2 = make_random_instance(rng, 3, 8, 4, hp_d)
    rep2 = loss_and_grad(ctx2, r_t2, r_v2, want_grad=False)
    assert rep2.total == pytest.approx(
        rep2.entropy + hp_d.lam * rep2.align + hp_d.gamma * rep2.contrast
    )
    assert hp_d.lam == 0.5 and hp_d.gamma == 0.2


def test_gradient_near_zero_at_one_hot_stationary_point():
    # identical views whose fused prediction saturates to one-hot: the
    # entropy objective sits on its minimum plateau, so gradients vanish
    rng = np.random.default_rng(8)
    c, d = 3, 8
    hp = HyperParams(lam=0.0, gamma=0.0, alpha1=50.0, alpha2=0.0, alpha3=0.0)
    text = np.stack([unit(rng, d) for _ in range(c)])
    f = text[0]  # exactly the class-0 prototype: saturated prediction
    ctx = TuningContext(
        text=text,
        visual=np.zeros((c, d)),
        valid=np.zeros(c, dtype=bool),
        views=np.tile(f, (4, 1)),
        g_rel=np.zeros((0, d)),
        y_rel=np.zeros((0, c)),
        q_neg=np.zeros((0, d)),
        l_neg=np.zeros((0, c)),
        neg_means=np.zeros((c, d)),
        has_neg=np.zeros(c, dtype=bool),
        hp=hp,
    )
    rep = loss_and_grad(ctx, np.zeros((c, d)), np.zeros((c, d)))
    assert np.abs(rep.grad_text).max() < 1e-6
    assert np.all(rep.grad_visual == 0.0)


def test_gradients_match_finite_differences_small_instance():
    rng = np.random.default_rng(9)
    ctx, r_t, r_v = make_random_instance(rng, 3, 8, 4)
    rep = loss_and_grad(ctx, r_t, r_v)
    fd_t, fd_v = finite_diff_grads(ctx, r_t, r_v)
    scale = max(np.abs(fd_t).max(), np.abs(fd_v).max(), 1e-6)
    assert np.abs(rep.grad_text - fd_t).max() / scale < 1e-4
    assert np.abs(rep.grad_visual - fd_v).max() / scale < 1e-4


def test_align_gradient_symbolic_two_by_two():
    # orthonormal prototype pairs: the gradient of the symmetric alignment
    # term with respect to the refined rows is (A_row - I + A_col - I) / C'
    # contracted with the other side, then projected onto the sphere tangent
    c = 2
    hp = HyperParams(lam=1.0, gamma=0.0, alpha1=0.0, alpha2=0.0, alpha3=0.0)
    text = np.eye(2)
    visual = np.eye(2)
    ctx = TuningContext(
        text=text,
        visual=visual,
        valid=np.ones(c, dtype=bool),
        views=np.eye(2)[:1],
        g_rel=np.zeros((0, 2)),
        y_rel=np.zeros((0, c)),
        q_neg=np.zeros((0, 2)),
        l_neg=np.zeros((0, c)),
        neg_means=np.zeros((c, 2)),
        has_neg=np.zeros(c, dtype=bool),
        hp=hp,
    )
    rep = loss_and_grad(ctx, np.zeros((c, 2)), np.zeros((c, 2)))
    a = math.exp(1.0) / (math.exp(1.0) + 1.0)
    row_part = np.array([[a - 1.0, 1.0 - a], [1.0 - a, a - 1.0]])  # A_row - I
    d_s = (row_part + row_part) / c  # the column direction mirrors it here
    d_t = d_s @ visual
    expected_t = np.zeros((2, 2))
    for i in range(2):
        t_row = text[i]
        expected_t[i] = d_t[i] - float(d_t[i] @ t_row) * t_row
    assert np.allclose(rep.grad_text, expected_t, atol=1e-12)
    assert np.allclose(rep.grad_visual, expected_t, atol=1e-12)  # symmetric setup


def test_gradcheck_harness_meets_tolerance():
    report = gradcheck_report(n_instances=12, seed=5)
    assert report.max_rel_error < 1e-4


def test_gradients_are_deterministic():
    rng1 = np.random.default_rng(11)
    rng2 = np.random.default_rng(11)
    ctx1, rt1, rv1 = make_random_instance(rng1, 3, 8, 4)
    ctx2, rt2, rv2 = make_random_instance(rng2, 3, 8, 4)
    rep1 = loss_and_grad(ctx1, rt1, rv1)
    rep2 = loss_and_grad(ctx2, rt2, rv2)
    assert np.array_equal(rep1.grad_text, rep2.grad_text)
    assert np.array_equal(rep1.grad_visual, rep2.grad_visual)
    assert rep1.total == rep2.total


def test_selection_set_stable_under_tiny_perturbations():
    rng = np.random.default_rng(12)
    ctx, r_t, r_v = make_random_instance(rng, 3, 8, 8)
    base = loss_and_grad(ctx, r_t, r_v, want_grad=False).selected
    for _ in range(10):
        d_t = 1e-9 * rng.standard_normal(r_t.shape)
        d_v = 1e-9 * rng.standard_normal(r_v.shape)
        sel = loss_and_grad(ctx, r_t + d_t, r_v + d_v, want_grad=False).selected
        assert np.array_equal(sel, base)


def test_one_step_rarely_increases_loss():
    rng = np.random.default_rng(13)
    hp = HyperParams()
    overshoots = 0
    trials = 40
    for _ in range(trials):
        ctx, r_t, r_v = make_random_instance(rng, 3, 8, 4, hp)
        rep = loss_and_grad(ctx, r_t, r_v)
        state = PrototypeState(
            text=ctx.text,
            visual=ctx.visual,
            r_text=r_t.copy(),
            r_visual=r_v.copy(),
            mu=ctx.text.copy(),
            valid_visual=ctx.valid,
        )
        opt = OptimizerState.zeros(*r_t.shape)
        assert adamw_step(opt, state, rep.grad_text, rep.grad_visual, hp)
        after = loss_and_grad(ctx, state.r_text, state.r_visual, want_grad=False)
        if after.total > rep.total:
            overshoots += 1
    assert overshoots <= trials * 0.05


# -- optimizer ---------------------------------------------------------------


def make_state(rng, c=2, d=4):
    t = np.stack([unit(rng, d) for _ in range(c)])
    state = PrototypeState.initial(t)
    return state


def test_adamw_zero_gradient_no_change():
    rng = np.random.default_rng(14)
    state = make_state(rng)
    opt = OptimizerState.zeros(2, 4)
    adamw_step(opt, state, np.zeros((2, 4)), np.zeros((2, 4)), HyperParams())
    assert np.all(state.r_text == 0.0) and np.all(state.r_visual == 0.0)


def test_adamw_zero_lr_no_change():
    rng = np.random.default_rng(15)
    state = make_state(rng)
    opt = OptimizerState.zeros(2, 4)
    g = rng.standard_normal((2, 4))
    adamw_step(opt, state, g, g, HyperParams(lr=0.0))
    assert np.all(state.r_text == 0.0) and np.all(state.r_visual == 0.0)


def test_adamw_single_step_matches_hand_formula():
    rng = np.random.default_rng(16)
    state = make_state(rng)
    opt = OptimizerState.zeros(2, 4)
    hp = HyperParams(lr=1e-3)
    g = rng.standard_normal((2, 4))
    adamw_step(opt, state, g, np.zeros((2, 4)), hp)
    m = (1 - hp.adam_beta1) * g
    v = (1 - hp.adam_beta2) * g * g
    m_hat = m / (1 - hp.adam_beta1)
    v_hat = v / (1 - hp.adam_beta2)
    expected = -hp.lr * m_hat / (np.sqrt(v_hat) + hp.adam_eps)
    assert np.allclose(state.r_text, expected, atol=1e-15)
    assert np.all(state.r_visual == 0.0)


def test_adamw_skips_nonfinite_gradients():
    rng = np.random.default_rng(17)
    state = make_state(rng)
    opt = OptimizerState.zeros(2, 4)
    g = np.full((2, 4), np.nan)
    assert not adamw_step(opt, state, g, g, HyperParams())
    assert opt.skipped == 1
    assert np.all(state.r_text == 0.0)
    assert opt.step == 0
