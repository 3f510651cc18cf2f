import csv
import math

import numpy as np
import pytest

from primfit.config import FitConfig
from primfit.errors import MissingAlphaTarget, ShapeMismatch
from primfit.fit import (
    LossSpec,
    OptimState,
    adam_step,
    evaluate_loss,
    gains_vector,
    loss_grayscale_l1,
    loss_mse,
    loss_spatial,
    lr_schedule,
    optimize,
    psnr,
    reinit_low_opacity,
    run_loop,
    should_reinit,
)
from primfit.scene import ParamLayout, pack_params

from conftest import random_scene


# -- losses ------------------------------------------------------------------

def test_loss_mse_value_and_gradient():
    rng = np.random.default_rng(0)
    I = rng.random((5, 6, 3))
    target = rng.random((5, 6, 3))
    value, grad = loss_mse(I, target)
    assert value == pytest.approx(np.mean((I - target) ** 2))
    # central differences on a handful of pixels
    h = 1e-6
    for (y, x, c) in [(0, 0, 0), (2, 3, 1), (4, 5, 2)]:
        Ip = I.copy(); Ip[y, x, c] += h
        Im = I.copy(); Im[y, x, c] -= h
        fd = (loss_mse(Ip, target)[0] - loss_mse(Im, target)[0]) / (2 * h)
        assert grad[y, x, c] == pytest.approx(fd, rel=1e-5)


def test_loss_grayscale_l1_value_and_gradient():
    rng = np.random.default_rng(1)
    I = rng.random((4, 4, 3))
    target = rng.random((4, 4, 3))
    w = np.array([0.299, 0.587, 0.114])
    d = (I - target) @ w
    value, grad = loss_grayscale_l1(I, target)
    assert value == pytest.approx(np.mean(np.abs(d)))
    h = 1e-6
    for (y, x, c) in [(0, 1, 0), (3, 2, 2)]:
        Ip = I.copy(); Ip[y, x, c] += h
        Im = I.copy(); Im[y, x, c] -= h
        fd = (loss_grayscale_l1(Ip, target)[0]
              - loss_grayscale_l1(Im, target)[0]) / (2 * h)
        assert grad[y, x, c] == pytest.approx(fd, rel=1e-4)


def test_loss_spatial_masks_color_term():
    rng = np.random.default_rng(2)
    I = rng.random((6, 5, 3))
    A = rng.random((6, 5))
    target = rng.random((6, 5, 3))
    ta = np.zeros((6, 5))
    ta[2:4, 1:4] = 1.0
    spec = LossSpec(kind="spatial_constrained", target=target,
                    target_alpha=ta, alpha_w=0.3)
    value, dI, dA = loss_spatial(I, A, spec)
    color = np.sum(((I - target) * ta[:, :, None]) ** 2) / I.size
    alpha = np.mean((A - ta) ** 2)
    assert value == pytest.approx(color + 0.3 * alpha)
    # off-support pixels contribute no color gradient but do get pushed
    # down through the coverage term
    assert np.all(dI[ta == 0] == 0.0)
    assert np.all(dI[ta > 0] != 0.0)
    np.testing.assert_allclose(dA, 0.3 * 2.0 * (A - ta) / A.size, atol=1e-15)


def test_spatial_loss_requires_alpha_target():
    with pytest.raises(MissingAlphaTarget):
        LossSpec(kind="spatial_constrained", target=np.zeros((4, 4, 3)))


def test_evaluate_loss_combined_and_unknown():
    rng = np.random.default_rng(3)
    I = rng.random((4, 4, 3))
    target = rng.random((4, 4, 3))
    spec = LossSpec(kind="combined", target=target, mse_w=0.7, gray_l1_w=0.2)
    value, dI, dA = evaluate_loss(spec, I, np.zeros((4, 4)))
    vm, gm = loss_mse(I, target)
    vg, gg = loss_grayscale_l1(I, target)
    assert value == pytest.approx(0.7 * vm + 0.2 * vg)
    np.testing.assert_allclose(dI, 0.7 * gm + 0.2 * gg, atol=1e-15)
    assert dA is None
    with pytest.raises(ValueError):
        evaluate_loss(LossSpec(kind="huber", target=target), I, None)


def test_loss_weights_must_be_nonnegative():
    with pytest.raises(ValueError):
        LossSpec(kind="mse", target=np.zeros((2, 2, 3)), mse_w=-0.1)


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        loss_mse(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


# -- schedule and step -------------------------------------------------------

def test_lr_schedule_endpoints():
    assert lr_schedule(0, 100, 0.02) == pytest.approx(0.02)
    assert lr_schedule(99, 100, 0.02) == pytest.approx(0.002)
    mid = lr_schedule(50, 101, 0.02)
    assert mid == pytest.approx(0.02 * math.sqrt(0.1))
    assert lr_schedule(5, 100, 0.02, decay_enabled=False) == 0.02
    assert lr_schedule(0, 1, 0.02) == 0.02
    with pytest.raises(ValueError):
        lr_schedule(100, 100, 0.02)


def test_adam_step_matches_hand_rollout():
    rng = np.random.default_rng(4)
    n = 2
    layout = ParamLayout(n)
    params = rng.normal(size=layout.size)
    state = OptimState.fresh(layout)
    m = np.zeros(layout.size)
    v = np.zeros(layout.size)
    lr = 0.05
    cur = params.copy()
    for t in range(1, 4):
        g = rng.normal(size=layout.size)
        expect_m = 0.9 * m + 0.1 * g
        expect_v = 0.999 * v + 0.001 * g**2
        mh = expect_m / (1 - 0.9**t)
        vh = expect_v / (1 - 0.999**t)
        expect = cur - lr * mh / (np.sqrt(vh) + 1e-8)
        cur = adam_step(cur, g, state, lr, layout=layout)
        np.testing.assert_allclose(cur, expect, atol=1e-14)
        m, v = expect_m, expect_v
    assert state.step == 3


def test_adam_step_respects_frozen_and_gains():
    layout = ParamLayout(3)
    params = np.ones(layout.size)
    grads = np.ones(layout.size)
    state = OptimState.fresh(layout)
    state.frozen[1] = True
    gains = gains_vector(layout, {"x": 2.0})
    out = adam_step(params, grads, state, 0.1, gains=gains)
    blk = layout.block(1)
    np.testing.assert_array_equal(out[blk], 1.0)
    assert np.all(state.m[blk] == 0.0) and np.all(state.v[blk] == 0.0)
    # first step moves every live scalar by lr * gain (bias correction
    # cancels and v_hat = g^2)
    for i in (0, 2):
        moved = params[layout.block(i)] - out[layout.block(i)]
        np.testing.assert_allclose(moved[0], 0.2, rtol=1e-6)
        np.testing.assert_allclose(moved[1:], 0.1, rtol=1e-6)


def test_adam_step_clamps_scale_column():
    layout = ParamLayout(2)
    params = np.zeros(layout.size)
    col = layout.column("scale")
    params[col] = [2.1, 15.9]
    grads = np.zeros(layout.size)
    grads[col] = [1.0, -1.0]  # push one below s_min, one above s_max
    state = OptimState.fresh(layout)
    out = adam_step(params, grads, state, 0.5, s_min=2.0, s_max=16.0,
                    layout=layout)
    np.testing.assert_allclose(out[col], [2.0, 16.0])


def test_psnr_values():
    img = np.full((4, 4, 3), 0.5)
    assert psnr(img, img) == math.inf
    off = img + 0.1
    assert psnr(off, img) == pytest.approx(20.0, abs=1e-9)


# -- reinitialization --------------------------------------------------------

def test_should_reinit_table():
    # (iteration, total, period, warmup) -> fire?
    cases = [
        ((30, 100, 30, 10), True),
        ((31, 100, 30, 10), False),   # off the period boundary
        ((0, 100, 30, 10), False),    # inside warmup
        ((90, 100, 30, 10), False),   # no full period remains
        ((60, 90, 30, 10), True),     # exactly one period left
    ]
    for args, expect in cases:
        assert should_reinit(*args) is expect, args


def test_reinit_replaces_only_faded_primitives():
    scene = random_scene(10, n=6)
    prims = list(scene.primitives)
    from dataclasses import replace as _rep
    # three faded, three solid
    for i in (0, 2, 4):
        prims[i] = _rep(prims[i], opacity_logit=-6.0)
    for i in (1, 3, 5):
        prims[i] = _rep(prims[i], opacity_logit=2.0)
    scene = _rep(scene, primitives=prims)
    target = np.random.default_rng(0).random((48, 48, 3))
    layout = ParamLayout(6)
    state = OptimState.fresh(layout)
    state.m[:] = 1.0
    state.v[:] = 1.0
    out, k = reinit_low_opacity(scene, target, threshold=0.3,
                                rng=np.random.default_rng(1), state=state,
                                s_min=2.0, s_max=9.0, v_init_bias=-4.0)
    assert k == 3
    for i in (1, 3, 5):
        assert out.primitives[i] == prims[i]
        assert np.all(state.m[layout.block(i)] == 1.0)
    for i in (0, 2, 4):
        p = out.primitives[i]
        assert p.opacity_logit == -4.0
        assert 2.0 <= p.scale <= 9.0
        assert p.z == prims[i].z and p.template_id == prims[i].template_id
        assert np.all(state.m[layout.block(i)] == 0.0)
        assert np.all(state.v[layout.block(i)] == 0.0)


def test_reinit_exempts_frozen():
    scene = random_scene(11, n=4)
    from dataclasses import replace as _rep
    prims = [_rep(p, opacity_logit=-6.0) for p in scene.primitives]
    scene = _rep(scene, primitives=prims)
    target = np.random.default_rng(0).random((48, 48, 3))
    frozen = np.array([True, False, True, False])
    out, k = reinit_low_opacity(scene, target, threshold=0.3,
                                rng=np.random.default_rng(2), frozen=frozen)
    assert k == 2
    assert out.primitives[0] == prims[0]
    assert out.primitives[2] == prims[2]
    assert out.primitives[1] != prims[1]


def test_reinit_threshold_domain():
    scene = random_scene(12, n=2)
    target = np.zeros((48, 48, 3))
    with pytest.raises(ValueError):
        reinit_low_opacity(scene, target, threshold=1.5)


# -- the loop ----------------------------------------------------------------

def _smoke_cfg(**kw):
    base = dict(
        num_primitives=20,
        num_iterations=25,
        seed=0,
        tile_size=16,
        scale_min=2.0,
        scale_max=8.0,
        do_reinit=False,
        compute_psnr=True,
    )
    base.update(kw)
    return FitConfig(**base)


def _soft_target(seed=0, size=32):
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    img = gaussian_filter(rng.random((size, size, 3)), (6, 6, 0))
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


def test_optimize_reduces_loss_and_logs(tmp_path):
    target = _soft_target()
    log = tmp_path / "fit_log.csv"
    cfg = _smoke_cfg(num_iterations=80, bg_color="black")
    scene, history = optimize(target, None, cfg, log_path=log)
    assert scene.n == 20
    assert len(history) == 80
    first, last = history[0], history[-1]
    assert last.loss < first.loss * 0.5
    assert last.psnr > first.psnr
    assert history[0].lr == pytest.approx(cfg.learning_rate)
    assert history[-1].lr == pytest.approx(
        cfg.learning_rate * cfg.decay_final_fraction)
    with open(log, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["iter", "loss", "psnr", "lr", "reinit_count"]
    assert len(rows) == 81
    assert float(rows[1][1]) == pytest.approx(first.loss)
    assert int(rows[-1][0]) == 79


def test_run_loop_hook_rewrites_scene():
    target = _soft_target(1)
    cfg = _smoke_cfg(num_iterations=4)
    scene = random_scene(3, n=8, w=32, h=32)
    seen = []

    def hook(s, state):
        seen.append(state.step)
        from dataclasses import replace as _rep
        prims = [_rep(p, opacity_logit=-9.0) for p in s.primitives]
        return _rep(s, primitives=prims)

    spec = LossSpec(kind="mse", target=target)
    out, history, state = run_loop(scene, cfg, spec,
                                   np.random.default_rng(0),
                                   hooks={3: hook})
    assert seen == [3]
    assert state.step == 4


def test_run_loop_reuses_optimizer_state():
    target = _soft_target(2)
    cfg = _smoke_cfg(num_iterations=3)
    scene = random_scene(4, n=6, w=32, h=32)
    spec = LossSpec(kind="mse", target=target)
    s1, _, st = run_loop(scene, cfg, spec, np.random.default_rng(0))
    assert st.step == 3
    s2, _, st = run_loop(s1, cfg, spec, np.random.default_rng(0), state=st)
    assert st.step == 6
