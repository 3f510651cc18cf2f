"""Losses, Adam, LR schedule, re-initialization, and the fit loop.

The loop assembles the rest of the package: prepare templates once,
seed a scene, then iterate render - loss - backward - step. Backgrounds can be
resampled noise each iteration (one draw, shared by forward and
backward), scale is projected back into its bounds after every step,
and primitives whose opacity collapses can periodically be re-seeded
where the target still has detail.

All losses are means, not sums: the color term averages over H*W*3,
alpha and grayscale terms over H*W. That choice fixes the relative
meaning of the weights and is what the frozen test values encode.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Callable
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .config import FitConfig, background_from_config
from .errors import LayoutMismatch, MissingAlphaTarget, ShapeMismatch
from .grad import backward
from .prep import (
    VarianceMap,
    _color_logits_near,
    default_templates,
    local_variance_map,
    prepare_templates,
    random_init,
    structure_aware_init,
)
from .raster import bin_tiles, noisy_background, render_forward
from .scene import (
    NOISE_BACKGROUND,
    FloatArray,
    ParamLayout,
    PrimitiveTemplate,
    Scene,
    pack_params,
    unpack_params,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

GRAY_WEIGHTS = np.asarray([0.299, 0.587, 0.114])

# Gain lookup per packed column: x, y, scale, rotation, opacity, color x3.
_GAIN_GROUPS = (
    "x", "y", "scale", "rotation", "opacity", "color", "color", "color",
)


@dataclass
class LossSpec:
    """Which loss to evaluate and against what."""

    kind: str = "mse"  # mse | spatial_constrained | combined
    target: FloatArray | None = None
    target_alpha: FloatArray | None = None
    mse_w: float = 1.0
    gray_l1_w: float = 0.0
    alpha_w: float = 0.3

    def __post_init__(self) -> None:
        if min(self.mse_w, self.gray_l1_w, self.alpha_w) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.kind == "spatial_constrained" and self.target_alpha is None:
            raise MissingAlphaTarget("spatial_constrained needs target_alpha")


@dataclass(eq=False)
class OptimState:
    """Adam moments plus the per-primitive freeze flags."""

    m: FloatArray
    v: FloatArray
    step: int
    frozen: np.ndarray  # bool per primitive

    @classmethod
    def fresh(cls, layout: ParamLayout) -> OptimState:
        return cls(
            m=np.zeros(layout.size),
            v=np.zeros(layout.size),
            step=0,
            frozen=np.zeros(layout.n_primitives, dtype=bool),
        )


@dataclass
class HistoryEntry:
    iteration: int
    loss: float
    psnr: float
    lr: float
    reinit_count: int


def _check_image_pair(a: FloatArray, b: FloatArray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape {a.shape} vs {b.shape}")


def loss_mse(I: FloatArray, target: FloatArray) -> tuple[float, FloatArray]:
    """Mean squared error over all pixels and channels."""
    _check_image_pair(I, target)
    diff = I - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def loss_grayscale_l1(I: FloatArray, target: FloatArray) -> tuple[float, FloatArray]:
    """Mean absolute luma difference; subgradient zero at exact ties."""
    _check_image_pair(I, target)
    d = (I - target) @ GRAY_WEIGHTS
    n = d.size
    grad = (np.sign(d)[:, :, None] * GRAY_WEIGHTS[None, None, :]) / n
    return float(np.mean(np.abs(d))), grad


def loss_spatial(
    I: FloatArray, I_alpha: FloatArray, spec: LossSpec
) -> tuple[float, FloatArray, FloatArray]:
    """Color error inside the target's support plus a coverage term.

    The color term is masked to target_alpha > 0 but still normalized
    by the full H*W*3; the alpha term is a plain MSE on coverage scaled
    by alpha_w and applies everywhere, pushing opacity down off-support.
    """
    if spec.target_alpha is None:
        raise MissingAlphaTarget("spatial loss needs target_alpha")
    target = spec.target
    _check_image_pair(I, target)
    ta = spec.target_alpha
    if ta.shape != I_alpha.shape:
        raise ShapeMismatch(f"alpha shape {ta.shape} vs {I_alpha.shape}")
    mask = (ta > 0).astype(np.float64)
    diff = (I - target) * mask[:, :, None]
    color = float(np.sum(diff**2) / diff.size)
    adiff = I_alpha - ta
    alpha = float(np.mean(adiff**2))
    dI = 2.0 * diff / diff.size
    dA = spec.alpha_w * 2.0 * adiff / adiff.size
    return color + spec.alpha_w * alpha, dI, dA


def evaluate_loss(
    spec: LossSpec, I: FloatArray, I_alpha: FloatArray
) -> tuple[float, FloatArray, FloatArray | None]:
    """Dispatch on spec.kind; returns (value, dL/dI, dL/dA or None)."""
    if spec.kind == "mse":
        value, dI = loss_mse(I, spec.target)
        return value, dI, None
    if spec.kind == "spatial_constrained":
        return loss_spatial(I, I_alpha, spec)
    if spec.kind == "combined":
        value_m, dI_m = loss_mse(I, spec.target)
        value_g, dI_g = loss_grayscale_l1(I, spec.target)
        return (
            spec.mse_w * value_m + spec.gray_l1_w * value_g,
            spec.mse_w * dI_m + spec.gray_l1_w * dI_g,
            None,
        )
    raise ValueError(f"unknown loss kind {spec.kind!r}")


def lr_schedule(
    iteration: int,
    total: int,
    base_lr: float,
    decay_enabled: bool = True,
    final_fraction: float = 0.1,
) -> float:
    """Exponential decay from base_lr to final_fraction * base_lr."""
    if not 0 <= iteration < total:
        raise ValueError(f"iteration {iteration} outside [0, {total})")
    if not decay_enabled or total <= 1:
        return base_lr
    return base_lr * final_fraction ** (iteration / (total - 1))


def gains_vector(layout: ParamLayout, gains: dict[str, float]) -> FloatArray:
    """Expand per-group gains to one multiplier per packed scalar."""
    per_col = np.asarray([gains.get(g, 1.0) for g in _GAIN_GROUPS])
    return np.tile(per_col, layout.n_primitives)


def adam_step(
    params: FloatArray,
    grads: FloatArray,
    state: OptimState,
    lr: float,
    gains: FloatArray | None = None,
    frozen: np.ndarray | None = None,
    s_min: float | None = None,
    s_max: float | None = None,
    layout: ParamLayout | None = None,
) -> FloatArray:
    """One Adam update; returns new params, mutates state moments.

    Frozen primitives keep both their parameters and their moments.
    When scale bounds are given the scale column is clamped after the
    update (projected gradient step).
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise LayoutMismatch(
            f"params {params.shape}, grads {grads.shape}, "
            f"moments {state.m.shape} must agree"
        )
    if layout is None:
        layout = ParamLayout(params.size // 8)
    if frozen is None:
        frozen = state.frozen
    live = np.repeat(~np.asarray(frozen, dtype=bool), 8)
    state.step += 1
    t = state.step
    m = state.m
    v = state.v
    m[live] = ADAM_BETA1 * m[live] + (1 - ADAM_BETA1) * grads[live]
    v[live] = ADAM_BETA2 * v[live] + (1 - ADAM_BETA2) * grads[live] ** 2
    m_hat = m[live] / (1 - ADAM_BETA1**t)
    v_hat = v[live] / (1 - ADAM_BETA2**t)
    eff_lr = lr if gains is None else lr * gains[live]
    out = params.copy()
    out[live] = params[live] - eff_lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    if s_min is not None and s_max is not None:
        col = layout.column("scale")
        out[col] = np.clip(out[col], s_min, s_max)
    return out


def psnr(I: FloatArray, target: FloatArray) -> float:
    """Peak signal-to-noise ratio in dB; inf for identical images."""
    _check_image_pair(I, target)
    mse = float(np.mean((I - target) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def should_reinit(
    iteration: int, total: int, period: int, warmup: int
) -> bool:
    """Period boundary, past warmup, with a full period still to run."""
    return (
        iteration % period == 0
        and iteration > warmup
        and iteration + period <= total
    )


def reinit_low_opacity(
    scene: Scene,
    target: FloatArray,
    threshold: float = 0.3,
    rng: np.random.Generator | None = None,
    state: OptimState | None = None,
    *,
    s_min: float = 2.0,
    s_max: float = 16.0,
    v_init_bias: float = -4.0,
    sigma_c: float = 0.02,
    density_cap: int = 100,
    base_prob: float = 0.1,
    window: int = 7,
    nlv: VarianceMap | None = None,
    frozen: np.ndarray | None = None,
) -> tuple[Scene, int]:
    """Re-seed every primitive whose opacity fell below the threshold.

    Fresh pose and color are drawn with the structure-aware law; depth
    and template assignment are kept. If an optimizer state is passed,
    the re-seeded primitives' moments are zeroed. Frozen primitives are
    exempt. The density cap is enforced among the re-drawn positions.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold {threshold} outside (0, 1)")
    rng = rng or np.random.default_rng()
    idx = [
        i
        for i, p in enumerate(scene.primitives)
        if expit(p.opacity_logit) < threshold
        and (frozen is None or not frozen[i])
    ]
    if not idx:
        return scene, 0
    target = np.asarray(target, dtype=np.float64)
    h, w = target.shape[:2]
    if nlv is None:
        nlv = local_variance_map(target, window)
    weights = base_prob + (1.0 - base_prob) * nlv.nlv
    p = (weights / weights.sum()).reshape(-1)
    k = len(idx)
    chosen = np.empty(k, dtype=np.int64)
    counts = np.zeros(h * w, dtype=np.int64)
    got = 0
    while got < k:
        batch = rng.choice(h * w, size=k - got, p=p)
        for cell in batch:
            if counts[cell] < density_cap:
                counts[cell] += 1
                chosen[got] = cell
                got += 1
    local = nlv.nlv.reshape(-1)[chosen]
    scales = s_max - (s_max - s_min) * local
    thetas = rng.uniform(0.0, 2.0 * np.pi, k)
    cl = _color_logits_near(target[chosen // w, chosen % w, :], sigma_c, rng)
    prims = list(scene.primitives)
    for j, i in enumerate(idx):
        old = prims[i]
        prims[i] = type(old)(
            x=float(chosen[j] % w),
            y=float(chosen[j] // w),
            scale=float(scales[j]),
            rotation=float(thetas[j]),
            opacity_logit=v_init_bias,
            color_logits=(float(cl[j, 0]), float(cl[j, 1]), float(cl[j, 2])),
            template_id=old.template_id,
            z=old.z,
        )
    if state is not None:
        layout = ParamLayout(scene.n)
        for i in idx:
            state.m[layout.block(i)] = 0.0
            state.v[layout.block(i)] = 0.0
    return replace(scene, primitives=prims), k


def effective_padding(cfg: FitConfig) -> float:
    """Bbox padding wide enough to cover the template blur spread."""
    blur = cfg.blur_sigma if cfg.do_gaussian_blur else 0.0
    return cfg.tile_padding + 3.0 * blur


def _loss_spec_from_config(
    cfg: FitConfig, target: FloatArray, target_alpha: FloatArray | None
) -> LossSpec:
    kind = {"spatial": "spatial_constrained"}.get(cfg.loss, cfg.loss)
    return LossSpec(
        kind=kind,
        target=target,
        target_alpha=target_alpha,
        mse_w=cfg.mse_weight,
        gray_l1_w=cfg.gray_l1_weight,
        alpha_w=cfg.alpha_loss_weight,
    )


def init_scene(
    target: FloatArray,
    templates: list[PrimitiveTemplate],
    cfg: FitConfig,
    rng: np.random.Generator,
) -> Scene:
    """Build the starting scene a config describes, templates as given."""
    h, w = target.shape[:2]
    if cfg.initializer == "structure_aware":
        scene = structure_aware_init(
            target,
            cfg.num_primitives,
            cfg.scale_min,
            cfg.scale_max,
            v_init_bias=cfg.opacity_logit_init,
            sigma_c=cfg.color_init_noise,
            rng=rng,
            density_cap=cfg.max_prims_per_pixel,
            templates=templates,
            base_prob=cfg.variance_base_prob,
            window=cfg.variance_window_size,
        )
    elif cfg.initializer == "random":
        scene = random_init(
            w,
            h,
            cfg.num_primitives,
            cfg.scale_min,
            cfg.scale_max,
            v_init_bias=cfg.opacity_logit_init,
            sigma_c=cfg.color_init_noise,
            rng=rng,
            templates=templates,
        )
    else:
        raise ValueError(f"unknown initializer {cfg.initializer!r}")
    return replace(
        scene,
        background=background_from_config(cfg),
        alpha_max=cfg.alpha_max,
        mu_blend=cfg.mu_blend,
        preserve_aspect=cfg.preserve_aspect,
    )


def run_loop(
    scene: Scene,
    cfg: FitConfig,
    loss_spec: LossSpec,
    rng: np.random.Generator,
    iterations: int | None = None,
    state: OptimState | None = None,
    nlv: VarianceMap | None = None,
    log_path: str | Path | None = None,
    dump_dir: str | Path | None = None,
    hooks: dict[int, Callable[[Scene, OptimState], Scene]] | None = None,
) -> tuple[Scene, list[HistoryEntry], OptimState]:
    """Iterate render, loss, backward, step on an existing scene.

    The building block under optimize and the video pipeline: the scene
    arrives initialized (templates already preprocessed) and possibly
    warm, and freeze flags live in the optimizer state. A hook mapped
    to iteration k runs before k's render and may rewrite the scene
    (the video pipeline uses this to decay stuck primitives).
    """
    total = cfg.num_iterations if iterations is None else iterations
    target = loss_spec.target
    vec, layout = pack_params(scene)
    if state is None:
        state = OptimState.fresh(layout)
    gains = gains_vector(
        layout,
        {
            "x": cfg.lr_gain_x,
            "y": cfg.lr_gain_y,
            "scale": cfg.lr_gain_scale,
            "rotation": cfg.lr_gain_rotation,
            "opacity": cfg.lr_gain_opacity,
            "color": cfg.lr_gain_color,
        },
    )
    noise_bg = scene.background == NOISE_BACKGROUND
    padding = effective_padding(cfg)
    history: list[HistoryEntry] = []
    writer = ctx = None
    if log_path is not None:
        ctx = open(log_path, "w", newline="")
        writer = csv.writer(ctx)
        writer.writerow(["iter", "loss", "psnr", "lr", "reinit_count"])
    try:
        for it in range(total):
            reinit_count = 0
            if hooks and it in hooks:
                scene = unpack_params(vec, layout, scene)
                scene = hooks[it](scene, state)
                vec, layout = pack_params(scene)
            if cfg.do_reinit and should_reinit(
                it, total, cfg.reinit_period, cfg.reinit_warmup
            ):
                scene = unpack_params(vec, layout, scene)
                scene, reinit_count = reinit_low_opacity(
                    scene,
                    target,
                    cfg.reinit_threshold,
                    rng,
                    state,
                    s_min=cfg.scale_min,
                    s_max=cfg.scale_max,
                    v_init_bias=cfg.opacity_logit_init,
                    sigma_c=cfg.color_init_noise,
                    density_cap=cfg.max_prims_per_pixel,
                    base_prob=cfg.variance_base_prob,
                    window=cfg.variance_window_size,
                    nlv=nlv,
                    frozen=state.frozen,
                )
                if reinit_count:
                    vec, layout = pack_params(scene)
            lr = lr_schedule(
                it, total, cfg.learning_rate, cfg.do_decay,
                cfg.decay_final_fraction,
            )
            scene = unpack_params(vec, layout, scene)
            bg = (
                noisy_background(scene.canvas_w, scene.canvas_h, rng)
                if noise_bg
                else None
            )
            bins = bin_tiles(scene, cfg.tile_size, padding)
            out, saved = render_forward(
                scene, bins, bg, save=True, eps_skip=cfg.eps_skip
            )
            value, dI, dA = evaluate_loss(loss_spec, out.color, out.alpha)
            grads = backward(scene, saved, dI, dA)
            vec = adam_step(
                vec,
                grads.to_vector(),
                state,
                lr,
                gains,
                s_min=cfg.scale_min,
                s_max=cfg.scale_max,
                layout=layout,
            )
            quality = (
                psnr(out.color, target) if cfg.compute_psnr else math.nan
            )
            history.append(HistoryEntry(it, value, quality, lr, reinit_count))
            if writer is not None:
                writer.writerow(
                    [it, repr(value), str(quality), repr(lr), reinit_count]
                )
            if dump_dir is not None and cfg.dump_every > 0 and (
                it % cfg.dump_every == 0
            ):
                from .exportio import save_image

                save_image(
                    Path(dump_dir) / f"iter_{it:05d}.png", out.color
                )
    finally:
        if ctx is not None:
            ctx.close()
    return unpack_params(vec, layout, scene), history, state


def optimize(
    target: FloatArray,
    templates: list[PrimitiveTemplate] | None,
    cfg: FitConfig,
    target_alpha: FloatArray | None = None,
    log_path: str | Path | None = None,
    dump_dir: str | Path | None = None,
) -> tuple[Scene, list[HistoryEntry]]:
    """Fit a fresh scene to one image according to the config."""
    target = np.asarray(target, dtype=np.float64)
    if target.ndim != 3 or target.shape[2] != 3:
        raise ShapeMismatch(f"target shape {target.shape} is not (H, W, 3)")
    rng = np.random.default_rng(cfg.seed)
    templates = prepare_templates(
        templates if templates else default_templates(),
        blur_sigma=cfg.blur_sigma,
        do_blur=cfg.do_gaussian_blur,
        falloff=cfg.radial_falloff,
    )
    scene = init_scene(target, templates, cfg, rng)
    loss_spec = _loss_spec_from_config(cfg, target, target_alpha)
    nlv = local_variance_map(target, cfg.variance_window_size)
    scene, history, _ = run_loop(
        scene,
        cfg,
        loss_spec,
        rng,
        nlv=nlv,
        log_path=log_path,
        dump_dir=dump_dir,
    )
    return scene, history
