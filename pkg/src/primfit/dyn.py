"""Video fitting: warm starts plus two anti-flicker heuristics.

Frames are fitted strictly in order. Frame 0 gets the full budget from
scratch; every later frame starts from the previous converged scene
and runs a shorter refinement. Two optional controls keep the result
stable: primitives whose footprint misses the inter-frame change mask
are frozen for the whole frame, and large, opaque, front-ordered
primitives sitting where the frames differ get their opacity logit
decayed so the finer primitives behind them can take over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .config import FitConfig
from .errors import ShapeMismatch
from .fit import (
    HistoryEntry,
    LossSpec,
    OptimState,
    effective_padding,
    init_scene,
    run_loop,
)
from .prep import default_templates, prepare_templates
from .raster import bbox_half_side
from .scene import FloatArray, PrimitiveTemplate, Scene, pack_params

DEFAULT_DIFF_THRESHOLD = 2.0 / 255.0


@dataclass
class DiffMask:
    """Boolean canvas: true where two frames disagree."""

    mask: np.ndarray  # (H, W) bool


@dataclass
class StuckPolicy:
    """Knobs for decaying over-dominant primitives in changed regions.

    The canvas splits into a grid of (rows, cols) regions; in each, at
    most k primitives per trigger get their opacity logit scaled by
    eta. Eligibility needs all three: scale at least tau_scale times
    the canvas width, effective opacity at least tau_alpha, and a depth
    rank in the region's front zeta-percentile.
    """

    grid: tuple[int, int] = (4, 4)
    k: int = 4
    tau_scale: float = 0.1
    tau_alpha: float = 0.7
    zeta: float = 0.7
    eta: float = 0.3
    triggers: tuple[int, ...] = (20, 45, 70)

    def __post_init__(self) -> None:
        if self.grid[0] < 1 or self.grid[1] < 1:
            raise ValueError(f"grid {self.grid} must be at least 1x1")
        if self.k < 0:
            raise ValueError(f"k {self.k} must be nonnegative")
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"eta {self.eta} outside (0, 1)")
        if not 0.0 < self.zeta < 1.0:
            raise ValueError(f"zeta {self.zeta} outside (0, 1)")


def policy_from_config(cfg: FitConfig) -> StuckPolicy:
    return StuckPolicy(
        grid=(cfg.stuck_grid_y, cfg.stuck_grid_x),
        k=cfg.stuck_top_k,
        tau_scale=cfg.stuck_tau_scale,
        tau_alpha=cfg.stuck_tau_alpha,
        zeta=cfg.stuck_zeta,
        eta=cfg.stuck_eta,
        triggers=cfg.stuck_triggers,
    )


def diff_mask(
    prev: FloatArray, cur: FloatArray, tau_d: float = DEFAULT_DIFF_THRESHOLD
) -> DiffMask:
    """True wherever any channel moved by more than tau_d.

    tau_d = 0 degenerates to plain inequality of the two frames.
    """
    prev = np.asarray(prev, dtype=np.float64)
    cur = np.asarray(cur, dtype=np.float64)
    if prev.shape != cur.shape:
        raise ShapeMismatch(f"frame shapes {prev.shape} vs {cur.shape}")
    return DiffMask(np.abs(prev - cur).max(axis=2) > tau_d)


def freeze_flags(
    scene: Scene, mask: DiffMask, padding: float = 2.0
) -> np.ndarray:
    """Per-primitive booleans: frozen iff the bbox misses every change.

    The bbox is the binning one: center plus/minus the conservative
    half-side, rounded inward to pixels and clipped to the canvas. A
    primitive entirely off-canvas overlaps nothing and freezes.
    """
    m = mask.mask
    if m.shape != (scene.canvas_h, scene.canvas_w):
        raise ShapeMismatch(
            f"mask {m.shape} vs canvas "
            f"({scene.canvas_h}, {scene.canvas_w})"
        )
    out = np.empty(scene.n, dtype=bool)
    for i, p in enumerate(scene.primitives):
        if scene.preserve_aspect:
            tpl = scene.templates[p.template_id]
            aspect = tpl.height / tpl.width
        else:
            aspect = 1.0
        r = bbox_half_side(p.scale, aspect, padding)
        x0 = max(math.ceil(p.x - r), 0)
        x1 = min(math.floor(p.x + r), scene.canvas_w - 1)
        y0 = max(math.ceil(p.y - r), 0)
        y1 = min(math.floor(p.y + r), scene.canvas_h - 1)
        out[i] = not (
            x0 <= x1 and y0 <= y1 and m[y0 : y1 + 1, x0 : x1 + 1].any()
        )
    return out


def remove_stuck(
    scene: Scene, frozen: np.ndarray | None, policy: StuckPolicy
) -> tuple[Scene, list[int]]:
    """Decay the opacity of dominant primitives, per grid region.

    Depth rank is counted within all primitives centered in the region
    (frozen included), larger meaning closer to the front; frozen
    primitives are then excluded from decay. Within each region the
    qualifying primitives are ordered by scale times opacity and at
    most k decay, ties broken by lower index.
    """
    if frozen is None:
        frozen = np.zeros(scene.n, dtype=bool)
    rows, cols = policy.grid
    regions: dict[tuple[int, int], list[int]] = {}
    for i, p in enumerate(scene.primitives):
        ry = min(max(int(p.y * rows / scene.canvas_h), 0), rows - 1)
        rx = min(max(int(p.x * cols / scene.canvas_w), 0), cols - 1)
        regions.setdefault((ry, rx), []).append(i)
    decayed: list[int] = []
    for members in regions.values():
        zs = np.asarray([scene.primitives[i].z for i in members])
        # rank = how many members sit behind; front-most ranks highest
        ranks = {i: int((zs > scene.primitives[i].z).sum()) for i in members}
        scored = []
        for i in members:
            p = scene.primitives[i]
            alpha = scene.alpha_max * float(expit(p.opacity_logit))
            if (
                not frozen[i]
                and p.scale >= policy.tau_scale * scene.canvas_w
                and alpha >= policy.tau_alpha
                and ranks[i] >= policy.zeta * len(members)
            ):
                scored.append((p.scale * alpha, i))
        scored.sort(key=lambda t: (-t[0], t[1]))
        decayed.extend(i for _, i in scored[: policy.k])
    if not decayed:
        return scene, []
    prims = list(scene.primitives)
    for i in decayed:
        prims[i] = replace(
            prims[i], opacity_logit=policy.eta * prims[i].opacity_logit
        )
    return replace(scene, primitives=prims), sorted(decayed)


def optimize_video(
    frames: list[FloatArray],
    templates: list[PrimitiveTemplate] | None,
    cfg: FitConfig,
) -> tuple[list[Scene], list[list[HistoryEntry]]]:
    """Fit a scene per frame, warm-starting each from the previous.

    Frame 0 runs the full budget; later frames run the sequential
    budget with freezing and stuck-primitive decay as configured.
    """
    if not frames:
        raise ValueError("need at least one frame")
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    for f in frames:
        if f.shape != frames[0].shape:
            raise ShapeMismatch("all frames must share one shape")
    if cfg.loss in ("spatial", "spatial_constrained"):
        raise ValueError("spatial loss is single-image only")
    rng = np.random.default_rng(cfg.seed)
    templates = prepare_templates(
        templates if templates else default_templates(),
        blur_sigma=cfg.blur_sigma,
        do_blur=cfg.do_gaussian_blur,
        falloff=cfg.radial_falloff,
    )
    padding = effective_padding(cfg)
    policy = policy_from_config(cfg)

    scene = init_scene(frames[0], templates, cfg, rng)
    scene, hist, _ = run_loop(
        scene, cfg, _spec(cfg, frames[0]), rng,
        iterations=cfg.num_iterations,
    )
    scenes = [scene]
    histories = [hist]
    for f in range(1, len(frames)):
        vec, layout = pack_params(scene)
        state = OptimState.fresh(layout)
        if cfg.freeze_static:
            mask = diff_mask(frames[f - 1], frames[f], cfg.diff_threshold)
            state.frozen = freeze_flags(scene, mask, padding)
        hooks = None
        if cfg.remove_stuck:
            hooks = {
                t: lambda s, st: remove_stuck(s, st.frozen, policy)[0]
                for t in policy.triggers
            }
        scene, hist, state = run_loop(
            scene,
            cfg,
            _spec(cfg, frames[f]),
            rng,
            iterations=cfg.sequential_iterations,
            state=state,
            hooks=hooks,
        )
        scenes.append(scene)
        histories.append(hist)
    return scenes, histories


def _spec(cfg: FitConfig, frame: FloatArray) -> LossSpec:
    return LossSpec(
        kind=cfg.loss,
        target=frame,
        mse_w=cfg.mse_weight,
        gray_l1_w=cfg.gray_l1_weight,
    )
