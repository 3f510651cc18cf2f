"""Analytic backward pass and its finite-difference oracle.

The backward replays the contribution lists cached by the forward pass.
Per pixel it runs one forward sweep to rebuild each entry's incoming
transmittance, then one reverse sweep that maintains a relative suffix
color sum and a back-product of (1 - alpha). Written this way the alpha
gradient needs no division by (1 - alpha_k), so fully opaque entries are
handled exactly instead of through a guard branch.

Per-tile partial gradients are reduced in fixed tile order, which makes
the result bit-identical for any thread count. `finite_diff_grad` is the
independent check: central differences through the naive renderer, never
touching the saved state or the kernels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scipy.special import expit

from . import _kernels
from .errors import LengthMismatch, ShapeMismatch, StaleSavedState
from .raster import (
    DEFAULT_TILE_SIZE,
    SavedForward,
    _bilinear_plane,
    canvas_to_prim,
    pack_scene,
    prim_to_texel,
    render_naive,
    resolve_background,
)
from .scene import (
    FloatArray,
    PARAM_GROUPS,
    PrimitiveTemplate,
    Scene,
    pack_params,
    scene_fingerprint,
    unpack_params,
)

# Central-difference step per parameter group: pixels for the pose
# lengths, smaller for radians and logits.
DEFAULT_FD_STEPS = {
    "x": 1e-2,
    "y": 1e-2,
    "scale": 1e-2,
    "rotation": 1e-3,
    "opacity_logit": 1e-3,
    "color": 1e-3,
}


@dataclass(eq=False)
class Gradients:
    """Per-primitive parameter gradients, one row per primitive.

    Column order matches the packed parameter layout: x, y, scale,
    rotation, opacity logit, then the three color logits.
    """

    data: FloatArray  # (N, 8)

    @classmethod
    def zeros(cls, n: int) -> Gradients:
        return cls(np.zeros((n, 8)))

    @property
    def n_primitives(self) -> int:
        return int(self.data.shape[0])

    @property
    def x(self) -> FloatArray:
        return self.data[:, 0]

    @property
    def y(self) -> FloatArray:
        return self.data[:, 1]

    @property
    def scale(self) -> FloatArray:
        return self.data[:, 2]

    @property
    def rotation(self) -> FloatArray:
        return self.data[:, 3]

    @property
    def opacity_logit(self) -> FloatArray:
        return self.data[:, 4]

    @property
    def color_logits(self) -> FloatArray:
        return self.data[:, 5:8]

    def to_vector(self) -> FloatArray:
        """Flatten to the packed parameter vector's layout."""
        return self.data.reshape(-1).copy()


def bilinear_grad(t: PrimitiveTemplate, U, V, channel: int = 3):
    """Derivative of sample_bilinear with respect to U and V.

    Uses the same floor-based cell as the sampler (right-continuous at
    integer lattice lines) and is zero outside the template box. Texels
    past the box edge read as zero, matching the sampler's padding.
    """
    plane = t.rgba[:, :, channel]
    h, w = plane.shape
    padded = np.zeros((h + 1, w + 1))
    padded[:h, :w] = plane
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    inside = (U >= 0.0) & (U <= w - 1.0) & (V >= 0.0) & (V <= h - 1.0)
    u0 = np.clip(np.floor(U).astype(np.int64), 0, w - 1)
    v0 = np.clip(np.floor(V).astype(np.int64), 0, h - 1)
    wu = np.clip(U - u0, 0.0, 1.0)
    wv = np.clip(V - v0, 0.0, 1.0)
    p00 = padded[v0, u0]
    p01 = padded[v0, u0 + 1]
    p10 = padded[v0 + 1, u0]
    p11 = padded[v0 + 1, u0 + 1]
    gu = np.where(inside, (1.0 - wv) * (p01 - p00) + wv * (p11 - p10), 0.0)
    gv = np.where(inside, (1.0 - wu) * (p10 - p00) + wu * (p11 - p01), 0.0)
    if U.ndim == 0:
        return float(gu), float(gv)
    return gu, gv


def backward(
    scene: Scene,
    saved: SavedForward,
    dL_dI: FloatArray,
    dL_dA: FloatArray | None = None,
    background=None,
) -> Gradients:
    """Pixel-loss gradients to per-primitive parameter gradients.

    `saved` must come from render_forward on this exact scene and this
    iteration's background; both are checked, and a mismatch raises
    StaleSavedState rather than silently differentiating the wrong
    function.
    """
    if saved.fingerprint != scene_fingerprint(scene):
        raise StaleSavedState("saved forward state is for a different scene")
    H, W = scene.canvas_h, scene.canvas_w
    dL_dI = np.ascontiguousarray(dL_dI, dtype=np.float64)
    if dL_dI.shape != (H, W, 3):
        raise ShapeMismatch(f"dL_dI shape {dL_dI.shape} != {(H, W, 3)}")
    if dL_dA is None:
        dL_dA = np.zeros((H, W))
    else:
        dL_dA = np.ascontiguousarray(dL_dA, dtype=np.float64)
        if dL_dA.shape != (H, W):
            raise ShapeMismatch(f"dL_dA shape {dL_dA.shape} != {(H, W)}")
    if background is not None:
        bg = resolve_background(scene, background)
        if not np.array_equal(bg, saved.background):
            raise StaleSavedState(
                "background differs from the one composited in the forward"
            )
    bg = saved.background
    packed = pack_scene(scene)
    # Backward tiling is independent of the forward bins (entries are
    # per pixel); a fixed size keeps the reduction order canonical.
    tile = DEFAULT_TILE_SIZE
    ntx = (W + tile - 1) // tile
    nty = (H + tile - 1) // tile
    partials = np.zeros((ntx * nty, scene.n, 8))
    _kernels.backward_tiles(
        packed.scale, packed.rotation, packed.opacity_logit, packed.color_logits,
        packed.template_id, packed.aspect,
        packed.tex, packed.toff, packed.tw, packed.th,
        saved.offsets, saved.prim, saved.alpha, saved.color, saved.mask,
        saved.tex_u, saved.tex_v,
        bg, dL_dI, dL_dA,
        scene.alpha_max, scene.mu_blend,
        tile, ntx, nty, W, H,
        partials,
    )
    return reduce_partials(
        [Gradients(partials[t]) for t in range(partials.shape[0])]
    )


def reduce_partials(per_tile_partials: list[Gradients]) -> Gradients:
    """Elementwise sum in list order; the only accumulation point.

    Summing sequentially in fixed tile order is what makes the backward
    deterministic under any thread count.
    """
    if not per_tile_partials:
        raise LengthMismatch("no partials to reduce")
    n = per_tile_partials[0].n_primitives
    acc = np.zeros((n, 8))
    for part in per_tile_partials:
        if part.n_primitives != n:
            raise LengthMismatch(
                f"partial has {part.n_primitives} primitives, expected {n}"
            )
        acc += part.data
    return Gradients(acc)


def finite_diff_grad(
    scene: Scene,
    loss_fn,
    background=None,
    h: dict[str, float] | None = None,
) -> Gradients:
    """Central-difference gradients through the naive renderer.

    loss_fn maps a RenderOutput to a scalar and must be pure. The
    background must be concrete (solid or an already-sampled noise
    image) so both sides of every difference see the same canvas.
    """
    steps = dict(DEFAULT_FD_STEPS)
    if h:
        steps.update(h)
    vec, layout = pack_params(scene)
    out = np.empty_like(vec)
    for i in range(layout.size):
        group = PARAM_GROUPS[i % len(PARAM_GROUPS)]
        hh = steps["color" if group.startswith("c") else group]
        probe = vec.copy()
        probe[i] = vec[i] + hh
        lo_hi = loss_fn(
            render_naive(unpack_params(probe, layout, scene), background)
        )
        probe[i] = vec[i] - hh
        lo_lo = loss_fn(
            render_naive(unpack_params(probe, layout, scene), background)
        )
        out[i] = (lo_hi - lo_lo) / (2.0 * hh)
    return Gradients(out.reshape(-1, 8))


def backward_reference(
    scene: Scene,
    dL_dI: FloatArray,
    dL_dA: FloatArray | None = None,
    background=None,
) -> Gradients:
    """Sequential analytic backward over full canvas planes.

    Benchmark reference mirroring render_naive's cost profile: two
    sweeps over all primitives with whole-canvas arrays and no tiling.
    Rebuilds incoming transmittance as T_N / ((1 - a) * B), so it
    assumes no entry reaches alpha exactly 1; the tiled backward has no
    such restriction. Used by `bench` and as a cross-check in tests.
    """
    bg = resolve_background(scene, background)
    H, W = scene.canvas_h, scene.canvas_w
    dL_dI = np.asarray(dL_dI, dtype=np.float64)
    dA = np.zeros((H, W)) if dL_dA is None else np.asarray(dL_dA, dtype=np.float64)
    out = render_naive(scene, bg)
    t_final = 1.0 - out.alpha
    packed = pack_scene(scene)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    grads = Gradients.zeros(scene.n)
    S = np.zeros((H, W, 3))
    B = np.ones((H, W))
    for i in packed.order[::-1]:
        p = scene.primitives[i]
        tpl = scene.templates[p.template_id]
        q = float(packed.aspect[i])
        u, v = canvas_to_prim(xx, yy, p, q)
        U, V = prim_to_texel(u, v, tpl.width, tpl.height)
        m = _bilinear_plane(tpl.rgba[:, :, 3], U, V)
        sig = float(expit(p.opacity_logit))
        a = scene.alpha_max * sig * m
        c_var = expit(np.asarray(p.color_logits, dtype=np.float64))
        if scene.mu_blend > 0.0:
            c_org = np.stack(
                [_bilinear_plane(tpl.rgba[:, :, ch], U, V) for ch in range(3)],
                axis=-1,
            )
            c = scene.mu_blend * c_org + (1.0 - scene.mu_blend) * c_var
        else:
            c = np.broadcast_to(c_var, (H, W, 3))
        denom = (1.0 - a) * B
        Tk = np.divide(
            t_final, denom, out=np.zeros((H, W)), where=denom > 1e-300
        )
        g = (dL_dI * (c - S - bg * B[:, :, None])).sum(axis=2) + dA * B
        dalpha = Tk * g
        grads.data[i, 4] = np.sum(dalpha * scene.alpha_max * sig * (1.0 - sig) * m)
        if scene.mu_blend < 1.0:
            wc = Tk * a * (1.0 - scene.mu_blend)
            grads.data[i, 5:8] = (
                (dL_dI * wc[:, :, None]).sum(axis=(0, 1))
                * c_var * (1.0 - c_var)
            )
        dm = dalpha * scene.alpha_max * sig
        gU, gV = bilinear_grad(tpl, U, V)
        mu_u = gU * 0.5 * (tpl.width - 1)
        mu_v = gV * 0.5 * (tpl.height - 1)
        s = p.scale
        ct = np.cos(p.rotation)
        st = np.sin(p.rotation)
        grads.data[i, 0] = np.sum(dm * (mu_u * (-ct / s) + mu_v * (st / (s * q))))
        grads.data[i, 1] = np.sum(dm * (mu_u * (-st / s) + mu_v * (-ct / (s * q))))
        grads.data[i, 2] = np.sum(dm * (mu_u * (-u / s) + mu_v * (-v / s)))
        grads.data[i, 3] = np.sum(dm * (mu_u * (v * q) + mu_v * (-u / q)))
        S = a[:, :, None] * c + (1.0 - a[:, :, None]) * S
        B = B * (1.0 - a)
    return grads


@dataclass
class GradcheckReport:
    """Outcome of the randomized analytic-vs-numeric comparison."""

    n_scenes: int
    n_checked: int
    n_failures: int
    worst_rel: float  # max relative error where the absolute gate failed
    worst_abs: float  # max absolute error where the relative gate failed
    max_abs: float  # plain worst absolute difference anywhere

    @property
    def passed(self) -> bool:
        return self.n_failures == 0


def gradcheck_scene(seed: int) -> tuple[Scene, FloatArray]:
    """One randomized scene plus target for the gradient check.

    Templates carry a wide zero border and two rounds of blur so the
    loss stays smooth at the footprint boundary; otherwise central
    differences at the standard step sizes measure the bilinear
    lattice kinks instead of the gradient.
    """
    from .prep import gaussian_blur_template
    from .scene import PrimitiveParams

    rng = np.random.default_rng(seed)
    tpls = []
    for _ in range(2):
        size = int(rng.integers(24, 33))
        raw = np.zeros((size, size, 4))
        raw[8:-8, 8:-8, 3] = 0.8 * rng.random((size - 16, size - 16))
        raw[8:-8, 8:-8, :3] = rng.random((size - 16, size - 16, 3))
        base = gaussian_blur_template(PrimitiveTemplate(raw), 1.2)
        tpls.append(gaussian_blur_template(base, 1.0))
    n = int(rng.integers(2, 9))
    zperm = rng.permutation(n)
    prims = [
        PrimitiveParams(
            x=float(rng.uniform(4, 43)),
            y=float(rng.uniform(4, 43)),
            scale=float(rng.uniform(4.5, 9)),
            rotation=float(rng.uniform(0, 6.28)),
            opacity_logit=float(rng.uniform(-3, 2)),
            color_logits=tuple(float(v) for v in rng.uniform(-1.5, 1.5, 3)),
            template_id=int(rng.integers(0, 2)),
            z=int(zperm[i]),
        )
        for i in range(n)
    ]
    scene = Scene(
        prims,
        tpls,
        48,
        48,
        background=tuple(float(v) for v in rng.random(3)),
        alpha_max=float(rng.uniform(0.6, 1.0)),
        mu_blend=0.0,
    )
    target = rng.random((48, 48, 3))
    return scene, target


def run_gradcheck(
    n_seeds: int = 20,
    rel_tol: float = 1e-2,
    abs_tol: float = 1e-5,
    seed0: int = 0,
) -> GradcheckReport:
    """Compare analytic and central-difference gradients on MSE loss.

    A scalar passes when either gate holds: relative error at most
    rel_tol, or absolute error at most abs_tol. The forward runs with
    the contribution skip disabled so both sides see every texel.
    """
    from .raster import render_forward

    n_checked = n_failures = 0
    worst_rel = worst_abs = max_abs = 0.0
    for seed in range(seed0, seed0 + n_seeds):
        scene, target = gradcheck_scene(seed)
        out, saved = render_forward(scene, save=True, eps_skip=0.0)
        dL = 2.0 * (out.color - target) / target.size
        analytic = backward(scene, saved, dL)

        def loss_fn(o):
            return float(np.mean((o.color - target) ** 2))

        fd = finite_diff_grad(scene, loss_fn)
        adiff = np.abs(analytic.data - fd.data)
        rel = adiff / np.maximum(np.abs(fd.data), 1e-300)
        ok = (rel <= rel_tol) | (adiff <= abs_tol)
        n_checked += ok.size
        n_failures += int((~ok).sum())
        max_abs = max(max_abs, float(adiff.max(initial=0.0)))
        over_abs = rel[adiff > abs_tol]
        if over_abs.size:
            worst_rel = max(worst_rel, float(over_abs.max()))
        over_rel = adiff[rel > rel_tol]
        if over_rel.size:
            worst_abs = max(worst_abs, float(over_rel.max()))
    return GradcheckReport(
        n_scenes=n_seeds,
        n_checked=n_checked,
        n_failures=n_failures,
        worst_rel=worst_rel,
        worst_abs=worst_abs,
        max_abs=max_abs,
    )
