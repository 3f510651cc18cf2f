"""Forward rendering: transforms, sampling, compositing, tile binning.

Two render paths produce the same image. `render_naive` is the
sequential reference: every primitive against every pixel, vectorized
with numpy but with no binning and no skip threshold. `render_forward`
is the fast path: primitives are binned into canvas tiles using a
conservative bounding box, compiled kernels walk each tile's list
front-to-back, and contributions with a mask sample below `eps_skip`
are dropped. With eps_skip = 0 the two agree to float64 rounding; the
tests pin them to 1e-6 per channel.

Coordinates: pixel centers sit at integer canvas coordinates. A
primitive maps the canvas into its local frame by undoing rotation and
scale (so u, v land in [-1, 1] over its footprint), then into texel
coordinates U in [0, W-1], V in [0, H-1]. Sampling outside that box is
zero: primitives end exactly at their footprint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from . import _kernels
from .config import DEFAULT_EPS_SKIP
from .errors import ShapeMismatch
from .scene import (
    NOISE_BACKGROUND,
    FloatArray,
    PrimitiveParams,
    PrimitiveTemplate,
    Scene,
    scene_fingerprint,
    validate_scene,
)

DEFAULT_TILE_SIZE = 32
DEFAULT_TILE_PADDING = 2.0


class PackedScene(NamedTuple):
    """Scene flattened to kernel-ready arrays."""

    x: FloatArray
    y: FloatArray
    scale: FloatArray
    rotation: FloatArray
    opacity_logit: FloatArray
    color_logits: FloatArray  # (N, 3)
    template_id: np.ndarray  # int32
    aspect: FloatArray  # v-axis divisor ratio, 1.0 unless preserve_aspect
    order: np.ndarray  # int32 primitive indices, ascending z
    tex: FloatArray  # atlas texels, (total, 4)
    toff: np.ndarray  # int64 per-template start row in tex
    tw: np.ndarray  # int32 template widths
    th: np.ndarray  # int32 template heights


def pack_scene(scene: Scene) -> PackedScene:
    """Flatten a validated scene into arrays the kernels accept."""
    n = scene.n
    x = np.empty(n)
    y = np.empty(n)
    s = np.empty(n)
    r = np.empty(n)
    nu = np.empty(n)
    cv = np.empty((n, 3))
    tid = np.empty(n, dtype=np.int32)
    zs = np.empty(n, dtype=np.int64)
    for i, p in enumerate(scene.primitives):
        x[i], y[i], s[i], r[i], nu[i] = p.x, p.y, p.scale, p.rotation, p.opacity_logit
        cv[i] = p.color_logits
        tid[i] = p.template_id
        zs[i] = p.z
    tw = np.asarray([t.width for t in scene.templates], dtype=np.int32)
    th = np.asarray([t.height for t in scene.templates], dtype=np.int32)
    sizes = (tw.astype(np.int64) * th.astype(np.int64))
    toff = np.concatenate(([0], np.cumsum(sizes)))[:-1]
    tex = (
        np.concatenate([t.rgba.reshape(-1, 4) for t in scene.templates])
        if scene.templates
        else np.zeros((0, 4))
    )
    if scene.preserve_aspect:
        aspect = (th[tid].astype(np.float64) / tw[tid].astype(np.float64)) if n else np.empty(0)
    else:
        aspect = np.ones(n)
    order = np.argsort(zs, kind="stable").astype(np.int32)
    return PackedScene(
        x, y, s, r, nu, np.ascontiguousarray(cv), tid, aspect, order,
        np.ascontiguousarray(tex), toff.astype(np.int64), tw, th,
    )


@dataclass(eq=False)
class TileBins:
    """Per-tile front-to-back primitive lists in CSR form."""

    tile_size: int
    padding: float
    canvas_w: int
    canvas_h: int
    n_tiles_x: int
    n_tiles_y: int
    offsets: np.ndarray  # int64, (n_tiles_x * n_tiles_y + 1,)
    indices: np.ndarray  # int32 primitive indices, ascending z per tile

    @property
    def n_tiles(self) -> int:
        return self.n_tiles_x * self.n_tiles_y

    def tile_list(self, tx: int, ty: int) -> np.ndarray:
        """Primitive indices binned to tile (tx, ty)."""
        t = ty * self.n_tiles_x + tx
        return self.indices[self.offsets[t] : self.offsets[t + 1]]


@dataclass(eq=False)
class SavedForward:
    """Per-pixel contribution lists cached by the forward pass.

    Entry arrays are CSR over row-major pixels; each pixel's slice is in
    ascending z order. Holds everything the backward pass replays:
    opacity, blended color, mask sample, texel coordinates, the final
    transmittance, and the background actually composited.
    """

    canvas_w: int
    canvas_h: int
    offsets: np.ndarray  # int64, (H*W + 1,)
    prim: np.ndarray  # int32
    alpha: FloatArray
    color: FloatArray  # (M, 3)
    mask: FloatArray
    tex_u: FloatArray
    tex_v: FloatArray
    t_final: FloatArray  # (H, W)
    background: FloatArray  # (H, W, 3)
    fingerprint: str
    eps_skip: float

    @property
    def n_entries(self) -> int:
        return int(self.prim.shape[0])


@dataclass(eq=False)
class RenderOutput:
    """Composited color image and coverage (1 - transmittance)."""

    color: FloatArray  # (H, W, 3)
    alpha: FloatArray  # (H, W)


def canvas_to_prim(x, y, p: PrimitiveParams, aspect: float = 1.0):
    """Canvas point(s) to the primitive's normalized frame.

    Applies the inverse rotation then divides by scale; with
    preserve_aspect the caller passes the template's height/width ratio
    as `aspect` to keep tall templates tall.
    """
    ct = math.cos(p.rotation)
    st = math.sin(p.rotation)
    dx = np.asarray(x, dtype=np.float64) - p.x
    dy = np.asarray(y, dtype=np.float64) - p.y
    u = (ct * dx + st * dy) / p.scale
    v = (-st * dx + ct * dy) / (p.scale * aspect)
    return u, v


def prim_to_texel(u, v, width: int, height: int):
    """Normalized [-1, 1] coordinates to texel coordinates."""
    U = (np.asarray(u, dtype=np.float64) + 1.0) * 0.5 * (width - 1)
    V = (np.asarray(v, dtype=np.float64) + 1.0) * 0.5 * (height - 1)
    return U, V


def _bilinear_plane(plane: FloatArray, U, V):
    """Vectorized bilinear sample of one channel plane, zero outside."""
    h, w = plane.shape
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    inside = (U >= 0.0) & (U <= w - 1.0) & (V >= 0.0) & (V <= h - 1.0)
    u0 = np.clip(np.floor(U).astype(np.int64), 0, w - 1)
    v0 = np.clip(np.floor(V).astype(np.int64), 0, h - 1)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    wu = np.clip(U - u0, 0.0, 1.0)
    wv = np.clip(V - v0, 0.0, 1.0)
    val = (
        (1.0 - wu) * (1.0 - wv) * plane[v0, u0]
        + wu * (1.0 - wv) * plane[v0, u1]
        + (1.0 - wu) * wv * plane[v1, u0]
        + wu * wv * plane[v1, u1]
    )
    return np.where(inside, val, 0.0)


def sample_bilinear(t: PrimitiveTemplate, U, V, channel: int = 3):
    """Bilinear sample of one template channel; zero outside the box."""
    out = _bilinear_plane(t.rgba[:, :, channel], U, V)
    return float(out) if np.isscalar(U) and np.isscalar(V) else out


def primitive_alpha(p: PrimitiveParams, m, alpha_max: float = 1.0):
    """Opacity contribution: capped sigmoid of the logit times the mask."""
    return alpha_max * expit(p.opacity_logit) * np.asarray(m, dtype=np.float64)


def blend_color(p: PrimitiveParams, c_org_sample, mu_blend: float = 0.0):
    """Mix the template's sampled color with the learned color."""
    c_var = expit(np.asarray(p.color_logits, dtype=np.float64))
    return mu_blend * np.asarray(c_org_sample, dtype=np.float64) + (
        1.0 - mu_blend
    ) * c_var


def bbox_half_side(scale: float, aspect: float = 1.0, padding: float = 0.0) -> float:
    """Conservative half-side covering the footprint at any rotation."""
    return scale * math.hypot(1.0, max(1.0, aspect)) + padding


def bin_tiles(
    scene: Scene,
    tile_size: int = DEFAULT_TILE_SIZE,
    padding: float = DEFAULT_TILE_PADDING,
) -> TileBins:
    """Assign primitives to every tile their padded bbox can touch.

    The box is axis-aligned with half-side scale * sqrt(2) + padding
    (times the aspect ratio when preserved), so it holds the footprint
    under any rotation. Tiles are tested against the pixel centers they
    own; per-tile lists come out sorted ascending by z because the scan
    walks primitives in composite order.
    """
    validate_scene(scene)
    W, H = scene.canvas_w, scene.canvas_h
    ntx = (W + tile_size - 1) // tile_size
    nty = (H + tile_size - 1) // tile_size
    packed = pack_scene(scene)
    per_tile: list[list[int]] = [[] for _ in range(ntx * nty)]
    for i in packed.order:
        r = bbox_half_side(packed.scale[i], packed.aspect[i], padding)
        lo_x = max(int(math.ceil(packed.x[i] - r)), 0)
        hi_x = min(int(math.floor(packed.x[i] + r)), W - 1)
        lo_y = max(int(math.ceil(packed.y[i] - r)), 0)
        hi_y = min(int(math.floor(packed.y[i] + r)), H - 1)
        if lo_x > hi_x or lo_y > hi_y:
            continue
        for ty in range(lo_y // tile_size, hi_y // tile_size + 1):
            row = ty * ntx
            for tx in range(lo_x // tile_size, hi_x // tile_size + 1):
                per_tile[row + tx].append(int(i))
    counts = np.asarray([len(lst) for lst in per_tile], dtype=np.int64)
    offsets = np.concatenate(([0], np.cumsum(counts)))
    indices = (
        np.concatenate([np.asarray(lst, dtype=np.int32) for lst in per_tile])
        if offsets[-1]
        else np.empty(0, dtype=np.int32)
    )
    return TileBins(tile_size, padding, W, H, ntx, nty, offsets, indices)


def noisy_background(w: int, h: int, rng: np.random.Generator) -> FloatArray:
    """Uniform noise canvas; draw one per optimization iteration."""
    return rng.random((h, w, 3))


def resolve_background(scene: Scene, background=None) -> FloatArray:
    """Normalize a background argument to a full (H, W, 3) float array."""
    if background is None:
        if scene.background == NOISE_BACKGROUND:
            raise ValueError(
                "scene wants a noise background; sample one with "
                "noisy_background and pass it in"
            )
        background = scene.background
    bg = np.asarray(background, dtype=np.float64)
    if bg.shape == (3,):
        bg = np.broadcast_to(bg, (scene.canvas_h, scene.canvas_w, 3)).copy()
    if bg.shape != (scene.canvas_h, scene.canvas_w, 3):
        raise ShapeMismatch(f"background shape {bg.shape} does not fit the canvas")
    return np.ascontiguousarray(bg)


def render_forward(
    scene: Scene,
    bins: TileBins | None = None,
    background=None,
    save: bool = False,
    eps_skip: float = DEFAULT_EPS_SKIP,
) -> tuple[RenderOutput, SavedForward | None]:
    """Tile-parallel composite; optionally cache per-pixel contributions.

    Returns (output, saved) where saved is None unless `save`. The saved
    state is what `backward` replays, and it records the exact background
    composited here.
    """
    validate_scene(scene)
    if bins is None:
        bins = bin_tiles(scene)
    if (bins.canvas_w, bins.canvas_h) != (scene.canvas_w, scene.canvas_h):
        raise ShapeMismatch("bins were built for a different canvas")
    bg = resolve_background(scene, background)
    packed = pack_scene(scene)
    W, H = scene.canvas_w, scene.canvas_h
    img = np.empty((H, W, 3))
    alpha = np.empty((H, W))
    common = (
        packed.x, packed.y, packed.scale, packed.rotation,
        packed.opacity_logit, packed.color_logits, packed.template_id,
        packed.aspect, packed.tex, packed.toff, packed.tw, packed.th,
        bins.offsets, bins.indices,
    )
    geom = (bins.tile_size, bins.n_tiles_x, bins.n_tiles_y, W, H)
    if not save:
        _kernels.forward_nosave(
            *common, bg, scene.alpha_max, scene.mu_blend, eps_skip, *geom,
            img, alpha,
        )
        return RenderOutput(img, alpha), None

    counts = np.zeros(H * W, dtype=np.int64)
    _kernels.count_entries(
        packed.x, packed.y, packed.scale, packed.rotation,
        packed.template_id, packed.aspect,
        packed.tex, packed.toff, packed.tw, packed.th,
        bins.offsets, bins.indices,
        eps_skip, *geom, counts,
    )
    offsets = np.concatenate(([0], np.cumsum(counts)))
    m_total = int(offsets[-1])
    prim = np.empty(m_total, dtype=np.int32)
    ent_alpha = np.empty(m_total)
    ent_color = np.empty((m_total, 3))
    ent_mask = np.empty(m_total)
    ent_U = np.empty(m_total)
    ent_V = np.empty(m_total)
    _kernels.fill_entries(
        *common, bg, scene.alpha_max, scene.mu_blend, eps_skip, *geom,
        offsets, prim, ent_alpha, ent_color, ent_mask, ent_U, ent_V,
        img, alpha,
    )
    saved = SavedForward(
        canvas_w=W,
        canvas_h=H,
        offsets=offsets,
        prim=prim,
        alpha=ent_alpha,
        color=ent_color,
        mask=ent_mask,
        tex_u=ent_U,
        tex_v=ent_V,
        t_final=1.0 - alpha,
        background=bg,
        fingerprint=scene_fingerprint(scene),
        eps_skip=eps_skip,
    )
    return RenderOutput(img, alpha), saved


def render_naive(scene: Scene, background=None) -> RenderOutput:
    """Sequential reference: all primitives against all pixels.

    No binning, no skip threshold, single python loop over primitives in
    composite order. Exists to check the fast path and to benchmark
    against; never used in the optimization loop.
    """
    validate_scene(scene)
    bg = resolve_background(scene, background)
    W, H = scene.canvas_w, scene.canvas_h
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    img = np.zeros((H, W, 3))
    T = np.ones((H, W))
    packed = pack_scene(scene)
    for i in packed.order:
        p = scene.primitives[i]
        tpl = scene.templates[p.template_id]
        u, v = canvas_to_prim(xx, yy, p, float(packed.aspect[i]))
        U, V = prim_to_texel(u, v, tpl.width, tpl.height)
        m = _bilinear_plane(tpl.rgba[:, :, 3], U, V)
        a = primitive_alpha(p, m, scene.alpha_max)
        c_var = expit(np.asarray(p.color_logits, dtype=np.float64))
        if scene.mu_blend > 0.0:
            c_org = np.stack(
                [_bilinear_plane(tpl.rgba[:, :, ch], U, V) for ch in range(3)],
                axis=-1,
            )
            c = scene.mu_blend * c_org + (1.0 - scene.mu_blend) * c_var
            img += (T * a)[:, :, None] * c
        else:
            img += (T * a)[:, :, None] * c_var[None, None, :]
        T = T * (1.0 - a)
    img += T[:, :, None] * bg
    return RenderOutput(img, 1.0 - T)


def warmup_kernels() -> None:
    """Force JIT compilation on a tiny scene; results are discarded."""
    tpl = PrimitiveTemplate(np.full((4, 4, 4), 0.5))
    prims = [
        PrimitiveParams(x=3.0, y=3.0, scale=2.0, z=0),
        PrimitiveParams(x=5.0, y=4.0, scale=2.0, rotation=0.3, z=1),
    ]
    scene = Scene(prims, [tpl], canvas_w=8, canvas_h=8, mu_blend=0.5)
    out, saved = render_forward(scene, save=True)
    from . import grad  # local import to dodge the module cycle

    grad.backward(
        scene, saved, np.ones_like(out.color), np.ones_like(out.alpha)
    )
