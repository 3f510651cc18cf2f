"""Template preprocessing and scene initialization.

Templates get an optional Gaussian blur (smooths the loss landscape and
widens the gradient's reach around edges) and an optional radial
opacity falloff. Initialization places primitives either uniformly at
random or structure-aware: sampling density follows the target's
normalized local variance, so detailed regions receive many small
primitives and flat regions few large ones.

All randomness flows through a caller-provided numpy Generator
(PCG64 via ``np.random.default_rng``); identical seeds reproduce
identical scenes. Sampling is sequential by contract so the draw order
is part of the behavior: per batch, positions first, then rotations,
then color noise, then template choices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InfeasibleDensity, ShapeMismatch
from .scene import (
    DEFAULT_OPACITY_LOGIT,
    FloatArray,
    PrimitiveParams,
    PrimitiveTemplate,
    Scene,
)

COLOR_CLAMP_EPS = 1e-4


@dataclass(eq=False)
class VarianceMap:
    """Normalized local variance of a target image, in [0, 1]."""

    nlv: FloatArray  # (H, W)


def _gauss_kernel(sigma: float) -> FloatArray:
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur_template(t: PrimitiveTemplate, sigma: float) -> PrimitiveTemplate:
    """Blur all four channels with a truncated, renormalized Gaussian.

    Radius is ceil(3 sigma). Border texels renormalize over the clipped
    window, so constant channels pass through unchanged. sigma = 0 is
    the identity.
    """
    if sigma < 0:
        raise ValueError(f"sigma {sigma} must be nonnegative")
    if sigma == 0:
        return PrimitiveTemplate(t.rgba.copy())
    k = _gauss_kernel(sigma)

    def blur2d(plane: FloatArray) -> FloatArray:
        num = correlate1d(plane, k, axis=0, mode="constant", cval=0.0)
        num = correlate1d(num, k, axis=1, mode="constant", cval=0.0)
        return num

    weight = blur2d(np.ones((t.height, t.width)))
    out = np.empty_like(t.rgba)
    for ch in range(4):
        out[:, :, ch] = blur2d(t.rgba[:, :, ch]) / weight
    return PrimitiveTemplate(np.clip(out, 0.0, 1.0))


def radial_falloff(t: PrimitiveTemplate) -> PrimitiveTemplate:
    """Multiply alpha by a cosine falloff from the template center.

    Distance is normalized by the smaller half-extent; past it the
    multiplier is 0. RGB channels are untouched.
    """
    h, w = t.height, t.width
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    r = np.hypot(yy - cy, xx - cx) / min(cy, cx)
    f = 0.5 * (1.0 + np.cos(np.pi * np.minimum(r, 1.0)))
    out = t.rgba.copy()
    out[:, :, 3] *= f
    return PrimitiveTemplate(out)


def _clipped_window_mean(a: FloatArray, window: int) -> FloatArray:
    """Box mean with exact clipped windows at the borders."""
    h, w = a.shape
    r = window // 2
    ii = np.zeros((h + 1, w + 1))
    ii[1:, 1:] = np.cumsum(np.cumsum(a, axis=0), axis=1)
    y0 = np.clip(np.arange(h) - r, 0, None)
    y1 = np.clip(np.arange(h) + r + 1, None, h)
    x0 = np.clip(np.arange(w) - r, 0, None)
    x1 = np.clip(np.arange(w) + r + 1, None, w)
    sums = (
        ii[np.ix_(y1, x1)]
        - ii[np.ix_(y0, x1)]
        - ii[np.ix_(y1, x0)]
        + ii[np.ix_(y0, x0)]
    )
    counts = (y1 - y0)[:, None] * (x1 - x0)[None, :]
    return sums / counts


def local_variance_map(target: FloatArray, window: int = 7) -> VarianceMap:
    """Min-max normalized local variance, averaged over RGB.

    Window must be odd and at least 3; border pixels use the clipped
    window. A constant image maps to all zeros.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window {window} must be odd and >= 3")
    target = np.asarray(target, dtype=np.float64)
    if target.ndim != 3 or target.shape[2] != 3:
        raise ShapeMismatch(f"target shape {target.shape} is not (H, W, 3)")
    var = np.zeros(target.shape[:2])
    for ch in range(3):
        m = _clipped_window_mean(target[:, :, ch], window)
        m2 = _clipped_window_mean(target[:, :, ch] ** 2, window)
        var += np.maximum(m2 - m * m, 0.0)
    var /= 3.0
    lo, hi = float(var.min()), float(var.max())
    if hi - lo <= 0.0:
        return VarianceMap(np.zeros_like(var))
    return VarianceMap((var - lo) / (hi - lo))


def _logit(p: FloatArray) -> FloatArray:
    return np.log(p) - np.log1p(-p)


def _color_logits_near(
    colors: FloatArray, sigma_c: float, rng: np.random.Generator
) -> FloatArray:
    """Logits whose sigmoid is normally scattered around the colors."""
    noisy = colors + rng.normal(0.0, sigma_c, colors.shape)
    return _logit(np.clip(noisy, COLOR_CLAMP_EPS, 1.0 - COLOR_CLAMP_EPS))


def structure_aware_init(
    target: FloatArray,
    n: int,
    s_min: float,
    s_max: float,
    v_init_bias: float = DEFAULT_OPACITY_LOGIT,
    sigma_c: float = 0.02,
    rng: np.random.Generator | None = None,
    density_cap: int = 100,
    templates: list[PrimitiveTemplate] | None = None,
    base_prob: float = 0.1,
    window: int = 7,
) -> Scene:
    """Seed a scene where the target has detail.

    Integer pixel positions are drawn with probability proportional to
    base_prob + (1 - base_prob) * NLV, rejecting draws that would put
    more than density_cap centers on one pixel. Scale shrinks linearly
    with local variance (busy areas get small primitives); colors start
    near the target pixel under the sampled center; depth is the
    sampling order, first drawn in front.
    """
    if n < 1:
        raise ValueError("need at least one primitive")
    target = np.asarray(target, dtype=np.float64)
    h, w = target.shape[:2]
    if n > density_cap * h * w:
        raise InfeasibleDensity(
            f"{n} primitives cannot fit {density_cap} per pixel on {w}x{h}"
        )
    rng = rng or np.random.default_rng()
    templates = templates or default_templates()
    nlv = local_variance_map(target, window).nlv
    weights = base_prob + (1.0 - base_prob) * nlv
    p = (weights / weights.sum()).reshape(-1)

    chosen = np.empty(n, dtype=np.int64)
    counts = np.zeros(h * w, dtype=np.int64)
    got = 0
    attempts = 0
    while got < n:
        attempts += 1
        if attempts > 100 + 20 * n:
            raise InfeasibleDensity(
                "rejection sampling stalled against the density cap"
            )
        batch = rng.choice(h * w, size=n - got, p=p)
        for idx in batch:
            if counts[idx] < density_cap:
                counts[idx] += 1
                chosen[got] = idx
                got += 1
    ys = (chosen // w).astype(np.float64)
    xs = (chosen % w).astype(np.float64)
    local = nlv.reshape(-1)[chosen]
    scales = s_max - (s_max - s_min) * local
    thetas = rng.uniform(0.0, 2.0 * np.pi, n)
    cl = _color_logits_near(target[chosen // w, chosen % w, :], sigma_c, rng)
    tids = rng.integers(0, len(templates), n)
    prims = [
        PrimitiveParams(
            x=float(xs[i]),
            y=float(ys[i]),
            scale=float(scales[i]),
            rotation=float(thetas[i]),
            opacity_logit=v_init_bias,
            color_logits=(float(cl[i, 0]), float(cl[i, 1]), float(cl[i, 2])),
            template_id=int(tids[i]),
            z=i,
        )
        for i in range(n)
    ]
    return Scene(prims, list(templates), canvas_w=w, canvas_h=h)


def random_init(
    canvas_w: int,
    canvas_h: int,
    n: int,
    s_min: float,
    s_max: float,
    v_init_bias: float = DEFAULT_OPACITY_LOGIT,
    sigma_c: float = 0.02,
    rng: np.random.Generator | None = None,
    templates: list[PrimitiveTemplate] | None = None,
) -> Scene:
    """Seed a scene blind to the target: everything uniform."""
    if n < 1:
        raise ValueError("need at least one primitive")
    rng = rng or np.random.default_rng()
    templates = templates or default_templates()
    xs = rng.uniform(0.0, canvas_w - 1.0, n)
    ys = rng.uniform(0.0, canvas_h - 1.0, n)
    scales = rng.uniform(s_min, s_max, n)
    thetas = rng.uniform(0.0, 2.0 * np.pi, n)
    cl = rng.normal(0.0, 1.0, (n, 3)) * sigma_c
    tids = rng.integers(0, len(templates), n)
    prims = [
        PrimitiveParams(
            x=float(xs[i]),
            y=float(ys[i]),
            scale=float(scales[i]),
            rotation=float(thetas[i]),
            opacity_logit=v_init_bias,
            color_logits=(float(cl[i, 0]), float(cl[i, 1]), float(cl[i, 2])),
            template_id=int(tids[i]),
            z=i,
        )
        for i in range(n)
    ]
    return Scene(prims, list(templates), canvas_w=canvas_w, canvas_h=canvas_h)


def prepare_templates(
    templates: list[PrimitiveTemplate],
    blur_sigma: float = 1.0,
    do_blur: bool = True,
    falloff: bool = False,
) -> list[PrimitiveTemplate]:
    """One-time template pipeline: optional blur, optional falloff."""
    out = []
    for t in templates:
        if falloff:
            t = radial_falloff(t)
        if do_blur and blur_sigma > 0:
            t = gaussian_blur_template(t, blur_sigma)
        out.append(t)
    return out


def default_templates(size: int = 31) -> list[PrimitiveTemplate]:
    """Built-in soft brush blob, used when no template files are given.

    White RGB with a smooth radial alpha profile and a zero border, so
    the footprint fades out before the sampling box ends.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    r = np.hypot(yy - c, xx - c) / (c - 1.0)
    alpha = np.clip(1.0 - r * r, 0.0, 1.0) ** 2
    rgba = np.empty((size, size, 4))
    rgba[:, :, :3] = 1.0
    rgba[:, :, 3] = alpha
    rgba[0, :, 3] = rgba[-1, :, 3] = rgba[:, 0, 3] = rgba[:, -1, 3] = 0.0
    return [PrimitiveTemplate(rgba)]
