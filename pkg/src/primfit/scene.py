"""Scene model: bitmap templates, primitive parameters, packing.

A scene is an ordered set of primitives over a fixed canvas. Each
primitive carries its own translation, isotropic scale, rotation,
opacity logit, and color logits, plus references to a shared template
table and a unique depth rank. Depth 0 is the front-most primitive;
compositing always walks depths in ascending order. Depth and template
assignment are structural: the optimizer never differentiates them.

Parameters live in two layouts. The dataclasses below are the plain
value form used at API boundaries; `pack_params` flattens them into a
single vector (8 scalars per primitive, primitive-major) for the
optimizer, and `unpack_params` is its exact inverse.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np
import numpy.typing as npt

from .errors import (
    BadChannelRange,
    BadTemplateRef,
    InvalidScale,
    LayoutMismatch,
    NonPermutationZ,
    ShapeMismatch,
)

FloatArray = npt.NDArray[np.float64]

# Scalar order inside each primitive's block of the packed vector.
PARAM_GROUPS = ("x", "y", "scale", "rotation", "opacity_logit", "c0", "c1", "c2")
PARAMS_PER_PRIMITIVE = len(PARAM_GROUPS)

# Background sentinel: resample a uniform noise canvas every iteration.
NOISE_BACKGROUND = "noise"

DEFAULT_OPACITY_LOGIT = -4.0


@dataclass(eq=False)
class PrimitiveTemplate:
    """One RGBA bitmap, float64 in [0, 1], shape (height, width, 4)."""

    rgba: FloatArray

    def __post_init__(self) -> None:
        self.rgba = np.ascontiguousarray(self.rgba, dtype=np.float64)

    @property
    def height(self) -> int:
        return self.rgba.shape[0]

    @property
    def width(self) -> int:
        return self.rgba.shape[1]

    def content_hash(self) -> str:
        """SHA-256 over shape and raw texel bytes."""
        h = hashlib.sha256()
        h.update(np.asarray(self.rgba.shape, dtype=np.int64).tobytes())
        h.update(self.rgba.tobytes())
        return h.hexdigest()


@dataclass
class PrimitiveParams:
    """Pose and appearance of one primitive.

    x, y are the center in canvas pixels; scale is the half-extent in
    pixels of the template's unit box; rotation is radians,
    counter-clockwise and unnormalized. Opacity and color are stored as
    logits so gradient steps cannot leave the valid range.
    """

    x: float
    y: float
    scale: float
    rotation: float = 0.0
    opacity_logit: float = DEFAULT_OPACITY_LOGIT
    color_logits: tuple[float, float, float] = (0.0, 0.0, 0.0)
    template_id: int = 0
    z: int = 0


@dataclass(eq=False)
class Scene:
    """Primitives plus everything needed to render them.

    background is either a solid (r, g, b) in [0, 1] or the string
    "noise", meaning a fresh uniform random canvas each iteration.
    alpha_max caps every primitive's opacity; mu_blend mixes template
    color against the learned color (1 keeps the template, 0 ignores
    it). preserve_aspect keeps non-square templates unsquashed.
    """

    primitives: list[PrimitiveParams]
    templates: list[PrimitiveTemplate]
    canvas_w: int
    canvas_h: int
    background: tuple[float, float, float] | str = (1.0, 1.0, 1.0)
    alpha_max: float = 1.0
    mu_blend: float = 0.0
    preserve_aspect: bool = False

    @property
    def n(self) -> int:
        return len(self.primitives)


@dataclass(frozen=True)
class ParamLayout:
    """Describes the packed vector: primitive-major, 8 scalars each."""

    n_primitives: int

    @property
    def size(self) -> int:
        return self.n_primitives * PARAMS_PER_PRIMITIVE

    def block(self, i: int) -> slice:
        """Slice of primitive i's scalars."""
        start = i * PARAMS_PER_PRIMITIVE
        return slice(start, start + PARAMS_PER_PRIMITIVE)

    def column(self, group: str) -> npt.NDArray[np.intp]:
        """Vector indices of one scalar group across all primitives."""
        off = PARAM_GROUPS.index(group)
        return np.arange(self.n_primitives) * PARAMS_PER_PRIMITIVE + off


def validate_scene(scene: Scene) -> None:
    """Raise on the first violated scene invariant.

    Checks template shapes and channel ranges, scale positivity,
    template references, and that depths form a permutation of 0..N-1.
    """
    if scene.canvas_w < 1 or scene.canvas_h < 1:
        raise ShapeMismatch(f"canvas {scene.canvas_w}x{scene.canvas_h} is empty")
    if not 0.0 < scene.alpha_max <= 1.0:
        raise ValueError(f"alpha_max {scene.alpha_max} outside (0, 1]")
    if not 0.0 <= scene.mu_blend <= 1.0:
        raise ValueError(f"mu_blend {scene.mu_blend} outside [0, 1]")
    if isinstance(scene.background, str):
        if scene.background != NOISE_BACKGROUND:
            raise ValueError(f"unknown background policy {scene.background!r}")
    else:
        bg = np.asarray(scene.background, dtype=np.float64)
        if bg.shape != (3,):
            raise ShapeMismatch("solid background must have 3 channels")
        if np.any(bg < 0.0) or np.any(bg > 1.0):
            raise ValueError("background color outside [0, 1]")

    for t, tpl in enumerate(scene.templates):
        if tpl.rgba.ndim != 3 or tpl.rgba.shape[2] != 4:
            raise ShapeMismatch(f"template {t} is not (H, W, 4)")
        if tpl.height < 2 or tpl.width < 2:
            raise ShapeMismatch(f"template {t} smaller than 2x2")
        if np.any(tpl.rgba < 0.0) or np.any(tpl.rgba > 1.0) or not np.all(
            np.isfinite(tpl.rgba)
        ):
            raise BadChannelRange(f"template {t} has texels outside [0, 1]")

    n = scene.n
    zs = np.empty(n, dtype=np.int64)
    for i, p in enumerate(scene.primitives):
        if not np.isfinite(p.scale) or p.scale <= 0.0:
            raise InvalidScale(f"primitive {i} has scale {p.scale}")
        if not 0 <= p.template_id < len(scene.templates):
            raise BadTemplateRef(
                f"primitive {i} references template {p.template_id} "
                f"of {len(scene.templates)}"
            )
        zs[i] = p.z
    if n and (np.sort(zs) != np.arange(n)).any():
        raise NonPermutationZ("z values are not a permutation of 0..N-1")


def pack_params(scene: Scene) -> tuple[FloatArray, ParamLayout]:
    """Flatten learnable parameters into one float64 vector."""
    layout = ParamLayout(scene.n)
    vec = np.empty(layout.size, dtype=np.float64)
    for i, p in enumerate(scene.primitives):
        vec[layout.block(i)] = (
            p.x, p.y, p.scale, p.rotation, p.opacity_logit, *p.color_logits,
        )
    return vec, layout


def unpack_params(vec: FloatArray, layout: ParamLayout, scene: Scene) -> Scene:
    """Rebuild a scene from a packed vector; inverse of pack_params.

    Depths, template assignments, templates, and canvas metadata are
    carried over from `scene` unchanged.
    """
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (layout.size,):
        raise LayoutMismatch(f"vector shape {vec.shape} != ({layout.size},)")
    if layout.n_primitives != scene.n:
        raise LayoutMismatch(
            f"layout is for {layout.n_primitives} primitives, scene has {scene.n}"
        )
    prims = []
    for i, old in enumerate(scene.primitives):
        b = vec[layout.block(i)]
        prims.append(
            PrimitiveParams(
                x=float(b[0]),
                y=float(b[1]),
                scale=float(b[2]),
                rotation=float(b[3]),
                opacity_logit=float(b[4]),
                color_logits=(float(b[5]), float(b[6]), float(b[7])),
                template_id=old.template_id,
                z=old.z,
            )
        )
    return replace(scene, primitives=prims)


def scene_fingerprint(scene: Scene) -> str:
    """Hash of everything the renderer reads; used to detect staleness."""
    h = hashlib.sha256()
    vec, _ = pack_params(scene)
    h.update(vec.tobytes())
    struct = np.asarray(
        [[p.template_id, p.z] for p in scene.primitives], dtype=np.int64
    )
    h.update(struct.tobytes())
    bg = (
        b"noise"
        if isinstance(scene.background, str)
        else np.asarray(scene.background, dtype=np.float64).tobytes()
    )
    meta = (
        f"{scene.canvas_w} {scene.canvas_h} {scene.alpha_max!r} "
        f"{scene.mu_blend!r} {scene.preserve_aspect}"
    ).encode()
    h.update(meta)
    h.update(bg)
    for tpl in scene.templates:
        h.update(tpl.content_hash().encode())
    return h.hexdigest()
