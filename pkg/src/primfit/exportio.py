"""Image IO, scene serialization, and layered export.

Scene files are binary, little-endian, and versioned:

    magic "PRIMFIT\\0" | version u32 | canvas_w u32 | canvas_h u32
    alpha_max f64 | mu_blend f64 | preserve_aspect u8 | bg_kind u8
    bg r,g,b f64*3 (zeros when bg_kind is noise)
    n_templates u32, then per template:
        height u32 | width u32 | sha256 digest 32 bytes | texels f64*H*W*4
    n_primitives u32, then per primitive:
        template_id u32 | z u32 | x y scale rotation opacity_logit c0 c1 c2 f64

The digest is over each template's shape and texels and is re-checked
on load, so silent texel corruption cannot round-trip.

Layered export writes one premultiplied-alpha RGBA PNG per primitive
(16-bit, so re-compositing stays well inside an 8-bit error) plus a
text manifest and a flattened composite. Manifest lines have a fixed
field order; `z` is the stacking index: layers appear in the file
back-to-front, z strictly increasing, larger z painting over smaller.
A primitive whose padded bounding box misses the canvas entirely gets
no file and a `skipped` marker instead of `bbox`/`file`.

    format primfit-layers
    version 1
    scale <rho>
    canvas <w> <h>
    background <r> <g> <b>
    composite <file>
    layers <count>
    layer <z> prim <i> bbox <x0> <y0> <x1> <y1> file <name> params <8 floats>
    layer <z> prim <i> skipped off-canvas params <8 floats>
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import cv2
import numpy as np
from scipy.special import expit

from .errors import (
    CorruptScene,
    DecodeError,
    DegenerateBBox,
    UnsupportedFormat,
    VersionMismatch,
)
from .raster import (
    RenderOutput,
    _bilinear_plane,
    bbox_half_side,
    blend_color,
    canvas_to_prim,
    pack_scene,
    prim_to_texel,
    render_forward,
)
from .scene import (
    NOISE_BACKGROUND,
    FloatArray,
    PrimitiveParams,
    PrimitiveTemplate,
    Scene,
    validate_scene,
)

SCENE_MAGIC = b"PRIMFIT\x00"
SCENE_VERSION = 1
MANIFEST_FORMAT = "primfit-layers"
MANIFEST_VERSION = 1
EXPORT_SCALES = (1, 2, 4)
LAYER_BBOX_PAD = 1.0

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def load_image(path: str | Path) -> tuple[FloatArray, FloatArray | None]:
    """Decode a PNG or JPEG to float RGB in [0, 1] plus optional alpha.

    8-bit values map to v/255, 16-bit to v/65535. Grayscale is
    broadcast to three channels.
    """
    path = Path(path)
    if path.suffix.lower() not in _IMAGE_SUFFIXES:
        raise UnsupportedFormat(f"{path.name}: only PNG and JPEG supported")
    if not path.is_file():
        raise OSError(f"no such image file: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DecodeError(f"could not decode {path}")
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    img = raw.astype(np.float64) / scale
    if img.ndim == 2:
        return np.repeat(img[:, :, None], 3, axis=2), None
    if img.shape[2] == 3:
        return img[:, :, ::-1].copy(), None
    if img.shape[2] == 4:
        return img[:, :, 2::-1].copy(), np.ascontiguousarray(img[:, :, 3])
    raise DecodeError(f"{path}: unexpected channel count {img.shape[2]}")


def save_image(
    path: str | Path,
    rgb: FloatArray,
    alpha: FloatArray | None = None,
    bits: int = 8,
) -> None:
    """Write float RGB(A) in [0, 1] as an 8- or 16-bit PNG."""
    if bits not in (8, 16):
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    peak = 255 if bits == 8 else 65535
    dtype = np.uint8 if bits == 8 else np.uint16
    img = np.asarray(rgb, dtype=np.float64)[:, :, ::-1]  # RGB -> BGR
    if alpha is not None:
        img = np.concatenate(
            [img, np.asarray(alpha, dtype=np.float64)[:, :, None]], axis=2
        )
    q = np.rint(np.clip(img, 0.0, 1.0) * peak).astype(dtype)
    if not cv2.imwrite(str(path), q):
        raise OSError(f"could not write image {path}")


def save_scene(path: str | Path, scene: Scene) -> None:
    """Serialize a validated scene; format in the module docstring."""
    validate_scene(scene)
    noise = scene.background == NOISE_BACKGROUND
    bg = (0.0, 0.0, 0.0) if noise else tuple(scene.background)
    parts = [
        struct.pack(
            "<8sIIIddBB3d",
            SCENE_MAGIC,
            SCENE_VERSION,
            scene.canvas_w,
            scene.canvas_h,
            scene.alpha_max,
            scene.mu_blend,
            int(scene.preserve_aspect),
            int(noise),
            *bg,
        ),
        struct.pack("<I", len(scene.templates)),
    ]
    for tpl in scene.templates:
        parts.append(struct.pack("<II", tpl.height, tpl.width))
        parts.append(bytes.fromhex(tpl.content_hash()))
        parts.append(tpl.rgba.astype("<f8").tobytes())
    parts.append(struct.pack("<I", scene.n))
    for p in scene.primitives:
        parts.append(
            struct.pack(
                "<II8d",
                p.template_id,
                p.z,
                p.x,
                p.y,
                p.scale,
                p.rotation,
                p.opacity_logit,
                *p.color_logits,
            )
        )
    Path(path).write_bytes(b"".join(parts))


class _Cursor:
    """Sequential reader that turns overruns into CorruptScene."""

    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CorruptScene("scene file truncated")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_scene(path: str | Path) -> Scene:
    """Read a scene file back; exact inverse of save_scene."""
    cur = _Cursor(Path(path).read_bytes())
    if cur.take(len(SCENE_MAGIC)) != SCENE_MAGIC:
        raise CorruptScene(f"{path}: bad magic bytes")
    (version,) = cur.unpack("<I")
    if version != SCENE_VERSION:
        raise VersionMismatch(
            f"{path}: scene version {version}, supported {SCENE_VERSION}"
        )
    w, h, alpha_max, mu_blend, aspect, noise, *bg = cur.unpack("<IIddBB3d")
    (n_templates,) = cur.unpack("<I")
    templates = []
    for t in range(n_templates):
        th, tw = cur.unpack("<II")
        digest = cur.take(32)
        if th * tw > len(cur.data):
            raise CorruptScene(f"{path}: template {t} size is implausible")
        texels = np.frombuffer(
            cur.take(th * tw * 4 * 8), dtype="<f8"
        ).reshape(th, tw, 4)
        tpl = PrimitiveTemplate(texels)
        if bytes.fromhex(tpl.content_hash()) != digest:
            raise CorruptScene(f"{path}: template {t} digest mismatch")
        templates.append(tpl)
    (n_prims,) = cur.unpack("<I")
    prims = []
    for _ in range(n_prims):
        tid, z, x, y, s, rot, nu, c0, c1, c2 = cur.unpack("<II8d")
        prims.append(
            PrimitiveParams(
                x=x,
                y=y,
                scale=s,
                rotation=rot,
                opacity_logit=nu,
                color_logits=(c0, c1, c2),
                template_id=tid,
                z=z,
            )
        )
    if cur.off != len(cur.data):
        raise CorruptScene(f"{path}: trailing bytes after scene data")
    scene = Scene(
        primitives=prims,
        templates=templates,
        canvas_w=w,
        canvas_h=h,
        background=NOISE_BACKGROUND if noise else tuple(bg),
        alpha_max=alpha_max,
        mu_blend=mu_blend,
        preserve_aspect=bool(aspect),
    )
    try:
        validate_scene(scene)
    except Exception as exc:
        raise CorruptScene(f"{path}: invalid scene contents: {exc}") from exc
    return scene


@dataclass
class LayerRecord:
    """One manifest entry; bbox and file are None for skipped layers."""

    z: int
    prim: int
    params: tuple[float, ...]
    bbox: tuple[int, int, int, int] | None
    file: str | None


@dataclass
class LayerManifest:
    """Everything needed to re-composite an exported scene."""

    scale: int
    canvas_w: int
    canvas_h: int
    background: tuple[float, float, float]
    composite: str
    layers: list[LayerRecord]


def scale_scene(scene: Scene, rho: int) -> Scene:
    """The scene as seen by a canvas rho times denser.

    Pixel centers i map to rho*i + (rho-1)/2, so positions follow that
    map and scales multiply by rho; everything else is unchanged.
    """
    shift = (rho - 1) / 2.0
    prims = [
        replace(p, x=rho * p.x + shift, y=rho * p.y + shift, scale=rho * p.scale)
        for p in scene.primitives
    ]
    return replace(
        scene,
        primitives=prims,
        canvas_w=rho * scene.canvas_w,
        canvas_h=rho * scene.canvas_h,
    )


def layer_bbox(scene: Scene, i: int) -> tuple[int, int, int, int]:
    """Conservative pixel rect of primitive i, clipped to the canvas."""
    p = scene.primitives[i]
    if scene.preserve_aspect:
        tpl = scene.templates[p.template_id]
        aspect = tpl.height / tpl.width
    else:
        aspect = 1.0
    r = bbox_half_side(p.scale, aspect, LAYER_BBOX_PAD)
    x0 = max(math.floor(p.x - r), 0)
    x1 = min(math.ceil(p.x + r), scene.canvas_w - 1)
    y0 = max(math.floor(p.y - r), 0)
    y1 = min(math.ceil(p.y + r), scene.canvas_h - 1)
    if x0 > x1 or y0 > y1:
        raise DegenerateBBox(f"primitive {i} lies fully off-canvas")
    return x0, y0, x1, y1


def render_layer(
    scene: Scene, i: int
) -> tuple[tuple[int, int, int, int], FloatArray]:
    """Primitive i alone, premultiplied RGBA over its bbox.

    Compositing this buffer with "over" reproduces the primitive's
    exact contribution to the full render.
    """
    x0, y0, x1, y1 = layer_bbox(scene, i)
    p = scene.primitives[i]
    tpl = scene.templates[p.template_id]
    aspect = tpl.height / tpl.width if scene.preserve_aspect else 1.0
    xx, yy = np.meshgrid(
        np.arange(x0, x1 + 1, dtype=np.float64),
        np.arange(y0, y1 + 1, dtype=np.float64),
    )
    u, v = canvas_to_prim(xx, yy, p, aspect)
    U, V = prim_to_texel(u, v, tpl.width, tpl.height)
    m = _bilinear_plane(tpl.rgba[:, :, 3], U, V)
    a = scene.alpha_max * expit(p.opacity_logit) * m
    if scene.mu_blend > 0.0:
        c_org = np.stack(
            [_bilinear_plane(tpl.rgba[:, :, ch], U, V) for ch in range(3)],
            axis=-1,
        )
        c = blend_color(p, c_org, scene.mu_blend)
    else:
        c = np.broadcast_to(
            expit(np.asarray(p.color_logits)), a.shape + (3,)
        )
    rgba = np.empty(a.shape + (4,))
    rgba[:, :, :3] = a[:, :, None] * c
    rgba[:, :, 3] = a
    return (x0, y0, x1, y1), rgba


def export_layers(
    scene: Scene, rho: int, outdir: str | Path
) -> LayerManifest:
    """Write per-primitive layers, a composite, and the manifest.

    Layers render independently into disjoint buffers (thread pool);
    writes happen afterwards, serialized, in stacking order. A noise
    background is resolved to white for the composite.
    """
    if rho not in EXPORT_SCALES:
        raise ValueError(f"export scale {rho} not in {EXPORT_SCALES}")
    validate_scene(scene)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    scaled = scale_scene(scene, rho)
    noise = scene.background == NOISE_BACKGROUND
    bg = (1.0, 1.0, 1.0) if noise else tuple(scene.background)

    # paint order: ascending z composites front-to-back, so reverse it
    front_to_back = pack_scene(scaled).order
    paint = list(front_to_back[::-1])

    def build(k: int):
        i = int(paint[k])
        try:
            return k, i, render_layer(scaled, i)
        except DegenerateBBox:
            return k, i, None

    with ThreadPoolExecutor() as pool:
        rendered = list(pool.map(build, range(len(paint))))

    records = []
    for k, i, result in rendered:
        p = scene.primitives[i]
        params = (
            p.x, p.y, p.scale, p.rotation, p.opacity_logit, *p.color_logits,
        )
        if result is None:
            records.append(LayerRecord(k, i, params, None, None))
            continue
        bbox, rgba = result
        name = f"layer_{k:04d}.png"
        save_image(outdir / name, rgba[:, :, :3], rgba[:, :, 3], bits=16)
        records.append(LayerRecord(k, i, params, bbox, name))

    # eps_skip off: layers keep every nonzero texel, the composite must too
    out, _ = render_forward(
        scaled,
        background=np.broadcast_to(
            np.asarray(bg), (scaled.canvas_h, scaled.canvas_w, 3)
        ),
        eps_skip=0.0,
    )
    composite = "composite.png"
    save_image(outdir / composite, out.color)
    manifest = LayerManifest(
        scale=rho,
        canvas_w=scaled.canvas_w,
        canvas_h=scaled.canvas_h,
        background=bg,
        composite=composite,
        layers=records,
    )
    write_manifest(outdir / "manifest.txt", manifest)
    return manifest


def write_manifest(path: str | Path, manifest: LayerManifest) -> None:
    lines = [
        f"format {MANIFEST_FORMAT}",
        f"version {MANIFEST_VERSION}",
        f"scale {manifest.scale}",
        f"canvas {manifest.canvas_w} {manifest.canvas_h}",
        "background " + " ".join(repr(v) for v in manifest.background),
        f"composite {manifest.composite}",
        f"layers {len(manifest.layers)}",
    ]
    for rec in manifest.layers:
        mid = (
            f"bbox {rec.bbox[0]} {rec.bbox[1]} {rec.bbox[2]} {rec.bbox[3]} "
            f"file {rec.file}"
            if rec.bbox is not None
            else "skipped off-canvas"
        )
        params = " ".join(repr(v) for v in rec.params)
        lines.append(f"layer {rec.z} prim {rec.prim} {mid} params {params}")
    Path(path).write_text("\n".join(lines) + "\n")


def parse_manifest(text: str) -> LayerManifest:
    """Inverse of write_manifest; raises ValueError on malformed text."""
    lines = [ln for ln in text.splitlines() if ln.strip()]

    def expect(idx: int, key: str) -> list[str]:
        parts = lines[idx].split()
        if parts[0] != key:
            raise ValueError(f"manifest line {idx + 1}: expected {key!r}")
        return parts[1:]

    if expect(0, "format") != [MANIFEST_FORMAT]:
        raise ValueError("not a layer manifest")
    if int(expect(1, "version")[0]) != MANIFEST_VERSION:
        raise ValueError("unsupported manifest version")
    scale = int(expect(2, "scale")[0])
    cw, ch = (int(v) for v in expect(3, "canvas"))
    bg = tuple(float(v) for v in expect(4, "background"))
    composite = expect(5, "composite")[0]
    count = int(expect(6, "layers")[0])
    layers = []
    for k in range(count):
        parts = lines[7 + k].split()
        if parts[0] != "layer" or parts[2] != "prim":
            raise ValueError(f"manifest layer line {k} malformed")
        z, prim = int(parts[1]), int(parts[3])
        if parts[4] == "bbox":
            bbox = tuple(int(v) for v in parts[5:9])
            if parts[9] != "file":
                raise ValueError(f"manifest layer line {k} malformed")
            file = parts[10]
            rest = parts[11:]
        elif parts[4] == "skipped":
            bbox = file = None
            rest = parts[6:]
        else:
            raise ValueError(f"manifest layer line {k} malformed")
        if rest[0] != "params" or len(rest) != 9:
            raise ValueError(f"manifest layer line {k}: bad params")
        params = tuple(float(v) for v in rest[1:])
        layers.append(LayerRecord(z, prim, params, bbox, file))
    return LayerManifest(scale, cw, ch, bg, composite, layers)  # type: ignore[arg-type]


def read_manifest(path: str | Path) -> LayerManifest:
    return parse_manifest(Path(path).read_text())


def compose_layers(
    manifest: LayerManifest, layer_dir: str | Path
) -> RenderOutput:
    """Standard back-to-front "over" of the stored layers.

    The consistency check for the whole export path: the result must
    match render_forward of the scaled scene up to PNG quantization.
    """
    layer_dir = Path(layer_dir)
    h, w = manifest.canvas_h, manifest.canvas_w
    rgb = np.broadcast_to(np.asarray(manifest.background), (h, w, 3)).copy()
    cov = np.zeros((h, w))
    for rec in sorted(manifest.layers, key=lambda r: r.z):
        if rec.file is None:
            continue
        lrgb, la = load_image(layer_dir / rec.file)
        if la is None:
            raise DecodeError(f"layer {rec.file} lost its alpha channel")
        x0, y0, x1, y1 = rec.bbox
        view = rgb[y0 : y1 + 1, x0 : x1 + 1]
        view *= 1.0 - la[:, :, None]
        view += lrgb
        cview = cov[y0 : y1 + 1, x0 : x1 + 1]
        cov[y0 : y1 + 1, x0 : x1 + 1] = la + (1.0 - la) * cview
    return RenderOutput(color=rgb, alpha=cov)
