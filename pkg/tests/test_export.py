import struct
from dataclasses import replace

import numpy as np
import pytest

from primfit.errors import (
    CorruptScene,
    DecodeError,
    DegenerateBBox,
    UnsupportedFormat,
    VersionMismatch,
)
from primfit.exportio import (
    LAYER_BBOX_PAD,
    SCENE_MAGIC,
    compose_layers,
    export_layers,
    layer_bbox,
    load_image,
    load_scene,
    parse_manifest,
    read_manifest,
    render_layer,
    save_image,
    save_scene,
    scale_scene,
    write_manifest,
)
from primfit.raster import bbox_half_side, render_forward
from primfit.scene import (
    NOISE_BACKGROUND,
    PrimitiveParams,
    PrimitiveTemplate,
    Scene,
)

from conftest import random_scene, soft_disk


# -- image IO ----------------------------------------------------------------

def test_png_round_trip_8_bit(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.random((9, 7, 3))
    path = tmp_path / "x.png"
    save_image(path, img)
    back, alpha = load_image(path)
    assert alpha is None
    assert back.shape == (9, 7, 3)
    assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-12


def test_png_round_trip_16_bit_with_alpha(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.random((6, 8, 3))
    a = rng.random((6, 8))
    path = tmp_path / "x.png"
    save_image(path, img, a, bits=16)
    back, alpha = load_image(path)
    assert alpha is not None
    assert np.abs(back - img).max() <= 0.5 / 65535.0 + 1e-12
    assert np.abs(alpha - a).max() <= 0.5 / 65535.0 + 1e-12


def test_jpeg_loads_without_alpha(tmp_path):
    img = np.full((16, 16, 3), 0.5)
    path = tmp_path / "x.jpg"
    save_image(path, img)
    back, alpha = load_image(path)
    assert alpha is None
    assert np.abs(back - img).max() < 0.05


def test_grayscale_png_broadcasts(tmp_path):
    import cv2

    path = tmp_path / "g.png"
    cv2.imwrite(str(path), np.full((5, 5), 128, dtype=np.uint8))
    back, alpha = load_image(path)
    assert back.shape == (5, 5, 3)
    np.testing.assert_allclose(back, 128 / 255.0)
    assert alpha is None


def test_image_io_error_paths(tmp_path):
    with pytest.raises(UnsupportedFormat):
        load_image(tmp_path / "x.bmp")
    with pytest.raises(OSError):
        load_image(tmp_path / "missing.png")
    bad = tmp_path / "junk.png"
    bad.write_bytes(b"not a png at all")
    with pytest.raises(DecodeError):
        load_image(bad)
    with pytest.raises(ValueError):
        save_image(tmp_path / "y.png", np.zeros((2, 2, 3)), bits=12)


# -- scene files -------------------------------------------------------------

def test_scene_file_round_trip_exact(tmp_path):
    scene = random_scene(3, n=7)
    path = tmp_path / "s.bin"
    save_scene(path, scene)
    back = load_scene(path)
    assert back.primitives == scene.primitives
    assert back.canvas_w == scene.canvas_w
    assert back.canvas_h == scene.canvas_h
    assert back.background == scene.background
    assert back.alpha_max == scene.alpha_max
    assert back.mu_blend == scene.mu_blend
    assert back.preserve_aspect == scene.preserve_aspect
    assert len(back.templates) == len(scene.templates)
    for a, b in zip(back.templates, scene.templates):
        np.testing.assert_array_equal(a.rgba, b.rgba)


def test_scene_file_noise_background_round_trips(tmp_path):
    scene = replace(random_scene(4, n=3), background=NOISE_BACKGROUND,
                    preserve_aspect=True)
    path = tmp_path / "s.bin"
    save_scene(path, scene)
    back = load_scene(path)
    assert back.background == NOISE_BACKGROUND
    assert back.preserve_aspect is True


def _scene_bytes(tmp_path, n=2):
    scene = random_scene(5, n=n, n_templates=1)
    path = tmp_path / "s.bin"
    save_scene(path, scene)
    return scene, path, bytearray(path.read_bytes())


def test_scene_file_corruption_table(tmp_path):
    scene, path, data = _scene_bytes(tmp_path)

    def reload(blob):
        path.write_bytes(bytes(blob))
        return load_scene(path)

    bad = data.copy(); bad[0] ^= 0xFF
    with pytest.raises(CorruptScene, match="magic"):
        reload(bad)

    bad = data.copy()
    bad[8:12] = struct.pack("<I", 99)
    with pytest.raises(VersionMismatch):
        reload(bad)

    with pytest.raises(CorruptScene, match="truncated"):
        reload(data[:-4])

    with pytest.raises(CorruptScene, match="trailing"):
        reload(data + b"xx")

    # flip the lowest mantissa bit of the first texel: value barely
    # moves but the stored digest no longer matches
    header = struct.calcsize("<8sIIIddBB3d") + 4
    texel0 = header + struct.calcsize("<II") + 32
    bad = data.copy(); bad[texel0] ^= 0x01
    with pytest.raises(CorruptScene, match="digest"):
        reload(bad)

    # a negative scale passes the cursor but fails validation
    tpl = scene.templates[0]
    prim0 = texel0 + tpl.height * tpl.width * 4 * 8 + 4 + struct.calcsize("<II")
    scale_off = prim0 + 2 * 8
    bad = data.copy()
    bad[scale_off:scale_off + 8] = struct.pack("<d", -5.0)
    with pytest.raises(CorruptScene, match="invalid scene contents"):
        reload(bad)


# -- scaling and layers ------------------------------------------------------

def test_scale_scene_coordinate_map():
    scene = random_scene(6, n=4, w=40, h=30)
    out = scale_scene(scene, 2)
    assert out.canvas_w == 80 and out.canvas_h == 60
    for a, b in zip(scene.primitives, out.primitives):
        assert b.x == pytest.approx(2 * a.x + 0.5)
        assert b.y == pytest.approx(2 * a.y + 0.5)
        assert b.scale == pytest.approx(2 * a.scale)
        assert (b.rotation, b.opacity_logit, b.z) == (
            a.rotation, a.opacity_logit, a.z)
    same = scale_scene(scene, 1)
    assert same.primitives == scene.primitives


def _one_prim_scene(x=14.0, y=10.0, scale=5.0, mu_blend=0.0, w=32, h=24):
    tpl = PrimitiveTemplate(soft_disk(13))
    p = PrimitiveParams(x=x, y=y, scale=scale, rotation=0.7,
                        opacity_logit=1.2, color_logits=(0.4, -0.3, 0.8),
                        template_id=0, z=0)
    return Scene(canvas_w=w, canvas_h=h, templates=[tpl], primitives=[p],
                 background=(0.25, 0.5, 0.75), mu_blend=mu_blend)


def test_layer_bbox_matches_half_side():
    scene = _one_prim_scene()
    import math

    r = bbox_half_side(5.0, 1.0, LAYER_BBOX_PAD)
    assert layer_bbox(scene, 0) == (
        max(math.floor(14.0 - r), 0), max(math.floor(10.0 - r), 0),
        min(math.ceil(14.0 + r), 31), min(math.ceil(10.0 + r), 23),
    )
    with pytest.raises(DegenerateBBox):
        layer_bbox(_one_prim_scene(x=-50.0, y=-50.0), 0)


@pytest.mark.parametrize("mu_blend", [0.0, 0.35])
def test_render_layer_reproduces_contribution(mu_blend):
    scene = _one_prim_scene(mu_blend=mu_blend)
    (x0, y0, x1, y1), rgba = render_layer(scene, 0)
    h, w = scene.canvas_h, scene.canvas_w
    img = np.broadcast_to(np.asarray(scene.background), (h, w, 3)).copy()
    view = img[y0:y1 + 1, x0:x1 + 1]
    view *= 1.0 - rgba[:, :, 3:4]
    view += rgba[:, :, :3]
    out, _ = render_forward(scene, eps_skip=0.0)
    np.testing.assert_allclose(img, out.color, atol=1e-12)


def test_export_layers_and_compose(tmp_path):
    scene = random_scene(8, n=5, w=36, h=28)
    prims = list(scene.primitives)
    # push one primitive fully off-canvas; its layer must be skipped
    prims[2] = replace(prims[2], x=-200.0, y=-200.0)
    scene = replace(scene, primitives=prims)
    manifest = export_layers(scene, 1, tmp_path)

    assert manifest.scale == 1
    assert (tmp_path / "manifest.txt").is_file()
    assert (tmp_path / "composite.png").is_file()
    assert [rec.z for rec in manifest.layers] == list(range(5))
    skipped = [rec for rec in manifest.layers if rec.file is None]
    assert [rec.prim for rec in skipped] == [2]
    for rec in manifest.layers:
        p = scene.primitives[rec.prim]
        assert rec.params == (p.x, p.y, p.scale, p.rotation,
                              p.opacity_logit, *p.color_logits)
        if rec.file is not None:
            assert (tmp_path / rec.file).is_file()
    # manifest z is paint order: the front-most primitive paints last
    front = min(range(5), key=lambda i: scene.primitives[i].z)
    assert manifest.layers[-1].prim == front

    out, _ = render_forward(scene, eps_skip=0.0)
    composed = compose_layers(manifest, tmp_path)
    assert np.abs(composed.color - out.color).max() < 5e-4
    assert np.abs(composed.alpha - out.alpha).max() < 5e-4
    comp_png, _ = load_image(tmp_path / "composite.png")
    assert np.abs(comp_png - out.color).max() <= 0.5 / 255.0 + 1e-12


def test_export_rejects_bad_scale(tmp_path):
    with pytest.raises(ValueError):
        export_layers(random_scene(9, n=2), 3, tmp_path)


def test_export_noise_background_composites_white(tmp_path):
    scene = replace(random_scene(10, n=3, w=20, h=20),
                    background=NOISE_BACKGROUND)
    manifest = export_layers(scene, 1, tmp_path)
    assert manifest.background == (1.0, 1.0, 1.0)


def test_stacking_order_front_wins(tmp_path):
    tpl = PrimitiveTemplate(soft_disk(13))
    mk = lambda z, c: PrimitiveParams(
        x=10.0, y=10.0, scale=6.0, rotation=0.0, opacity_logit=50.0,
        color_logits=c, template_id=0, z=z)
    scene = Scene(canvas_w=20, canvas_h=20, templates=[tpl],
                  primitives=[mk(0, (50.0, -50.0, -50.0)),
                              mk(1, (-50.0, 50.0, -50.0))],
                  background=(0.0, 0.0, 0.0))
    manifest = export_layers(scene, 1, tmp_path)
    composed = compose_layers(manifest, tmp_path)
    # z=0 is front-most and pure red; at the shared center red wins
    assert composed.color[10, 10, 0] > 0.99
    assert composed.color[10, 10, 1] < 0.01


# -- manifest text -----------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    scene = random_scene(11, n=4, w=24, h=24)
    manifest = export_layers(scene, 2, tmp_path)
    back = read_manifest(tmp_path / "manifest.txt")
    assert back == manifest


def test_manifest_rejects_malformed():
    with pytest.raises(ValueError):
        parse_manifest("format something-else\n")
    good = (
        "format primfit-layers\nversion 1\nscale 1\ncanvas 4 4\n"
        "background 0.0 0.0 0.0\ncomposite c.png\nlayers 1\n"
    )
    with pytest.raises(ValueError):
        parse_manifest(good + "layer 0 prim 0 nonsense params 0 0 0 0 0 0 0 0\n")
    with pytest.raises(ValueError):
        parse_manifest(good.replace("version 1", "version 7")
                       + "layer 0 prim 0 skipped off-canvas params "
                       + "0 0 0 0 0 0 0 0\n")
    with pytest.raises(ValueError):
        parse_manifest(good + "layer 0 prim 0 skipped off-canvas params 0 0\n")
