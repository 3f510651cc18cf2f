#!/usr/bin/env python3
"""Regenerate the demo assets checked into assets/.

Everything here is deterministic: fixed seeds, fixed geometry. Outputs:

  assets/targets/ablation_128.png   128x128 fitting target (band-limited)
  assets/templates/disk_hard.png    binary-alpha disk template
  assets/templates/leaf_soft.png    non-square soft template with colored RGB
  assets/scenes/garden.bin          fitted scene (80 primitives)
  assets/scenes/badge.bin           constructed scene: rotation/aspect/blend
  assets/scenes/drift.bin           noise background, off-canvas primitives

Run from the repository root: python3 scripts/make_assets.py
"""

import math
import pathlib
import sys

import numpy as np
from scipy.ndimage import gaussian_filter

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from primfit.config import FitConfig
from primfit.exportio import save_image, save_scene
from primfit.fit import optimize
from primfit.scene import (
    NOISE_BACKGROUND,
    PrimitiveParams,
    PrimitiveTemplate,
    Scene,
)

ROOT = pathlib.Path(__file__).resolve().parent.parent
ASSETS = ROOT / "assets"


def ablation_target() -> np.ndarray:
    """Smooth backdrop + textured band + two patterned disks, then a 2.5 px
    Gaussian so the image is band-limited (no structure a soft primitive
    cannot represent)."""
    rng = np.random.default_rng(1234)
    h = w = 128
    yy, xx = np.mgrid[0:h, 0:w] / (h - 1)
    img = np.zeros((h, w, 3))
    img[:, :, 0] = 0.25 + 0.5 * xx
    img[:, :, 1] = 0.3 + 0.4 * yy
    img[:, :, 2] = 0.65 - 0.3 * xx * yy
    tex = gaussian_filter(rng.normal(0.0, 1.0, (h, w, 3)), sigma=(2.5, 2.5, 0))
    tex = (tex - tex.min()) / (tex.max() - tex.min())
    band = (yy > 0.55) & (yy < 0.9)
    img[band] = 0.15 + 0.7 * tex[band]

    def disk(cy, cx, r):
        return (yy - cy) ** 2 + (xx - cx) ** 2 < r**2

    d1 = disk(0.28, 0.3, 0.14)
    img[d1] = (0.9, 0.25, 0.15)
    stripes = (np.floor(xx * 24) % 2).astype(bool)
    img[d1 & stripes] = (0.95, 0.8, 0.2)
    d2 = disk(0.3, 0.72, 0.1)
    img[d2] = (0.1, 0.2, 0.6)
    checks = ((np.floor(xx * 16) + np.floor(yy * 16)) % 2).astype(bool)
    img[d2 & checks] = (0.85, 0.9, 0.95)
    img = gaussian_filter(np.clip(img, 0, 1), sigma=(2.5, 2.5, 0))
    return np.clip(img, 0, 1)


def hard_disk(size: int = 25) -> np.ndarray:
    """White disk with a binary alpha edge; fitting this without template
    blur shows visible rings on smooth targets."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2
    r = np.hypot(yy - c, xx - c)
    rgba = np.zeros((size, size, 4))
    rgba[:, :, :3] = 1.0
    rgba[:, :, 3] = (r <= c - 1.0).astype(np.float64)
    return rgba


def leaf_soft(h: int = 32, w: int = 20) -> np.ndarray:
    """Non-square template with a smooth elliptic falloff and a color ramp
    in RGB, for exercising aspect handling and template-color blending."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u = (xx - (w - 1) / 2) / ((w - 1) / 2)
    v = (yy - (h - 1) / 2) / ((h - 1) / 2)
    r2 = u**2 + v**2
    rgba = np.zeros((h, w, 4))
    rgba[:, :, 0] = 0.3 + 0.6 * (v + 1) / 2
    rgba[:, :, 1] = 0.7 - 0.4 * (u + 1) / 2
    rgba[:, :, 2] = 0.35
    rgba[:, :, 3] = np.clip(1.0 - r2, 0.0, 1.0) ** 1.5
    rgba[0, :, 3] = 0.0
    rgba[-1, :, 3] = 0.0
    rgba[:, 0, 3] = 0.0
    rgba[:, -1, 3] = 0.0
    return rgba


def garden_scene(target: np.ndarray, template: np.ndarray) -> Scene:
    cfg = FitConfig(
        num_primitives=80,
        num_iterations=60,
        seed=5,
        compute_psnr=False,
    )
    scene, _ = optimize(target, [PrimitiveTemplate(template)], cfg)
    return scene

def badge_scene(template: np.ndarray) -> Scene:
    rng = np.random.default_rng(17)
    n = 40
    zperm = rng.permutation(n)
    prims = []
    for i in range(n):
        ring = i % 3
        ang = 2 * math.pi * i / n * (ring + 1)
        rad = 12.0 + 11.0 * ring
        prims.append(
            PrimitiveParams(
                x=48.0 + rad * math.cos(ang),
                y=36.0 + rad * 0.75 * math.sin(ang),
                scale=float(rng.uniform(4.0, 11.0)),
                rotation=float(ang + math.pi / 2),
                opacity_logit=float(rng.uniform(-0.5, 2.0)),
                color_logits=tuple(float(v) for v in rng.uniform(-1.2, 1.2, 3)),
                template_id=0,
                z=int(zperm[i]),
            )
        )
    return Scene(
        primitives=prims,
        templates=[PrimitiveTemplate(template)],
        canvas_w=96,
        canvas_h=72,
        background=(0.08, 0.09, 0.14),
        alpha_max=0.85,
        mu_blend=0.35,
        preserve_aspect=True,
    )


def drift_scene(template: np.ndarray) -> Scene:
    rng = np.random.default_rng(29)
    n = 60
    prims = []
    for i in range(n):
        edge = i % 5 == 0
        x = float(rng.uniform(-8.0, 88.0)) if edge else float(rng.uniform(4.0, 76.0))
        y = float(rng.uniform(-8.0, 88.0)) if edge else float(rng.uniform(4.0, 76.0))
        prims.append(
            PrimitiveParams(
                x=x,
                y=y,
                scale=float(rng.uniform(3.0, 18.0)),
                rotation=float(rng.uniform(0.0, 2 * math.pi)),
                opacity_logit=float(rng.uniform(-2.0, 1.5)),
                color_logits=tuple(float(v) for v in rng.uniform(-1.5, 1.5, 3)),
                template_id=0,
                z=i,
            )
        )
    # one primitive entirely off-canvas: exports as a skipped manifest line
    prims.append(
        PrimitiveParams(
            x=-40.0, y=-40.0, scale=6.0, rotation=0.3,
            opacity_logit=1.0, color_logits=(0.5, -0.5, 0.2),
            template_id=0, z=n,
        )
    )
    return Scene(
        primitives=prims,
        templates=[PrimitiveTemplate(template)],
        canvas_w=80,
        canvas_h=80,
        background=NOISE_BACKGROUND,
    )


def main() -> None:
    (ASSETS / "targets").mkdir(parents=True, exist_ok=True)
    (ASSETS / "templates").mkdir(parents=True, exist_ok=True)
    (ASSETS / "scenes").mkdir(parents=True, exist_ok=True)

    target = ablation_target()
    save_image(ASSETS / "targets" / "ablation_128.png", target)

    disk = hard_disk()
    save_image(ASSETS / "templates" / "disk_hard.png", disk[:, :, :3], disk[:, :, 3])
    leaf = leaf_soft()
    save_image(ASSETS / "templates" / "leaf_soft.png", leaf[:, :, :3], leaf[:, :, 3])

    save_scene(ASSETS / "scenes" / "garden.bin", garden_scene(target, disk))
    save_scene(ASSETS / "scenes" / "badge.bin", badge_scene(leaf))
    save_scene(ASSETS / "scenes" / "drift.bin", drift_scene(disk))
    print("assets written to", ASSETS)


if __name__ == "__main__":
    main()
