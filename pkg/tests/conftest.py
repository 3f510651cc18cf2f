"""Shared fixtures.

The thread-count env var must be set before numba is imported anywhere,
otherwise set_num_threads() is capped at whatever the machine reports and
the determinism tests cannot exercise 1/2/4 threads on small CI boxes.
"""

import os

os.environ.setdefault("NUMBA_NUM_THREADS", "4")

import numpy as np
import pytest

from primfit.raster import warmup_kernels
from primfit.scene import PrimitiveParams, PrimitiveTemplate, Scene


@pytest.fixture(scope="session", autouse=True)
def _warm_jit():
    # first call compiles the kernels; cache=True makes reruns cheap
    warmup_kernels()


def soft_disk(size: int = 15) -> np.ndarray:
    """Radially decaying RGBA template with a zero border ring."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2
    r = np.hypot(yy - c, xx - c) / c
    rgba = np.zeros((size, size, 4))
    rgba[:, :, 0] = 0.9
    rgba[:, :, 1] = 0.5
    rgba[:, :, 2] = 0.3
    rgba[:, :, 3] = np.clip(1.0 - r**2, 0.0, 1.0) ** 2
    return rgba


@pytest.fixture
def disk_template() -> PrimitiveTemplate:
    return PrimitiveTemplate(soft_disk())


@pytest.fixture
def small_scene(disk_template) -> Scene:
    prims = [
        PrimitiveParams(x=10.0, y=12.0, scale=5.0, rotation=0.3,
                        opacity_logit=1.0, color_logits=(0.2, -0.4, 0.8), z=0),
        PrimitiveParams(x=20.0, y=18.0, scale=7.0, rotation=-1.1,
                        opacity_logit=0.0, color_logits=(-0.5, 0.5, 0.0), z=1),
        PrimitiveParams(x=16.0, y=8.0, scale=4.0, rotation=2.0,
                        opacity_logit=-1.0, color_logits=(1.0, 0.0, -1.0), z=2),
    ]
    return Scene(primitives=prims, templates=[disk_template.__class__(soft_disk())],
                 canvas_w=32, canvas_h=28, background=(0.1, 0.2, 0.3))


def random_scene(seed: int, n: int, w: int = 48, h: int = 48,
                 n_templates: int = 2, alpha_max: float = 1.0) -> Scene:
    """Seeded scene with smooth random templates; used across test modules."""
    from primfit.prep import gaussian_blur_template

    rng = np.random.default_rng(seed)
    templates = []
    for _ in range(n_templates):
        size = int(rng.integers(12, 20))
        raw = np.zeros((size, size, 4))
        raw[3:-3, 3:-3, 3] = 0.9 * rng.random((size - 6, size - 6))
        raw[3:-3, 3:-3, :3] = rng.random((size - 6, size - 6, 3))
        templates.append(gaussian_blur_template(PrimitiveTemplate(raw), 1.0))
    zperm = rng.permutation(n)
    prims = []
    for i in range(n):
        prims.append(PrimitiveParams(
            x=float(rng.uniform(0, w - 1)),
            y=float(rng.uniform(0, h - 1)),
            scale=float(rng.uniform(3.0, 9.0)),
            rotation=float(rng.uniform(0, 2 * np.pi)),
            opacity_logit=float(rng.uniform(-3, 2)),
            color_logits=tuple(float(v) for v in rng.uniform(-1.5, 1.5, 3)),
            template_id=int(rng.integers(0, n_templates)),
            z=int(zperm[i]),
        ))
    return Scene(primitives=prims, templates=templates, canvas_w=w, canvas_h=h,
                 background=tuple(float(v) for v in rng.random(3)),
                 alpha_max=alpha_max)
