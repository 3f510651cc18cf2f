"""Estimator-style wrappers: fit/predict objects with get_params.

PrimitiveFitter fits one image, VideoPrimitiveFitter a frame stack.
Constructor arguments mirror the most used config keys; anything else
goes through `overrides`, a dict of FitConfig field names. Fitted
state lands in trailing-underscore attributes, and predict() renders
the fitted scene, so the objects drop into sklearn-style pipelines
and grid searches without adapters.
"""

from __future__ import annotations

from dataclasses import fields, replace

import numpy as np
from sklearn.base import BaseEstimator

from .config import FitConfig
from .dyn import optimize_video
from .errors import ShapeMismatch
from .fit import optimize, psnr
from .raster import render_forward
from .scene import NOISE_BACKGROUND, FloatArray, PrimitiveTemplate, Scene

_CONFIG_FIELDS = {f.name for f in fields(FitConfig)}


def check_image(X, name: str = "X") -> FloatArray:
    """Validate one (H, W, 3) float image in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != 3:
        raise ShapeMismatch(f"{name} must be (H, W, 3), got {X.shape}")
    if X.shape[0] < 1 or X.shape[1] < 1:
        raise ShapeMismatch(f"{name} has an empty canvas: {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return X


def check_frames(X) -> list[FloatArray]:
    """Validate a (F, H, W, 3) stack or list of congruent images."""
    frames = [check_image(f, f"frame {i}") for i, f in enumerate(X)]
    if not frames:
        raise ValueError("need at least one frame")
    for i, f in enumerate(frames[1:], start=1):
        if f.shape != frames[0].shape:
            raise ShapeMismatch(
                f"frame {i} shape {f.shape} != frame 0 {frames[0].shape}"
            )
    return frames


class _ConfigMixin:
    """Shared config assembly for both estimators."""

    def _config(self) -> FitConfig:
        params = self.get_params()
        overrides = params.pop("overrides") or {}
        unknown = set(overrides) - _CONFIG_FIELDS
        if unknown:
            raise ValueError(f"unknown config overrides: {sorted(unknown)}")
        cfg = replace(FitConfig(), **params)
        return replace(cfg, **overrides)

    def _render(self, scene: Scene) -> FloatArray:
        bg = None
        if scene.background == NOISE_BACKGROUND:
            bg = np.ones((scene.canvas_h, scene.canvas_w, 3))
        out, _ = render_forward(scene, background=bg)
        return out.color


class PrimitiveFitter(_ConfigMixin, BaseEstimator):
    """Fit a primitive scene to one image.

    After fit: scene_ (the fitted Scene), history_ (per-iteration
    records), final_loss_, final_psnr_, n_iter_.
    """

    def __init__(
        self,
        num_primitives: int = 500,
        num_iterations: int = 100,
        learning_rate: float = 0.1,
        loss: str = "mse",
        initializer: str = "structure_aware",
        do_gaussian_blur: bool = True,
        blur_sigma: float = 1.0,
        radial_falloff: bool = False,
        bg_color: str = "white",
        alpha_max: float = 1.0,
        mu_blend: float = 0.0,
        scale_min: float = 2.0,
        scale_max: float = 16.0,
        do_reinit: bool = False,
        seed: int = 0,
        overrides: dict | None = None,
    ):
        self.num_primitives = num_primitives
        self.num_iterations = num_iterations
        self.learning_rate = learning_rate
        self.loss = loss
        self.initializer = initializer
        self.do_gaussian_blur = do_gaussian_blur
        self.blur_sigma = blur_sigma
        self.radial_falloff = radial_falloff
        self.bg_color = bg_color
        self.alpha_max = alpha_max
        self.mu_blend = mu_blend
        self.scale_min = scale_min
        self.scale_max = scale_max
        self.do_reinit = do_reinit
        self.seed = seed
        self.overrides = overrides

    def fit(
        self,
        X,
        y=None,
        target_alpha: FloatArray | None = None,
        templates: list[PrimitiveTemplate] | None = None,
    ):
        X = check_image(X)
        cfg = self._config()
        self.scene_, self.history_ = optimize(
            X, templates, cfg, target_alpha=target_alpha
        )
        self.n_iter_ = len(self.history_)
        self.final_loss_ = self.history_[-1].loss
        self.final_psnr_ = self.history_[-1].psnr
        return self

    def predict(self, X=None) -> FloatArray:
        """Render the fitted scene; X is accepted but unused."""
        self._check_fitted()
        return self._render(self.scene_)

    def score(self, X, y=None) -> float:
        """PSNR of the fitted render against X, in dB."""
        X = check_image(X)
        return psnr(self.predict(), X)

    def _check_fitted(self) -> None:
        if not hasattr(self, "scene_"):
            raise AttributeError("not fitted yet; call fit first")


class VideoPrimitiveFitter(_ConfigMixin, BaseEstimator):
    """Fit one scene per frame with warm starts.

    After fit: scenes_, histories_, n_frames_.
    """

    def __init__(
        self,
        num_primitives: int = 500,
        num_iterations: int = 100,
        sequential_iterations: int = 100,
        learning_rate: float = 0.1,
        loss: str = "mse",
        freeze_static: bool = True,
        remove_stuck: bool = False,
        diff_threshold: float = 2.0 / 255.0,
        bg_color: str = "white",
        scale_min: float = 2.0,
        scale_max: float = 16.0,
        seed: int = 0,
        overrides: dict | None = None,
    ):
        self.num_primitives = num_primitives
        self.num_iterations = num_iterations
        self.sequential_iterations = sequential_iterations
        self.learning_rate = learning_rate
        self.loss = loss
        self.freeze_static = freeze_static
        self.remove_stuck = remove_stuck
        self.diff_threshold = diff_threshold
        self.bg_color = bg_color
        self.scale_min = scale_min
        self.scale_max = scale_max
        self.seed = seed
        self.overrides = overrides

    def fit(self, X, y=None, templates: list[PrimitiveTemplate] | None = None):
        frames = check_frames(X)
        cfg = self._config()
        self.scenes_, self.histories_ = optimize_video(frames, templates, cfg)
        self.n_frames_ = len(self.scenes_)
        return self

    def predict(self, X=None) -> list[FloatArray]:
        """Render every fitted frame; X is accepted but unused."""
        if not hasattr(self, "scenes_"):
            raise AttributeError("not fitted yet; call fit first")
        return [self._render(s) for s in self.scenes_]
