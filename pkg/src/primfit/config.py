"""Fit configuration and the flat key/value config file format.

Config files are plain text: one `key value` pair per line, `#` starts
a comment, blank lines are ignored. Keys are the external names listed
in KEY_TO_FIELD (a few differ from the dataclass field names, which
spell things out). Unknown keys are an error, not a warning, so typos
cannot silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .scene import DEFAULT_OPACITY_LOGIT, NOISE_BACKGROUND

DEFAULT_EPS_SKIP = 1.0 / 1024.0


@dataclass
class FitConfig:
    """Every knob for fitting; defaults match single-image fitting."""

    # optimization budget and rates
    num_iterations: int = 100
    sequential_iterations: int = 100
    num_primitives: int = 500
    learning_rate: float = 0.1
    lr_gain_x: float = 10.0
    lr_gain_y: float = 10.0
    lr_gain_scale: float = 10.0
    lr_gain_rotation: float = 1.0
    lr_gain_opacity: float = 1.5
    lr_gain_color: float = 1.0
    do_decay: bool = True
    decay_final_fraction: float = 0.1

    # loss
    loss: str = "mse"  # mse | spatial | combined
    mse_weight: float = 1.0
    gray_l1_weight: float = 0.0
    alpha_loss_weight: float = 0.3

    # template preparation
    do_gaussian_blur: bool = True
    blur_sigma: float = 1.0
    radial_falloff: bool = False

    # initialization
    initializer: str = "structure_aware"  # structure_aware | random
    variance_window_size: int = 7
    variance_base_prob: float = 0.1
    max_prims_per_pixel: int = 100
    opacity_logit_init: float = DEFAULT_OPACITY_LOGIT
    color_init_noise: float = 0.02
    scale_min: float = 2.0
    scale_max: float = 16.0

    # compositing
    alpha_max: float = 1.0
    mu_blend: float = 0.0
    bg_color: str = "white"  # white | black | noise | r,g,b
    preserve_aspect: bool = False

    # low-opacity reinitialization
    do_reinit: bool = False
    reinit_threshold: float = 0.3
    reinit_period: int = 50
    reinit_warmup: int = 199

    # rasterizer
    tile_size: int = 32
    tile_padding: float = 2.0
    eps_skip: float = DEFAULT_EPS_SKIP

    # video
    freeze_static: bool = True
    diff_threshold: float = 2.0 / 255.0
    remove_stuck: bool = False
    stuck_grid_x: int = 4
    stuck_grid_y: int = 4
    stuck_top_k: int = 4
    stuck_tau_scale: float = 0.1
    stuck_tau_alpha: float = 0.7
    stuck_zeta: float = 0.7
    stuck_eta: float = 0.3
    stuck_triggers: tuple[int, ...] = (20, 45, 70)

    # bookkeeping
    seed: int = 0
    compute_psnr: bool = True
    dump_every: int = 0
    threads: int = 0  # 0 keeps the runtime default

    # paths (used by the command line entry points)
    target: str = ""
    frames_dir: str = ""
    templates: str = ""  # comma-separated image paths; empty = built-in
    out_dir: str = "out"


# external key -> dataclass field, where the two differ
_RENAMED = {
    "lr_gain_r": "lr_gain_scale",
    "lr_gain_theta": "lr_gain_rotation",
    "lr_gain_v": "lr_gain_opacity",
    "lr_gain_c": "lr_gain_color",
    "alpha_upper_bound": "alpha_max",
    "c_blend": "mu_blend",
    "v_init_bias": "opacity_logit_init",
    "std_c_init": "color_init_noise",
}
_FIELDS = {f.name: f for f in fields(FitConfig)}
KEY_TO_FIELD = {
    **{name: name for name in _FIELDS if name not in _RENAMED.values()},
    **_RENAMED,
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"config key {key}: {raw!r} is not a boolean")


def _coerce(key: str, raw: str, kind: type) -> object:
    if kind is bool:
        return _parse_bool(raw, key)
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is str:
        return "" if raw == '""' else raw
    # remaining case: tuple of ints such as stuck_triggers
    parts = [p for p in raw.replace(",", " ").split() if p]
    return tuple(int(p) for p in parts)


def parse_config(text: str) -> FitConfig:
    """Parse config text into a FitConfig; unknown keys raise."""
    cfg = FitConfig()
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split(None, 1)
        if len(parts) != 2:
            raise ValueError(f"config line {lineno}: expected 'key value'")
        key, raw = parts[0], parts[1].strip()
        if key not in KEY_TO_FIELD:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        seen.add(key)
        name = KEY_TO_FIELD[key]
        f = _FIELDS[name]
        kind = {"int": int, "float": float, "bool": bool, "str": str}.get(
            f.type if isinstance(f.type, str) else f.type.__name__, tuple
        )
        try:
            value = _coerce(key, raw, kind)
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: {exc}") from exc
        setattr(cfg, name, value)
    return cfg


def load_config(path: str | Path) -> FitConfig:
    """Read and parse a config file."""
    return parse_config(Path(path).read_text())


def format_config(cfg: FitConfig) -> str:
    """Render a config back as text, external key names, one per line."""
    field_to_key = {v: k for k, v in KEY_TO_FIELD.items()}
    lines = []
    for f in fields(FitConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif value == "":
            value = '""'  # a bare key would not parse back
        lines.append(f"{field_to_key[f.name]} {value}")
    return "\n".join(lines) + "\n"


def background_from_config(cfg: FitConfig) -> tuple[float, float, float] | str:
    """Resolve the bg_color key to a scene background value."""
    name = cfg.bg_color.strip().lower()
    if name == "white":
        return (1.0, 1.0, 1.0)
    if name == "black":
        return (0.0, 0.0, 0.0)
    if name in ("noise", "random"):
        return NOISE_BACKGROUND
    parts = [p for p in name.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise ValueError(f"bg_color {cfg.bg_color!r} not understood")
    rgb = tuple(float(p) for p in parts)
    if any(not 0.0 <= v <= 1.0 for v in rgb):
        raise ValueError("bg_color components must lie in [0, 1]")
    return rgb  # type: ignore[return-value]
