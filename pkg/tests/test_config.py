import dataclasses
import math

import pytest

from primfit.config import (
    FitConfig,
    background_from_config,
    format_config,
    load_config,
    parse_config,
)
from primfit.scene import NOISE_BACKGROUND


def test_defaults_match_documented_values():
    cfg = FitConfig()
    assert cfg.num_primitives == 500
    assert cfg.learning_rate == pytest.approx(0.1)
    assert cfg.lr_gain_x == pytest.approx(10.0)
    assert cfg.lr_gain_opacity == pytest.approx(1.5)
    assert cfg.decay_final_fraction == pytest.approx(0.1)
    assert cfg.alpha_loss_weight == pytest.approx(0.3)
    assert cfg.opacity_logit_init == pytest.approx(-4.0)
    assert cfg.scale_min == pytest.approx(2.0)
    assert cfg.scale_max == pytest.approx(16.0)
    assert cfg.eps_skip == pytest.approx(1.0 / 1024.0)
    assert cfg.diff_threshold == pytest.approx(2.0 / 255.0)
    assert cfg.stuck_triggers == (20, 45, 70)


def test_parse_roundtrip_through_format():
    cfg = FitConfig(num_primitives=42, learning_rate=0.05,
                    stuck_triggers=(5, 10), bg_color="noise",
                    preserve_aspect=True, loss="spatial")
    again = parse_config(format_config(cfg))
    assert again == cfg


def test_parse_accepts_renamed_keys():
    cfg = parse_config("lr_gain_r 3.5\nalpha_upper_bound 0.8\nc_blend 0.25\n")
    assert cfg.lr_gain_scale == pytest.approx(3.5)
    assert cfg.alpha_max == pytest.approx(0.8)
    assert cfg.mu_blend == pytest.approx(0.25)


def test_parse_rejects_unknown_key():
    with pytest.raises(ValueError):
        parse_config("definitely_not_a_knob 1\n")


def test_load_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("num_primitives 7\nseed 123\n")
    cfg = load_config(path)
    assert cfg.num_primitives == 7
    assert cfg.seed == 123


def test_background_from_config_variants():
    assert background_from_config(FitConfig(bg_color="white")) == (1.0, 1.0, 1.0)
    assert background_from_config(FitConfig(bg_color="black")) == (0.0, 0.0, 0.0)
    assert background_from_config(FitConfig(bg_color="noise")) == NOISE_BACKGROUND
    rgb = background_from_config(FitConfig(bg_color="0.2, 0.4, 0.6"))
    assert rgb == pytest.approx((0.2, 0.4, 0.6))


def test_background_from_config_rejects_garbage():
    with pytest.raises(ValueError):
        background_from_config(FitConfig(bg_color="chartreuse"))


def test_every_field_survives_roundtrip():
    # flip every field away from its default and confirm none are dropped
    cfg = FitConfig()
    changed = {}
    for f in dataclasses.fields(FitConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            changed[f.name] = not v
        elif isinstance(v, int):
            changed[f.name] = v + 1
        elif isinstance(v, float):
            changed[f.name] = v + 0.125 if math.isfinite(v) else v
        elif isinstance(v, str):
            changed[f.name] = {"mse": "combined", "structure_aware": "random",
                              "white": "black"}.get(v, v + "x")
        elif isinstance(v, tuple):
            changed[f.name] = tuple(x + 1 for x in v)
    cfg2 = dataclasses.replace(cfg, **changed)
    assert parse_config(format_config(cfg2)) == cfg2
