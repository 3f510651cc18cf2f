"""End-to-end runs of every subcommand inside temp directories."""

import numpy as np
import pytest

from primfit.cli import main
from primfit.exportio import load_image, load_scene, read_manifest, save_image, save_scene

from conftest import random_scene


def _write_target(tmp_path, size=24, seed=0):
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    img = gaussian_filter(rng.random((size, size, 3)), (4, 4, 0))
    img = (img - img.min()) / (img.max() - img.min())
    path = tmp_path / "target.png"
    save_image(path, img)
    return path


def _write_cfg(tmp_path, name, lines):
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n")
    return path


def test_fit_command_writes_artifacts(tmp_path, capsys):
    target = _write_target(tmp_path)
    cfg = _write_cfg(tmp_path, "fit.cfg", [
        "# tiny smoke fit",
        f"target {target}",
        f"out_dir {tmp_path / 'out'}",
        "num_primitives 12",
        "num_iterations 10",
        "seed 0",
        "tile_size 16",
        "scale_max 6.0",
        "compute_psnr true",
    ])
    assert main(["fit", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "final loss" in out
    scene = load_scene(tmp_path / "out" / "scene.bin")
    assert scene.n == 12
    img, _ = load_image(tmp_path / "out" / "final.png")
    assert img.shape == (24, 24, 3)
    log = (tmp_path / "out" / "log.csv").read_text().strip().splitlines()
    assert log[0] == "iter,loss,psnr,lr,reinit_count"
    assert len(log) == 11


def test_fit_video_command(tmp_path, capsys):
    frames_dir = tmp_path / "frames"
    frames_dir.mkdir()
    rng = np.random.default_rng(1)
    base = rng.random((16, 16, 3)) * 0.2 + 0.4
    for t in range(3):
        f = base.copy()
        f[4:9, 3 + 3 * t:8 + 3 * t] = (0.9, 0.2, 0.2)
        save_image(frames_dir / f"f_{t:03d}.png", f)
    cfg = _write_cfg(tmp_path, "video.cfg", [
        f"frames_dir {frames_dir}",
        f"out_dir {tmp_path / 'vout'}",
        "num_primitives 8",
        "num_iterations 8",
        "sequential_iterations 4",
        "tile_size 16",
        "scale_max 5.0",
        "seed 0",
    ])
    assert main(["fit-video", str(cfg)]) == 0
    assert "3 frames" in capsys.readouterr().out
    for t in range(3):
        assert (tmp_path / "vout" / f"frame_{t:04d}.bin").is_file()
        assert (tmp_path / "vout" / f"frame_{t:04d}.png").is_file()
    log = (tmp_path / "vout" / "video_log.csv").read_text().strip().splitlines()
    assert len(log) == 4


def test_export_and_render_commands(tmp_path, capsys):
    scene = random_scene(2, n=4, w=20, h=18)
    scene_path = tmp_path / "scene.bin"
    save_scene(scene_path, scene)

    out_dir = tmp_path / "layers"
    assert main(["export", str(scene_path), "--scale", "2",
                 "--out", str(out_dir)]) == 0
    assert "4 layers" in capsys.readouterr().out
    manifest = read_manifest(out_dir / "manifest.txt")
    assert manifest.scale == 2
    assert manifest.canvas_w == 40 and manifest.canvas_h == 36

    png = tmp_path / "render.png"
    alpha = tmp_path / "alpha.png"
    assert main(["render", str(scene_path), "--out", str(png),
                 "--alpha", str(alpha)]) == 0
    img, _ = load_image(png)
    assert img.shape == (18, 20, 3)
    cov, _ = load_image(alpha)
    assert cov.shape == (18, 20, 3)


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seeds", "2"]) == 0
    out = capsys.readouterr().out
    assert "failures 0" in out
    assert out.strip().endswith("PASS")


def test_bench_command(capsys):
    assert main(["bench", "--size", "48", "--prims", "20", "--iters", "2",
                 "--naive-iters", "1"]) == 0
    out = capsys.readouterr().out
    for key in ("forward_ms", "backward_ms", "naive_forward_ms",
                "naive_backward_ms", "speedup"):
        assert key in out


def test_error_exits_one(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert main(["fit", str(missing)]) == 1
    assert "error:" in capsys.readouterr().err

    bad_scene = tmp_path / "bad.bin"
    bad_scene.write_bytes(b"garbage")
    assert main(["render", str(bad_scene), "--out", str(tmp_path / "x.png")]) == 1

    cfg = _write_cfg(tmp_path, "nokey.cfg", ["bogus_key 3"])
    assert main(["fit", str(cfg)]) == 1

    # fit config without a target image
    cfg = _write_cfg(tmp_path, "notarget.cfg", ["num_primitives 5"])
    assert main(["fit", str(cfg)]) == 1


def test_usage_mistakes_exit_two():
    with pytest.raises(SystemExit) as e:
        main(["no-such-command"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["export", "scene.bin"])  # --out is required
    assert e.value.code == 2


def test_console_script_installed():
    import shutil
    import subprocess

    exe = shutil.which("primfit")
    assert exe, "primfit console script not on PATH"
    out = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for name in ("fit", "fit-video", "export", "gradcheck", "bench", "render"):
        assert name in out.stdout
