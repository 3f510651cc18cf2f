"""Command line entry points.

Subcommands: fit, fit-video, export, gradcheck, bench, render. Every
run is deterministic for a fixed seed; bench's wall-clock fields are
the one exception. Errors print a one-line diagnostic and exit 1;
usage mistakes exit 2 via argparse.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from .config import FitConfig, load_config
from .dyn import optimize_video
from .errors import PrimfitError
from .exportio import (
    EXPORT_SCALES,
    export_layers,
    load_image,
    load_scene,
    save_image,
    save_scene,
)
from .fit import optimize
from .grad import backward, backward_reference, run_gradcheck
from .prep import default_templates
from .raster import render_forward, render_naive, warmup_kernels
from .scene import (
    NOISE_BACKGROUND,
    PrimitiveParams,
    PrimitiveTemplate,
    Scene,
)


def _load_templates(spec: str) -> list[PrimitiveTemplate] | None:
    """Comma-separated image paths to templates; alpha defaults to 1."""
    paths = [p for p in spec.split(",") if p.strip()]
    if not paths:
        return None
    out = []
    for p in paths:
        rgb, alpha = load_image(p.strip())
        rgba = np.empty(rgb.shape[:2] + (4,))
        rgba[:, :, :3] = rgb
        rgba[:, :, 3] = 1.0 if alpha is None else alpha
        out.append(PrimitiveTemplate(rgba))
    return out


def _apply_threads(cfg: FitConfig) -> None:
    if cfg.threads > 0:
        from numba import set_num_threads

        set_num_threads(cfg.threads)


def _final_composite(scene: Scene) -> np.ndarray:
    """Render over the scene's background, noise resolved to white."""
    bg = None
    if scene.background == NOISE_BACKGROUND:
        bg = np.ones((scene.canvas_h, scene.canvas_w, 3))
    out, _ = render_forward(scene, background=bg)
    return out.color


def _cmd_fit(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if not cfg.target:
        raise ValueError("config sets no target image path")
    _apply_threads(cfg)
    target, target_alpha = load_image(cfg.target)
    templates = _load_templates(cfg.templates)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_dir = None
    if cfg.dump_every > 0:
        dump_dir = out_dir / "dumps"
        dump_dir.mkdir(exist_ok=True)
    scene, history = optimize(
        target,
        templates,
        cfg,
        target_alpha=target_alpha,
        log_path=out_dir / "log.csv",
        dump_dir=dump_dir,
    )
    save_scene(out_dir / "scene.bin", scene)
    save_image(out_dir / "final.png", _final_composite(scene))
    last = history[-1]
    print(
        f"fit: {len(history)} iterations, final loss {last.loss:.6g}, "
        f"psnr {last.psnr:.4g}"
    )
    print(f"wrote {out_dir / 'scene.bin'}, {out_dir / 'final.png'}, "
          f"{out_dir / 'log.csv'}")
    return 0


def _cmd_fit_video(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if not cfg.frames_dir:
        raise ValueError("config sets no frames_dir")
    _apply_threads(cfg)
    frame_paths = sorted(
        p
        for p in Path(cfg.frames_dir).iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not frame_paths:
        raise ValueError(f"no frames found in {cfg.frames_dir}")
    frames = [load_image(p)[0] for p in frame_paths]
    templates = _load_templates(cfg.templates)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenes, histories = optimize_video(frames, templates, cfg)
    with open(out_dir / "video_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "loss", "psnr"])
        for f, (scene, hist) in enumerate(zip(scenes, histories)):
            save_scene(out_dir / f"frame_{f:04d}.bin", scene)
            save_image(out_dir / f"frame_{f:04d}.png", _final_composite(scene))
            writer.writerow([f, repr(hist[-1].loss), str(hist[-1].psnr)])
    print(f"fit-video: {len(scenes)} frames written to {out_dir}")
    return 0


def _cmd_export(args: argparse.Namespace) -> int:
    scene = load_scene(args.scene)
    manifest = export_layers(scene, args.scale, args.out)
    emitted = sum(1 for r in manifest.layers if r.file is not None)
    skipped = len(manifest.layers) - emitted
    print(
        f"export: {emitted} layers ({skipped} skipped) at scale "
        f"{manifest.scale} -> {args.out}"
    )
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    report = run_gradcheck(args.seeds)
    print(f"scenes {report.n_scenes}")
    print(f"checked {report.n_checked}")
    print(f"failures {report.n_failures}")
    print(f"worst_rel {report.worst_rel:.6g}")
    print(f"worst_abs {report.worst_abs:.6g}")
    print(f"max_abs {report.max_abs:.6g}")
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


def bench_scene(size: int, prims: int, seed: int) -> Scene:
    """Uniform random scene at the benchmark's size."""
    rng = np.random.default_rng(seed)
    zperm = rng.permutation(prims)
    plist = [
        PrimitiveParams(
            x=float(rng.uniform(0, size - 1)),
            y=float(rng.uniform(0, size - 1)),
            scale=float(rng.uniform(4, 24)),
            rotation=float(rng.uniform(0, 2 * np.pi)),
            opacity_logit=float(rng.uniform(-3, 2)),
            color_logits=tuple(float(v) for v in rng.normal(0, 1, 3)),
            template_id=0,
            z=int(zperm[i]),
        )
        for i in range(prims)
    ]
    return Scene(
        plist, default_templates(), size, size, background=(1.0, 1.0, 1.0)
    )


def run_bench(
    size: int = 512,
    prims: int = 1000,
    iters: int = 20,
    naive_iters: int = 1,
    seed: int = 0,
) -> dict[str, float]:
    """Time the tile-parallel path against the sequential reference.

    Fast timings average `iters` runs after a JIT warmup; the naive
    reference is slow enough that `naive_iters` runs suffice.
    """
    from numba import get_num_threads

    warmup_kernels()
    scene = bench_scene(size, prims, seed)
    # one unmeasured round covers binning-code JIT and cache warmup
    out, saved = render_forward(scene, save=True)
    dL = (out.color - 0.5) / out.color.size
    backward(scene, saved, dL)

    t0 = time.perf_counter()
    for _ in range(iters):
        out, saved = render_forward(scene, save=True)
    t_fwd = (time.perf_counter() - t0) / iters

    t0 = time.perf_counter()
    for _ in range(iters):
        backward(scene, saved, dL)
    t_bwd = (time.perf_counter() - t0) / iters

    t0 = time.perf_counter()
    for _ in range(naive_iters):
        render_naive(scene)
    t_nfwd = (time.perf_counter() - t0) / naive_iters

    t0 = time.perf_counter()
    for _ in range(naive_iters):
        backward_reference(scene, dL)
    t_nbwd = (time.perf_counter() - t0) / naive_iters

    return {
        "size": size,
        "prims": prims,
        "threads": get_num_threads(),
        "forward_ms": t_fwd * 1e3,
        "backward_ms": t_bwd * 1e3,
        "naive_forward_ms": t_nfwd * 1e3,
        "naive_backward_ms": t_nbwd * 1e3,
        "speedup": (t_nfwd + t_nbwd) / (t_fwd + t_bwd),
    }


def _cmd_bench(args: argparse.Namespace) -> int:
    if args.threads > 0:
        from numba import set_num_threads

        set_num_threads(args.threads)
    result = run_bench(
        args.size, args.prims, args.iters, args.naive_iters, args.seed
    )
    for key, value in result.items():
        if isinstance(value, float):
            print(f"{key} {value:.3f}")
        else:
            print(f"{key} {value}")
    return 0


def _cmd_render(args: argparse.Namespace) -> int:
    scene = load_scene(args.scene)
    bg = None
    if scene.background == NOISE_BACKGROUND:
        rng = np.random.default_rng(args.seed)
        bg = rng.random((scene.canvas_h, scene.canvas_w, 3))
    out, _ = render_forward(scene, background=bg)
    save_image(args.out, out.color)
    if args.alpha:
        save_image(args.alpha, np.repeat(out.alpha[:, :, None], 3, axis=2))
    print(f"render: {scene.n} primitives -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="primfit",
        description="Fit, render, and export bitmap-primitive scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one image per a config file")
    p.add_argument("config", help="path to a key/value config file")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("fit-video", help="fit a frame directory sequentially")
    p.add_argument("config", help="config with frames_dir set")
    p.set_defaults(func=_cmd_fit_video)

    p = sub.add_parser("export", help="write per-primitive layers + manifest")
    p.add_argument("scene", help="scene file from fit or fit-video")
    p.add_argument(
        "--scale", type=int, default=1, choices=EXPORT_SCALES,
        help="export resolution multiplier",
    )
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("gradcheck", help="analytic vs numeric gradients")
    p.add_argument("--seeds", type=int, default=20, help="random scenes")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("bench", help="time fast vs naive render paths")
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--prims", type=int, default=1000)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--naive-iters", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=0)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("render", help="composite a scene file to a PNG")
    p.add_argument("scene")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", default="", help="also write coverage here")
    p.add_argument("--seed", type=int, default=0, help="noise background seed")
    p.set_defaults(func=_cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PrimfitError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
