"""Command-line front end.

boxfield layout|generate|place|render|ablate|validate, configured by a TOML
file with every knob overridable by flags (flags win).  Exit codes: 0 ok,
2 bad input/config, 3 external service failure, 4 runtime failure.
"""
from __future__ import annotations

import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .field import CheckpointError, DensityBiasConfig, VoxelField
from .geometry import (
    CameraSamplerConfig,
    aabb_from_layout,
    generate_camera_rays,
    turntable_poses,
)
from .layout import (
    LayoutError,
    LlmConfig,
    LlmError,
    load_layout,
    request_layout,
    save_layout,
    validate_layout,
)
from .occupancy import OccupancyConfig
from .optimize import (
    OptimizerConfig,
    SyntheticDenoiserOracle,
    freeze_scene,
    load_scene_checkpoint,
    make_scene_state,
    run_ablation_grid,
    run_generation,
    sphere_targets_for_layout,
)
from .render import (
    RenderConfig,
    merged_preview,
    render_clipped,
    render_full,
    save_png,
    save_raw,
)

EXIT_INPUT = 2
EXIT_SERVICE = 3
EXIT_RUNTIME = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_toml(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        _fail(EXIT_INPUT, f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        _fail(EXIT_INPUT, f"bad config file {path}: {exc}")


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        _fail(EXIT_INPUT, f"config section [{name}] must be a table")
    return sec


def _build_configs(cfg: dict, overrides: dict):
    """TOML sections -> dataclass configs, with CLI overrides applied last."""
    render_sec = _section(cfg, "render")
    camera_sec = _section(cfg, "camera")
    opt_sec = _section(cfg, "optimizer")
    occ_sec = _section(cfg, "occupancy")
    bias_sec = _section(cfg, "bias")
    run_sec = _section(cfg, "run")

    try:
        render = RenderConfig(
            samples_per_ray=render_sec.get("samples_per_ray", 128),
            near=render_sec.get("near", 0.05),
            far=render_sec.get("far", 6.0),
            background=np.asarray(render_sec.get("background", [0.0, 0.0, 0.0])),
            stratified=render_sec.get("stratified", False),
            tile_size=render_sec.get("tile_size", 4096),
            workers=overrides.get("workers") or render_sec.get("workers", 1),
        )
        distance = camera_sec.get("distance")
        if distance is not None:
            distance_range = (float(distance), float(distance))
        else:
            distance_range = (
                camera_sec.get("distance_min", 2.4),
                camera_sec.get("distance_max", 3.2),
            )
        camera = CameraSamplerConfig(
            beta=overrides.get("beta") or camera_sec.get("beta", 1.0),
            distance_range=distance_range,
            elevation_range=(
                math.radians(camera_sec.get("elevation_min_deg", -10.0)),
                math.radians(camera_sec.get("elevation_max_deg", 45.0)),
            ),
            fov_y=math.radians(camera_sec.get("fov_y_deg", 50.0)),
        )
        seed = overrides.get("seed")
        if seed is None:
            seed = run_sec.get("seed")
        if seed is None:
            _fail(EXIT_INPUT, "a seed is required (pass --seed or set [run].seed)")
        steps = overrides.get("steps")
        if steps is None:
            steps = opt_sec.get("steps", 10000)
        alpha = overrides.get("alpha")
        if alpha is None:
            alpha = opt_sec.get("alpha", 0.3)
        if overrides.get("no_sp"):
            alpha = 0.0
        optimizer = OptimizerConfig(
            steps=int(steps),
            lr=opt_sec.get("lr", 0.05),
            alpha=float(alpha),
            rays_per_object_per_step=opt_sec.get("rays_per_object_per_step", 4096),
            seed=int(seed),
            clip_objects=not overrides.get("no_crs", False),
            render=render,
            camera=camera,
            checkpoint_every=opt_sec.get("checkpoint_every", 500),
            metrics_every=opt_sec.get("metrics_every", 50),
            probe_views=opt_sec.get("probe_views", 4),
            probe_resolution=opt_sec.get("probe_resolution", 32),
        )
        occupancy = OccupancyConfig(
            resolution=occ_sec.get("resolution", 32),
            threshold=occ_sec.get("threshold", 0.01),
            update_every=occ_sec.get("update_every", 16),
        )
        bias = DensityBiasConfig(
            lambda_sigma=bias_sec.get("lambda_sigma", 10.0),
            s_sigma=bias_sec.get("s_sigma", 0.5),
        )
    except (ValueError, TypeError) as exc:
        _fail(EXIT_INPUT, f"bad configuration: {exc}")
    return optimizer, occupancy, bias


def _build_oracle(layout, optimizer: OptimizerConfig, cfg: dict):
    sec = _section(cfg, "oracle")
    side = optimizer.image_side
    targets = sphere_targets_for_layout(
        layout,
        (side, side),
        optimizer.camera,
        radius_scale=sec.get("radius_scale", 0.7),
        color=sec.get("color", [0.9, 0.9, 0.9]),
        background=optimizer.render.background,
    )
    return SyntheticDenoiserOracle(
        targets,
        kappa=sec.get("kappa", 1.0),
        seed=sec.get("seed", optimizer.seed),
    )


def _llm_config(cfg: dict, mock_dir) -> LlmConfig:
    sec = _section(cfg, "llm")
    mode = sec.get("mode", "mock")
    if mock_dir:
        mode = "mock"
    try:
        return LlmConfig(
            mode=mode,
            endpoint=sec.get("endpoint", ""),
            model=sec.get("model", "gpt-4"),
            api_key_env=sec.get("api_key_env", "BOXFIELD_API_KEY"),
            temperature=sec.get("temperature", 0.5),
            mock_dir=str(mock_dir) if mock_dir else sec.get("mock_dir", ""),
        )
    except ValueError as exc:
        _fail(EXIT_INPUT, f"bad llm configuration: {exc}")


def _emit_views(state, out_dir: Path, render_cfg: RenderConfig, view_resolution: int,
                n_views: int = 8):
    """Turntable PNGs: merged preview plus each object's clipped render."""
    # presentation renders always use deterministic bin centers, even when
    # training sampled stratified depths
    render_cfg = replace(render_cfg, stratified=False)
    views = out_dir / "views"
    views.mkdir(parents=True, exist_ok=True)
    boxes = state.boxes()
    poses = turntable_poses(n_views, center=state.scene_bounds().center)
    for v, pose in enumerate(poses):
        rays = generate_camera_rays(pose, (view_resolution, view_resolution))
        save_png(
            merged_preview(state.field, state.grid, rays, boxes, render_cfg),
            views / f"merged_{v:02d}.png",
        )
        for i, box in enumerate(boxes):
            save_png(
                render_clipped(state.field, state.grid, rays, box, render_cfg),
                views / f"object{i}_{v:02d}.png",
            )


def _common_run_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="TOML config file.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Run seed (required).")(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), default="out",
                      help="Output directory.")(fn)
    fn = click.option("--steps", type=int, default=None)(fn)
    fn = click.option("--alpha", type=float, default=None,
                      help="Scene-preservation weight.")(fn)
    fn = click.option("--beta", type=float, default=None,
                      help="Camera distance/size tradeoff.")(fn)
    fn = click.option("--init", "init_mode",
                      type=click.Choice(["object-centric", "uni-sphere"]),
                      default="object-centric")(fn)
    fn = click.option("--no-crs", is_flag=True, help="Disable per-object clipping.")(fn)
    fn = click.option("--no-sp", is_flag=True, help="Disable scene preservation (alpha=0).")(fn)
    fn = click.option("--workers", type=int, default=None, help="Render worker threads.")(fn)
    return fn


@click.group()
def main():
    """Bounding-box-constrained 3D generation on a voxel radiance field."""


@main.command("layout")
@click.argument("caption")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_path", type=click.Path(), default="layout.json")
@click.option("--mock-llm", "mock_dir", type=click.Path(), default=None,
              help="Directory of canned responses; forces mock mode.")
def cmd_layout(caption, config_path, out_path, mock_dir):
    """Ask the layout generator to decompose CAPTION into boxes."""
    cfg = _load_toml(config_path)
    llm = _llm_config(cfg, mock_dir)
    try:
        layout = request_layout(llm, caption)
    except LlmError as exc:
        _fail(EXIT_SERVICE, str(exc))
    except LayoutError as exc:
        _fail(EXIT_INPUT, f"layout failed validation: {exc}")
    for warning in validate_layout(layout):
        click.echo(f"warning: {warning}")
    save_layout(layout, out_path)
    click.echo(f"wrote {out_path} ({len(layout.objects)} objects)")


@main.command("validate")
@click.argument("layout_file", type=click.Path())
def cmd_validate(layout_file):
    """Check a layout file; warnings are non-fatal."""
    try:
        layout = load_layout(layout_file)
    except FileNotFoundError:
        _fail(EXIT_INPUT, f"no such file: {layout_file}")
    except LayoutError as exc:
        _fail(EXIT_INPUT, str(exc))
    for warning in validate_layout(layout):
        click.echo(f"warning: {warning}")
    click.echo(f"ok: {len(layout.objects)} objects")


def _load_layout_arg(layout_path):
    if layout_path is None:
        _fail(EXIT_INPUT, "--layout is required")
    try:
        return load_layout(layout_path)
    except FileNotFoundError:
        _fail(EXIT_INPUT, f"no such layout file: {layout_path}")
    except LayoutError as exc:
        _fail(EXIT_INPUT, f"bad layout: {exc}")


def _run_training(layout, cfg_doc, overrides, out_dir, init_mode, base=None):
    optimizer, occupancy, bias = _build_configs(cfg_doc, overrides)
    field_res = _section(cfg_doc, "field").get("resolution", 64)
    view_res = _section(cfg_doc, "render").get("view_resolution", 128)
    try:
        if base is not None:
            base_field, base_grid = base
            state = make_scene_state(layout, field_res, occupancy, bias,
                                     base_field=base_field)
            freeze_scene(state, reference_field=base_field, reference_grid=base_grid)
        else:
            state = make_scene_state(layout, field_res, occupancy, bias, init=init_mode)
            freeze_scene(state)
        oracle = _build_oracle(layout, optimizer, cfg_doc)
        state, metrics = run_generation(state, oracle, optimizer, out_dir=out_dir)
        _emit_views(state, Path(out_dir), optimizer.render, view_res)
    except (LayoutError, ValueError) as exc:
        _fail(EXIT_INPUT, str(exc))
    except Exception as exc:
        _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    if metrics and metrics[0]["grad_norm"] == 0.0:
        click.echo("warning: zero gradient at the first step (no occupied cell "
                   "meets any box's clipped samples)")
    if metrics:
        last = metrics[-1]
        click.echo(
            f"done: step {last['step']}, total loss {last['total']:.6f}, "
            f"outside-box opacity {last['outside_box_opacity']:.6f}"
        )
    else:
        click.echo("done: no training steps requested; wrote initial renders")


@main.command("generate")
@click.option("--layout", "layout_path", type=click.Path(), default=None)
@_common_run_options
def cmd_generate(layout_path, config_path, seed, out_dir, steps, alpha, beta,
                 init_mode, no_crs, no_sp, workers):
    """Generate objects from scratch inside the layout's boxes."""
    layout = _load_layout_arg(layout_path)
    cfg_doc = _load_toml(config_path)
    overrides = {"seed": seed, "steps": steps, "alpha": alpha, "beta": beta,
                 "no_crs": no_crs, "no_sp": no_sp, "workers": workers}
    _run_training(layout, cfg_doc, overrides, out_dir, init_mode)


@main.command("place")
@click.option("--layout", "layout_path", type=click.Path(), default=None)
@click.option("--scene", "scene_path", type=click.Path(), required=True,
              help="Scene checkpoint to place objects into.")
@_common_run_options
def cmd_place(layout_path, scene_path, config_path, seed, out_dir, steps, alpha,
              beta, init_mode, no_crs, no_sp, workers):
    """Generate objects inside an existing (frozen) scene."""
    layout = _load_layout_arg(layout_path)
    cfg_doc = _load_toml(config_path)
    try:
        base_field, base_grid, _ = load_scene_checkpoint(scene_path)
    except FileNotFoundError:
        _fail(EXIT_INPUT, f"no such checkpoint: {scene_path}")
    except (CheckpointError, ValueError) as exc:
        _fail(EXIT_INPUT, f"bad checkpoint {scene_path}: {exc}")
    overrides = {"seed": seed, "steps": steps, "alpha": alpha, "beta": beta,
                 "no_crs": no_crs, "no_sp": no_sp, "workers": workers}
    _run_training(layout, cfg_doc, overrides, out_dir, init_mode,
                  base=(base_field, base_grid))


@main.command("render")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), default="renders")
@click.option("--views", type=int, default=8)
@click.option("--size", type=int, default=256)
@click.option("--samples", type=int, default=128)
@click.option("--clip", "clip_box", default=None,
              help="Layout-space box 'x,y,z,depth,width,height' to preview clipped.")
@click.option("--raw", is_flag=True, help="Also dump float32 raw images.")
def cmd_render(checkpoint_path, out_dir, views, size, samples, clip_box, raw):
    """Turntable renders of a scene checkpoint."""
    try:
        field, grid, _ = load_scene_checkpoint(checkpoint_path)
    except FileNotFoundError:
        _fail(EXIT_INPUT, f"no such checkpoint: {checkpoint_path}")
    except (CheckpointError, ValueError) as exc:
        _fail(EXIT_INPUT, f"bad checkpoint {checkpoint_path}: {exc}")
    box = None
    if clip_box is not None:
        try:
            parts = [int(p) for p in clip_box.split(",")]
            box = aabb_from_layout(parts)
        except (ValueError, LayoutError) as exc:
            _fail(EXIT_INPUT, f"bad --clip box: {exc}")
    if views < 1 or size < 1:
        _fail(EXIT_INPUT, "--views and --size must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = RenderConfig(samples_per_ray=samples)
    try:
        for v, pose in enumerate(turntable_poses(views)):
            rays = generate_camera_rays(pose, (size, size))
            if box is not None:
                image = render_clipped(field, grid, rays, box, cfg)
            else:
                image = render_full(field, grid, rays, cfg)
            save_png(image, out / f"view_{v:02d}.png")
            if raw:
                save_raw(image, out / f"view_{v:02d}.bxr")
    except Exception as exc:
        _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    click.echo(f"wrote {views} views to {out}")


@main.command("ablate")
@click.option("--layout", "layout_path", type=click.Path(), default=None)
@_common_run_options
def cmd_ablate(layout_path, config_path, seed, out_dir, steps, alpha, beta,
               init_mode, no_crs, no_sp, workers):
    """Run the five-row clip/bias/preservation configuration grid."""
    layout = _load_layout_arg(layout_path)
    cfg_doc = _load_toml(config_path)
    overrides = {"seed": seed, "steps": steps, "alpha": alpha, "beta": beta,
                 "no_crs": no_crs, "no_sp": no_sp, "workers": workers}
    optimizer, occupancy, bias = _build_configs(cfg_doc, overrides)
    field_res = _section(cfg_doc, "field").get("resolution", 48)

    def make_oracle():
        return _build_oracle(layout, optimizer, cfg_doc)

    try:
        rows = run_ablation_grid(layout, make_oracle, optimizer, field_res,
                                 occupancy, bias)
    except Exception as exc:
        _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(
        json.dumps(rows, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    header = f"{'config':<14} {'grad@1':>12} {'target loss':>12} {'outside op.':>12}"
    click.echo(header)
    for row in rows:
        click.echo(
            f"{row['name']:<14} {row['grad_norm_step1']:>12.5g} "
            f"{row['final_target_loss']:>12.5g} "
            f"{row['final_outside_box_opacity']:>12.5g}"
        )


if __name__ == "__main__":
    main()
