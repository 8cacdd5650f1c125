"""The generation loop.

Each step renders every object clipped to its box, turns the images into
gradients through a guidance oracle, adds a scene-preservation term (the
inverse-clipped render is pulled toward the frozen reference), and applies
one Adam update followed by the scheduled occupancy refresh.
"""
from __future__ import annotations

import json
import math
import warnings as _warnings
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path
from typing import Protocol

import numpy as np

from .field import (
    SIGMA_FLOOR,
    AdamState,
    DensityBiasConfig,
    FieldGradient,
    VoxelField,
    apply_update,
    blend_object_bias,
    init_object_centric_bias,
    init_uni_sphere_bias,
    inv_softplus,
    read_field_block,
    write_field_block,
)
from .geometry import (
    Aabb,
    CameraPose,
    CameraSamplerConfig,
    Vec3,
    generate_camera_rays,
    sample_base_pose,
    sample_object_centric_pose,
    turntable_poses,
    union_bounds,
)
from .layout import SceneLayout
from .occupancy import (
    OccupancyConfig,
    OccupancyGrid,
    read_occupancy_block,
    should_update,
    update_occupancy,
    write_occupancy_block,
)
from .render import (
    RenderConfig,
    RenderedImage,
    render_clipped,
    render_clipped_backward,
    render_full,
    render_full_backward,
    render_inverse_clipped,
    render_inverse_clipped_backward,
)


class GuidanceError(RuntimeError):
    """Oracle failure, tagged with the object it happened on."""

    def __init__(self, object_index: int, message: str):
        super().__init__(f"object {object_index}: {message}")
        self.object_index = object_index


class FrozenSceneError(RuntimeError):
    """freeze_scene misuse: double freeze, or training before any freeze."""


class GuidanceOracle(Protocol):
    def gradient_of(self, image: RenderedImage, object_id: int):
        """Return (cotangent array shaped like image.rgb, scalar loss estimate)."""
        ...


def sphere_silhouette(pose: CameraPose, resolution, center: Vec3, radius: float,
                      color, background) -> np.ndarray:
    """(h, w, 3) image: `color` where the pixel ray hits the sphere, else
    `background`.  Used as an analytic, view-consistent optimization target.

    `resolution` is a (width, height) pair or a single int for a square image."""
    if np.isscalar(resolution):
        resolution = (int(resolution), int(resolution))
    rays = generate_camera_rays(pose, resolution)
    oc = rays.origins - center.to_array()[None, :]  # (N, 3)
    b = (oc * rays.directions).sum(axis=-1)
    c = (oc ** 2).sum(axis=-1) - radius * radius
    disc = b * b - c  # directions are unit length
    hit = (disc >= 0.0) & (-b + np.sqrt(np.maximum(disc, 0.0)) > 0.0)
    img = np.where(
        hit[:, None],
        np.asarray(color, dtype=float)[None, :],
        np.asarray(background, dtype=float)[None, :],
    )
    return img.reshape(rays.height, rays.width, 3)


class SyntheticDenoiserOracle:
    """Deterministic stand-in for diffusion guidance.

    The denoiser is modeled as predicted_noise = true_noise + kappa * (image
    - target), so the guidance gradient collapses to w(t) * kappa * (image -
    target) with no noise term.  Timesteps are drawn uniformly from
    timestep_range and only enter through w(t) (constant 1 by default).
    The loss estimate reported alongside is the mean squared error to the
    target.
    """

    def __init__(self, targets: dict, kappa: float, weight_fn=None,
                 timestep_range=(0.02, 0.98), seed: int = 0):
        if kappa <= 0.0:
            raise ValueError("kappa must be positive")
        self.targets = {k: np.asarray(v, dtype=float) for k, v in targets.items()}
        for k, v in self.targets.items():
            if np.any(v < 0.0) or np.any(v > 1.0):
                raise ValueError(f"target for object {k} has values outside [0, 1]")
        self.kappa = kappa
        self.weight_fn = weight_fn or (lambda t: 1.0)
        self.timestep_range = timestep_range
        self.rng = np.random.default_rng(seed)

    def gradient_of(self, image: RenderedImage, object_id: int):
        target = self.targets[object_id]
        if target.shape != image.rgb.shape:
            raise ValueError(
                f"target shape {target.shape} does not match render {image.rgb.shape}"
            )
        t = self.rng.uniform(*self.timestep_range)
        diff = image.rgb - target
        cotangent = self.weight_fn(t) * self.kappa * diff
        loss = float(np.mean(diff ** 2))
        return cotangent, loss


def reconstruction_loss(i_inv: RenderedImage, i_ref: RenderedImage):
    """Mean absolute rgb error and its cotangent wrt the first image."""
    if i_inv.rgb.shape != i_ref.rgb.shape:
        raise ValueError(
            f"resolution mismatch: {i_inv.rgb.shape} vs {i_ref.rgb.shape}"
        )
    diff = i_inv.rgb - i_ref.rgb
    loss = float(np.mean(np.abs(diff)))
    cotangent = np.sign(diff) / diff.size
    return loss, cotangent


@dataclass(frozen=True)
class OptimizerConfig:
    """Training-loop knobs.  rays_per_object_per_step must be a perfect
    square; each per-object render is that many pixels."""

    steps: int = 10000
    lr: float = 0.05
    alpha: float = 0.3
    rays_per_object_per_step: int = 4096
    seed: int = 0
    clip_objects: bool = True  # off: per-object passes render unclipped
    render: RenderConfig = dc_field(default_factory=RenderConfig)
    camera: CameraSamplerConfig = dc_field(default_factory=CameraSamplerConfig)
    checkpoint_every: int = 500
    metrics_every: int = 50
    probe_views: int = 4
    probe_resolution: int = 32

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.alpha < 0.0:
            raise ValueError("alpha must be >= 0")
        side = math.isqrt(self.rays_per_object_per_step)
        if side * side != self.rays_per_object_per_step:
            raise ValueError(
                f"rays_per_object_per_step must be a perfect square, got "
                f"{self.rays_per_object_per_step}"
            )

    @property
    def image_side(self) -> int:
        return math.isqrt(self.rays_per_object_per_step)


@dataclass
class SceneState:
    """Trainable field + grid, the immutable frozen reference, and the layout."""

    field: VoxelField
    grid: OccupancyGrid
    layout: SceneLayout
    step: int = 0
    frozen_field: VoxelField | None = None
    frozen_grid: OccupancyGrid | None = None
    adam: AdamState | None = None

    def boxes(self):
        return self.layout.world_boxes()

    def scene_bounds(self) -> Aabb:
        return union_bounds(self.boxes())

    @property
    def frozen(self) -> bool:
        return self.frozen_field is not None


def make_scene_state(
    layout: SceneLayout,
    field_resolution: int = 64,
    occupancy: OccupancyConfig = OccupancyConfig(),
    bias: DensityBiasConfig = DensityBiasConfig(),
    init: str = "object-centric",
    base_field: VoxelField | None = None,
) -> SceneState:
    """Build the trainable side of a scene (not yet frozen).

    With base_field (placement into an existing scene) the object bias is
    blended in only inside its support; otherwise a fresh field is seeded
    with the requested bias.
    """
    boxes = layout.world_boxes()
    if base_field is not None:
        field = base_field.copy()
        blend_object_bias(field, boxes, bias)
    else:
        field = VoxelField(field_resolution)
        if init == "object-centric":
            init_object_centric_bias(field, boxes, bias)
        elif init == "uni-sphere":
            init_uni_sphere_bias(field, bias)
        else:
            raise ValueError(f"unknown init {init!r} (object-centric | uni-sphere)")
    grid = OccupancyGrid(occupancy)
    update_occupancy(grid, field)
    return SceneState(field=field, grid=grid, layout=layout)


def void_field(resolution: int) -> VoxelField:
    """A field whose density sits at the floor everywhere: renders nothing."""
    f = VoxelField(resolution)
    f.density.fill(inv_softplus(SIGMA_FLOOR))
    return f


def freeze_scene(state: SceneState, reference_field: VoxelField | None = None,
                 reference_grid: OccupancyGrid | None = None):
    """Fix the immutable reference the preservation loss compares against.

    Without a reference the frozen scene is void — an empty occupancy grid
    over a floor-density field, rendering pure background — which is the
    right reference for generation from scratch.  For placement, pass the
    loaded pre-trained field (before any object bias was blended in).
    """
    if state.frozen:
        raise FrozenSceneError("scene is already frozen")
    if reference_field is None:
        field = void_field(state.field.resolution)
        grid = OccupancyGrid(state.grid.config)  # all cells clear
    else:
        field = reference_field.copy()
        if reference_grid is not None:
            grid = OccupancyGrid(reference_grid.config)
            grid.bits = reference_grid.bits.copy()
        else:
            grid = OccupancyGrid(state.grid.config)
            update_occupancy(grid, field)
    state.frozen_field = field
    state.frozen_grid = grid


@dataclass(frozen=True)
class LossReport:
    step: int
    per_object: tuple
    rec_loss: float
    grad_norm: float
    alpha: float

    @property
    def total(self) -> float:
        return sum(self.per_object) + self.alpha * self.rec_loss


def _child_rng_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2 ** 63 - 1))


def training_step(state: SceneState, oracle, cfg: OptimizerConfig,
                  rng: np.random.Generator) -> LossReport:
    """One update: per-object guidance passes, the preservation pass, Adam,
    and the occupancy refresh.

    All random draws happen on the calling thread in a fixed order (poses
    first, then one depth-jitter seed per render pass), so the step is a
    pure function of the generator state regardless of render workers.
    """
    if not state.frozen:
        raise FrozenSceneError("freeze_scene must run before training")
    if state.adam is None:
        state.adam = AdamState(state.field)
    boxes = state.boxes()
    scene_box = state.scene_bounds()
    side = cfg.image_side
    grad = FieldGradient(state.field.resolution)

    per_object = []
    for i, box in enumerate(boxes):
        pose = sample_object_centric_pose(rng, scene_box, box, cfg.camera)
        seed = _child_rng_seed(rng)
        rays = generate_camera_rays(pose, (side, side))
        if cfg.clip_objects:
            image = render_clipped(state.field, state.grid, rays, box, cfg.render,
                                   np.random.default_rng(seed))
        else:
            image = render_full(state.field, state.grid, rays, cfg.render,
                                np.random.default_rng(seed))
        try:
            cotangent, loss = oracle.gradient_of(image, i)
        except Exception as exc:
            raise GuidanceError(i, str(exc)) from exc
        cotangent = np.asarray(cotangent, dtype=float)
        if cotangent.shape != image.rgb.shape or not np.all(np.isfinite(cotangent)):
            raise GuidanceError(i, "oracle cotangent has wrong shape or non-finite values")
        if cfg.clip_objects:
            render_clipped_backward(state.field, state.grid, rays, box, cfg.render,
                                    cotangent, grad, np.random.default_rng(seed))
        else:
            render_full_backward(state.field, state.grid, rays, cfg.render,
                                 cotangent, grad, np.random.default_rng(seed))
        per_object.append(float(loss))

    rec_loss = 0.0
    if cfg.alpha > 0.0:
        pose = sample_base_pose(rng, scene_box, cfg.camera)
        seed = _child_rng_seed(rng)
        rays = generate_camera_rays(pose, (side, side))
        i_inv = render_inverse_clipped(state.field, state.grid, rays, boxes,
                                       cfg.render, np.random.default_rng(seed))
        i_ref = render_full(state.frozen_field, state.frozen_grid, rays, cfg.render,
                            np.random.default_rng(seed))
        rec_loss, cotangent = reconstruction_loss(i_inv, i_ref)
        render_inverse_clipped_backward(state.field, state.grid, rays, boxes,
                                        cfg.render, cfg.alpha * cotangent, grad,
                                        np.random.default_rng(seed))

    apply_update(state.field, grad, state.adam, cfg.lr)
    state.step += 1
    if should_update(state.step, state.grid.config):
        update_occupancy(state.grid, state.field)
    return LossReport(step=state.step, per_object=tuple(per_object),
                      rec_loss=rec_loss, grad_norm=grad.norm(), alpha=cfg.alpha)


def outside_box_opacity(state: SceneState, n_probe_views: int = 4,
                        render_cfg: RenderConfig | None = None,
                        resolution: int = 32) -> float:
    """Mean opacity the trainable field adds outside all boxes, relative to
    the frozen reference, over a deterministic turntable of probe views."""
    if n_probe_views < 1:
        raise ValueError("need at least one probe view")
    if not state.frozen:
        raise FrozenSceneError("freeze_scene must run before probing")
    cfg = render_cfg or RenderConfig(samples_per_ray=64)
    boxes = state.boxes()
    poses = turntable_poses(n_probe_views, center=state.scene_bounds().center)
    acc = 0.0
    for pose in poses:
        rays = generate_camera_rays(pose, (resolution, resolution))
        live = render_inverse_clipped(state.field, state.grid, rays, boxes, cfg)
        ref = render_inverse_clipped(state.frozen_field, state.frozen_grid, rays,
                                     boxes, cfg)
        acc += float(np.mean(live.opacity - ref.opacity))
    return acc / n_probe_views


def _metric_record(state, cfg, report: LossReport) -> dict:
    return {
        "step": report.step,
        "per_object_loss": list(report.per_object),
        "rec_loss": report.rec_loss,
        "total": report.total,
        "grad_norm": report.grad_norm,
        "outside_box_opacity": outside_box_opacity(
            state, cfg.probe_views, resolution=cfg.probe_resolution
        ),
    }


def run_generation(state: SceneState, oracle, cfg: OptimizerConfig,
                   out_dir=None) -> tuple:
    """Drive cfg.steps training steps; returns (state, metric records).

    With out_dir set, metrics stream to metrics.ndjson (one JSON object per
    line) and scene checkpoints land in checkpoints/ every
    cfg.checkpoint_every steps and at the end.
    """
    rng = np.random.default_rng(cfg.seed)
    metrics = []
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
        metrics_fh = open(out / "metrics.ndjson", "w", encoding="utf-8")
    try:
        for k in range(cfg.steps):
            report = training_step(state, oracle, cfg, rng)
            if k == 0 and report.grad_norm == 0.0:
                _warnings.warn(
                    "zero gradient at the first step: no occupied cell meets any "
                    "object box's clipped samples, so nothing can optimize; "
                    "object-centric density bias seeds density inside the boxes",
                    RuntimeWarning,
                    stacklevel=2,
                )
            if k % cfg.metrics_every == 0 or k == cfg.steps - 1:
                record = _metric_record(state, cfg, report)
                metrics.append(record)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
                    metrics_fh.flush()
            if out is not None and cfg.checkpoint_every > 0 and (
                (k + 1) % cfg.checkpoint_every == 0 or k == cfg.steps - 1
            ):
                save_scene_checkpoint(
                    out / "checkpoints" / f"step_{state.step:06d}.bxs",
                    state,
                    extra={"lr": cfg.lr, "alpha": cfg.alpha, "seed": cfg.seed},
                )
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return state, metrics


# --- checkpoints ---------------------------------------------------------


def save_scene_checkpoint(path, state: SceneState, extra: dict | None = None):
    """Field block + occupancy block in one file, scalar optimizer state in a
    JSON sidecar next to it."""
    path = Path(path)
    with open(path, "wb") as fh:
        write_field_block(fh, state.field)
        write_occupancy_block(fh, state.grid)
    sidecar = {"step": state.step}
    if state.adam is not None:
        sidecar["adam"] = {
            "t": state.adam.t,
            "beta1": state.adam.beta1,
            "beta2": state.adam.beta2,
            "eps": state.adam.eps,
        }
    if extra:
        sidecar.update(extra)
    path.with_suffix(".json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def load_scene_checkpoint(path):
    """-> (field, grid, sidecar dict or None)."""
    path = Path(path)
    with open(path, "rb") as fh:
        field = read_field_block(fh)
        grid = read_occupancy_block(fh)
    sidecar_path = path.with_suffix(".json")
    sidecar = None
    if sidecar_path.exists():
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    return field, grid, sidecar


def sphere_targets_for_layout(
    layout: SceneLayout,
    resolution,
    camera: CameraSamplerConfig,
    radius_scale: float = 0.7,
    color=(0.9, 0.9, 0.9),
    background=(0.0, 0.0, 0.0),
    distance: float | None = None,
) -> dict:
    """Analytic sphere-silhouette target per object, keyed by object index.

    Each sphere sits at its box center with radius = radius_scale * the
    smallest half-extent, viewed from the given distance (default: middle of
    the camera's range).  A centered sphere looks the same from every
    direction at fixed distance, so one target per object serves all sampled
    poses; pin the camera distance range to a single value when exact
    view-consistency matters.
    """
    if distance is None:
        distance = 0.5 * (camera.distance_range[0] + camera.distance_range[1])
    targets = {}
    for i, box in enumerate(layout.world_boxes()):
        c = box.center
        pose = CameraPose(
            position=c + Vec3(distance, 0.0, 0.0), look_at=c, fov_y=camera.fov_y
        )
        he = box.half_extent
        radius = radius_scale * min(he.x, he.y, he.z)
        targets[i] = sphere_silhouette(pose, resolution, c, radius, color, background)
    return targets


# --- ablation grid -------------------------------------------------------

ABLATION_ROWS = (
    ("none", False, False, False),
    ("crs", True, False, False),
    ("ocdb", False, True, False),
    ("crs+ocdb", True, True, False),
    ("crs+ocdb+sp", True, True, True),
)


def run_ablation_grid(
    layout: SceneLayout,
    make_oracle,
    cfg: OptimizerConfig,
    field_resolution: int = 48,
    occupancy: OccupancyConfig = OccupancyConfig(),
    bias: DensityBiasConfig = DensityBiasConfig(),
) -> list:
    """Run the five clip/bias/preservation configurations on one scenario.

    Each row starts from a fresh state and a fresh oracle (make_oracle() is
    called per row); rows differ only in the three toggles.  Returns one
    dict per row with the first-step gradient norm, final mean target loss,
    and final outside-box opacity.
    """
    results = []
    for name, crs, ocdb, sp in ABLATION_ROWS:
        row_cfg = replace(cfg, clip_objects=crs, alpha=cfg.alpha if sp else 0.0)
        state = make_scene_state(
            layout,
            field_resolution=field_resolution,
            occupancy=occupancy,
            bias=bias,
            init="object-centric" if ocdb else "uni-sphere",
        )
        freeze_scene(state)
        with _warnings.catch_warnings():
            _warnings.simplefilter("ignore", RuntimeWarning)
            state, metrics = run_generation(state, make_oracle(), row_cfg)
        first, last = metrics[0], metrics[-1]
        results.append({
            "name": name,
            "crs": crs,
            "ocdb": ocdb,
            "sp": sp,
            "grad_norm_step1": first["grad_norm"],
            "final_target_loss": float(np.mean(last["per_object_loss"])),
            "final_outside_box_opacity": last["outside_box_opacity"],
        })
    return results
