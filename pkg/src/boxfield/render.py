"""Volume rendering along camera rays.

Depth sampling with occupancy-based skipping, emission-absorption
compositing, and three render modes: full, clipped to a box (only samples
strictly inside the box's depth interval touch the field), and
inverse-clipped (only samples outside every box's interval do).  Each mode
has an exact adjoint that scatters image cotangents into a FieldGradient.

Conventions, fixed across the package:
  * transmittance is the exclusive prefix T_i = exp(-sum_{j<i} sigma_j d_j),
    which makes the compositing weights a partition of unity together with
    the final transmittance; an inclusive variant (the sum running through
    j = i) is kept behind a flag for comparison only,
  * the last depth interval is delta_m = far - t_m,
  * samples landing in unoccupied cells are dropped from the depth
    sequence, so the surviving deltas span the gaps.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
from PIL import Image

from .field import FieldGradient, VoxelField, accumulate_gradient_batch, sigmoid, softplus
from .geometry import Aabb, RayBatch, Vec3, slab_entry_exit
from .occupancy import OccupancyGrid

RAW_MAGIC = b"BXR1"


@dataclass(frozen=True)
class RenderConfig:
    """Knobs for one render pass.

    tile_size and workers only affect scheduling: rays are processed in
    fixed tiles and reduced in tile order, so results are bitwise
    independent of the worker count.
    """

    samples_per_ray: int = 128
    near: float = 0.05
    far: float = 6.0
    background: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    stratified: bool = False
    inclusive_transmittance: bool = False
    tile_size: int = 4096
    workers: int = 1

    def __post_init__(self):
        if self.samples_per_ray < 1:
            raise ValueError("samples_per_ray must be >= 1")
        if not self.near < self.far:
            raise ValueError(f"need near < far, got [{self.near}, {self.far}]")
        object.__setattr__(self, "background", np.asarray(self.background, dtype=float).reshape(3))
        if self.tile_size < 1 or self.workers < 1:
            raise ValueError("tile_size and workers must be >= 1")


@dataclass
class SampleSet:
    """Per-ray samples: sorted depths with (sigma, color, delta) each."""

    depths: np.ndarray  # (m,)
    sigma: np.ndarray  # (m,)
    color: np.ndarray  # (m, 3)
    delta: np.ndarray  # (m,)

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=float).reshape(-1)
        m = self.depths.shape[0]
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(m)
        self.color = np.asarray(self.color, dtype=float).reshape(m, 3)
        self.delta = np.asarray(self.delta, dtype=float).reshape(m)
        if m > 1 and not np.all(np.diff(self.depths) > 0):
            raise ValueError("depths must be strictly increasing")
        if np.any(self.delta < 0):
            raise ValueError("deltas must be nonnegative")

    @classmethod
    def from_depths(cls, depths, far: float, sigma, color) -> "SampleSet":
        """Build with the package delta convention: consecutive differences,
        last interval running to far."""
        depths = np.asarray(depths, dtype=float).reshape(-1)
        if depths.size == 0:
            z = np.zeros(0)
            return cls(z, z, np.zeros((0, 3)), z)
        delta = np.empty_like(depths)
        delta[:-1] = np.diff(depths)
        delta[-1] = far - depths[-1]
        return cls(depths, sigma, color, delta)


@dataclass
class RenderedImage:
    width: int
    height: int
    rgb: np.ndarray  # (h, w, 3) in [0, 1]
    opacity: np.ndarray  # (h, w) in [0, 1]

    def flat_rgb(self) -> np.ndarray:
        return self.rgb.reshape(-1, 3)


def depth_matrix(n_rays: int, cfg: RenderConfig, rng=None) -> np.ndarray:
    """(R, m) stratified (or bin-center) depths in [near, far).

    One uniform block is drawn up front so the depths do not depend on how
    rays are later tiled across workers.
    """
    m = cfg.samples_per_ray
    if cfg.stratified:
        if rng is None:
            raise ValueError("stratified sampling requires an rng")
        u = rng.random((n_rays, m))
    else:
        u = np.full((n_rays, m), 0.5)
    span = cfg.far - cfg.near
    return cfg.near + span * (np.arange(m)[None, :] + u) / m


def respan_deltas(t: np.ndarray, keep: np.ndarray, far: float) -> np.ndarray:
    """Deltas for the kept subsequence, embedded in the full (R, m) matrix.

    Kept entry i gets the distance to the next kept depth (or to far for the
    last kept one); dropped entries get 0, which together with sigma = 0
    makes them inert in the composite.
    """
    n_rays = t.shape[0]
    nxt = np.where(keep, t, np.inf)[:, ::-1]
    nxt = np.minimum.accumulate(nxt, axis=1)[:, ::-1]  # first kept depth at >= i
    nxt = np.concatenate([nxt[:, 1:], np.full((n_rays, 1), np.inf)], axis=1)
    nxt = np.where(np.isinf(nxt), far, nxt)
    return np.where(keep, nxt - t, 0.0)


def composite_rays(
    sigma: np.ndarray,
    delta: np.ndarray,
    color: np.ndarray,
    background: np.ndarray,
    inclusive_transmittance: bool = False,
):
    """Emission-absorption compositing over (R, m) sample matrices.

    Returns (rgb (R, 3), opacity (R,), weights (R, m), T_final (R,)).
    """
    tau = sigma * delta  # (R, m)
    cum = np.cumsum(tau, axis=1)
    alpha = -np.expm1(-tau)
    if inclusive_transmittance:
        trans = np.exp(-cum)
    else:
        trans = np.exp(-(cum - tau))
    weights = trans * alpha
    if tau.shape[1] == 0:
        t_final = np.ones(tau.shape[0])
    else:
        t_final = np.exp(-cum[:, -1])
    rgb = (weights[..., None] * color).sum(axis=1) + t_final[:, None] * background[None, :]
    opacity = 1.0 - t_final
    return rgb, opacity, weights, t_final


def composite(samples: SampleSet, background, inclusive_transmittance: bool = False):
    """Single-ray compositing -> (color (3,), opacity)."""
    bg = background.to_array() if isinstance(background, Vec3) else np.asarray(background, dtype=float)
    if samples.depths.size == 0:
        return bg.copy(), 0.0
    rgb, opacity, _, _ = composite_rays(
        samples.sigma[None, :],
        samples.delta[None, :],
        samples.color[None, :, :],
        bg,
        inclusive_transmittance,
    )
    return rgb[0], float(opacity[0])


def _occupancy_keep(grid: OccupancyGrid | None, pts: np.ndarray) -> np.ndarray:
    """(R, m) bool: sequence membership.  Without a grid all samples stay."""
    n_rays, m = pts.shape[:2]
    if grid is None:
        return np.ones((n_rays, m), dtype=bool)
    return grid.occupied_at(pts.reshape(-1, 3)).reshape(n_rays, m)


def sample_depths(ray, cfg: RenderConfig, grid: OccupancyGrid | None = None, rng=None) -> np.ndarray:
    """Depths for one ray, with unoccupied positions dropped (not redrawn)."""
    t = depth_matrix(1, cfg, rng)
    pts = ray.origin.to_array()[None, None, :] + t[..., None] * ray.direction.to_array()[None, None, :]
    keep = _occupancy_keep(grid, pts)
    return t[keep]


def _box_interval_mask(origins, dirs, t, box: Aabb) -> np.ndarray:
    """(R, m) bool: strictly inside the box's depth interval (open at both ends)."""
    t_entry, t_exit, hit = slab_entry_exit(origins, dirs, box)
    return hit[:, None] & (t > t_entry[:, None]) & (t < t_exit[:, None])


def _outside_boxes_mask(origins, dirs, t, boxes) -> np.ndarray:
    """(R, m) bool: outside every box's interval (t < entry or t > exit for all)."""
    keep = np.ones(t.shape, dtype=bool)
    for box in boxes:
        t_entry, t_exit, hit = slab_entry_exit(origins, dirs, box)
        inside = hit[:, None] & (t >= t_entry[:, None]) & (t <= t_exit[:, None])
        keep &= ~inside
    return keep


def _clip_mask(mode: str, origins, dirs, t, boxes) -> np.ndarray:
    if mode == "full":
        return np.ones(t.shape, dtype=bool)
    if mode == "clipped":
        return _box_interval_mask(origins, dirs, t, boxes[0])
    if mode == "inverse":
        return _outside_boxes_mask(origins, dirs, t, boxes)
    raise ValueError(f"unknown render mode {mode!r}")


def _render_tile(field, grid, origins, dirs, t, cfg, mode, boxes):
    """Forward pass for one ray tile; returns intermediates for the adjoint.

    Field queries happen only where both the occupancy bit and the clip mask
    allow them; everything else contributes (sigma, color) = (0, 0).
    """
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]  # (R, m, 3)
    occ = _occupancy_keep(grid, pts)
    delta = respan_deltas(t, occ, cfg.far)
    qmask = occ & _clip_mask(mode, origins, dirs, t, boxes)
    n_rays, m = t.shape
    sigma = np.zeros((n_rays, m))
    color = np.zeros((n_rays, m, 3))
    if np.any(qmask):
        s, c = field.query_batch(pts[qmask])
        sigma[qmask] = s
        color[qmask] = c
    rgb, opacity, weights, t_final = composite_rays(
        sigma, delta, color, cfg.background, cfg.inclusive_transmittance
    )
    return {
        "pts": pts,
        "delta": delta,
        "qmask": qmask,
        "sigma": sigma,
        "color": color,
        "rgb": rgb,
        "opacity": opacity,
        "weights": weights,
        "t_final": t_final,
    }


def _backward_tile(field, fwd, d_rgb, cfg, grad_out: FieldGradient):
    """Adjoint of _render_tile for the rgb output.

    d tau_i = <g, c_i> T_i e^{-tau_i}  -  sum_{j>i} <g, c_j> w_j  -  <g, bg> T_final
    d sigma_i = d tau_i * delta_i (scattered only through queried samples),
    d color_i = w_i * g.
    """
    if cfg.inclusive_transmittance:
        raise ValueError("adjoint is defined for the exclusive transmittance convention only")
    delta, qmask = fwd["delta"], fwd["qmask"]
    sigma, color, weights, t_final = fwd["sigma"], fwd["color"], fwd["weights"], fwd["t_final"]
    tau = sigma * delta
    cum = np.cumsum(tau, axis=1)
    trans = np.exp(-(cum - tau))

    a = (d_rgb[:, None, :] * color).sum(axis=-1)  # (R, m): <g, c_i>
    aw = a * weights
    # suffix sum over j > i
    suffix = np.cumsum(aw[:, ::-1], axis=1)[:, ::-1]
    suffix = np.concatenate([suffix[:, 1:], np.zeros((aw.shape[0], 1))], axis=1)
    g_bg = (d_rgb * cfg.background[None, :]).sum(axis=-1)  # (R,)
    d_tau = a * trans * np.exp(-tau) - suffix - g_bg[:, None] * t_final[:, None]
    d_sigma = d_tau * delta
    d_color = weights[..., None] * d_rgb[:, None, :]

    if np.any(qmask):
        accumulate_gradient_batch(
            field, grad_out, fwd["pts"][qmask], d_sigma[qmask], d_color[qmask]
        )


def _tiles(n_rays: int, tile_size: int):
    return [(a, min(a + tile_size, n_rays)) for a in range(0, n_rays, tile_size)]


def _run_render(field, grid, rays: RayBatch, cfg: RenderConfig, mode, boxes, rng=None,
                d_image=None, grad: FieldGradient | None = None) -> RenderedImage:
    """Shared driver: forward over fixed tiles, optional adjoint.

    Per-tile partial gradients are reduced into `grad` in tile order after
    all tiles finish, so the result is independent of the worker count.
    """
    n_rays = rays.origins.shape[0]
    t = depth_matrix(n_rays, cfg, rng)
    rgb = np.zeros((n_rays, 3))
    opacity = np.zeros(n_rays)
    want_grad = d_image is not None and grad is not None
    d_flat = d_image.reshape(n_rays, 3) if want_grad else None
    spans = _tiles(n_rays, cfg.tile_size)
    partials = [None] * len(spans)

    def work(idx):
        a, b = spans[idx]
        fwd = _render_tile(field, grid, rays.origins[a:b], rays.directions[a:b], t[a:b], cfg, mode, boxes)
        rgb[a:b] = fwd["rgb"]
        opacity[a:b] = fwd["opacity"]
        if want_grad:
            part = FieldGradient(field.resolution)
            _backward_tile(field, fwd, d_flat[a:b], cfg, part)
            partials[idx] = part

    if cfg.workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            list(pool.map(work, range(len(spans))))
    else:
        for idx in range(len(spans)):
            work(idx)

    if want_grad:
        for part in partials:  # fixed tile order: bitwise worker independence
            if part is not None:
                grad.add_(part)

    h, w = rays.height, rays.width
    return RenderedImage(width=w, height=h, rgb=rgb.reshape(h, w, 3), opacity=opacity.reshape(h, w))


def render_full(field, grid, rays, cfg, rng=None) -> RenderedImage:
    """Render every occupied sample along each ray."""
    return _run_render(field, grid, rays, cfg, "full", (), rng)


def render_clipped(field, grid, rays, box: Aabb, cfg, rng=None) -> RenderedImage:
    """Render only samples strictly inside the box's depth interval; rays
    missing the box come out as pure background with opacity 0."""
    return _run_render(field, grid, rays, cfg, "clipped", (box,), rng)


def render_inverse_clipped(field, grid, rays, boxes, cfg, rng=None) -> RenderedImage:
    """Render only samples outside every box's depth interval."""
    return _run_render(field, grid, rays, cfg, "inverse", tuple(boxes), rng)


def render_full_backward(field, grid, rays, cfg, d_image, grad, rng=None) -> RenderedImage:
    """Forward render plus exact adjoint of the rgb output into grad."""
    return _run_render(field, grid, rays, cfg, "full", (), rng, d_image, grad)


def render_clipped_backward(field, grid, rays, box, cfg, d_image, grad, rng=None) -> RenderedImage:
    """Adjoint of render_clipped; clipped-out samples receive zero cotangent."""
    return _run_render(field, grid, rays, cfg, "clipped", (box,), rng, d_image, grad)


def render_inverse_clipped_backward(field, grid, rays, boxes, cfg, d_image, grad, rng=None) -> RenderedImage:
    """Adjoint of render_inverse_clipped."""
    return _run_render(field, grid, rays, cfg, "inverse", tuple(boxes), rng, d_image, grad)


def merged_preview(field, grid, rays, boxes, cfg, rng=None) -> RenderedImage:
    """Union-clipped preview: samples inside any box contribute.

    Output-image convenience only; training always uses the per-box and
    inverse modes above.
    """
    n_rays = rays.origins.shape[0]
    t = depth_matrix(n_rays, cfg, rng)
    union = np.zeros(t.shape, dtype=bool)
    for box in boxes:
        union |= _box_interval_mask(rays.origins, rays.directions, t, box)
    pts = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    occ = _occupancy_keep(grid, pts)
    delta = respan_deltas(t, occ, cfg.far)
    qmask = occ & union
    sigma = np.zeros(t.shape)
    color = np.zeros(t.shape + (3,))
    if np.any(qmask):
        s, c = field.query_batch(pts[qmask])
        sigma[qmask] = s
        color[qmask] = c
    rgb, opacity, _, _ = composite_rays(sigma, delta, color, cfg.background, cfg.inclusive_transmittance)
    h, w = rays.height, rays.width
    return RenderedImage(width=w, height=h, rgb=rgb.reshape(h, w, 3), opacity=opacity.reshape(h, w))


# --- image files ---------------------------------------------------------


def quantize_u8(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(image: RenderedImage, path):
    Image.fromarray(quantize_u8(image.rgb), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """(h, w, 3) floats in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_raw(image: RenderedImage, path):
    """Raw float dump: 16-byte header (magic, width, height, channels) then
    little-endian float32, row-major, rgb + opacity as 4 channels."""
    data = np.concatenate([image.rgb, image.opacity[..., None]], axis=-1)
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<III", image.width, image.height, 4))
        fh.write(data.astype("<f4").tobytes(order="C"))


def load_raw(path) -> RenderedImage:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != RAW_MAGIC:
            raise ValueError(f"bad raw-image magic {magic!r}")
        w, h, channels = struct.unpack("<III", fh.read(12))
        if channels != 4:
            raise ValueError(f"unsupported channel count {channels}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != w * h * 4:
        raise ValueError("truncated raw image payload")
    data = data.reshape(h, w, 4).astype(np.float64)
    return RenderedImage(width=w, height=h, rgb=data[..., :3], opacity=data[..., 3])
