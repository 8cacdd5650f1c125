"""Vectors, rays, axis-aligned boxes, cameras, and pose sampling.

World space is the cube [-1, 1]^3.  Layout space is the integer cube
[0, 512]^3 used by the layout generator; ``aabb_from_layout`` maps between
the two.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LAYOUT_EXTENT = 512


class LayoutBoxError(ValueError):
    """A layout box violates the [0, 512]^3 / positive-size contract."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass(frozen=True)
class Vec3:
    """3D point or direction in world units."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise ValueError(f"non-finite Vec3 components ({self.x}, {self.y}, {self.z})")

    @staticmethod
    def from_array(a) -> "Vec3":
        a = np.asarray(a, dtype=float)
        return Vec3(float(a[0]), float(a[1]), float(a[2]))

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    def __add__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x + other.x, self.y + other.y, self.z + other.z)

    def __sub__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x - other.x, self.y - other.y, self.z - other.z)

    def __mul__(self, s: float) -> "Vec3":
        return Vec3(self.x * s, self.y * s, self.z * s)

    __rmul__ = __mul__

    def dot(self, other: "Vec3") -> float:
        return self.x * other.x + self.y * other.y + self.z * other.z

    def cross(self, other: "Vec3") -> "Vec3":
        return Vec3(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )

    def norm(self) -> float:
        return math.sqrt(self.dot(self))

    def normalized(self) -> "Vec3":
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize zero vector")
        return Vec3(self.x / n, self.y / n, self.z / n)


@dataclass(frozen=True)
class Ray:
    """Ray o + t*d with unit-length direction."""

    origin: Vec3
    direction: Vec3

    def __post_init__(self):
        n = self.direction.norm()
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, got |d| = {n}")

    @staticmethod
    def through(origin: Vec3, target: Vec3) -> "Ray":
        return Ray(origin, (target - origin).normalized())

    def at(self, t: float) -> Vec3:
        return self.origin + self.direction * t


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box with strictly positive volume."""

    min_corner: Vec3
    max_corner: Vec3

    def __post_init__(self):
        lo, hi = self.min_corner, self.max_corner
        if not (lo.x < hi.x and lo.y < hi.y and lo.z < hi.z):
            raise ValueError(f"degenerate box: min {lo} must be < max {hi} componentwise")

    @staticmethod
    def from_center_size(center: Vec3, size: Vec3) -> "Aabb":
        h = size * 0.5
        return Aabb(center - h, center + h)

    @property
    def lo(self) -> np.ndarray:
        return self.min_corner.to_array()

    @property
    def hi(self) -> np.ndarray:
        return self.max_corner.to_array()

    @property
    def center(self) -> Vec3:
        return (self.min_corner + self.max_corner) * 0.5

    @property
    def size(self) -> Vec3:
        return self.max_corner - self.min_corner

    @property
    def half_extent(self) -> Vec3:
        return self.size * 0.5

    def volume(self) -> float:
        s = self.size
        return s.x * s.y * s.z

    def longest_side(self) -> float:
        s = self.size
        return max(s.x, s.y, s.z)

    def contains(self, p) -> bool:
        """Inclusive membership test; accepts a Vec3 or a length-3 array."""
        a = p.to_array() if isinstance(p, Vec3) else np.asarray(p, dtype=float)
        return bool(np.all(a >= self.lo) and np.all(a <= self.hi))

    def contains_points(self, pts: np.ndarray) -> np.ndarray:
        """Vectorized inclusive membership for an (..., 3) array of points."""
        pts = np.asarray(pts, dtype=float)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)

    def contains_box(self, other: "Aabb") -> bool:
        return bool(np.all(self.lo <= other.lo) and np.all(other.hi <= self.hi))

    def overlap_volume(self, other: "Aabb") -> float:
        ext = np.minimum(self.hi, other.hi) - np.maximum(self.lo, other.lo)
        if np.any(ext <= 0):
            return 0.0
        return float(np.prod(ext))


WORLD_BOX = Aabb(Vec3(-1.0, -1.0, -1.0), Vec3(1.0, 1.0, 1.0))


def union_bounds(boxes) -> Aabb:
    """Tightest box enclosing every box in a nonempty sequence."""
    boxes = list(boxes)
    if not boxes:
        raise ValueError("union_bounds needs at least one box")
    lo = np.min([b.lo for b in boxes], axis=0)
    hi = np.max([b.hi for b in boxes], axis=0)
    return Aabb(Vec3.from_array(lo), Vec3.from_array(hi))


def slab_entry_exit(origins: np.ndarray, dirs: np.ndarray, box: Aabb):
    """Raw slab intervals for a batch of rays against one box.

    Returns ``(t_entry, t_exit, hit)`` with shapes (N,), (N,), (N,).
    ``t_entry``/``t_exit`` are unclamped (may be negative); ``hit`` is True
    where the slab interval is nonempty.  Zero direction components are
    handled through IEEE infinities; the 0/0 NaN that arises when an origin
    sits exactly on a slab boundary is resolved as "inside the slab"
    (inclusive membership).
    """
    origins = np.asarray(origins, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (box.lo - origins) * inv  # (N, 3)
        t1 = (box.hi - origins) * inv
    lo_t = np.minimum(t0, t1)
    hi_t = np.maximum(t0, t1)
    # NaN guard: on-boundary origin with zero direction imposes no constraint.
    lo_t = np.where(np.isnan(lo_t), -np.inf, lo_t)
    hi_t = np.where(np.isnan(hi_t), np.inf, hi_t)
    t_entry = lo_t.max(axis=-1)
    t_exit = hi_t.min(axis=-1)
    hit = t_entry <= t_exit
    return t_entry, t_exit, hit


def ray_box_intersect(ray: Ray, box: Aabb):
    """Interval [t_entry, t_exit] where the ray is inside the box, or None.

    An origin inside the box clamps t_entry to 0 (rendering only marches
    forward).  A miss, or a box entirely behind the origin (t_exit <= 0),
    returns None.
    """
    t_entry, t_exit, hit = slab_entry_exit(
        ray.origin.to_array()[None, :], ray.direction.to_array()[None, :], box
    )
    if not hit[0] or t_exit[0] <= 0.0:
        return None
    return (max(float(t_entry[0]), 0.0), float(t_exit[0]))


def aabb_from_layout(box6, layout_extent: int = LAYOUT_EXTENT) -> Aabb:
    """Map an integer [x, y, z, depth, width, height] layout box to world space.

    Per axis: u_world = u_layout / (extent/2) - 1, so [0, 512]^3 maps onto
    [-1, 1]^3.  Raises LayoutBoxError naming the offending field.
    """
    names = ("x", "y", "z", "depth", "width", "height")
    if len(box6) != 6:
        raise LayoutBoxError("box", f"expected 6 values, got {len(box6)}")
    vals = []
    for name, v in zip(names, box6):
        if v != int(v):
            raise LayoutBoxError(name, f"must be an integer, got {v!r}")
        vals.append(int(v))
    x, y, z, d, w, h = vals
    for name, v in zip(names[3:], (d, w, h)):
        if v <= 0:
            raise LayoutBoxError(name, f"size must be positive, got {v}")
    for name, pos, size in zip(names[:3], (x, y, z), (d, w, h)):
        if pos < 0:
            raise LayoutBoxError(name, f"must be >= 0, got {pos}")
        if pos + size > layout_extent:
            raise LayoutBoxError(name, f"{pos} + {size} exceeds layout extent {layout_extent}")
    half = layout_extent / 2.0
    lo = Vec3(x / half - 1.0, y / half - 1.0, z / half - 1.0)
    size = Vec3(d / half, w / half, h / half)
    return Aabb(lo, Vec3(lo.x + size.x, lo.y + size.y, lo.z + size.z))


def layout_from_aabb(box: Aabb, layout_extent: int = LAYOUT_EXTENT):
    """Inverse of aabb_from_layout; exact for boxes produced by it."""
    half = layout_extent / 2.0
    lo = (box.lo + 1.0) * half
    size = (box.hi - box.lo) * half
    vals = [*lo, *size]
    out = [int(round(v)) for v in vals]
    return out


@dataclass(frozen=True)
class CameraPose:
    """Pinhole camera: position, look-at target, up hint, vertical FOV."""

    position: Vec3
    look_at: Vec3
    up: Vec3 = Vec3(0.0, 0.0, 1.0)
    fov_y: float = math.radians(50.0)

    def __post_init__(self):
        if (self.position - self.look_at).norm() == 0.0:
            raise ValueError("camera position must differ from look_at")
        if not (0.0 < self.fov_y < math.pi):
            raise ValueError(f"fov_y must lie in (0, pi), got {self.fov_y}")

    def basis(self):
        """Orthonormal (right, up, forward) camera frame."""
        fwd = (self.look_at - self.position).normalized()
        up_hint = self.up
        if fwd.cross(up_hint).norm() < 1e-8:
            up_hint = Vec3(0.0, 1.0, 0.0)
            if fwd.cross(up_hint).norm() < 1e-8:
                up_hint = Vec3(1.0, 0.0, 0.0)
        right = fwd.cross(up_hint).normalized()
        true_up = right.cross(fwd)
        return right, true_up, fwd


@dataclass(frozen=True)
class CameraSamplerConfig:
    """Spherical ranges for pose sampling plus the distance/size tradeoff beta."""

    beta: float = 1.0
    distance_range: tuple = (2.4, 3.2)
    elevation_range: tuple = (math.radians(-10.0), math.radians(45.0))
    azimuth_range: tuple = (0.0, 2.0 * math.pi)
    fov_y: float = math.radians(50.0)

    def __post_init__(self):
        if self.beta <= 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.distance_range[0] > self.distance_range[1]:
            raise ValueError(f"distance_range min > max: {self.distance_range}")


@dataclass
class RayBatch:
    """One ray per pixel in row-major order: index = row * width + col."""

    origins: np.ndarray  # (N, 3)
    directions: np.ndarray  # (N, 3), unit length
    width: int
    height: int

    def __len__(self) -> int:
        return self.origins.shape[0]


def generate_camera_rays(pose: CameraPose, resolution) -> RayBatch:
    """Pinhole rays through every pixel center, row-major, unit directions."""
    w, h = int(resolution[0]), int(resolution[1])
    if w < 1 or h < 1:
        raise ValueError(f"resolution must be >= 1x1, got {w}x{h}")
    right, up, fwd = pose.basis()
    tan_half = math.tan(pose.fov_y * 0.5)
    aspect = w / h
    # Pixel centers in NDC: x in (-1, 1) left to right, y in (-1, 1) top = +1.
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    ys = 1.0 - (np.arange(h) + 0.5) / h * 2.0
    gy, gx = np.meshgrid(ys, xs, indexing="ij")  # (h, w)
    dirs = (
        fwd.to_array()[None, None, :]
        + gx[..., None] * (tan_half * aspect) * right.to_array()[None, None, :]
        + gy[..., None] * tan_half * up.to_array()[None, None, :]
    )
    dirs = dirs.reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.position.to_array(), dirs.shape).copy()
    return RayBatch(origins=origins, directions=dirs, width=w, height=h)


def spherical_position(center: Vec3, azimuth: float, elevation: float, distance: float) -> Vec3:
    """Point at (azimuth, elevation, distance) around center; z is up."""
    ce = math.cos(elevation)
    return Vec3(
        center.x + distance * ce * math.cos(azimuth),
        center.y + distance * ce * math.sin(azimuth),
        center.z + distance * math.sin(elevation),
    )


def sample_base_pose(rng: np.random.Generator, scene_box: Aabb, cfg: CameraSamplerConfig) -> CameraPose:
    """Uniform draw from the configured spherical ranges around the scene center.

    Draw order is fixed (azimuth, elevation, distance) so results are a pure
    function of the generator state.
    """
    azimuth = rng.uniform(cfg.azimuth_range[0], cfg.azimuth_range[1])
    elevation = rng.uniform(cfg.elevation_range[0], cfg.elevation_range[1])
    distance = rng.uniform(cfg.distance_range[0], cfg.distance_range[1])
    center = scene_box.center
    pos = spherical_position(center, azimuth, elevation, distance)
    return CameraPose(position=pos, look_at=center, fov_y=cfg.fov_y)


def sample_object_centric_pose(
    rng: np.random.Generator,
    scene_box: Aabb,
    object_box: Aabb,
    cfg: CameraSamplerConfig,
) -> CameraPose:
    """Base pose recentered on one object and pulled closer for small boxes.

    The base pose is drawn around the scene center, then translated by
    d_center (object center minus scene center) plus d_scale, which moves the
    camera along (object center - scene center) in proportion to how much
    smaller the object's longest side is than the scene's:

        d_scale = (c_obj - c_scene) * (L_scene - L_obj) / (beta * L_scene)

    The look-at target becomes the object center.  With object_box equal to
    scene_box both offsets vanish and the base pose is returned unchanged.
    """
    base = sample_base_pose(rng, scene_box, cfg)
    c_obj = object_box.center
    c_scene = scene_box.center
    d_center = c_obj - c_scene
    l_scene = scene_box.longest_side()
    l_obj = object_box.longest_side()
    d_scale = (c_obj - c_scene) * ((l_scene - l_obj) / (cfg.beta * l_scene))
    offset = d_center + d_scale
    return CameraPose(
        position=base.position + offset,
        look_at=c_obj,
        up=base.up,
        fov_y=base.fov_y,
    )


def turntable_poses(
    n_views: int,
    center: Vec3 = Vec3(0.0, 0.0, 0.0),
    distance: float = 2.8,
    elevation: float = math.radians(15.0),
    fov_y: float = math.radians(50.0),
):
    """Evenly spaced azimuth ring at fixed elevation; deterministic."""
    poses = []
    for k in range(n_views):
        azimuth = 2.0 * math.pi * k / n_views
        pos = spherical_position(center, azimuth, elevation, distance)
        poses.append(CameraPose(position=pos, look_at=center, fov_y=fov_y))
    return poses
