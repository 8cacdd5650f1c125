"""Trainable voxel radiance field: density + color grids with trilinear
interpolation, analytic adjoints, density-bias initializers, and an Adam
update.

Grids store pre-activation values; queries interpolate raw values and then
apply softplus (density) and sigmoid (color).  Vertices span [-1, 1]^3
inclusive, ``res`` per axis.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .geometry import Aabb, Vec3

FIELD_MAGIC = b"BXF1"

# Post-activation density floor baked in outside bias support, small enough
# that occupancy thresholding (default 0.01) fully empties those cells.
SIGMA_FLOOR = 1e-4


class CheckpointError(ValueError):
    """Malformed or truncated field/scene checkpoint data."""


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def softplus_derivative(x):
    return sigmoid(x)


def inv_softplus(y):
    """x with softplus(x) = y, for y > 0.  Stable for both tails."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0.0):
        raise ValueError("inv_softplus requires positive input")
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_derivative(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def inv_sigmoid(y):
    """x with sigmoid(x) = y, for y strictly inside (0, 1)."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0.0) or np.any(y >= 1.0):
        raise ValueError("inv_sigmoid requires input in (0, 1)")
    return np.log(y) - np.log1p(-y)


@dataclass(frozen=True)
class FieldSample:
    """Post-activation (density, color) at one point."""

    sigma: float
    color: np.ndarray  # (3,), in [0, 1]


@dataclass(frozen=True)
class DensityBiasConfig:
    """Shape of the initial density blob.

    lambda_sigma is the peak post-activation density; s_sigma the
    dimensionless radius (uni-sphere: Gaussian std; object-centric: the
    normalized distance at which the ramp reaches zero).  With
    use_half_extent the per-box normalization divides by half-extents, so
    s_sigma = 1 exactly inscribes the box.
    """

    lambda_sigma: float = 10.0
    s_sigma: float = 0.5
    use_half_extent: bool = True

    def __post_init__(self):
        if self.lambda_sigma <= 0.0 or self.s_sigma <= 0.0:
            raise ValueError("lambda_sigma and s_sigma must be positive")


class VoxelField:
    """Dense voxel grid standing in for a neural radiance field.

    density: (res, res, res) raw values, softplus gives sigma >= 0.
    color:   (res, res, res, 3) raw values, sigmoid gives rgb in [0, 1].
    query_count tracks how many points have touched the grids (used by the
    gating-soundness tests).
    """

    def __init__(self, resolution: int = 64):
        if resolution < 2:
            raise ValueError(f"resolution must be >= 2, got {resolution}")
        self.resolution = int(resolution)
        self.density = np.zeros((resolution,) * 3, dtype=np.float64)
        self.color = np.zeros((resolution,) * 3 + (3,), dtype=np.float64)
        self.query_count = 0

    def copy(self) -> "VoxelField":
        out = VoxelField(self.resolution)
        out.density = self.density.copy()
        out.color = self.color.copy()
        return out

    def vertex_coords(self) -> np.ndarray:
        """Per-axis vertex positions, shape (res,), spanning [-1, 1]."""
        return np.linspace(-1.0, 1.0, self.resolution)

    def vertex_positions(self) -> np.ndarray:
        """All vertex positions as a (res, res, res, 3) array."""
        c = self.vertex_coords()
        gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def _interp_setup(self, pts: np.ndarray):
        """Shared trilinear machinery: corner indices, weights, domain mask."""
        pts = np.asarray(pts, dtype=float)
        res = self.resolution
        inside = np.all(np.abs(pts) <= 1.0, axis=-1)  # (N,)
        u = (pts + 1.0) * (0.5 * (res - 1))
        i0 = np.floor(u).astype(np.int64)
        np.clip(i0, 0, res - 2, out=i0)
        f = u - i0  # (N, 3) in [0, 1]
        return inside, i0, f

    @staticmethod
    def _corner_weights(f: np.ndarray) -> np.ndarray:
        """Trilinear weights for the 8 cell corners, shape (N, 8)."""
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        return np.stack(
            [
                gx * gy * gz,
                gx * gy * fz,
                gx * fy * gz,
                gx * fy * fz,
                fx * gy * gz,
                fx * gy * fz,
                fx * fy * gz,
                fx * fy * fz,
            ],
            axis=-1,
        )

    @staticmethod
    def _corner_indices(i0: np.ndarray) -> tuple:
        """Index arrays (ix, iy, iz) each (N, 8) matching _corner_weights order."""
        ox = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        oy = np.array([0, 0, 1, 1, 0, 0, 1, 1])
        oz = np.array([0, 1, 0, 1, 0, 1, 0, 1])
        return (
            i0[:, 0:1] + ox[None, :],
            i0[:, 1:2] + oy[None, :],
            i0[:, 2:3] + oz[None, :],
        )

    def raw_at(self, pts: np.ndarray):
        """Interpolated pre-activation (density, color) at (N, 3) points.

        Points outside [-1, 1]^3 report raw values of 0 but are flagged via
        the returned mask; callers decide whether to bypass activation.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        inside, i0, f = self._interp_setup(pts)
        w = self._corner_weights(f)  # (N, 8)
        ix, iy, iz = self._corner_indices(i0)
        d_corners = self.density[ix, iy, iz]  # (N, 8)
        c_corners = self.color[ix, iy, iz]  # (N, 8, 3)
        raw_d = (w * d_corners).sum(axis=1)
        raw_c = (w[..., None] * c_corners).sum(axis=1)
        self.query_count += int(pts.shape[0])
        return raw_d, raw_c, inside

    def query_batch(self, pts: np.ndarray, dirs=None):
        """Post-activation (sigma (N,), color (N, 3)); outside points give (0, black).

        The view direction is accepted for interface parity and ignored (the
        field is Lambertian).
        """
        raw_d, raw_c, inside = self.raw_at(pts)
        sigma = np.where(inside, softplus(raw_d), 0.0)
        color = np.where(inside[:, None], sigmoid(raw_c), 0.0)
        return sigma, color

    def query(self, x: Vec3, d: Vec3 | None = None) -> FieldSample:
        """Single-point field lookup."""
        sigma, color = self.query_batch(x.to_array()[None, :])
        return FieldSample(sigma=float(sigma[0]), color=color[0])


class FieldGradient:
    """Cotangent buffers congruent to a VoxelField's pre-activation grids."""

    def __init__(self, resolution: int):
        self.resolution = int(resolution)
        self.d_density = np.zeros((resolution,) * 3, dtype=np.float64)
        self.d_color = np.zeros((resolution,) * 3 + (3,), dtype=np.float64)

    @staticmethod
    def zeros_like(field: VoxelField) -> "FieldGradient":
        return FieldGradient(field.resolution)

    def zero_(self):
        self.d_density.fill(0.0)
        self.d_color.fill(0.0)

    def add_(self, other: "FieldGradient"):
        self.d_density += other.d_density
        self.d_color += other.d_color

    def max_abs(self) -> float:
        return max(float(np.abs(self.d_density).max()), float(np.abs(self.d_color).max()))

    def norm(self) -> float:
        return float(np.sqrt((self.d_density ** 2).sum() + (self.d_color ** 2).sum()))


def accumulate_gradient_batch(
    field: VoxelField,
    grad: FieldGradient,
    pts: np.ndarray,
    d_sigma: np.ndarray,
    d_color: np.ndarray,
):
    """Adjoint of query_batch: scatter post-activation cotangents onto vertices.

    Chains through the activation derivatives at the interpolated raw values,
    then distributes with the same trilinear weights the forward pass used.
    Out-of-domain points contribute nothing.  Scatter order is the flat point
    order, so results are deterministic for a fixed input ordering.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    n = pts.shape[0]
    if n == 0:
        return
    inside, i0, f = field._interp_setup(pts)
    w = field._corner_weights(f)  # (N, 8)
    ix, iy, iz = field._corner_indices(i0)

    raw_d = (w * field.density[ix, iy, iz]).sum(axis=1)
    raw_c = (w[..., None] * field.color[ix, iy, iz]).sum(axis=1)

    d_sigma = np.where(inside, np.asarray(d_sigma, dtype=float), 0.0)
    d_color = np.where(inside[:, None], np.asarray(d_color, dtype=float), 0.0)

    draw_d = d_sigma * softplus_derivative(raw_d)  # (N,)
    draw_c = d_color * sigmoid_derivative(raw_c)  # (N, 3)

    res = field.resolution
    flat = (ix * res + iy) * res + iz  # (N, 8)
    flat = flat.ravel()
    size = res ** 3
    grad.d_density += np.bincount(
        flat, weights=(w * draw_d[:, None]).ravel(), minlength=size
    ).reshape(grad.d_density.shape)
    for ch in range(3):
        grad.d_color[..., ch] += np.bincount(
            flat, weights=(w * draw_c[:, ch : ch + 1]).ravel(), minlength=size
        ).reshape((res, res, res))


def accumulate_gradient(field: VoxelField, grad: FieldGradient, x: Vec3, d_sigma: float, d_color):
    """Single-point adjoint, see accumulate_gradient_batch."""
    accumulate_gradient_batch(
        field,
        grad,
        x.to_array()[None, :],
        np.array([d_sigma], dtype=float),
        np.asarray(d_color, dtype=float)[None, :],
    )


def _bias_color_raw() -> float:
    return 0.0  # sigmoid(0) = 0.5, mid-gray


def _bake_density(field: VoxelField, sigma_init: np.ndarray):
    field.density = inv_softplus(np.maximum(sigma_init, SIGMA_FLOOR))


def init_uni_sphere_bias(field: VoxelField, cfg: DensityBiasConfig):
    """Center-peaked Gaussian density blob, baked into the raw grid.

    sigma(x) = lambda_sigma * exp(-|x|^2 / (2 s_sigma^2)), floored at
    SIGMA_FLOOR before inversion.  Color is set to mid-gray.
    """
    pos = field.vertex_positions()
    r2 = (pos ** 2).sum(axis=-1)
    sigma_init = cfg.lambda_sigma * np.exp(-r2 / (2.0 * cfg.s_sigma ** 2))
    _bake_density(field, sigma_init)
    field.color.fill(_bias_color_raw())


def object_bias_values(pts: np.ndarray, boxes, cfg: DensityBiasConfig) -> np.ndarray:
    """Raw object-centric bias max_i lambda*(1 - |(x-c_i)/l_i| / s_sigma), clamped at 0."""
    if len(boxes) == 0:
        raise ValueError("object-centric bias requires at least one box")
    pts = np.asarray(pts, dtype=float)
    best = np.full(pts.shape[:-1], -np.inf)
    for box in boxes:
        scale = box.half_extent if cfg.use_half_extent else box.size
        offset = (pts - box.center.to_array()) / scale.to_array()
        dist = np.sqrt((offset ** 2).sum(axis=-1))
        best = np.maximum(best, cfg.lambda_sigma * (1.0 - dist / cfg.s_sigma))
    return np.maximum(best, 0.0)


def init_object_centric_bias(field: VoxelField, boxes, cfg: DensityBiasConfig):
    """Per-box ellipsoidal density ramps, max-combined, baked into a fresh field.

    Each box contributes a linear ramp peaking at lambda_sigma at its center
    and reaching zero where the half-extent-normalized distance equals
    s_sigma; the ramp is clamped below at zero before flooring and baking.
    """
    pos = field.vertex_positions()
    sigma_init = object_bias_values(pos, boxes, cfg)
    _bake_density(field, sigma_init)
    field.color.fill(_bias_color_raw())


def blend_object_bias(field: VoxelField, boxes, cfg: DensityBiasConfig):
    """Raise an existing field's density to the object bias, only inside its support.

    Used when placing objects into a pre-trained scene: vertices outside the
    bias support keep their loaded values; supported vertices take
    max(current density, bias) and mid-gray color.
    """
    pos = field.vertex_positions()
    bias = object_bias_values(pos, boxes, cfg)
    support = bias > 0.0
    current = softplus(field.density)
    target = np.maximum(current, np.maximum(bias, SIGMA_FLOOR))
    field.density = np.where(support, inv_softplus(target), field.density)
    field.color[support] = _bias_color_raw()


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, field: VoxelField, beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m_density = np.zeros_like(field.density)
        self.v_density = np.zeros_like(field.density)
        self.m_color = np.zeros_like(field.color)
        self.v_color = np.zeros_like(field.color)


def apply_update(field: VoxelField, grad: FieldGradient, state: AdamState, lr: float):
    """One Adam step on the pre-activation grids; deterministic."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for param, g, m, v in (
        (field.density, grad.d_density, state.m_density, state.v_density),
        (field.color, grad.d_color, state.m_color, state.v_color),
    ):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        param -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def write_field_block(fh, field: VoxelField):
    """Field block: magic, uint32 resolution, uint32 grid count, raw grids.

    Everything little-endian; grids are float64 in C order, density first.
    """
    fh.write(FIELD_MAGIC)
    fh.write(struct.pack("<II", field.resolution, 2))
    fh.write(field.density.astype("<f8").tobytes(order="C"))
    fh.write(field.color.astype("<f8").tobytes(order="C"))


def read_field_block(fh) -> VoxelField:
    magic = fh.read(4)
    if magic != FIELD_MAGIC:
        raise CheckpointError(f"bad field magic {magic!r}, expected {FIELD_MAGIC!r}")
    header = fh.read(8)
    if len(header) != 8:
        raise CheckpointError("truncated field header")
    res, grid_count = struct.unpack("<II", header)
    if grid_count != 2:
        raise CheckpointError(f"unsupported grid count {grid_count}")
    n = res ** 3
    d_bytes = fh.read(n * 8)
    c_bytes = fh.read(n * 3 * 8)
    if len(d_bytes) != n * 8 or len(c_bytes) != n * 3 * 8:
        raise CheckpointError("truncated field grids")
    out = VoxelField(res)
    out.density = np.frombuffer(d_bytes, dtype="<f8").reshape((res,) * 3).astype(np.float64)
    out.color = np.frombuffer(c_bytes, dtype="<f8").reshape((res,) * 3 + (3,)).astype(np.float64)
    return out


def save_field(field: VoxelField, path):
    with open(path, "wb") as fh:
        write_field_block(fh, field)


def load_field(path) -> VoxelField:
    with open(path, "rb") as fh:
        return read_field_block(fh)


def field_bytes(field: VoxelField) -> bytes:
    buf = io.BytesIO()
    write_field_block(buf, field)
    return buf.getvalue()
