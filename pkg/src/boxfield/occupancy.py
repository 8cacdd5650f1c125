"""Binary occupancy grid caching where the field has any real density.

Cells are tested at their centers against a density threshold; queries in
empty cells short-circuit to (0, black) without touching the field.  The
grid covers [-1, 1]^3 with a coarse resolution independent of the field's.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .field import CheckpointError, VoxelField

OCC_MAGIC = b"BXO1"


@dataclass(frozen=True)
class OccupancyConfig:
    resolution: int = 32
    threshold: float = 0.01
    update_every: int = 16

    def __post_init__(self):
        if self.resolution < 1:
            raise ValueError("occupancy resolution must be >= 1")
        if self.threshold < 0.0:
            raise ValueError("occupancy threshold must be >= 0")
        if self.update_every < 1:
            raise ValueError("update_every must be >= 1")


class OccupancyGrid:
    """bits: (res, res, res) bool, True where the cell may contain density."""

    def __init__(self, config: OccupancyConfig = OccupancyConfig()):
        self.config = config
        res = config.resolution
        self.bits = np.zeros((res,) * 3, dtype=bool)

    @property
    def resolution(self) -> int:
        return self.config.resolution

    def cell_size(self) -> float:
        return 2.0 / self.resolution

    def cell_centers(self) -> np.ndarray:
        """(res, res, res, 3) world positions of every cell center."""
        res = self.resolution
        c = -1.0 + (2.0 * np.arange(res) + 1.0) / res
        gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def cell_indices(self, pts: np.ndarray) -> np.ndarray:
        """Map (N, 3) world points to integer cell indices, clipped to the grid."""
        pts = np.asarray(pts, dtype=float)
        idx = np.floor((pts + 1.0) * (0.5 * self.resolution)).astype(np.int64)
        return np.clip(idx, 0, self.resolution - 1)

    def occupied_at(self, pts: np.ndarray) -> np.ndarray:
        """(N,) bool: the bit of the cell containing each point.  Points
        outside [-1, 1]^3 are reported unoccupied."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        inside = np.all(np.abs(pts) <= 1.0, axis=-1)
        idx = self.cell_indices(pts)
        hit = self.bits[idx[:, 0], idx[:, 1], idx[:, 2]]
        return hit & inside

    def occupancy_fraction(self) -> float:
        return float(self.bits.mean())


def should_update(step: int, config: OccupancyConfig) -> bool:
    """The grid refreshes at step 0 and every update_every steps thereafter."""
    return step % config.update_every == 0


def update_occupancy(grid: OccupancyGrid, field: VoxelField):
    """Full recompute: every bit is re-evaluated, so stale bits clear.

    A cell is occupied iff the field's density at its center strictly
    exceeds the threshold.
    """
    centers = grid.cell_centers().reshape(-1, 3)
    sigma, _ = field.query_batch(centers)
    grid.bits = (sigma > grid.config.threshold).reshape(grid.bits.shape)


def maybe_update_occupancy(grid: OccupancyGrid, field: VoxelField, step: int) -> bool:
    if should_update(step, grid.config):
        update_occupancy(grid, field)
        return True
    return False


def gated_query_batch(grid: OccupancyGrid, field: VoxelField, pts: np.ndarray, dirs=None):
    """Occupancy-gated field lookup: empty cells yield (0, black) and never
    reach the field, so field.query_count only advances for occupied cells."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    keep = grid.occupied_at(pts)
    sigma = np.zeros(pts.shape[0])
    color = np.zeros((pts.shape[0], 3))
    if np.any(keep):
        s, c = field.query_batch(pts[keep])
        sigma[keep] = s
        color[keep] = c
    return sigma, color, keep


def gated_query(grid: OccupancyGrid, field: VoxelField, pt, d=None):
    arr = pt.to_array() if hasattr(pt, "to_array") else np.asarray(pt, dtype=float)
    sigma, color, keep = gated_query_batch(grid, field, arr[None, :])
    return float(sigma[0]), color[0], bool(keep[0])


def write_occupancy_block(fh, grid: OccupancyGrid):
    """Occupancy block: magic, uint32 resolution, bit-packed cells.

    Bits are packed in C order with little bit order, flat index
    (x * res + y) * res + z.
    """
    fh.write(OCC_MAGIC)
    fh.write(struct.pack("<I", grid.resolution))
    fh.write(np.packbits(grid.bits.ravel(order="C"), bitorder="little").tobytes())


def read_occupancy_block(fh, config: OccupancyConfig = OccupancyConfig()) -> OccupancyGrid:
    magic = fh.read(4)
    if magic != OCC_MAGIC:
        raise CheckpointError(f"bad occupancy magic {magic!r}, expected {OCC_MAGIC!r}")
    header = fh.read(4)
    if len(header) != 4:
        raise CheckpointError("truncated occupancy header")
    (res,) = struct.unpack("<I", header)
    n = res ** 3
    nbytes = (n + 7) // 8
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise CheckpointError("truncated occupancy bits")
    if res != config.resolution:
        config = OccupancyConfig(resolution=res, threshold=config.threshold, update_every=config.update_every)
    grid = OccupancyGrid(config)
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")[:n]
    grid.bits = bits.astype(bool).reshape((res,) * 3)
    return grid
