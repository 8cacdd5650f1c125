import io

import numpy as np
import pytest

from boxfield.field import (
    DensityBiasConfig,
    SIGMA_FLOOR,
    VoxelField,
    init_uni_sphere_bias,
    inv_softplus,
)
from boxfield.occupancy import (
    OccupancyConfig,
    OccupancyGrid,
    gated_query,
    gated_query_batch,
    maybe_update_occupancy,
    read_occupancy_block,
    should_update,
    update_occupancy,
    write_occupancy_block,
)
from boxfield.geometry import Vec3


def _floor_field(resolution=8):
    vf = VoxelField(resolution=resolution)
    vf.density.fill(inv_softplus(SIGMA_FLOOR))
    return vf


def test_cell_centers_partition_the_cube():
    grid = OccupancyGrid(OccupancyConfig(resolution=4))
    centers = grid.cell_centers()
    assert centers.shape == (4, 4, 4, 3)
    np.testing.assert_allclose(centers[:, 0, 0, 0], [-0.75, -0.25, 0.25, 0.75])
    assert grid.cell_size() == pytest.approx(0.5)


def test_fresh_grid_is_all_clear():
    grid = OccupancyGrid(OccupancyConfig(resolution=8))
    assert grid.occupancy_fraction() == 0.0


def test_floor_density_field_clears_every_bit():
    grid = OccupancyGrid(OccupancyConfig(resolution=8))
    grid.bits[:] = True  # pre-soil to prove the update clears stale bits
    update_occupancy(grid, _floor_field())
    assert grid.occupancy_fraction() == 0.0


def test_bits_follow_threshold_rule_exactly(rng):
    """bit = [sigma(cell center) > threshold], checked against a direct
    re-evaluation on a random field."""
    vf = VoxelField(resolution=6)
    vf.density[:] = rng.normal(loc=-2.0, scale=2.5, size=vf.density.shape)
    cfg = OccupancyConfig(resolution=5, threshold=0.3)
    grid = OccupancyGrid(cfg)
    update_occupancy(grid, vf)
    sig, _ = vf.query_batch(grid.cell_centers().reshape(-1, 3))
    expected = (sig > cfg.threshold).reshape(5, 5, 5)
    np.testing.assert_array_equal(grid.bits, expected)
    assert 0.0 < grid.occupancy_fraction() < 1.0


def test_uni_sphere_occupancy_shape_at_raised_threshold():
    """With the blob init and threshold 0.1 the occupied set is a centered
    ball: cube-corner cells clear, center cells set."""
    vf = VoxelField(resolution=64)
    init_uni_sphere_bias(vf, DensityBiasConfig())
    grid = OccupancyGrid(OccupancyConfig(resolution=32, threshold=0.1))
    update_occupancy(grid, vf)
    assert grid.bits[16, 16, 16]
    for corner in [(0, 0, 0), (0, 0, 31), (31, 31, 31), (0, 31, 0)]:
        assert not grid.bits[corner]
    # radially consistent: occupied cells all closer to the origin than the
    # farthest clear-to-set transition would allow
    centers = grid.cell_centers().reshape(-1, 3)
    r = np.linalg.norm(centers, axis=-1)
    occ = grid.bits.reshape(-1)
    assert r[occ].max() < r[~occ].min() + grid.cell_size() * np.sqrt(3)


def test_update_requeries_instead_of_accumulating():
    vf = VoxelField(resolution=8)
    vf.density.fill(3.0)
    grid = OccupancyGrid(OccupancyConfig(resolution=4))
    update_occupancy(grid, vf)
    assert grid.occupancy_fraction() == 1.0
    vf.density.fill(inv_softplus(SIGMA_FLOOR))
    update_occupancy(grid, vf)
    assert grid.occupancy_fraction() == 0.0


def test_update_schedule():
    cfg = OccupancyConfig()
    assert should_update(0, cfg)
    assert not should_update(5, cfg)
    assert not should_update(15, cfg)
    assert should_update(16, cfg)
    assert should_update(32, cfg)
    assert should_update(3, OccupancyConfig(update_every=3))


def test_maybe_update_respects_schedule():
    vf = VoxelField(resolution=4)
    vf.density.fill(3.0)
    grid = OccupancyGrid(OccupancyConfig(resolution=4))
    assert not maybe_update_occupancy(grid, vf, step=7)
    assert grid.occupancy_fraction() == 0.0  # untouched off-schedule
    assert maybe_update_occupancy(grid, vf, step=16)
    assert grid.occupancy_fraction() == 1.0


def test_occupied_at_outside_domain_is_false():
    grid = OccupancyGrid(OccupancyConfig(resolution=4))
    grid.bits[:] = True
    np.testing.assert_array_equal(
        grid.occupied_at(np.array([[5.0, 0, 0], [0.0, 0, 0], [0.0, 0, -1.2]])),
        [False, True, False],
    )


# --- gated queries -------------------------------------------------------


def test_gated_query_skips_field_entirely_when_clear():
    vf = VoxelField(resolution=6)
    vf.density.fill(3.0)
    grid = OccupancyGrid(OccupancyConfig(resolution=4))  # all clear
    pts = np.random.default_rng(2).uniform(-1, 1, size=(10, 3))
    sig, col, keep = gated_query_batch(grid, vf, pts)
    np.testing.assert_array_equal(sig, 0.0)
    np.testing.assert_array_equal(col, 0.0)
    assert not keep.any()
    assert vf.query_count == 0


def test_gated_query_transparent_when_fully_occupied(rng):
    vf = VoxelField(resolution=6)
    vf.density[:] = rng.normal(size=vf.density.shape)
    vf.color[:] = rng.normal(size=vf.color.shape)
    grid = OccupancyGrid(OccupancyConfig(resolution=4))
    grid.bits[:] = True
    pts = rng.uniform(-1, 1, size=(17, 3))
    sig, col, keep = gated_query_batch(grid, vf, pts)
    assert keep.all()
    ref_sig, ref_col = vf.query_batch(pts)
    np.testing.assert_array_equal(sig, ref_sig)
    np.testing.assert_array_equal(col, ref_col)


def test_gated_query_single_occupied_cell(rng):
    vf = VoxelField(resolution=6)
    vf.density.fill(1.0)
    grid = OccupancyGrid(OccupancyConfig(resolution=4))
    grid.bits[0, 0, 0] = True  # cell spanning [-1,-0.5)^3
    inside = rng.uniform(-0.95, -0.55, size=(8, 3))
    outside = rng.uniform(0.05, 0.95, size=(8, 3))
    sig, _, keep = gated_query_batch(grid, vf, np.vstack([inside, outside]))
    assert keep[:8].all()
    assert not keep[8:].any()
    assert (sig[:8] > 0).all()
    np.testing.assert_array_equal(sig[8:], 0.0)
    assert vf.query_count == 8  # only the kept points reached the field


def test_gated_query_single_point_wrapper():
    vf = VoxelField(resolution=4)
    vf.density.fill(2.0)
    grid = OccupancyGrid(OccupancyConfig(resolution=4))
    sig, col, keep = gated_query(grid, vf, Vec3(0.1, 0.1, 0.1))
    assert (sig, keep) == (0.0, False)
    grid.bits[:] = True
    sig, col, keep = gated_query(grid, vf, Vec3(0.1, 0.1, 0.1))
    assert keep and sig == pytest.approx(vf.query(Vec3(0.1, 0.1, 0.1)).sigma)


# --- serialization -------------------------------------------------------


def test_occupancy_block_round_trip(rng):
    cfg = OccupancyConfig(resolution=8)
    grid = OccupancyGrid(cfg)
    grid.bits[:] = rng.uniform(size=grid.bits.shape) > 0.5
    buf = io.BytesIO()
    write_occupancy_block(buf, grid)
    buf.seek(0)
    back = read_occupancy_block(buf, cfg)
    assert back.resolution == 8
    np.testing.assert_array_equal(back.bits, grid.bits)


def test_occupancy_block_rejects_bad_magic():
    from boxfield.field import CheckpointError

    with pytest.raises(CheckpointError):
        read_occupancy_block(io.BytesIO(b"XXXX" + b"\x00" * 16))


def test_occupancy_block_rejects_truncation():
    from boxfield.field import CheckpointError

    grid = OccupancyGrid(OccupancyConfig(resolution=8))
    buf = io.BytesIO()
    write_occupancy_block(buf, grid)
    data = buf.getvalue()
    with pytest.raises(CheckpointError):
        read_occupancy_block(io.BytesIO(data[:-10]), OccupancyConfig(resolution=8))
