import numpy as np
import pytest

from core.config import Intrinsics
from core.errors import ConfigurationError
from pointcloud.geometry import (
    BRANCH_COLOR,
    INSTANCE_PALETTE,
    ColoredPointCloud,
    colorize,
    deproject,
    reproject,
)
from pointcloud.ply import read_ply, write_ply

CAMERA = Intrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0, depth_scale=0.001)


def _single(depth_value, row, col):
    depth = np.zeros((480, 640), np.uint16)
    depth[row, col] = depth_value
    return deproject(depth, CAMERA)


def test_deproject_examples():
    assert _single(1000, 240, 320).points[0] == pytest.approx((0.0, 0.0, 1.0))
    unit_camera = Intrinsics(fx=1.0, fy=1.0, cx=-1.0, cy=0.0)
    unit = deproject(np.full((1, 1), 1000, np.uint16), unit_camera)
    assert unit.points[0] == pytest.approx((1.0, 0.0, 1.0))
    off = _single(2000, 190, 420)
    assert off.points[0] == pytest.approx((0.333333, -0.166667, 2.0), abs=1e-6)
    assert off.pixels[0].tolist() == [190, 420]


def test_deproject_skips_zero_depth_and_strides(rng):
    depth = rng.integers(1, 5000, (48, 64)).astype(np.uint16)
    depth[0, 0] = 0
    assert len(deproject(depth, CAMERA)) == 48 * 64 - 1
    assert len(deproject(depth, CAMERA, stride=2)) == 24 * 32 - 1
    ranged = deproject(depth, CAMERA, min_depth=1.0, max_depth=3.0)
    assert ((ranged.points[:, 2] >= 1.0) & (ranged.points[:, 2] <= 3.0)).all()
    with pytest.raises(ConfigurationError):
        deproject(depth, CAMERA, stride=0)


def test_full_frame_vertex_count():
    depth = np.full((480, 640), 1500, np.uint16)
    assert len(deproject(depth, CAMERA)) == 307200


def test_reproject_inverts_deproject(rng):
    depth = rng.integers(300, 4000, (12, 16)).astype(np.uint16)
    points = deproject(depth, CAMERA)
    uvd = reproject(points.points, CAMERA)
    np.testing.assert_allclose(uvd[:, 0], points.pixels[:, 1], atol=1e-6)
    np.testing.assert_allclose(uvd[:, 1], points.pixels[:, 0], atol=1e-6)
    np.testing.assert_allclose(uvd[:, 2], depth.reshape(-1), atol=1e-6)


def _cloud_inputs():
    depth = np.full((4, 4), 1000, np.uint16)
    return deproject(depth, CAMERA)


def test_colorize_background_is_black():
    cloud = colorize(_cloud_inputs(), [], np.zeros((4, 4), np.uint8))
    assert (cloud.colors == 0).all()


def test_colorize_single_fruit_everywhere():
    cloud = colorize(_cloud_inputs(), [np.ones((4, 4), np.uint8)], None)
    assert (cloud.colors == INSTANCE_PALETTE[0]).all()


def test_colorize_fruit_takes_precedence_over_branch():
    masks = [np.zeros((4, 4), np.uint8) for _ in range(3)]
    masks[2][1, 1] = 1
    masks[1][1, 1] = 0
    branch = np.zeros((4, 4), np.uint8)
    branch[1, :] = 1
    points = _cloud_inputs()
    cloud = colorize(points, masks, branch)
    colors = {tuple(p): tuple(c) for p, c in zip(points.pixels.tolist(), cloud.colors.tolist())}
    assert colors[(1, 1)] == INSTANCE_PALETTE[2]
    assert colors[(1, 3)] == BRANCH_COLOR
    assert colors[(0, 0)] == (0, 0, 0)


def test_colorize_overlapping_fruits_lowest_index_wins():
    a = np.ones((4, 4), np.uint8)
    b = np.ones((4, 4), np.uint8)
    cloud = colorize(_cloud_inputs(), [a, b], None)
    assert (cloud.colors == INSTANCE_PALETTE[0]).all()


def test_colorize_branch_original_color():
    rgb = np.full((4, 4, 3), 77, np.uint8)
    branch = np.ones((4, 4), np.uint8)
    cloud = colorize(_cloud_inputs(), [], branch, rgb=rgb, branch_original_color=True)
    assert (cloud.colors == 77).all()
    with pytest.raises(ConfigurationError):
        colorize(_cloud_inputs(), [], branch, branch_original_color=True)


def test_ply_round_trip(tmp_path, rng):
    cloud = ColoredPointCloud(
        points=rng.standard_normal((50, 3)), colors=rng.integers(0, 256, (50, 3))
    )
    path = write_ply(cloud, tmp_path / "out" / "cloud.ply")
    header = path.read_bytes()[:120]
    assert b"format binary_little_endian 1.0" in header
    assert b"element vertex 50" in header
    back = read_ply(path)
    np.testing.assert_array_equal(back.points, cloud.points)
    np.testing.assert_array_equal(back.colors, cloud.colors)


def test_empty_ply(tmp_path):
    path = write_ply(ColoredPointCloud(np.zeros((0, 3)), np.zeros((0, 3))), tmp_path / "e.ply")
    assert b"element vertex 0" in path.read_bytes()
    assert len(read_ply(path)) == 0


def test_ply_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        ColoredPointCloud(np.zeros((2, 3)), np.zeros((1, 3)))
    with pytest.raises(ConfigurationError):
        ColoredPointCloud(np.array([[0.0, np.nan, 1.0]]), np.zeros((1, 3)))
    bogus = tmp_path / "bogus.ply"
    bogus.write_bytes(b"not a ply")
    with pytest.raises(ConfigurationError):
        read_ply(bogus)
    with pytest.raises(ConfigurationError):
        read_ply(tmp_path / "missing.ply")
