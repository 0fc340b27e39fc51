import numpy as np
import pytest

from monofuse.camera import (
    CameraIntrinsics,
    backproject,
    backproject_grid,
    in_bounds,
    project,
    project_points,
)
from monofuse.errors import BehindCameraError, InvalidDepthError


@pytest.fixture
def k():
    return CameraIntrinsics(fx=100.0, fy=120.0, cx=50.0, cy=40.0, width=101, height=81)


class TestBackproject:
    def test_principal_point(self, k):
        np.testing.assert_allclose(backproject(k.cx, k.cy, 5.0, k), [0, 0, 5.0], atol=1e-15)

    def test_unit_tangent(self, k):
        # One focal length right of the principal point at depth 2 -> x == depth.
        np.testing.assert_allclose(
            backproject(k.cx + k.fx, k.cy, 2.0, k), [2.0, 0.0, 2.0], atol=1e-15
        )

    def test_rejects_invalid_depth(self, k):
        with pytest.raises(InvalidDepthError):
            backproject(10, 10, 0.0, k)
        with pytest.raises(InvalidDepthError):
            backproject(10, 10, -1.0, k)


class TestProject:
    def test_on_axis(self, k):
        assert project(np.array([0, 0, 1.0]), k) == (k.cx, k.cy)

    def test_unit_offset(self, k):
        u, v = project(np.array([1.0, 0, 1.0]), k)
        assert u == k.fx + k.cx
        assert v == k.cy

    def test_behind_camera(self, k):
        with pytest.raises(BehindCameraError):
            project(np.array([0, 0, -1.0]), k)

    def test_round_trip_1000_random(self, k):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(1000):
            u = rng.uniform(0, k.width - 1)
            v = rng.uniform(0, k.height - 1)
            d = rng.uniform(0.1, 50.0)
            u2, v2 = project(backproject(u, v, d, k), k)
            worst = max(worst, abs(u2 - u), abs(v2 - v))
        assert worst < 1e-9


class TestVectorized:
    def test_grid_matches_scalar(self, k):
        depth = np.full((k.height, k.width), 2.5)
        pts = backproject_grid(depth, k)
        for (v, u) in [(0, 0), (40, 50), (80, 100)]:
            np.testing.assert_allclose(pts[v, u], backproject(u, v, 2.5, k), atol=1e-12)

    def test_grid_invalid_stays_zero(self, k):
        depth = np.zeros((k.height, k.width))
        pts = backproject_grid(depth, k)
        assert np.all(pts[..., 2] == 0)

    def test_project_points_flags_behind(self, k):
        pts = np.array([[0, 0, 1.0], [0, 0, -1.0]])
        uv, ok = project_points(pts, k)
        assert ok.tolist() == [True, False]
        np.testing.assert_allclose(uv[0], [k.cx, k.cy])
        assert np.all(np.isnan(uv[1]))

    def test_in_bounds_margin(self, k):
        uv = np.array([[0.0, 0.0], [k.width - 1.0, k.height - 1.0], [-0.1, 5.0]])
        assert in_bounds(uv, k).tolist() == [True, True, False]
        assert in_bounds(uv, k, margin=1.0).tolist() == [False, False, False]


class TestIntrinsics:
    def test_halved(self, k):
        h = k.halved()
        assert (h.fx, h.fy, h.cx, h.cy) == (k.fx / 2, k.fy / 2, k.cx / 2, k.cy / 2)
        assert (h.width, h.height) == (k.width // 2, k.height // 2)

    def test_validation(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1, fy=1, cx=20, cy=0, width=10, height=10)
