import numpy as np
import pytest

from monofuse.camera import CameraIntrinsics
from monofuse.errors import ImageSizeError
from monofuse.frame import Frame, build_pyramid, compute_normals


def make_frame(intensity, depth, k):
    color = np.repeat(intensity[..., None], 3, axis=2)
    return Frame(index=0, time=0.0, intensity=intensity, color=color, depth=depth,
                 intrinsics=k)


class TestPyramid:
    def test_level_sizes_640x480(self):
        k = CameraIntrinsics(fx=500, fy=500, cx=319.5, cy=239.5, width=640, height=480)
        f = make_frame(np.zeros((480, 640)), np.ones((480, 640)), k)
        pyr = build_pyramid(f, 3)
        sizes = [(lv.intrinsics.width, lv.intrinsics.height) for lv in pyr.levels]
        assert sizes == [(640, 480), (320, 240), (160, 120)]

    def test_constant_intensity_preserved(self):
        k = CameraIntrinsics(fx=50, fy=50, cx=31.5, cy=23.5, width=64, height=48)
        f = make_frame(np.full((48, 64), 0.37), np.ones((48, 64)), k)
        pyr = build_pyramid(f, 3)
        for lv in pyr.levels:
            assert abs(lv.intensity.mean() - 0.37) < 1e-6
            assert np.ptp(lv.intensity) < 1e-12

    def test_intrinsics_halved_per_level(self):
        k = CameraIntrinsics(fx=100, fy=90, cx=32.0, cy=24.0, width=64, height=48)
        f = make_frame(np.zeros((48, 64)), np.ones((48, 64)), k)
        pyr = build_pyramid(f, 3)
        assert pyr[1].intrinsics.fx == 50.0 and pyr[1].intrinsics.cy == 12.0
        assert pyr[2].intrinsics.fx == 25.0 and pyr[2].intrinsics.cx == 8.0

    def test_depth_step_edge_never_averaged(self):
        # A 1 m / 10 m step edge: no pyramid level may contain any depth
        # strictly inside (1, 10) - checked exhaustively over every pixel.
        k = CameraIntrinsics(fx=50, fy=50, cx=31.5, cy=23.5, width=64, height=48)
        depth = np.full((48, 64), 1.0)
        depth[:, 32:] = 10.0
        f = make_frame(np.zeros((48, 64)), depth, k)
        pyr = build_pyramid(f, 3)
        for lv in pyr.levels:
            d = lv.depth
            inside = (d > 1.0 + 1e-12) & (d < 10.0 - 1e-12)
            assert not inside.any()

    def test_depth_invalid_block_takes_nearest_valid(self):
        k = CameraIntrinsics(fx=10, fy=10, cx=1.5, cy=1.5, width=4, height=4)
        depth = np.zeros((4, 4))
        depth[0, 1] = 2.0  # TL of block (0,0) invalid; TR valid
        f = make_frame(np.zeros((4, 4)), depth, k)
        pyr = build_pyramid(f, 2)
        assert pyr[1].depth[0, 0] == 2.0
        assert pyr[1].depth[1, 1] == 0.0  # all-invalid block stays invalid

    def test_too_small_raises(self):
        k = CameraIntrinsics(fx=10, fy=10, cx=1.0, cy=1.0, width=3, height=3)
        f = make_frame(np.zeros((3, 3)), np.ones((3, 3)), k)
        with pytest.raises(ImageSizeError):
            build_pyramid(f, 3)

    def test_frame_validation(self):
        k = CameraIntrinsics(fx=10, fy=10, cx=1.5, cy=1.5, width=4, height=4)
        with pytest.raises(ValueError):
            make_frame(np.zeros((4, 4)), -np.ones((4, 4)), k)
        with pytest.raises(ValueError):
            make_frame(np.zeros((5, 4)), np.ones((5, 4)), k)


class TestNormals:
    def test_frontoparallel_plane(self):
        k = CameraIntrinsics(fx=60, fy=60, cx=31.5, cy=23.5, width=64, height=48)
        n = compute_normals(np.full((48, 64), 3.0), k)
        interior = n[2:-2, 2:-2]
        np.testing.assert_allclose(
            interior, np.broadcast_to([0.0, 0.0, -1.0], interior.shape), atol=1e-9
        )

    def test_tilted_plane_matches_analytic(self):
        # Plane tilted 30 degrees about the x axis: n = (0, -sin30, -cos30)
        # oriented toward the camera. Depth from ray-plane intersection.
        k = CameraIntrinsics(fx=100, fy=100, cx=47.5, cy=35.5, width=96, height=72)
        theta = np.deg2rad(30.0)
        n_true = np.array([0.0, np.sin(theta), -np.cos(theta)])
        p0 = np.array([0.0, 0.0, 4.0])
        us, vs = np.meshgrid(np.arange(96), np.arange(72))
        dirs = np.stack(
            [(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us, dtype=float)], axis=-1
        )
        t = (p0 @ n_true) / (dirs @ n_true)
        depth = t  # z component of t*dir is t since dir_z == 1
        normals = compute_normals(depth, k)
        valid = np.einsum("ijk,ijk->ij", normals, normals) > 0.5
        assert valid[5:-5, 5:-5].all()
        # Normals oriented toward the camera: compare against -/+ analytic.
        dots = normals[valid] @ n_true
        worst_deg = np.rad2deg(np.arccos(np.clip(np.abs(dots), -1, 1))).max()
        assert worst_deg < 0.5

    def test_invalid_neighbor_marks_invalid(self):
        k = CameraIntrinsics(fx=60, fy=60, cx=15.5, cy=11.5, width=32, height=24)
        depth = np.full((24, 32), 2.0)
        depth[10, 10] = 0.0
        normals = compute_normals(depth, k)
        for (v, u) in [(10, 10), (10, 9), (10, 11), (9, 10), (11, 10)]:
            assert np.linalg.norm(normals[v, u]) == 0.0

    def test_discontinuity_threshold(self):
        k = CameraIntrinsics(fx=60, fy=60, cx=15.5, cy=11.5, width=32, height=24)
        depth = np.full((24, 32), 2.0)
        depth[:, 16:] = 3.0  # 50% jump >> 10% threshold
        normals = compute_normals(depth, k)
        assert np.linalg.norm(normals[12, 15]) == 0.0
        assert np.linalg.norm(normals[12, 16]) == 0.0

    def test_unit_length_where_valid(self):
        k = CameraIntrinsics(fx=60, fy=60, cx=31.5, cy=23.5, width=64, height=48)
        rng = np.random.default_rng(0)
        base = 3.0 + 0.02 * rng.standard_normal((48, 64)).cumsum(axis=1) / 8.0
        normals = compute_normals(np.abs(base), k)
        norms = np.linalg.norm(normals, axis=-1)
        valid = norms > 0.5
        assert np.abs(norms[valid] - 1.0).max() < 1e-6
