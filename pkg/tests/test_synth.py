import numpy as np
import pytest

from monofuse.camera import CameraIntrinsics
from monofuse.errors import SceneGenerationError
from monofuse.se3 import RigidTransform
from monofuse.synth import (
    Box,
    Plane,
    Rect,
    SceneSpec,
    Sphere,
    TextureSpec,
    ground_scene,
    look_at,
    orbit_trajectory,
    render_view,
    square_route_scene,
    synth_generate,
    waypoint_trajectory,
    write_dataset,
)


@pytest.fixture
def k():
    return CameraIntrinsics(fx=80.0, fy=80.0, cx=47.5, cy=35.5, width=96, height=72)


class TestRender:
    def test_frontoparallel_plane_depth_analytic(self, k):
        # Plane z=5 viewed head-on: depth(u,v) is exactly 5 everywhere (depth
        # is the camera-frame z, not the ray range).
        spec = SceneSpec(
            primitives=[Plane(point=(0, 0, 5.0), normal=(0, 0, -1.0))],
            poses=[RigidTransform.identity()],
        )
        rf = render_view(spec, RigidTransform.identity(), k)
        np.testing.assert_allclose(rf.frame.depth, 5.0, atol=1e-9)
        # The ray range differs by 1/cos of the ray angle; check a corner.
        d = np.array([(0 - k.cx) / k.fx, (0 - k.cy) / k.fy, 1.0])
        rng_expect = 5.0 * np.linalg.norm(d) / d[2]
        pt = rf.frame.depth[0, 0] * d
        assert np.linalg.norm(pt) == pytest.approx(rng_expect, abs=1e-9)

    def test_tilted_plane_depth_analytic(self, k):
        n = np.array([0.3, -0.2, -1.0])
        n = n / np.linalg.norm(n)
        p0 = np.array([0.1, 0.0, 4.0])
        spec = SceneSpec(
            primitives=[Plane(point=tuple(p0), normal=tuple(n))],
            poses=[RigidTransform.identity()],
        )
        rf = render_view(spec, RigidTransform.identity(), k)
        us, vs = np.meshgrid(np.arange(k.width), np.arange(k.height))
        dirs = np.stack(
            [(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us, float)], axis=-1
        )
        t = (p0 @ n) / (dirs @ n)
        np.testing.assert_allclose(rf.frame.depth, t, atol=1e-9)

    def test_zero_motion_identical_frames(self, k):
        spec = ground_scene()
        spec.poses = [RigidTransform.identity()] * 3
        frames, _, _ = synth_generate(spec, 3, k)
        np.testing.assert_array_equal(frames[0].intensity, frames[1].intensity)
        np.testing.assert_array_equal(frames[0].depth, frames[2].depth)

    def test_deterministic_regeneration(self, k):
        spec = square_route_scene(side=10.0)
        f1, t1, c1 = synth_generate(spec, 5, k)
        f2, t2, c2 = synth_generate(square_route_scene(side=10.0), 5, k)
        for a, b in zip(f1, f2):
            np.testing.assert_array_equal(a.intensity, b.intensity)
            np.testing.assert_array_equal(a.depth, b.depth)
        np.testing.assert_array_equal(c1.points, c2.points)

    def test_camera_inside_geometry_raises(self, k):
        spec = SceneSpec(
            primitives=[Box(minimum=(-1, -1, -1), maximum=(1, 1, 1))],
            poses=[RigidTransform.identity()],
        )
        with pytest.raises(SceneGenerationError):
            render_view(spec, RigidTransform.identity(), k)

    def test_sphere_and_box_depths(self, k):
        spec = SceneSpec(
            primitives=[
                Sphere(center=(0, 0, 5.0), radius=1.0),
                Box(minimum=(2.0, -1, 3.0), maximum=(4.0, 1, 4.0)),
            ],
            poses=[RigidTransform.identity()],
        )
        rf = render_view(spec, RigidTransform.identity(), k)
        ci, cj = int(round(k.cy)), int(round(k.cx))
        # Principal point sits between pixels; the nearest ray grazes a hair
        # off the sphere's nose.
        assert rf.frame.depth[ci, cj] == pytest.approx(4.0, abs=5e-3)

    def test_supersample_changes_color_not_depth(self, k):
        spec = ground_scene()
        a = render_view(spec, RigidTransform.identity(), k, supersample=1)
        b = render_view(spec, RigidTransform.identity(), k, supersample=2)
        np.testing.assert_array_equal(a.frame.depth, b.frame.depth)
        assert not np.array_equal(a.frame.intensity, b.frame.intensity)


class TestTrajectories:
    def test_look_at_points_forward(self):
        pose = look_at((0, 0, 0), (0, 0, 10.0))
        np.testing.assert_allclose(pose.rotation, np.eye(3), atol=1e-12)

    def test_waypoint_spacing_matches_speed(self):
        poses = waypoint_trajectory(
            [(0, 0, 0), (0, 0, 100.0)], n_frames=11, speed=2.0, fps=1.0
        )
        pos = np.stack([p.translation for p in poses])
        steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
        np.testing.assert_allclose(steps, 2.0, atol=1e-9)

    def test_closed_path_revisits_start(self):
        wp = [(0, 0, 0), (0, 0, 10.0), (10.0, 0, 10.0), (10.0, 0, 0)]
        poses = waypoint_trajectory(wp, n_frames=41, speed=1.0, fps=1.0, closed=True)
        np.testing.assert_allclose(poses[40].translation, poses[0].translation, atol=1e-9)

    def test_orbit_radius(self):
        poses = orbit_trajectory((0, 0, 5.0), 2.0, 16)
        for p in poses:
            assert np.linalg.norm(p.translation - np.array([0, 0, 5.0])) == pytest.approx(2.0)


class TestDataset:
    def test_write_then_load_round_trip(self, tmp_path, k):
        from monofuse.kitti import load_kitti_sequence

        spec = ground_scene()
        spec.poses = None
        spec.waypoints = [(0.0, 0.0, 0.0), (0.0, 0.0, 10.0)]
        frames, gt, _ = synth_generate(spec, 4, k)
        out = tmp_path / "ds"
        write_dataset(out, frames, gt, depth_format="pfm")
        src = load_kitti_sequence(out)
        assert len(src) == 4
        kk = src.intrinsics
        assert (kk.fx, kk.fy, kk.cx, kk.cy) == (k.fx, k.fy, k.cx, k.cy)
        f0 = src.frame(0)
        np.testing.assert_allclose(f0.depth, frames[0].depth, atol=1e-6)
        # PFM stores float32; intensities quantized to 8-bit PNG.
        assert np.abs(f0.intensity - frames[0].intensity).max() < 1.0 / 255.0 + 1e-9

    def test_pose_round_trip_byte_identical(self, tmp_path, k):
        from monofuse.kitti import export_trajectory_kitti, read_trajectory_kitti

        spec = ground_scene()
        spec.poses = None
        spec.waypoints = [(0.0, 0.0, 0.0), (3.0, 0.0, 10.0)]
        _, gt, _ = synth_generate(spec, 5, k)
        p1 = tmp_path / "poses1.txt"
        p2 = tmp_path / "poses2.txt"
        export_trajectory_kitti(gt, p1)
        export_trajectory_kitti(read_trajectory_kitti(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_scene_requires_primitives(self):
        with pytest.raises(SceneGenerationError):
            SceneSpec(primitives=[])

    def test_texture_albedo_range(self):
        tex = TextureSpec()
        su, sv = np.meshgrid(np.linspace(-5, 5, 50), np.linspace(-5, 5, 50))
        a = tex.albedo(su, sv)
        assert a.min() >= 0.02 and a.max() <= 1.0

    def test_rect_bounds(self, k):
        spec = SceneSpec(
            primitives=[Rect(center=(0, 0, 3.0), normal=(0, 0, -1.0),
                             half_u=0.5, half_v=0.5)],
            poses=[RigidTransform.identity()],
        )
        rf = render_view(spec, RigidTransform.identity(), k)
        valid = rf.frame.depth > 0
        # 0.5 m half-extent at 3 m with fx=80 -> ~13.3 px half-width
        ys, xs = np.nonzero(valid)
        assert 10 <= (xs.max() - xs.min()) / 2 <= 16
