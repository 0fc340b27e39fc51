import numpy as np
import pytest

from monofuse import ply
from monofuse.camera import CameraIntrinsics
from monofuse.errors import MonotonicityError
from monofuse.frame import compute_normals
from monofuse.se3 import RigidTransform, se3_exp
from monofuse.surfels import SurfelMap, view_from_frame
from monofuse.synth import render_view

from conftest import cluttered_scene


@pytest.fixture
def k():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=47.5, cy=35.5, width=96, height=72)


def add_surfel(m, position, normal, radius=0.05, confidence=5.0, color=(1, 1, 1), t=0):
    m._append(
        np.array([position], dtype=np.float64),
        np.array([normal], dtype=np.float64),
        np.array([radius]),
        np.array([confidence], dtype=np.float64),
        np.array([color], dtype=np.float64),
        t,
    )


class TestPredictView:
    def test_empty_map_all_invalid(self, k):
        view = SurfelMap().predict_view(RigidTransform.identity(), k)
        assert int(view.valid.sum()) == 0
        assert (view.index == -1).all()

    def test_single_surfel_hand_projection(self, k):
        # Surfel at (0,0,2), radius 0.05, fx=100: splat side round(2*0.05*100/2)=5,
        # centered at the principal point, depth 2.0 everywhere on the splat.
        m = SurfelMap()
        add_surfel(m, (0, 0, 2.0), (0, 0, -1.0), radius=0.05)
        view = m.predict_view(RigidTransform.identity(), k)
        ci, cj = int(round(k.cy)), int(round(k.cx))
        assert view.depth[ci, cj] == pytest.approx(2.0)
        ys, xs = np.nonzero(view.valid)
        assert xs.min() == cj - 2 and xs.max() == cj + 2
        assert ys.min() == ci - 2 and ys.max() == ci + 2
        assert int(view.valid.sum()) == 25
        np.testing.assert_allclose(view.depth[view.valid], 2.0)
        assert (view.index[view.valid] == 0).all()

    def test_zbuffer_nearest_wins(self, k):
        m = SurfelMap()
        add_surfel(m, (0, 0, 3.0), (0, 0, -1.0), radius=0.10)
        add_surfel(m, (0, 0, 1.0), (0, 0, -1.0), radius=0.04)
        view = m.predict_view(RigidTransform.identity(), k)
        ci, cj = int(round(k.cy)), int(round(k.cx))
        assert view.index[ci, cj] == 1
        assert view.depth[ci, cj] == pytest.approx(1.0)

    def test_backface_culled(self, k):
        m = SurfelMap()
        add_surfel(m, (0, 0, 2.0), (0, 0, 1.0))  # normal away from the camera
        view = m.predict_view(RigidTransform.identity(), k)
        assert int(view.valid.sum()) == 0

    def test_confidence_threshold_filters(self, k):
        m = SurfelMap()
        add_surfel(m, (0, 0, 2.0), (0, 0, -1.0), confidence=1.0)
        assert int(m.predict_view(RigidTransform.identity(), k,
                                  min_confidence=3.0).valid.sum()) == 0
        assert int(m.predict_view(RigidTransform.identity(), k,
                                  min_confidence=0.0).valid.sum()) > 0

    def test_splat_depth_matches_bruteforce_nearest(self, k):
        # Per-pixel depth equals the z of the nearest surfel whose splat
        # covers the pixel, verified by brute force over all surfels.
        rng = np.random.default_rng(4)
        m = SurfelMap()
        n = 400
        pos = np.stack([
            rng.uniform(-1.0, 1.0, n), rng.uniform(-0.8, 0.8, n), rng.uniform(1.5, 6.0, n),
        ], axis=1)
        for p in pos:
            add_surfel(m, p, (0, 0, -1.0), radius=0.03)
        view = m.predict_view(RigidTransform.identity(), k)

        h, w = k.height, k.width
        best = np.full((h, w), np.inf)
        for i in range(n):
            x, y, z = pos[i]
            u = k.fx * x / z + k.cx
            v = k.fy * y / z + k.cy
            ui, vi = int(round(u)), int(round(v))
            side = max(1, round(2 * 0.03 * k.fx / z))
            half = min(side // 2, (m.max_splat_px - 1) // 2)
            for dv in range(-half, half + 1):
                for du in range(-half, half + 1):
                    uu, vv = ui + du, vi + dv
                    if 0 <= uu < w and 0 <= vv < h and z < best[vv, uu]:
                        best[vv, uu] = z
        expect = np.where(np.isfinite(best), best, 0.0)
        np.testing.assert_allclose(view.depth, expect, atol=1e-12)


class TestFusion:
    def test_empty_map_inserts_every_fusable_pixel(self, k):
        rf = render_view(cluttered_scene(), RigidTransform.identity(), k)
        normals = compute_normals(rf.frame.depth, k)
        fusable = (rf.frame.depth > 0) & (
            np.einsum("ijk,ijk->ij", normals, normals) > 0.5
        )
        m = SurfelMap()
        stats = m.fuse_frame(rf.frame, RigidTransform.identity(), normals)
        assert stats.inserted == int(fusable.sum())
        assert stats.matched == 0
        assert len(m) == stats.inserted

    def test_idempotent_for_repeated_identical_frame(self, k):
        rf = render_view(cluttered_scene(), RigidTransform.identity(), k)
        normals = compute_normals(rf.frame.depth, k)
        m = SurfelMap()
        m.fuse_frame(rf.frame, RigidTransform.identity(), normals)
        count = len(m)
        stats = m.fuse_frame(rf.frame, RigidTransform.identity(), normals)
        assert stats.inserted == 0
        assert stats.matched == count
        assert len(m) == count

    def test_equal_confidence_match_is_midpoint(self, k):
        # One surfel with confidence 1 exactly on a pixel ray; the live
        # measurement differs slightly in depth: fused position must be the
        # arithmetic midpoint.
        m = SurfelMap()
        d_surf, d_live = 2.0, 2.02
        add_surfel(m, (0, 0, d_surf), (0, 0, -1.0), radius=0.05, confidence=1.0)
        depth = np.zeros((k.height, k.width))
        ci, cj = int(round(k.cy)), int(round(k.cx))
        depth[ci - 3: ci + 4, cj - 3: cj + 4] = d_live
        from monofuse.frame import Frame

        intensity = np.full((k.height, k.width), 0.5)
        f = Frame(index=1, time=0.0, intensity=intensity,
                  color=np.repeat(intensity[..., None], 3, axis=2), depth=depth,
                  intrinsics=k)
        normals = compute_normals(depth, k)
        assert np.linalg.norm(normals[ci, cj]) > 0.5
        # Restrict to the center pixel so exactly one measurement hits.
        mask = np.zeros_like(depth)
        mask[ci, cj] = d_live
        f2 = Frame(index=1, time=0.0, intensity=intensity,
                   color=np.repeat(intensity[..., None], 3, axis=2), depth=mask,
                   intrinsics=k)
        n2 = np.zeros_like(normals)
        n2[ci, cj] = normals[ci, cj]
        stats = m.fuse_frame(f2, RigidTransform.identity(), n2)
        assert stats.matched == 1
        live_pt = np.array([(cj - k.cx) * d_live / k.fx, (ci - k.cy) * d_live / k.fy, d_live])
        expect = 0.5 * (np.array([0, 0, d_surf]) + live_pt)
        np.testing.assert_allclose(m.positions[0], expect, atol=1e-12)
        assert m.confidences[0] == pytest.approx(2.0)
        assert m.t_last[0] == 1

    def test_association_rate_on_static_scene(self, k):
        # predict_view + fuse_frame at the same pose associates >= 95% of
        # fusable pixels when no new geometry appears.
        rf = render_view(cluttered_scene(), RigidTransform.identity(), k)
        normals = compute_normals(rf.frame.depth, k)
        m = SurfelMap()
        m.fuse_frame(rf.frame, RigidTransform.identity(), normals)
        stats = m.fuse_frame(rf.frame, RigidTransform.identity(), normals)
        total = stats.matched + stats.inserted
        assert stats.matched / total >= 0.95

    def test_confidence_non_decreasing(self, k):
        rf = render_view(cluttered_scene(), RigidTransform.identity(), k)
        normals = compute_normals(rf.frame.depth, k)
        m = SurfelMap(compact_interval=0)
        m.fuse_frame(rf.frame, RigidTransform.identity(), normals)
        before = m.confidences.copy()
        m.fuse_frame(rf.frame, RigidTransform.identity(), normals)
        assert (m.confidences[: len(before)] >= before - 1e-12).all()


class TestActiveWindow:
    def test_paper_boundary_210(self):
        # delta_t = 200: a surfel last fused at frame 10 is active at frame
        # 209 (209 - 10 = 199 < 200) and inactive at 210 (200 >= 200).
        m = SurfelMap(delta_t=200, compact_interval=0)
        add_surfel(m, (0, 0, 2.0), (0, 0, -1.0), t=10)
        m.advance_time(209)
        assert m.active_mask()[0]
        m.advance_time(210)
        assert not m.active_mask()[0]

    def test_partition_disjoint_exhaustive(self):
        rng = np.random.default_rng(2)
        m = SurfelMap(delta_t=50, compact_interval=0)
        for i in range(200):
            add_surfel(m, rng.normal(size=3), (0, 0, -1.0), t=int(rng.integers(0, 100)))
        for t in (0, 30, 77, 149):
            m.advance_time(t) if t >= m.current_time else None
            active = m.active_mask()
            assert active.sum() + (~active).sum() == len(m)

    def test_all_fused_this_frame_active(self, k):
        rf = render_view(cluttered_scene(), RigidTransform.identity(), k)
        m = SurfelMap(delta_t=200)
        m.fuse_frame(rf.frame, RigidTransform.identity())
        m.advance_time(0)
        assert m.active_mask().all()

    def test_unchanged_time_keeps_partition(self):
        m = SurfelMap(delta_t=10, compact_interval=0)
        add_surfel(m, (0, 0, 1.0), (0, 0, -1.0), t=0)
        m.advance_time(5)
        before = m.active_mask().copy()
        m.advance_time(5)
        assert (m.active_mask() == before).all()

    def test_monotonicity_enforced(self):
        m = SurfelMap()
        m.advance_time(10)
        with pytest.raises(MonotonicityError):
            m.advance_time(9)

    def test_compaction_drops_stale_unstable(self):
        m = SurfelMap(delta_t=10, stable_confidence=3.0, compact_interval=1)
        add_surfel(m, (0, 0, 1.0), (0, 0, -1.0), confidence=1.0, t=0)
        add_surfel(m, (0, 0, 2.0), (0, 0, -1.0), confidence=5.0, t=0)
        m.advance_time(30)
        assert len(m) == 1
        assert m.confidences[0] == 5.0


class TestReactivate:
    def test_counts(self, k):
        m = SurfelMap(delta_t=10, compact_interval=0)
        add_surfel(m, (0, 0, 3.0), (0, 0, -1.0), confidence=5.0, t=0)   # ahead
        add_surfel(m, (0, 0, -3.0), (0, 0, 1.0), confidence=5.0, t=0)   # behind
        add_surfel(m, (50, 0, 3.0), (0, 0, -1.0), confidence=5.0, t=0)  # out of frustum
        m.advance_time(100)
        assert not m.active_mask().any()
        n = m.reactivate_in_view(RigidTransform.identity(), k, 100)
        assert n == 1
        assert m.active_mask().tolist() == [True, False, False]

    def test_no_inactive_noop(self, k):
        m = SurfelMap(delta_t=100)
        add_surfel(m, (0, 0, 3.0), (0, 0, -1.0), t=0)
        assert m.reactivate_in_view(RigidTransform.identity(), k, 0) == 0

    def test_all_ahead_reactivated(self, k):
        m = SurfelMap(delta_t=5, compact_interval=0)
        rng = np.random.default_rng(0)
        n = 50
        for _ in range(n):
            add_surfel(m, (rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3),
                           rng.uniform(2, 4)), (0, 0, -1.0), confidence=5.0, t=0)
        m.advance_time(40)
        assert m.reactivate_in_view(RigidTransform.identity(), k, 40) == n


class TestExport:
    def test_empty_map(self, tmp_path):
        m = SurfelMap()
        m.export_ply(tmp_path / "e.ply")
        assert len(ply.read_ply(tmp_path / "e.ply")["x"]) == 0

    def test_single_surfel_parse_back(self, tmp_path):
        m = SurfelMap()
        add_surfel(m, (1.0, 2.0, 3.0), (0, 0, -1.0), radius=0.07, confidence=4.0,
                   color=(0.2, 0.4, 0.6))
        m.export_ply(tmp_path / "s.ply")
        back = ply.read_ply(tmp_path / "s.ply")
        assert back["x"][0] == np.float32(1.0)
        assert back["nz"][0] == np.float32(-1.0)
        assert back["radius"][0] == np.float32(0.07)
        assert back["confidence"][0] == np.float32(4.0)

    def test_infinite_threshold_excludes_all(self, tmp_path):
        m = SurfelMap()
        add_surfel(m, (0, 0, 1.0), (0, 0, -1.0), confidence=100.0)
        m.export_ply(tmp_path / "t.ply", min_confidence=np.inf)
        assert len(ply.read_ply(tmp_path / "t.ply")["x"]) == 0


class TestStateAndViews:
    def test_save_load_round_trip(self, tmp_path, k):
        rf = render_view(cluttered_scene(), RigidTransform.identity(), k)
        m = SurfelMap(delta_t=123)
        m.fuse_frame(rf.frame, RigidTransform.identity())
        m.advance_time(7)
        m.save_state(tmp_path / "s.npz")
        m2 = SurfelMap.load_state(tmp_path / "s.npz")
        assert len(m2) == len(m)
        assert m2.delta_t == 123 and m2.current_time == 7
        np.testing.assert_array_equal(m2.positions, m.positions)
        np.testing.assert_array_equal(m2.t_last, m.t_last)

    def test_view_from_frame_matches_invariant(self, k):
        rf = render_view(cluttered_scene(), RigidTransform.identity(), k)
        view = view_from_frame(rf.frame, RigidTransform.identity())
        assert view.depth.shape == (k.height, k.width)
        # Map renders satisfy: index set iff depth valid.
        m = SurfelMap()
        m.fuse_frame(rf.frame, RigidTransform.identity())
        mv = m.predict_view(RigidTransform.identity(), k)
        assert ((mv.index >= 0) == mv.valid).all()

    def test_rendered_normals_unit_length(self, k):
        rf = render_view(cluttered_scene(), RigidTransform.identity(), k)
        m = SurfelMap()
        m.fuse_frame(rf.frame, RigidTransform.identity())
        pose = se3_exp([0.02, 0.01, 0.0, 0.05, 0.0, 0.02])
        view = m.predict_view(pose, k)
        norms = np.linalg.norm(view.normal[view.valid], axis=-1)
        assert np.abs(norms - 1.0).max() < 1e-6
