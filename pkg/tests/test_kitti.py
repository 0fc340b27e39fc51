import numpy as np
import pytest

from monofuse.camera import CameraIntrinsics
from monofuse.errors import DepthFormatError
from monofuse.evaluate import Trajectory
from monofuse.kitti import (
    export_trajectory_kitti,
    load_kitti_sequence,
    read_trajectory_kitti,
)
from monofuse.se3 import RigidTransform, se3_exp
from monofuse.synth import ground_scene, synth_generate, write_dataset


@pytest.fixture
def k():
    return CameraIntrinsics(fx=80.0, fy=80.0, cx=47.5, cy=35.5, width=96, height=72)


@pytest.fixture
def dataset(tmp_path, k):
    spec = ground_scene()
    spec.poses = None
    spec.waypoints = [(0.0, 0.0, 0.0), (0.0, 0.0, 20.0)]
    frames, gt, _ = synth_generate(spec, 5, k)
    out = tmp_path / "seq"
    write_dataset(out, frames, gt, depth_format="pfm")
    return out, frames, gt


class TestPoseFile:
    def test_identity_line_format(self, tmp_path):
        traj = Trajectory([(0, RigidTransform.identity())])
        path = tmp_path / "p.txt"
        export_trajectory_kitti(traj, path)
        assert path.read_text().strip() == "1 0 0 0 0 1 0 0 0 0 1 0"

    def test_line_count_equals_frames(self, tmp_path):
        traj = Trajectory([(i, RigidTransform(np.eye(3), [i, 0, 0])) for i in range(7)])
        path = tmp_path / "p.txt"
        export_trajectory_kitti(traj, path)
        assert len(path.read_text().strip().splitlines()) == 7

    def test_round_trip_exact_to_printed_precision(self, tmp_path):
        rng = np.random.default_rng(8)
        traj = Trajectory()
        for i in range(10):
            traj.append(i, se3_exp(rng.uniform(-1, 1, size=6)))
        p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
        export_trajectory_kitti(traj, p1)
        export_trajectory_kitti(read_trajectory_kitti(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_short_lines(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("1 0 0\n")
        with pytest.raises(ValueError):
            read_trajectory_kitti(p)


class TestSequence:
    def test_calib_parsed_exactly(self, dataset, k):
        out, _, _ = dataset
        src = load_kitti_sequence(out)
        kk = src.intrinsics
        assert (kk.fx, kk.fy, kk.cx, kk.cy) == (k.fx, k.fy, k.cx, k.cy)
        assert (kk.width, kk.height) == (k.width, k.height)

    def test_identity_first_pose_preserved(self, dataset):
        out, _, gt = dataset
        src = load_kitti_sequence(out)
        assert src.ground_truth is not None
        first = src.ground_truth.entries[0][1]
        np.testing.assert_allclose(first.matrix(), gt.entries[0][1].matrix(), atol=1e-9)

    def test_missing_calib_fatal(self, dataset):
        out, _, _ = dataset
        (out / "calib.txt").unlink()
        with pytest.raises(FileNotFoundError):
            load_kitti_sequence(out)

    def test_missing_poses_disables_eval(self, dataset):
        out, _, _ = dataset
        (out / "poses.txt").unlink()
        src = load_kitti_sequence(out)
        assert src.ground_truth is None
        assert len(src) == 5

    def test_missing_depth_file_raises_on_that_frame(self, dataset):
        out, _, _ = dataset
        (out / "depth" / "000002.pfm").unlink()
        src = load_kitti_sequence(out)
        src.frame(1)  # fine
        with pytest.raises(DepthFormatError):
            src.frame(2)

    def test_times_parsed(self, dataset):
        out, frames, _ = dataset
        src = load_kitti_sequence(out)
        assert src.frame(3).time == pytest.approx(frames[3].time, abs=1e-6)

    def test_ref_points_optional(self, dataset):
        out, _, _ = dataset
        src = load_kitti_sequence(out)
        assert src.reference_points(0) is None
        ref_dir = out / "ref_points"
        ref_dir.mkdir()
        (ref_dir / "000000.txt").write_text("5 6 7.5\n")
        src2 = load_kitti_sequence(out)
        pts = src2.reference_points(0)
        assert pts.shape == (1, 3)
