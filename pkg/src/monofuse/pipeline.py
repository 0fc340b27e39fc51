"""Per-frame orchestration.

Each step runs, in order: depth scale application, sparse pose
initialization, dense frame-to-model refinement, then exactly one of
{global loop closure, local loop attempt, plain fusion} mutates the map,
followed by the shared time advance. An optional two-stage mode prepares
the next frame (decode, scale, pyramid, normals) concurrently with the
current frame's tracking and fusion; outputs are identical either way.
"""

import csv
import time as _time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import loop_closure as lc
from .config import PipelineConfig
from .depth_scale import apply_scale
from .deformation import HistoricalStore
from .errors import MonofuseError
from .evaluate import Trajectory
from .frame import Frame, Pyramid, build_pyramid, compute_normals
from .se3 import RigidTransform, se3_exp, se3_log
from .surfels import FusionStats, SurfelMap
from .tracking import PoseEstimate, Tracker


@dataclass
class FrameReport:
    """What happened to one frame; refined pose present iff tracking succeeded."""

    index: int
    tracked: bool = False
    lost: bool = False
    refined: bool = False
    pose_initial: RigidTransform | None = None
    pose_refined: RigidTransform | None = None
    scale: float = 1.0
    fusion: FusionStats | None = None
    keyframe: bool = False
    loop: str = "none"  # none | global | local
    loop_success: bool = False
    loop_info: str = ""
    reactivated: int = 0
    surfel_count: int = 0
    error: str | None = None
    depth_ms: float = 0.0
    sparse_ms: float = 0.0
    dense_ms: float = 0.0
    fusion_ms: float = 0.0
    loop_ms: float = 0.0
    total_ms: float = 0.0


@dataclass
class RunResult:
    trajectory: Trajectory
    surfel_map: SurfelMap
    reports: list[FrameReport]

    @property
    def errors(self) -> list[str]:
        return [f"frame {r.index}: {r.error}" for r in self.reports if r.error]


@dataclass
class _Prepared:
    frame: Frame
    pyramid: Pyramid
    normals: list[np.ndarray]
    scale: float
    depth_ms: float


def _frame_with_depth(frame: Frame, depth: np.ndarray) -> Frame:
    return Frame(
        index=frame.index, time=frame.time, intensity=frame.intensity,
        color=frame.color, depth=depth, intrinsics=frame.intrinsics,
    )


class Pipeline:
    """Owns the map, the tracker, and the loop-closure machinery.

    Frames are pushed through step(); an external pose provider can
    replace the built-in sparse initializer, and loop events can be
    injected programmatically (they queue until the next step).
    """

    def __init__(
        self,
        config: PipelineConfig | None = None,
        pose_provider=None,
        depth_kind: str = "files",
    ):
        self.config = config or PipelineConfig()
        c = self.config
        self.surfel_map = SurfelMap(
            delta_t=c.surfels.delta_t,
            assoc_depth_rel=c.surfels.assoc_depth_rel,
            assoc_normal_deg=c.surfels.assoc_normal_deg,
            stable_confidence=c.surfels.stable_confidence,
            max_splat_px=c.surfels.max_splat_px,
            compact_interval=c.surfels.compact_interval,
        )
        self.tracker = Tracker(
            sparse_params=c.sparse_params(),
            dense_params=c.dense_params(),
            levels=c.pyramid_levels,
            kf_trans=c.keyframes.trans,
            kf_rot_deg=c.keyframes.rot_deg,
            kf_match_ratio=c.keyframes.match_ratio,
            stable_render_confidence=c.surfels.stable_confidence,
            keyframe_cap=c.keyframes.cap,
        )
        self.pose_provider = pose_provider
        self.depth_source = c.depth_source(kind=depth_kind)
        self.historical = HistoricalStore(cap=c.deformation.historical_cap)
        self.trajectory = Trajectory()
        self.reports: list[FrameReport] = []
        self._pending_events: list[lc.LoopEvent] = []
        self._frames_seen = 0

    # -- embedding interface ----------------------------------------------------

    def inject_loop_event(self, event: lc.LoopEvent):
        """Queue an externally detected loop (consumed by the next step)."""
        self._pending_events.append(event)

    def prepare(self, frame: Frame, ref_points=None) -> _Prepared:
        """Depth stage: scale recovery + application, pyramid, normals."""
        t0 = _time.perf_counter()
        c = self.config
        scale = self.depth_source.scale_for_frame(frame.depth, frame.intrinsics, ref_points)
        if scale != 1.0:
            frame = _frame_with_depth(frame, apply_scale(frame.depth, scale))
        pyramid = build_pyramid(frame, c.pyramid_levels)
        normals = [
            compute_normals(pyramid[i].depth, pyramid[i].intrinsics)
            for i in range(len(pyramid))
        ]
        return _Prepared(
            frame=frame, pyramid=pyramid, normals=normals, scale=scale,
            depth_ms=1000.0 * (_time.perf_counter() - t0),
        )

    # -- the per-frame control flow ----------------------------------------------

    def step(self, frame: Frame, ref_points=None) -> FrameReport:
        prepared = self.prepare(frame, ref_points)
        return self.step_prepared(prepared)

    def step_prepared(self, prepared: _Prepared) -> FrameReport:
        c = self.config
        frame = prepared.frame
        report = FrameReport(index=frame.index, scale=prepared.scale,
                             depth_ms=prepared.depth_ms)
        t_start = _time.perf_counter()

        # Tracking: external provider (if any) replaces the sparse stage;
        # the dense refinement always runs against the active model.
        provider_event = None
        if self.pose_provider is not None:
            t0 = _time.perf_counter()
            est: PoseEstimate = self.pose_provider.estimate(frame)
            report.sparse_ms = 1000.0 * (_time.perf_counter() - t0)
            provider_event = est.loop_event
            t1 = _time.perf_counter()
            refine_inliers = 0
            if est.lost or len(self.surfel_map) == 0:
                result_pose = est.pose
                report.refined = False
                report.lost = est.lost
            else:
                res, refined = self.tracker.refine_pose(
                    prepared.pyramid, prepared.normals, self.surfel_map, est.pose
                )
                result_pose = res.pose
                report.refined = refined
                refine_inliers = res.inlier_count
            report.dense_ms = 1000.0 * (_time.perf_counter() - t1)
            report.pose_initial = est.pose
            self.tracker.velocity = self.tracker.last_pose.inverse() @ result_pose
            self.tracker.last_pose = result_pose
            if est.keyframe is not None:
                want_kf = bool(est.keyframe)
            else:
                from .tracking import TrackingResult

                want_kf = not est.lost and self.tracker.want_keyframe(
                    TrackingResult(result_pose, refine_inliers, 0.0, True)
                )
        else:
            outcome = self.tracker.track(
                frame, prepared.pyramid, prepared.normals, self.surfel_map
            )
            report.sparse_ms = outcome.sparse_ms
            report.dense_ms = outcome.dense_ms
            report.pose_initial = outcome.initial_pose
            report.lost = outcome.lost
            report.refined = outcome.refined
            result_pose = outcome.result.pose
            want_kf = not outcome.lost and self.tracker.want_keyframe(outcome.result)

        if report.lost:
            # Pose is the constant-velocity extrapolation; fusion is skipped.
            report.tracked = False
            self.surfel_map.advance_time(frame.index)
            report.surfel_count = len(self.surfel_map)
            report.total_ms = 1000.0 * (_time.perf_counter() - t_start) + report.depth_ms
            self.reports.append(report)
            self._frames_seen += 1
            return report

        report.tracked = True

        # Keyframes and global loop detection.
        new_event = provider_event
        if want_kf:
            keep = (
                prepared.pyramid[1]
                if c.keep_keyframe_frames and len(prepared.pyramid) > 1
                else (prepared.pyramid[0] if c.keep_keyframe_frames else None)
            )
            kf = self.tracker.add_keyframe(frame, result_pose, keep)
            report.keyframe = True
            if new_event is None and c.loops.enable_global:
                new_event = lc.detect_global_loop(
                    self.tracker.sparse_map, kf, c.surfels.delta_t,
                    c.loop_params(), c.dense_params(), levels=c.pyramid_levels,
                )
        if new_event is not None:
            self._pending_events.append(new_event)

        # Exactly one of global closure / local attempt / plain fusion per frame.
        t0 = _time.perf_counter()
        pose = result_pose
        if self._pending_events:
            event = self._pending_events.pop(0)
            report.loop = "global"
            outcome = lc.close_global_loop(
                event, self.surfel_map, frame.intrinsics, c.deform_params(),
                self.historical, c.graph_params(),
                max_constraints=c.deformation.max_constraints,
                current_time=frame.index,
            )
            report.loop_success = outcome.success
            report.loop_info = outcome.reason
            report.reactivated = outcome.reactivated
            if outcome.success and outcome.correction is not None:
                pose = outcome.correction @ pose
                self._apply_pose_correction(outcome.correction, event, frame.index)
        elif (
            c.loops.enable_local
            and self._frames_seen % c.loops.local_interval == 0
            and self.surfel_map.visible_count(pose, frame.intrinsics, which="inactive")
            >= c.loops.local_min_inactive
        ):
            report.loop = "local"
            outcome = lc.attempt_local_loop(
                self.surfel_map, pose, frame.intrinsics, frame.index,
                c.dense_params(), c.deform_params(), self.historical,
                c.loop_params(), c.graph_params(), levels=c.pyramid_levels,
            )
            report.loop_success = outcome.success
            report.loop_info = outcome.reason
            report.reactivated = outcome.reactivated
        report.loop_ms = 1000.0 * (_time.perf_counter() - t0)

        t0 = _time.perf_counter()
        report.fusion = self.surfel_map.fuse_frame(frame, pose, prepared.normals[0])
        report.fusion_ms = 1000.0 * (_time.perf_counter() - t0)
        self.surfel_map.advance_time(frame.index)

        report.pose_refined = pose
        self.trajectory.append(frame.index, pose)
        report.surfel_count = len(self.surfel_map)
        report.total_ms = 1000.0 * (_time.perf_counter() - t_start) + report.depth_ms
        self.reports.append(report)
        self._frames_seen += 1
        return report

    def _apply_pose_correction(self, correction: RigidTransform, event, t_now: int):
        """Correct sparse keyframes (rigid, active window) and blend the
        exported trajectory between the historic and current keyframes.

        The blend mirrors what the deformation does to the map: geometry
        near the historic (pinned) end stays put, geometry near the
        current end moves by the full correction.
        """
        window_start = t_now - self.config.surfels.delta_t
        self.tracker.apply_correction(correction, window_start)

        t_hist = None
        for kf in self.tracker.sparse_map.keyframes:
            if kf.id == event.historic_id:
                t_hist = kf.frame_index
                break
        if t_hist is None:
            t_hist = window_start
        span = max(t_now - t_hist, 1)
        xi = se3_log(correction)
        corrected = []
        for idx, p in self.trajectory.entries:
            if idx <= t_hist:
                corrected.append((idx, p))
            else:
                alpha = min((idx - t_hist) / span, 1.0)
                corrected.append((idx, se3_exp(alpha * xi) @ p))
        self.trajectory.entries = corrected

    # -- batch driver ---------------------------------------------------------------

    def run(self, source) -> RunResult:
        """Fold step() over a frame source.

        `source` is either a kitti.SequenceSource or an iterable of
        Frames. Per-frame load errors are reported and skipped; the
        pipeline continues with the next frame.
        """
        n = len(source)
        get_ref = getattr(source, "reference_points", lambda i: None)
        loader = source.frame if hasattr(source, "frame") else source.__getitem__

        def _prepare(i):
            frame = loader(i)
            return self.prepare(frame, get_ref(i))

        if self.config.prefetch:
            with ThreadPoolExecutor(max_workers=1) as ex:
                fut = ex.submit(_prepare, 0) if n else None
                for i in range(n):
                    nxt = ex.submit(_prepare, i + 1) if i + 1 < n else None
                    try:
                        prepared = fut.result()
                    except (MonofuseError, OSError) as e:
                        self.reports.append(FrameReport(index=i, error=str(e)))
                        fut = nxt
                        continue
                    self.step_prepared(prepared)
                    fut = nxt
        else:
            for i in range(n):
                try:
                    prepared = _prepare(i)
                except (MonofuseError, OSError) as e:
                    self.reports.append(FrameReport(index=i, error=str(e)))
                    continue
                self.step_prepared(prepared)
        return RunResult(self.trajectory, self.surfel_map, self.reports)


def save_run_state(path, surfel_map: SurfelMap, trajectory: Trajectory):
    """Bundle the map and trajectory into one npz for later re-export."""
    poses = np.stack([p.matrix()[:3] for _, p in trajectory]) if len(trajectory) else np.zeros((0, 3, 4))
    np.savez_compressed(
        path,
        positions=surfel_map.positions, normals=surfel_map.normals,
        radii=surfel_map.radii, confidences=surfel_map.confidences,
        colors=surfel_map.colors, t_last=surfel_map.t_last, t_init=surfel_map.t_init,
        current_time=surfel_map.current_time, delta_t=surfel_map.delta_t,
        traj_indices=trajectory.indices(), traj_poses=poses,
    )


def load_run_state(path) -> tuple[SurfelMap, Trajectory]:
    surfel_map = SurfelMap.load_state(path)
    data = np.load(path)
    traj = Trajectory()
    for idx, m in zip(data["traj_indices"], data["traj_poses"]):
        traj.append(int(idx), RigidTransform(m[:, :3], m[:, 3]))
    return surfel_map, traj


def write_timing_csv(reports: list[FrameReport], path):
    """Per-frame stage timings; every frame carries all stage columns."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["frame", "depth_ms", "sparse_ms", "dense_ms", "fusion_ms", "loop_ms", "total_ms"]
        )
        for r in reports:
            w.writerow(
                [
                    r.index,
                    f"{r.depth_ms:.3f}", f"{r.sparse_ms:.3f}", f"{r.dense_ms:.3f}",
                    f"{r.fusion_ms:.3f}", f"{r.loop_ms:.3f}", f"{r.total_ms:.3f}",
                ]
            )
