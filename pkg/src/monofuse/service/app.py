"""FastAPI service wrapping the SLAM engine.

Sessions hold a live pipeline over a server-side dataset directory and
advance frame by frame; /runs drives a whole sequence in one call. Paths
in requests refer to the server's filesystem.
"""

import threading
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__, ply
from ..config import PipelineConfig, load_config
from ..errors import ConfigError, MonofuseError, NotEvaluableError
from ..evaluate import PointCloud, Trajectory, eval_ate, eval_surface, eval_trel
from ..kitti import export_trajectory_kitti, load_kitti_sequence, read_trajectory_kitti
from ..pipeline import (
    FrameReport,
    Pipeline,
    load_run_state,
    save_run_state,
    write_timing_csv,
)
from ..camera import CameraIntrinsics
from ..depth_scale import apply_scale
from ..synth import (
    SceneSpec,
    ground_scene,
    orbit_trajectory,
    square_route_scene,
    synth_generate,
    wall_scene,
    write_dataset,
)
from . import schemas as sc


@dataclass
class Session:
    id: str
    pipeline: Pipeline
    source: object
    cursor: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)


def _resolve_config(config_path, config_dict, overrides) -> PipelineConfig:
    try:
        return load_config(config_path, overrides, base=config_dict)
    except ConfigError as e:
        raise HTTPException(status_code=400, detail=str(e)) from e


def _open_dataset(directory, cfg: PipelineConfig):
    try:
        return load_kitti_sequence(directory, png_divisor=cfg.depth.png_divisor)
    except (FileNotFoundError, MonofuseError) as e:
        raise HTTPException(status_code=404, detail=str(e)) from e


def _step_session(session: Session, count: int) -> sc.StepResponse:
    reports: list[FrameReport] = []
    src = session.source
    get_ref = getattr(src, "reference_points", lambda i: None)
    with session.lock:
        for _ in range(count):
            if session.cursor >= len(src):
                break
            i = session.cursor
            session.cursor += 1
            try:
                frame = src.frame(i)
            except (MonofuseError, OSError) as e:
                rep = FrameReport(index=i, error=str(e))
                session.pipeline.reports.append(rep)
                reports.append(rep)
                continue
            reports.append(session.pipeline.step(frame, get_ref(i)))
    return sc.StepResponse(
        reports=[sc.FrameReportModel.from_report(r) for r in reports],
        done=session.cursor >= len(src),
    )


def _export_artifacts(pipeline: Pipeline, req) -> list[str]:
    written = []
    if req.trajectory_path:
        export_trajectory_kitti(pipeline.trajectory, req.trajectory_path)
        written.append(req.trajectory_path)
    if req.ply_path:
        pipeline.surfel_map.export_ply(req.ply_path, min_confidence=req.min_confidence)
        written.append(req.ply_path)
    if req.state_path:
        save_run_state(req.state_path, pipeline.surfel_map, pipeline.trajectory)
        written.append(req.state_path)
    if req.timing_path:
        write_timing_csv(pipeline.reports, req.timing_path)
        written.append(req.timing_path)
    return written


def _timing_summary(reports: list[FrameReport]) -> dict[str, sc.TimingSummary]:
    out = {}
    fields = {
        "sparse_tracking": "sparse_ms",
        "dense_mapping": "dense_ms",
        "depth": "depth_ms",
        "overall": "total_ms",
    }
    clean = [r for r in reports if r.error is None]
    for name, attr in fields.items():
        vals = np.array([getattr(r, attr) for r in clean]) if clean else np.zeros(1)
        out[name] = sc.TimingSummary(
            median_ms=float(np.median(vals)),
            mean_ms=float(vals.mean()),
            std_ms=float(vals.std()),
        )
    return out


def create_app() -> FastAPI:
    app = FastAPI(title="monofuse", version=__version__)
    sessions: dict[str, Session] = {}

    @app.get("/health", response_model=sc.HealthResponse)
    def health():
        return sc.HealthResponse(version=__version__)

    # -- streaming sessions ------------------------------------------------------

    @app.post("/sessions", response_model=sc.SessionCreateResponse)
    def create_session(req: sc.SessionCreateRequest):
        cfg = _resolve_config(req.config_path, req.config, req.overrides)
        source = _open_dataset(req.dataset_dir, cfg)
        sid = uuid.uuid4().hex[:12]
        sessions[sid] = Session(id=sid, pipeline=Pipeline(cfg), source=source)
        k = source.intrinsics
        return sc.SessionCreateResponse(
            session_id=sid, frames=len(source), width=k.width, height=k.height
        )

    def _get(sid: str) -> Session:
        if sid not in sessions:
            raise HTTPException(status_code=404, detail=f"no session {sid}")
        return sessions[sid]

    @app.get("/sessions")
    def list_sessions():
        return {"sessions": [s for s in sessions]}

    @app.get("/sessions/{sid}", response_model=sc.SessionStatus)
    def session_status(sid: str):
        s = _get(sid)
        return sc.SessionStatus(
            session_id=s.id,
            dataset_dir=s.source.directory,
            frames_total=len(s.source),
            frames_processed=s.cursor,
            surfel_count=len(s.pipeline.surfel_map),
            keyframes=len(s.pipeline.tracker.sparse_map.keyframes),
            trajectory_length=len(s.pipeline.trajectory),
            errors=sum(1 for r in s.pipeline.reports if r.error),
        )

    @app.post("/sessions/{sid}/step", response_model=sc.StepResponse)
    def step_session(sid: str, req: sc.StepRequest):
        return _step_session(_get(sid), req.count)

    @app.post("/sessions/{sid}/export", response_model=sc.ExportResponse)
    def export_session(sid: str, req: sc.ExportRequest):
        s = _get(sid)
        with s.lock:
            try:
                return sc.ExportResponse(written=_export_artifacts(s.pipeline, req))
            except OSError as e:
                raise HTTPException(status_code=400, detail=str(e)) from e

    @app.delete("/sessions/{sid}")
    def delete_session(sid: str):
        _get(sid)
        del sessions[sid]
        return {"deleted": sid}

    # -- one-shot runs ------------------------------------------------------------

    @app.post("/runs", response_model=sc.RunResponse)
    def run(req: sc.RunRequest):
        cfg = _resolve_config(req.config_path, req.config, req.overrides)
        source = _open_dataset(req.dataset_dir, cfg)
        pipeline = Pipeline(cfg)
        result = pipeline.run(source)
        try:
            written = _export_artifacts(pipeline, req.outputs)
        except OSError as e:
            raise HTTPException(status_code=400, detail=str(e)) from e

        t_rel = ate = None
        if req.evaluate and source.ground_truth is not None and len(result.trajectory) >= 3:
            try:
                ate = eval_ate(result.trajectory, source.ground_truth)
            except MonofuseError:
                ate = None
            try:
                t_rel = eval_trel(result.trajectory, source.ground_truth)
            except MonofuseError:
                t_rel = None
        reports = result.reports
        return sc.RunResponse(
            frames=len(reports),
            tracked=sum(1 for r in reports if r.tracked),
            lost=sum(1 for r in reports if r.lost),
            keyframes=sum(1 for r in reports if r.keyframe),
            global_closures=sum(
                1 for r in reports if r.loop == "global" and r.loop_success
            ),
            local_closures=sum(
                1 for r in reports if r.loop == "local" and r.loop_success
            ),
            surfel_count=len(result.surfel_map),
            errors=result.errors,
            written=written,
            t_rel_percent=t_rel,
            ate_rmse_m=ate,
            timing=_timing_summary(reports),
        )

    # -- synthetic data -------------------------------------------------------------

    @app.post("/synth", response_model=sc.SynthResponse)
    def synth(req: sc.SynthRequest):
        k = CameraIntrinsics(
            fx=req.focal, fy=req.focal,
            cx=(req.width - 1) / 2.0, cy=(req.height - 1) / 2.0,
            width=req.width, height=req.height,
        )
        if req.preset == "wall":
            spec = wall_scene()
            spec.poses = orbit_trajectory((0.0, 0.0, 3.5), 3.5, req.frames, sweep_deg=40.0)
        elif req.preset == "ground":
            spec = ground_scene()
            spec.poses = None
            spec.waypoints = [(0.0, 0.0, 0.0), (0.0, 0.0, 40.0)]
            spec.speed = 2.0
        elif req.preset == "corner":
            spec = wall_scene(distance=3.0)
            spec.poses = orbit_trajectory((0.0, 0.0, 3.0), 3.0, req.frames, sweep_deg=25.0)
        else:
            spec = square_route_scene(side=req.side)
        try:
            frames, gt, _ = synth_generate(spec, req.frames, k)
        except MonofuseError as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
        if req.supersample > 1:
            from ..synth import render_view

            poses = spec.trajectory(req.frames)
            frames = [
                render_view(spec, poses[i], k, index=i, time=i / spec.fps,
                            supersample=req.supersample).frame
                for i in range(req.frames)
            ]
        if req.depth_scale_error != 1.0:
            from ..frame import Frame

            frames = [
                Frame(
                    index=f.index, time=f.time, intensity=f.intensity, color=f.color,
                    depth=apply_scale(f.depth, 1.0 / req.depth_scale_error),
                    intrinsics=f.intrinsics,
                )
                for f in frames
            ]
        write_dataset(
            req.out_dir, frames, gt,
            depth_format=req.depth_format, png_divisor=req.png_divisor,
        )
        return sc.SynthResponse(
            out_dir=req.out_dir, frames=len(frames), width=k.width, height=k.height
        )

    # -- evaluation -------------------------------------------------------------------

    @app.post("/eval/trajectory", response_model=sc.EvalTrajResponse)
    def eval_trajectory(req: sc.EvalTrajRequest):
        try:
            est = read_trajectory_kitti(req.est_path)
            gt = read_trajectory_kitti(req.gt_path)
        except (OSError, ValueError) as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
        matched = len(set(i for i, _ in est) & set(i for i, _ in gt))
        t_rel = ate = None
        notes = []
        if req.mode in ("trel", "both"):
            try:
                t_rel = eval_trel(est, gt)
            except NotEvaluableError as e:
                notes.append(f"t_rel: {e}")
                if req.mode == "trel":
                    raise HTTPException(status_code=400, detail=str(e)) from e
        if req.mode in ("ate", "both"):
            try:
                ate = eval_ate(est, gt, with_scale=req.with_scale)
            except MonofuseError as e:
                notes.append(f"ate: {e}")
                if req.mode == "ate":
                    raise HTTPException(status_code=400, detail=str(e)) from e
        return sc.EvalTrajResponse(
            t_rel_percent=t_rel, ate_rmse_m=ate, matched_frames=matched, notes=notes
        )

    @app.post("/eval/surface", response_model=sc.EvalSurfaceResponse)
    def eval_surface_endpoint(req: sc.EvalSurfaceRequest):
        try:
            fields = ply.read_ply(req.model_path)
            pts = np.stack([fields["x"], fields["y"], fields["z"]], axis=1).astype(np.float64)
            if req.min_confidence > 0 and "confidence" in fields:
                pts = pts[fields["confidence"] >= req.min_confidence]
            ref = ply.read_xyz(req.reference_path)
        except (OSError, ValueError, KeyError) as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
        try:
            score = eval_surface(
                PointCloud(pts), PointCloud(ref), voxel=req.voxel, align=req.align
            )
        except MonofuseError as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
        return sc.EvalSurfaceResponse(
            mean_distance_m=score.mean_distance, aligned=score.aligned,
            model_points=score.model_points, reference_points=score.reference_points,
        )

    # -- offline export from a saved state ----------------------------------------------

    @app.post("/export", response_model=sc.ExportResponse)
    def export_state(req: sc.StateExportRequest):
        try:
            surfel_map, traj = load_run_state(req.state_path)
        except (OSError, KeyError, ValueError) as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
        written = []
        if req.ply_path:
            surfel_map.export_ply(
                req.ply_path, min_confidence=req.min_confidence, binary=req.binary_ply
            )
            written.append(req.ply_path)
        if req.trajectory_path:
            export_trajectory_kitti(traj, req.trajectory_path)
            written.append(req.trajectory_path)
        if not written:
            raise HTTPException(status_code=400, detail="nothing to export")
        return sc.ExportResponse(written=written)

    return app


app = create_app()
