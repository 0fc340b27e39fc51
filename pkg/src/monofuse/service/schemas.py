"""Pydantic request/response models for the HTTP service."""

from pydantic import BaseModel, Field

from ..pipeline import FrameReport


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str


class PoseModel(BaseModel):
    """Row-major 3x4 [R|t] camera-to-world matrix."""

    matrix: list[float] = Field(min_length=12, max_length=12)


class FusionModel(BaseModel):
    matched: int
    inserted: int
    skipped: int


class FrameReportModel(BaseModel):
    index: int
    tracked: bool
    lost: bool
    refined: bool
    keyframe: bool
    scale: float
    pose_initial: PoseModel | None = None
    pose_refined: PoseModel | None = None
    fusion: FusionModel | None = None
    loop: str
    loop_success: bool
    loop_info: str
    reactivated: int
    surfel_count: int
    error: str | None = None
    depth_ms: float
    sparse_ms: float
    dense_ms: float
    fusion_ms: float
    loop_ms: float
    total_ms: float

    @staticmethod
    def from_report(r: FrameReport) -> "FrameReportModel":
        def pose(p):
            return PoseModel(matrix=list(p.matrix()[:3].reshape(-1))) if p is not None else None

        return FrameReportModel(
            index=r.index, tracked=r.tracked, lost=r.lost, refined=r.refined,
            keyframe=r.keyframe, scale=r.scale,
            pose_initial=pose(r.pose_initial), pose_refined=pose(r.pose_refined),
            fusion=(
                FusionModel(matched=r.fusion.matched, inserted=r.fusion.inserted,
                            skipped=r.fusion.skipped)
                if r.fusion is not None else None
            ),
            loop=r.loop, loop_success=r.loop_success, loop_info=r.loop_info,
            reactivated=r.reactivated, surfel_count=r.surfel_count, error=r.error,
            depth_ms=r.depth_ms, sparse_ms=r.sparse_ms, dense_ms=r.dense_ms,
            fusion_ms=r.fusion_ms, loop_ms=r.loop_ms, total_ms=r.total_ms,
        )


class SessionCreateRequest(BaseModel):
    dataset_dir: str
    config_path: str | None = None
    config: dict | None = None
    overrides: list[str] = Field(default_factory=list)


class SessionCreateResponse(BaseModel):
    session_id: str
    frames: int
    width: int
    height: int


class SessionStatus(BaseModel):
    session_id: str
    dataset_dir: str
    frames_total: int
    frames_processed: int
    surfel_count: int
    keyframes: int
    trajectory_length: int
    errors: int


class StepRequest(BaseModel):
    count: int = Field(1, ge=1, le=10000)


class StepResponse(BaseModel):
    reports: list[FrameReportModel]
    done: bool


class ExportRequest(BaseModel):
    trajectory_path: str | None = None
    ply_path: str | None = None
    state_path: str | None = None
    timing_path: str | None = None
    min_confidence: float = 0.0


class ExportResponse(BaseModel):
    written: list[str]


class RunOutputs(BaseModel):
    trajectory_path: str | None = None
    ply_path: str | None = None
    state_path: str | None = None
    timing_path: str | None = None
    min_confidence: float = 0.0


class RunRequest(BaseModel):
    dataset_dir: str
    config_path: str | None = None
    config: dict | None = None
    overrides: list[str] = Field(default_factory=list)
    outputs: RunOutputs = Field(default_factory=RunOutputs)
    evaluate: bool = False


class TimingSummary(BaseModel):
    median_ms: float
    mean_ms: float
    std_ms: float


class RunResponse(BaseModel):
    frames: int
    tracked: int
    lost: int
    keyframes: int
    global_closures: int
    local_closures: int
    surfel_count: int
    errors: list[str]
    written: list[str]
    t_rel_percent: float | None = None
    ate_rmse_m: float | None = None
    timing: dict[str, TimingSummary] | None = None


class SynthRequest(BaseModel):
    out_dir: str
    preset: str = Field("square", pattern="^(wall|ground|square|corner)$")
    frames: int = Field(100, ge=1)
    width: int = Field(320, ge=16)
    height: int = Field(240, ge=16)
    focal: float = Field(160.0, gt=0)
    seed: int = 0
    depth_format: str = Field("pfm", pattern="^(pfm|png)$")
    png_divisor: float = Field(256.0, gt=0)
    side: float = Field(16.0, gt=0, description="square route side length (square preset)")
    supersample: int = Field(1, ge=1, le=4)
    depth_scale_error: float = Field(
        1.0, gt=0, description="divide written depth by this to simulate wrong scale"
    )


class SynthResponse(BaseModel):
    out_dir: str
    frames: int
    width: int
    height: int


class EvalTrajRequest(BaseModel):
    est_path: str
    gt_path: str
    mode: str = Field("both", pattern="^(trel|ate|both)$")
    with_scale: bool = False


class EvalTrajResponse(BaseModel):
    t_rel_percent: float | None = None
    ate_rmse_m: float | None = None
    matched_frames: int
    notes: list[str] = Field(default_factory=list)


class EvalSurfaceRequest(BaseModel):
    model_path: str
    reference_path: str
    voxel: float = Field(0.2, gt=0)
    align: bool = True
    min_confidence: float = 0.0


class EvalSurfaceResponse(BaseModel):
    mean_distance_m: float
    aligned: bool
    model_points: int
    reference_points: int


class StateExportRequest(BaseModel):
    state_path: str
    ply_path: str | None = None
    trajectory_path: str | None = None
    min_confidence: float = 0.0
    binary_ply: bool = True
