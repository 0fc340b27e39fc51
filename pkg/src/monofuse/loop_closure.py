"""Loop detection and closure.

Global loops: the newest keyframe is checked against historic keyframes
(pose proximity + temporal gate, standing in for appearance-based place
recognition) and verified geometrically by aligning the two stored
keyframe frames, sparse first for a coarse transform, then densely. A
verified pair yields (uncorrected pose, corrected pose) which drives the
deformation graph. Local loops register the active model prediction
against the inactive one in the current view, as the surfel-fusion
back end does on its own.
"""

from dataclasses import dataclass

import numpy as np

from . import deformation as dg
from .camera import CameraIntrinsics
from .errors import (
    DegenerateRefinementError,
    GraphTooSmallError,
    NoConstraintsError,
    OptimizationFailedError,
    TrackingLostError,
)
from .frame import Frame, build_pyramid, compute_normals
from .se3 import RigidTransform
from .surfels import SurfelMap, reproject_view, view_from_frame
from .tracking import (
    DenseParams,
    Keyframe,
    SparseMapStub,
    SparseParams,
    dense_refine,
    icp_associate,
    prepare_level,
    sparse_initialize,
)


@dataclass
class LoopEvent:
    """A verified loop closing pose pair for the latest keyframe.

    pose_corrected = historic.pose @ relative_alignment; residual is the
    RMS alignment error of the geometric verification, in meters.
    """

    keyframe_id: int
    historic_id: int
    pose_uncorrected: RigidTransform
    pose_corrected: RigidTransform
    relative_alignment: RigidTransform
    residual: float

    @property
    def correction(self) -> RigidTransform:
        """World-frame correction mapping uncorrected geometry into place."""
        return self.pose_corrected @ self.pose_uncorrected.inverse()


@dataclass
class LoopParams:
    radius: float = 7.0
    min_sparse_inliers: int = 15
    min_dense_assoc: int = 300
    search_radius: int = 28
    local_overlap: float = 0.2
    local_min_pixels: int = 400
    max_constraints: int = 512


@dataclass
class GraphParams:
    """How the deformation graph is built for a closure event."""

    rho: int = 5000
    min_nodes: int = 16
    k_neighbors: int = 4
    k_influence: int = 4
    time_window: int = 100


def detect_global_loop(
    stub: SparseMapStub,
    current: Keyframe,
    delta_t: int,
    params: LoopParams | None = None,
    dense_params: DenseParams | None = None,
    levels: int = 3,
) -> LoopEvent | None:
    """Find and verify a loop between the current and a historic keyframe.

    Candidates must be at least delta_t frames older than the current
    keyframe and within the gating radius of its pose estimate; the
    spatially nearest one is verified by wide-window sparse matching
    followed by dense alignment of the stored frames. Returns None when
    no candidate survives all gates.
    """
    params = params or LoopParams()
    dense_params = dense_params or DenseParams()
    if current.frame is None:
        return None
    candidates = [
        kf
        for kf in stub.keyframes
        if kf.frame is not None
        and kf.id != current.id
        and current.frame_index - kf.frame_index > delta_t
    ]
    if not candidates:
        return None
    cur_pos = current.pose.translation
    dists = np.array([np.linalg.norm(kf.pose.translation - cur_pos) for kf in candidates])
    best = candidates[int(np.argmin(dists))]
    if float(dists.min()) > params.radius:
        return None

    sparse_params = SparseParams(
        search_radius=params.search_radius, min_inliers=params.min_sparse_inliers
    )
    try:
        coarse = sparse_initialize(current.frame, best, current.pose, sparse_params)
    except TrackingLostError:
        return None

    # Bring the historic frame's geometry into the coarse pose's camera so
    # the dense alignment starts near identity.
    pyr = build_pyramid(current.frame, levels)
    hist_pyr = build_pyramid(best.frame, levels)
    views = [
        reproject_view(view_from_frame(hist_pyr[i], best.pose), coarse.pose)
        for i in range(levels)
    ]
    try:
        refined = dense_refine(pyr, views, coarse.pose, dense_params)
    except DegenerateRefinementError:
        return None
    if refined.inlier_count < params.min_dense_assoc:
        return None

    corrected = refined.pose
    relative = best.pose.inverse() @ corrected
    residual = float(np.sqrt(refined.final_cost / max(refined.inlier_count, 1)))
    return LoopEvent(
        keyframe_id=current.id,
        historic_id=best.id,
        pose_uncorrected=current.pose,
        pose_corrected=corrected,
        relative_alignment=relative,
        residual=residual,
    )


@dataclass
class ClosureOutcome:
    success: bool
    reason: str = ""
    constraint_rms: float = 0.0
    constraints: int = 0
    reactivated: int = 0
    correction: RigidTransform | None = None


def _optimize_and_apply(
    surfel_map: SurfelMap,
    constraints: list,
    historical: dg.HistoricalStore,
    deform_params: dg.DeformParams,
    graph_params: GraphParams,
    max_constraints: int,
) -> tuple[dg.DeformationGraph, dg.OptimizeResult] | ClosureOutcome:
    """Shared closure tail: sample, connect, optimize; apply only on success."""
    all_constraints = constraints + historical.sample(max_constraints)
    try:
        graph = dg.sample_graph(
            surfel_map,
            graph_params.rho,
            min_nodes=graph_params.min_nodes,
            k_neighbors=graph_params.k_neighbors,
            k_influence=graph_params.k_influence,
            time_window=graph_params.time_window,
        )
        dg.connect_nodes(graph, graph_params.k_neighbors)
        result = dg.optimize_graph(graph, all_constraints, deform_params)
    except (GraphTooSmallError, NoConstraintsError, OptimizationFailedError) as e:
        return ClosureOutcome(False, reason=str(e), constraints=len(all_constraints))
    dg.apply_graph(graph, surfel_map)
    historical.store_satisfied(
        graph, constraints, result.constraint_residuals, deform_params.fail_rms
    )
    return graph, result


def close_global_loop(
    event: LoopEvent,
    surfel_map: SurfelMap,
    k: CameraIntrinsics,
    deform_params: dg.DeformParams,
    historical: dg.HistoricalStore,
    graph_params: GraphParams | None = None,
    max_constraints: int = 512,
    current_time: int = 0,
) -> ClosureOutcome:
    """Deform the map to absorb a verified global loop closure.

    Surface constraints come from the event's pose pair; the map is only
    mutated when graph optimization succeeds, so a failed closure leaves
    it untouched. On success the previously visited region in view of the
    corrected pose is reactivated.
    """
    graph_params = graph_params or GraphParams()
    try:
        constraints = dg.build_loop_constraints(
            surfel_map, event.pose_uncorrected, event.pose_corrected, k,
            max_constraints=max_constraints,
        )
    except NoConstraintsError as e:
        return ClosureOutcome(False, reason=str(e))
    out = _optimize_and_apply(
        surfel_map, constraints, historical, deform_params, graph_params, max_constraints
    )
    if isinstance(out, ClosureOutcome):
        return out
    _, result = out
    reactivated = surfel_map.reactivate_in_view(event.pose_corrected, k, current_time)
    return ClosureOutcome(
        True,
        constraint_rms=result.constraint_rms,
        constraints=len(constraints),
        reactivated=reactivated,
        correction=event.correction,
    )


def attempt_local_loop(
    surfel_map: SurfelMap,
    live_pose: RigidTransform,
    k: CameraIntrinsics,
    t: int,
    dense_params: DenseParams,
    deform_params: dg.DeformParams,
    historical: dg.HistoricalStore,
    params: LoopParams | None = None,
    graph_params: GraphParams | None = None,
    levels: int = 3,
) -> ClosureOutcome:
    """Register the active model onto the inactive one in the current view.

    Renders both parts at the live pose, densely aligns active onto
    inactive, and on sufficient overlap turns matched pixel pairs into
    surface constraints (source = active point, destination = inactive
    point) plus pins from the inactive view, then optimizes, applies and
    reactivates. Any gate failure returns success=False with the map
    untouched.
    """
    params = params or LoopParams()
    graph_params = graph_params or GraphParams()
    inactive0 = surfel_map.predict_view(live_pose, k, which="inactive")
    if int(inactive0.valid.sum()) < params.local_min_pixels:
        return ClosureOutcome(False, reason="not enough inactive pixels in view")
    active0 = surfel_map.predict_view(live_pose, k, which="active")
    n_active_px = int(active0.valid.sum())
    if n_active_px < params.local_min_pixels:
        return ClosureOutcome(False, reason="not enough active pixels in view")

    pseudo = Frame.from_gray_depth(
        index=t, time=float(t), intensity=active0.intensity, depth=active0.depth, k=k
    )
    pyr = build_pyramid(pseudo, levels)
    views = [inactive0]
    kk = k
    for _ in range(levels - 1):
        kk = kk.halved()
        views.append(surfel_map.predict_view(live_pose, kk, which="inactive"))
    try:
        refined = dense_refine(pyr, views, live_pose, dense_params)
    except DegenerateRefinementError as e:
        return ClosureOutcome(False, reason=f"alignment degenerate: {e}")
    overlap = refined.inlier_count / max(n_active_px, 1)
    if overlap < params.local_overlap:
        return ClosureOutcome(False, reason=f"overlap {overlap:.2f} below gate")

    # Matched pixel pairs at the converged alignment become constraints.
    t_align = live_pose.inverse() @ refined.pose
    lvl = prepare_level(pyr[0], compute_normals(pyr[0].depth, k), inactive0)
    assoc = icp_associate(t_align, lvl, dense_params)
    if len(assoc.live_idx) == 0:
        return ClosureOutcome(False, reason="no associations after alignment")
    live_px = lvl.live_flat_idx[assoc.live_idx]
    act_ids = active0.index.reshape(-1)[live_px]
    inact_ids = inactive0.index.reshape(-1)[live_px]
    ok = act_ids >= 0
    sel = np.nonzero(ok)[0]
    stride = max(1, int(np.ceil(len(sel) / params.max_constraints)))
    sel = sel[::stride]
    if len(sel) == 0:
        return ClosureOutcome(False, reason="no active surfels among matches")

    src_world = live_pose.apply(lvl.live_pts[assoc.live_idx[sel]])
    dst_world = live_pose.apply(assoc.p_model[sel])
    fallback_time = int(surfel_map.t_last.min()) if len(surfel_map) else 0
    constraints = []
    for i, s in enumerate(sel):
        dest_sid = int(inact_ids[s])
        constraints.append(
            dg.SurfaceConstraint(
                source=src_world[i],
                destination=dst_world[i],
                source_time=int(surfel_map.t_last[act_ids[s]]),
                destination_time=(
                    int(surfel_map.t_last[dest_sid]) if dest_sid >= 0 else fallback_time
                ),
            )
        )
    for i in dg._grid_subsample(inactive0, params.max_constraints):
        p = surfel_map.positions[i]
        tt = int(surfel_map.t_last[i])
        constraints.append(
            dg.SurfaceConstraint(source=p, destination=p, source_time=tt,
                                 destination_time=tt, pinned=True)
        )

    out = _optimize_and_apply(
        surfel_map, constraints, historical, deform_params, graph_params,
        params.max_constraints,
    )
    if isinstance(out, ClosureOutcome):
        return out
    _, result = out
    reactivated = surfel_map.reactivate_in_view(live_pose, k, t)
    return ClosureOutcome(
        True,
        constraint_rms=result.constraint_rms,
        constraints=len(constraints),
        reactivated=reactivated,
    )
