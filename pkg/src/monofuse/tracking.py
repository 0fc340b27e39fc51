"""Camera pose estimation.

Two stages, mirroring the hybrid design: a sparse corner+patch tracker
supplies an initial pose per frame (motion-only Gauss-Newton on robust
reprojection error), then a dense frame-to-model refinement aligns the
live frame to a rendered view of the active model by minimizing a joint
point-to-plane + photometric cost, coarse to fine over the image pyramid.

The dense alignment estimates T (live camera -> virtual camera) with
left-composed twist updates; the refined camera-to-world pose is
render_pose @ T.
"""

import time as _time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter, uniform_filter

from .camera import CameraIntrinsics, backproject_grid
from .errors import DegenerateRefinementError, TrackingLostError
from .frame import Frame, Pyramid, build_pyramid, compute_normals
from .se3 import RigidTransform, se3_exp, rotation_angle
from .surfels import ModelView

# -- results and keyframes --------------------------------------------------------


@dataclass
class TrackingResult:
    pose: RigidTransform
    inlier_count: int
    final_cost: float
    converged: bool
    level_iterations: list[int] = field(default_factory=list)
    cost_trace: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.converged and not np.isfinite(self.final_cost):
            raise ValueError("converged result must have a finite cost")


@dataclass
class Keyframe:
    id: int
    pose: RigidTransform
    frame_index: int
    feat_uv: np.ndarray
    feat_depth: np.ndarray
    patches: np.ndarray
    frame: Frame | None = None  # level-1 copy kept for loop verification

    def __post_init__(self):
        if len(self.feat_depth) and np.any(self.feat_depth <= 0):
            raise ValueError("keyframe features must have positive depth")

    @property
    def n_features(self):
        return len(self.feat_depth)


@dataclass
class SparseMapStub:
    """Keyframe list plus covisibility edges; stands in for a full sparse back end."""

    keyframes: list[Keyframe] = field(default_factory=list)
    edges: set[tuple[int, int]] = field(default_factory=set)

    def add_keyframe(self, kf: Keyframe, link_previous: bool = True):
        if link_previous and self.keyframes:
            self.add_edge(self.keyframes[-1].id, kf.id)
        self.keyframes.append(kf)

    def add_edge(self, a: int, b: int):
        ids = {kf.id for kf in self.keyframes}
        if a not in ids and b not in ids:
            raise ValueError("edge references unknown keyframes")
        self.edges.add((min(a, b), max(a, b)))


@dataclass
class PoseEstimate:
    """What a pose provider returns for one frame.

    keyframe=None leaves the keyframe decision to the pipeline; loop_event
    (if any) is a loop_closure.LoopEvent injected by an external system.
    """

    pose: RigidTransform
    lost: bool = False
    keyframe: bool | None = None
    loop_event: object | None = None


# -- corners and patches ---------------------------------------------------------


def detect_corners(
    intensity: np.ndarray,
    max_corners: int = 400,
    quality: float = 0.02,
    min_abs_score: float = 1e-8,
    nms_radius: int = 5,
    border: int = 8,
) -> np.ndarray:
    """Harris-score corners with non-maximum suppression.

    Returns (N, 2) integer pixel coords ordered by decreasing score; an
    (effectively) constant image yields none.
    """
    img = np.asarray(intensity, dtype=np.float64)
    gy, gx = np.gradient(img)
    ixx = uniform_filter(gx * gx, size=5)
    iyy = uniform_filter(gy * gy, size=5)
    ixy = uniform_filter(gx * gy, size=5)
    det = ixx * iyy - ixy * ixy
    trace = ixx + iyy
    score = det - 0.04 * trace * trace

    peak = score == maximum_filter(score, size=2 * nms_radius + 1)
    top = score.max()
    if top <= min_abs_score:
        return np.zeros((0, 2), dtype=np.int64)
    peak &= score > max(quality * top, min_abs_score)
    peak[:border] = peak[-border:] = False
    peak[:, :border] = peak[:, -border:] = False
    vs, us = np.nonzero(peak)
    if len(us) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    order = np.lexsort((us, vs, -score[vs, us]))[:max_corners]
    return np.stack([us[order], vs[order]], axis=1)


def extract_patches(intensity: np.ndarray, uv: np.ndarray, patch: int = 9):
    """Gather odd-sized patches around integer pixel coords; drops border hits."""
    half = patch // 2
    h, w = intensity.shape
    u, v = uv[:, 0], uv[:, 1]
    ok = (u >= half) & (u < w - half) & (v >= half) & (v < h - half)
    u, v = u[ok], v[ok]
    dy, dx = np.mgrid[-half: half + 1, -half: half + 1]
    patches = intensity[v[:, None, None] + dy, u[:, None, None] + dx]
    return np.stack([u, v], axis=1), patches.astype(np.float64), ok


def _ncc_match_one(patch, window):
    """Best normalized cross-correlation position of patch inside window.

    Returns (du, dv, score) relative to the window's top-left patch
    placement, with parabolic sub-pixel refinement.
    """
    p = patch - patch.mean()
    pn = np.linalg.norm(p)
    if pn < 1e-9:
        return None
    ph, pw = patch.shape
    win = np.lib.stride_tricks.sliding_window_view(window, (ph, pw))
    means = win.mean(axis=(2, 3))
    num = np.einsum("ijkl,kl->ij", win, p)
    sq = np.einsum("ijkl,ijkl->ij", win, win)
    var = sq - win.shape[2] * win.shape[3] * means**2
    denom = np.sqrt(np.maximum(var, 0.0)) * pn
    with np.errstate(divide="ignore", invalid="ignore"):
        ncc = np.where(denom > 1e-9, num / denom, -1.0)
    j, i = np.unravel_index(np.argmax(ncc), ncc.shape)
    best = ncc[j, i]

    def _parabola(y0, y1, y2):
        d = y0 - 2 * y1 + y2
        return 0.0 if abs(d) < 1e-12 else float(np.clip(0.5 * (y0 - y2) / d, -0.5, 0.5))

    du = dv = 0.0
    if 0 < i < ncc.shape[1] - 1:
        du = _parabola(ncc[j, i - 1], ncc[j, i], ncc[j, i + 1])
    if 0 < j < ncc.shape[0] - 1:
        dv = _parabola(ncc[j - 1, i], ncc[j, i], ncc[j + 1, i])
    return float(i + du), float(j + dv), float(best)


# -- sparse initializer -----------------------------------------------------------


@dataclass
class SparseParams:
    max_corners: int = 400
    patch: int = 9
    search_radius: int = 12
    min_ncc: float = 0.6
    min_matches: int = 10
    min_inliers: int = 10
    huber_px: float = 3.0
    inlier_px: float = 4.0
    max_iters: int = 15


def _project_jacobian(p: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """(N, 2, 3) Jacobian of pinhole projection wrt the camera-frame point."""
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    inv_z = 1.0 / z
    jac = np.zeros((len(p), 2, 3))
    jac[:, 0, 0] = k.fx * inv_z
    jac[:, 0, 2] = -k.fx * x * inv_z**2
    jac[:, 1, 1] = k.fy * inv_z
    jac[:, 1, 2] = -k.fy * y * inv_z**2
    return jac


def _point_twist_jacobian(p: np.ndarray) -> np.ndarray:
    """(N, 3, 6) d(exp(xi) p)/d(xi) at xi = 0 for twist order (rot, trans)."""
    n = len(p)
    jac = np.zeros((n, 3, 6))
    jac[:, 0, 1] = p[:, 2]
    jac[:, 0, 2] = -p[:, 1]
    jac[:, 1, 0] = -p[:, 2]
    jac[:, 1, 2] = p[:, 0]
    jac[:, 2, 0] = p[:, 1]
    jac[:, 2, 1] = -p[:, 0]
    jac[:, 0, 3] = jac[:, 1, 4] = jac[:, 2, 5] = 1.0
    return jac


def _huber_weights(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    w = np.ones_like(a)
    big = a > delta
    w[big] = delta / a[big]
    return w


def _huber_cost(r: np.ndarray, delta: float) -> float:
    a = np.abs(r)
    small = a <= delta
    return float((r[small] ** 2).sum() + (delta * (2 * a[~small] - delta)).sum())


def sparse_initialize(
    frame: Frame,
    ref: Keyframe,
    guess: RigidTransform,
    params: SparseParams | None = None,
) -> TrackingResult:
    """Initial pose of `frame` by matching the reference keyframe's features.

    Corners detected on the live frame gate candidate positions; reference
    patches are matched by normalized cross-correlation inside a search
    window centered on the guess-predicted pixel. The pose minimizes the
    Huber-robust reprojection error of the reference's depth-backed 3D
    points by Gauss-Newton on a left-composed twist.
    """
    params = params or SparseParams()
    if ref.n_features < 20:
        raise TrackingLostError(f"reference keyframe has {ref.n_features} features")

    k = frame.intrinsics
    corners = detect_corners(frame.intensity, max_corners=params.max_corners)
    if len(corners) < params.min_matches:
        raise TrackingLostError(f"only {len(corners)} corners on live frame")
    corner_ok = np.zeros((k.height, k.width), dtype=bool)
    corner_ok[corners[:, 1], corners[:, 0]] = True
    # A corner anywhere in a cell unlocks NCC search there; this keeps the
    # matcher anchored to textured regions without exact corner repeatability.
    cell = maximum_filter(corner_ok, size=2 * params.search_radius + 1)

    pts_ref = np.stack(
        [
            (ref.feat_uv[:, 0] - k.cx) * ref.feat_depth / k.fx,
            (ref.feat_uv[:, 1] - k.cy) * ref.feat_depth / k.fy,
            ref.feat_depth,
        ],
        axis=1,
    )
    pts_world = ref.pose.apply(pts_ref)
    view0 = guess.inverse()
    p_guess = view0.apply(pts_world)
    in_front = p_guess[:, 2] > 0.05
    u_pred = k.fx * p_guess[:, 0] / np.where(in_front, p_guess[:, 2], 1.0) + k.cx
    v_pred = k.fy * p_guess[:, 1] / np.where(in_front, p_guess[:, 2], 1.0) + k.cy

    half = params.patch // 2
    rad = params.search_radius
    pad = rad + half
    obs_uv, obs_pts = [], []
    h, w = frame.intensity.shape
    img = np.asarray(frame.intensity, dtype=np.float64)
    for i in range(len(pts_world)):
        if not in_front[i]:
            continue
        uc, vc = int(round(u_pred[i])), int(round(v_pred[i]))
        if uc < pad or uc >= w - pad or vc < pad or vc >= h - pad:
            continue
        if not cell[vc, uc]:
            continue
        window = img[vc - pad: vc + pad + 1, uc - pad: uc + pad + 1]
        m = _ncc_match_one(ref.patches[i], window)
        if m is None or m[2] < params.min_ncc:
            continue
        du, dv, _ = m
        obs_uv.append((uc - rad + du, vc - rad + dv))
        obs_pts.append(pts_world[i])
    if len(obs_uv) < params.min_matches:
        raise TrackingLostError(f"{len(obs_uv)} NCC matches < {params.min_matches}")

    obs = np.array(obs_uv)
    x_world = np.array(obs_pts)

    view = view0  # world -> camera, optimized with left-composed updates
    cost = np.inf
    for _ in range(params.max_iters):
        p = view.apply(x_world)
        ok = p[:, 2] > 0.05
        if ok.sum() < params.min_matches:
            raise TrackingLostError("points collapsed behind the camera")
        uv = np.stack(
            [k.fx * p[:, 0] / p[:, 2] + k.cx, k.fy * p[:, 1] / p[:, 2] + k.cy], axis=1
        )
        r = (uv - obs)[ok].reshape(-1)
        cost = _huber_cost(r, params.huber_px)
        jp = _project_jacobian(p[ok], k)
        jt = _point_twist_jacobian(p[ok])
        jac = np.einsum("nij,njk->nik", jp, jt).reshape(-1, 6)
        wts = _huber_weights(r, params.huber_px)
        hess = jac.T @ (jac * wts[:, None])
        grad = jac.T @ (wts * r)
        try:
            xi = np.linalg.solve(hess + 1e-9 * np.eye(6), -grad)
        except np.linalg.LinAlgError:
            break
        stepped = False
        for _halve in range(8):
            cand = se3_exp(xi) @ view
            p2 = cand.apply(x_world)
            ok2 = p2[:, 2] > 0.05
            if ok2.sum() < params.min_matches:
                xi = 0.5 * xi
                continue
            uv2 = np.stack(
                [k.fx * p2[:, 0] / p2[:, 2] + k.cx, k.fy * p2[:, 1] / p2[:, 2] + k.cy],
                axis=1,
            )
            c2 = _huber_cost((uv2 - obs)[ok2].reshape(-1), params.huber_px)
            if c2 < cost:
                view = cand
                cost = c2
                stepped = True
                break
            xi = 0.5 * xi
        if not stepped or np.linalg.norm(xi) < 1e-12:
            break

    p = view.apply(x_world)
    ok = p[:, 2] > 0.05
    uv = np.stack(
        [k.fx * p[:, 0] / p[:, 2] + k.cx, k.fy * p[:, 1] / p[:, 2] + k.cy], axis=1
    )
    err = np.linalg.norm(uv - obs, axis=1)
    inliers = int((ok & (err < params.inlier_px)).sum())
    if inliers < params.min_inliers:
        raise TrackingLostError(f"{inliers} reprojection inliers < {params.min_inliers}")
    return TrackingResult(
        pose=view.inverse(),
        inlier_count=inliers,
        final_cost=cost,
        converged=True,
        level_iterations=[],
    )


# -- dense refinement --------------------------------------------------------------


@dataclass
class DenseParams:
    w_rgb: float = 0.1
    level_iters: tuple[int, ...] = (10, 5, 4)  # coarsest first
    huber_icp: float = 0.3
    huber_rgb: float = 0.1
    icp_dist_gate: float = 1.0
    icp_angle_gate_deg: float = 60.0
    min_assoc: int = 100
    max_halvings: int = 8


@dataclass
class DenseLevel:
    """Prepared per-level arrays for the joint alignment."""

    k: CameraIntrinsics
    live_pts: np.ndarray       # (N, 3) valid live backprojections, camera frame
    live_nrm: np.ndarray       # (N, 3) live normals at those pixels
    live_flat_idx: np.ndarray  # (N,) row-major pixel index of each live point
    live_intensity: np.ndarray  # (H, W)
    model_pts: np.ndarray      # (H, W, 3) model view backprojections
    model_nrm: np.ndarray      # (H, W, 3)
    model_intensity: np.ndarray
    model_valid: np.ndarray    # (H, W) bool
    model_pts_flat: np.ndarray  # (M, 3) valid model points
    model_int_flat: np.ndarray  # (M,)


def prepare_level(live: Frame, live_normals: np.ndarray, view: ModelView) -> DenseLevel:
    k = live.intrinsics
    depth = np.asarray(live.depth, dtype=np.float64)
    has = (depth > 0) & (np.einsum("ijk,ijk->ij", live_normals, live_normals) > 0.5)
    pts = backproject_grid(depth, k)
    model_pts = backproject_grid(view.depth, k)
    model_valid = (view.depth > 0) & (
        np.einsum("ijk,ijk->ij", view.normal, view.normal) > 0.5
    )
    return DenseLevel(
        k=k,
        live_pts=pts[has],
        live_nrm=live_normals[has],
        live_flat_idx=np.nonzero(has.reshape(-1))[0],
        live_intensity=np.asarray(live.intensity, dtype=np.float64),
        model_pts=model_pts,
        model_nrm=view.normal,
        model_intensity=np.asarray(view.intensity, dtype=np.float64),
        model_valid=model_valid,
        model_pts_flat=model_pts[model_valid],
        model_int_flat=np.asarray(view.intensity, dtype=np.float64)[model_valid],
    )


@dataclass
class IcpAssociation:
    """Frozen projective associations: live point index -> model point/normal."""

    live_idx: np.ndarray
    p_model: np.ndarray
    n_model: np.ndarray


def icp_associate(t: RigidTransform, lvl: DenseLevel, params: DenseParams) -> IcpAssociation:
    """Project live points into the model view and gate by distance and normal."""
    k = lvl.k
    q = t.apply(lvl.live_pts)
    ok = q[:, 2] > 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.round(k.fx * q[:, 0] / q[:, 2] + k.cx).astype(np.int64)
        v = np.round(k.fy * q[:, 1] / q[:, 2] + k.cy).astype(np.int64)
    ok &= (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    u, v = np.clip(u, 0, k.width - 1), np.clip(v, 0, k.height - 1)
    ok &= lvl.model_valid[v, u]
    p_m = lvl.model_pts[v, u]
    n_m = lvl.model_nrm[v, u]
    dist = np.linalg.norm(q - p_m, axis=1)
    ok &= dist < params.icp_dist_gate
    n_live_rot = lvl.live_nrm @ t.rotation.T
    cos_gate = np.cos(np.deg2rad(params.icp_angle_gate_deg))
    ok &= np.einsum("ij,ij->i", n_live_rot, n_m) > cos_gate
    idx = np.nonzero(ok)[0]
    return IcpAssociation(live_idx=idx, p_model=p_m[idx], n_model=n_m[idx])


def icp_residuals(t: RigidTransform, assoc: IcpAssociation, lvl: DenseLevel):
    """Point-to-plane residuals r = n_m . (T p_live - p_model) and d r / d xi.

    The twist acts by left composition on T; J = [(q x n_m)^T, n_m^T].
    """
    q = t.apply(lvl.live_pts[assoc.live_idx])
    diff = q - assoc.p_model
    r = np.einsum("ij,ij->i", assoc.n_model, diff)
    jac = np.empty((len(r), 6))
    jac[:, :3] = np.cross(q, assoc.n_model)
    jac[:, 3:] = assoc.n_model
    return r, jac


def bilinear_sample(img: np.ndarray, uv: np.ndarray):
    """Bilinear values plus exact in-cell derivatives.

    Returns (value, grad_u, grad_v, valid); the gradients are the true
    derivatives of the interpolant, so finite differences of the sampled
    value match them away from cell boundaries.
    """
    h, w = img.shape
    u, v = uv[:, 0], uv[:, 1]
    valid = (u >= 0) & (u <= w - 1 - 1e-9) & (v >= 0) & (v <= h - 1 - 1e-9)
    uc = np.clip(u, 0, w - 1 - 1e-9)
    vc = np.clip(v, 0, h - 1 - 1e-9)
    u0 = np.floor(uc).astype(np.int64)
    v0 = np.floor(vc).astype(np.int64)
    a = uc - u0
    b = vc - v0
    i00 = img[v0, u0]
    i10 = img[v0, u0 + 1]
    i01 = img[v0 + 1, u0]
    i11 = img[v0 + 1, u0 + 1]
    val = (1 - a) * (1 - b) * i00 + a * (1 - b) * i10 + (1 - a) * b * i01 + a * b * i11
    gu = (1 - b) * (i10 - i00) + b * (i11 - i01)
    gv = (1 - a) * (i01 - i00) + a * (i11 - i10)
    return val, gu, gv, valid


def photo_residuals(t: RigidTransform, model_idx: np.ndarray, lvl: DenseLevel):
    """Photometric residuals r = I_live(pi(T^-1 p_model)) - I_model.

    model_idx selects rows of the level's valid model points, so an
    association set frozen at one pose can be re-evaluated at another
    (sampling clamps at the image border). Returns (r, J, uv, valid)
    where valid marks points that project in front of the camera and
    inside the live image; residuals are reported for all points.
    """
    k = lvl.k
    p_m = lvl.model_pts_flat[model_idx]
    i_m = lvl.model_int_flat[model_idx]
    inv = t.inverse()
    p = inv.apply(p_m)
    in_front = p[:, 2] > 1e-6
    z = np.where(in_front, p[:, 2], 1.0)
    uv = np.stack([k.fx * p[:, 0] / z + k.cx, k.fy * p[:, 1] / z + k.cy], axis=1)
    val, gu, gv, inside = bilinear_sample(lvl.live_intensity, uv)
    valid = in_front & inside
    r = val - i_m

    jp = _project_jacobian(p, k)
    grad = np.stack([gu, gv], axis=1)
    d_pix = np.einsum("ni,nij->nj", grad, jp)  # (N, 3): d r / d p_live
    # p(xi) = T^-1 exp(-xi) p_m  =>  dp/dxi = R_T^T [ [p_m]x | -I ]
    rt = t.rotation.T
    dp = np.empty((len(p_m), 3, 6))
    zeros = np.zeros(len(p_m))
    px, py, pz = p_m[:, 0], p_m[:, 1], p_m[:, 2]
    skew = np.stack(
        [
            np.stack([zeros, -pz, py], axis=1),
            np.stack([pz, zeros, -px], axis=1),
            np.stack([-py, px, zeros], axis=1),
        ],
        axis=1,
    )
    dp[:, :, :3] = np.einsum("ab,nbc->nac", rt, skew)
    dp[:, :, 3:] = -rt[None, :, :]
    jac = np.einsum("nj,njk->nk", d_pix, dp)
    return r, jac, uv, valid


def _frozen_cost(t, assoc, photo_idx, lvl, params):
    """Joint cost over association sets frozen at the linearization pose.

    Comparing candidate steps on a fixed set keeps step halving honest: a
    step cannot 'improve' by shedding associations. Points pushed behind
    the camera make the candidate infeasible (infinite cost).
    """
    r_icp, _ = icp_residuals(t, assoc, lvl)
    cost = _huber_cost(r_icp, params.huber_icp)
    if params.w_rgb > 0 and len(photo_idx):
        p_m = lvl.model_pts_flat[photo_idx]
        p = t.inverse().apply(p_m)
        if np.any(p[:, 2] <= 1e-6):
            return np.inf
        r_rgb, _, _, _ = photo_residuals(t, photo_idx, lvl)
        cost += params.w_rgb * _huber_cost(r_rgb, params.huber_rgb)
    return cost


def dense_refine(
    live: Pyramid,
    model_views: list[ModelView],
    init: RigidTransform,
    params: DenseParams | None = None,
    live_normals: list[np.ndarray] | None = None,
) -> TrackingResult:
    """Frame-to-model alignment refining `init`, coarse to fine.

    model_views[i] must be rendered at pose `init` with the intrinsics of
    live level i. Raises DegenerateRefinementError when the finest level
    has too few associations or the cost turns non-finite; the caller then
    keeps the initial pose.
    """
    params = params or DenseParams()
    n_levels = len(live)
    if len(model_views) != n_levels:
        raise ValueError("need one model view per pyramid level")
    if live_normals is None:
        live_normals = [
            compute_normals(live[i].depth, live[i].intrinsics) for i in range(n_levels)
        ]

    t = RigidTransform.identity()
    level_iters = list(params.level_iters)
    while len(level_iters) < n_levels:
        level_iters.insert(0, level_iters[0])
    iters_done = [0] * n_levels
    final_cost = np.inf
    finest_assoc = 0
    cost_trace: list[tuple[float, float]] = []  # (pre, post) per accepted step

    for li, level in enumerate(range(n_levels - 1, -1, -1)):
        lvl = prepare_level(live[level], live_normals[level], model_views[level])
        max_iters = level_iters[li] if li < len(level_iters) else level_iters[-1]
        n_assoc = 0
        cost = np.inf
        for _ in range(max_iters):
            assoc = icp_associate(t, lvl, params)
            n_assoc = len(assoc.live_idx)
            if n_assoc < 6:
                break
            if params.w_rgb > 0:
                all_idx = np.arange(len(lvl.model_pts_flat))
                _, _, _, valid = photo_residuals(t, all_idx, lvl)
                photo_idx = all_idx[valid]
            else:
                photo_idx = np.zeros(0, dtype=np.int64)
            cost = _frozen_cost(t, assoc, photo_idx, lvl, params)

            r_icp, j_icp = icp_residuals(t, assoc, lvl)
            w_icp = _huber_weights(r_icp, params.huber_icp)
            hess = j_icp.T @ (j_icp * w_icp[:, None])
            grad = j_icp.T @ (w_icp * r_icp)
            if len(photo_idx):
                r_rgb, j_rgb, _, _ = photo_residuals(t, photo_idx, lvl)
                w_rgb = _huber_weights(r_rgb, params.huber_rgb)
                hess += params.w_rgb * (j_rgb.T @ (j_rgb * w_rgb[:, None]))
                grad += params.w_rgb * (j_rgb.T @ (w_rgb * r_rgb))
            try:
                xi = np.linalg.solve(hess + 1e-10 * np.eye(6), -grad)
            except np.linalg.LinAlgError:
                break
            if not np.all(np.isfinite(xi)):
                break
            stepped = False
            for _halve in range(params.max_halvings):
                cand = se3_exp(xi) @ t
                c2 = _frozen_cost(cand, assoc, photo_idx, lvl, params)
                if c2 <= cost:
                    cost_trace.append((cost, c2))
                    t = cand
                    cost = c2
                    stepped = True
                    break
                xi = 0.5 * xi
            iters_done[level] += 1
            if not stepped or np.linalg.norm(xi) < 1e-12:
                break
        if level == 0:
            # Report the cost and association count at the final pose.
            assoc = icp_associate(t, lvl, params)
            finest_assoc = len(assoc.live_idx)
            if params.w_rgb > 0:
                all_idx = np.arange(len(lvl.model_pts_flat))
                _, _, _, valid = photo_residuals(t, all_idx, lvl)
                photo_idx = all_idx[valid]
            else:
                photo_idx = np.zeros(0, dtype=np.int64)
            final_cost = _frozen_cost(t, assoc, photo_idx, lvl, params)

    if not np.isfinite(final_cost) or finest_assoc < params.min_assoc:
        raise DegenerateRefinementError(
            f"{finest_assoc} associations at finest level, cost {final_cost}"
        )
    return TrackingResult(
        pose=init @ t,
        inlier_count=finest_assoc,
        final_cost=final_cost,
        converged=True,
        level_iterations=iters_done,
        cost_trace=cost_trace,
    )


# -- keyframe policy ----------------------------------------------------------------


def decide_keyframe(
    result: TrackingResult,
    last_kf: Keyframe,
    trans_thresh: float = 2.0,
    rot_thresh_deg: float = 10.0,
    match_ratio_thresh: float = 0.5,
) -> bool:
    """New keyframe iff motion since the last one strictly exceeds a gate.

    Boundary values equal to a threshold do not trigger (strict
    inequality), so a pose exactly at the translation gate is not a
    keyframe.
    """
    delta = last_kf.pose.inverse() @ result.pose
    if np.linalg.norm(delta.translation) > trans_thresh:
        return True
    if np.rad2deg(rotation_angle(delta.rotation)) > rot_thresh_deg:
        return True
    ratio = result.inlier_count / max(last_kf.n_features, 1)
    return ratio < match_ratio_thresh


def make_keyframe(
    kf_id: int,
    frame: Frame,
    pose: RigidTransform,
    params: SparseParams | None = None,
    keep_frame: Frame | None = None,
) -> Keyframe:
    """Detect corners with valid depth on `frame` and package a keyframe."""
    params = params or SparseParams()
    corners = detect_corners(frame.intensity, max_corners=params.max_corners)
    uv, patches, kept = extract_patches(frame.intensity, corners, params.patch)
    depth = np.asarray(frame.depth, dtype=np.float64)[uv[:, 1], uv[:, 0]]
    good = depth > 0
    return Keyframe(
        id=kf_id,
        pose=pose,
        frame_index=frame.index,
        feat_uv=uv[good].astype(np.float64),
        feat_depth=depth[good],
        patches=patches[good],
        frame=keep_frame,
    )


# -- composed per-frame tracking -----------------------------------------------------


@dataclass
class TrackOutcome:
    result: TrackingResult
    initial_pose: RigidTransform
    sparse_ms: float
    dense_ms: float
    lost: bool
    refined: bool


class Tracker:
    """Owns sparse tracking state and composes it with the dense refinement.

    Keeps the reference keyframe, a constant-velocity motion model, and
    the keyframe stub map. The surfel map is injected per call; the first
    frame becomes the identity-pose origin.
    """

    def __init__(
        self,
        sparse_params: SparseParams | None = None,
        dense_params: DenseParams | None = None,
        levels: int = 3,
        kf_trans: float = 2.0,
        kf_rot_deg: float = 10.0,
        kf_match_ratio: float = 0.5,
        stable_render_confidence: float = 3.0,
        keyframe_cap: int = 500,
    ):
        self.sparse_params = sparse_params or SparseParams()
        self.dense_params = dense_params or DenseParams()
        self.levels = levels
        self.kf_trans = kf_trans
        self.kf_rot_deg = kf_rot_deg
        self.kf_match_ratio = kf_match_ratio
        self.stable_render_confidence = stable_render_confidence
        self.keyframe_cap = keyframe_cap
        self.sparse_map = SparseMapStub()
        self.last_pose = RigidTransform.identity()
        self.velocity = RigidTransform.identity()
        self._next_kf_id = 0

    @property
    def reference(self) -> Keyframe | None:
        return self.sparse_map.keyframes[-1] if self.sparse_map.keyframes else None

    def motion_guess(self) -> RigidTransform:
        return self.last_pose @ self.velocity

    def initialize_pose(self, frame: Frame) -> tuple[TrackingResult | None, bool]:
        """Sparse stage: (result, lost). First frame returns identity."""
        ref = self.reference
        if ref is None:
            return (
                TrackingResult(RigidTransform.identity(), 0, 0.0, True),
                False,
            )
        guess = self.motion_guess()
        try:
            return sparse_initialize(frame, ref, guess, self.sparse_params), False
        except TrackingLostError:
            return TrackingResult(guess, 0, np.inf, False), True

    def refine_pose(
        self,
        pyramid: Pyramid,
        normals: list[np.ndarray],
        surfel_map,
        init: RigidTransform,
    ) -> tuple[TrackingResult, bool]:
        """Dense stage against the active model; falls back to init on failure."""
        views = self.render_views(surfel_map, init, pyramid)
        try:
            res = dense_refine(pyramid, views, init, self.dense_params, normals)
            return res, True
        except DegenerateRefinementError:
            return TrackingResult(init, 0, np.inf, False), False

    def render_views(self, surfel_map, pose: RigidTransform, pyramid: Pyramid):
        """Model views per level; re-renders unstable surfels when starved."""
        views = []
        for i in range(len(pyramid)):
            k = pyramid[i].intrinsics
            v = surfel_map.predict_view(
                pose, k, which="active", min_confidence=self.stable_render_confidence
            )
            if i == 0 and int(v.valid.sum()) < self.dense_params.min_assoc:
                views = [
                    surfel_map.predict_view(
                        pose, pyramid[j].intrinsics, which="active", min_confidence=0.0
                    )
                    for j in range(len(pyramid))
                ]
                return views
            views.append(v)
        return views

    def track(
        self, frame: Frame, pyramid: Pyramid, normals: list[np.ndarray], surfel_map
    ) -> TrackOutcome:
        """Full hybrid tracking of one frame. Never raises; flags `lost` instead."""
        t0 = _time.perf_counter()
        init_result, lost = self.initialize_pose(frame)
        sparse_ms = 1000.0 * (_time.perf_counter() - t0)

        t1 = _time.perf_counter()
        if len(surfel_map) == 0:
            result = init_result
            refined = False
        elif lost:
            result = init_result
            refined = False
        else:
            result, refined = self.refine_pose(
                pyramid, normals, surfel_map, init_result.pose
            )
            if refined:
                result = TrackingResult(
                    pose=result.pose,
                    inlier_count=max(result.inlier_count, init_result.inlier_count),
                    final_cost=result.final_cost,
                    converged=result.converged,
                    level_iterations=result.level_iterations,
                )
        dense_ms = 1000.0 * (_time.perf_counter() - t1)

        prev = self.last_pose
        self.velocity = prev.inverse() @ result.pose
        self.last_pose = result.pose
        return TrackOutcome(
            result=result,
            initial_pose=init_result.pose,
            sparse_ms=sparse_ms,
            dense_ms=dense_ms,
            lost=lost,
            refined=refined,
        )

    def want_keyframe(self, result: TrackingResult) -> bool:
        ref = self.reference
        if ref is None:
            return True
        return decide_keyframe(
            result, ref, self.kf_trans, self.kf_rot_deg, self.kf_match_ratio
        )

    def add_keyframe(self, frame: Frame, pose: RigidTransform, keep_frame: Frame | None):
        kf = make_keyframe(self._next_kf_id, frame, pose, self.sparse_params, keep_frame)
        self._next_kf_id += 1
        self.sparse_map.add_keyframe(kf)
        if len(self.sparse_map.keyframes) > self.keyframe_cap:
            self.sparse_map.keyframes.pop(0)
        return kf

    def apply_correction(self, correction: RigidTransform, window_start: int):
        """Rigidly correct the local keyframes and tracking state after a loop."""
        for i, kf in enumerate(self.sparse_map.keyframes):
            if kf.frame_index >= window_start:
                self.sparse_map.keyframes[i] = Keyframe(
                    id=kf.id,
                    pose=correction @ kf.pose,
                    frame_index=kf.frame_index,
                    feat_uv=kf.feat_uv,
                    feat_depth=kf.feat_depth,
                    patches=kf.patches,
                    frame=kf.frame,
                )
        self.last_pose = correction @ self.last_pose
