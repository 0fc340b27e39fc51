"""Trajectory and surface-accuracy metrics.

Implements the odometry-benchmark relative translational error (averaged
over sub-trajectories of 100..800 m), absolute trajectory error after
closed-form rigid alignment, and surface-to-surface mean distance against
a voxel-downsampled reference cloud.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import AlignmentDegenerateError, NotEvaluableError
from .se3 import RigidTransform

TREL_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)
TREL_STRIDE = 10


@dataclass
class Trajectory:
    """Ordered (frame index, camera-to-world pose) sequence."""

    entries: list[tuple[int, RigidTransform]] = field(default_factory=list)

    def append(self, index: int, pose: RigidTransform):
        if self.entries and index <= self.entries[-1][0]:
            raise ValueError("frame indices must be strictly increasing")
        self.entries.append((int(index), pose))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def indices(self) -> np.ndarray:
        return np.array([i for i, _ in self.entries], dtype=np.int64)

    def poses(self) -> list[RigidTransform]:
        return [p for _, p in self.entries]

    def positions(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 3))
        return np.stack([p.translation for _, p in self.entries])

    def transformed(self, t: RigidTransform) -> "Trajectory":
        return Trajectory([(i, t @ p) for i, p in self.entries])


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud must be finite")

    def __len__(self):
        return len(self.points)


def _match_trajectories(est: Trajectory, gt: Trajectory):
    est_map = {i: p for i, p in est.entries}
    pairs = [(est_map[i], p) for i, p in gt.entries if i in est_map]
    if not pairs:
        raise NotEvaluableError("trajectories share no frame indices")
    return [a for a, _ in pairs], [b for _, b in pairs]


def _arc_lengths(poses: list[RigidTransform]) -> np.ndarray:
    pos = np.stack([p.translation for p in poses])
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def eval_trel(est: Trajectory, gt: Trajectory) -> float:
    """Relative translational error in percent, odometry-benchmark protocol.

    For every 10th start frame and each length L in 100..800 m (by ground
    truth arc length) the relative motions over the segment are compared;
    the per-segment error is |trans(rel_est^-1 rel_gt)| / L. Errors are
    averaged over all segments and scaled to percent.
    """
    est_p, gt_p = _match_trajectories(est, gt)
    dist = _arc_lengths(gt_p)
    if dist[-1] < TREL_LENGTHS[0]:
        raise NotEvaluableError(
            f"ground-truth path is {dist[-1]:.1f} m; need >= {TREL_LENGTHS[0]:.0f} m"
        )
    errors = []
    n = len(gt_p)
    for first in range(0, n, TREL_STRIDE):
        for length in TREL_LENGTHS:
            target = dist[first] + length
            last = int(np.searchsorted(dist, target, side="right"))
            if last >= n:
                continue
            rel_gt = gt_p[first].inverse() @ gt_p[last]
            rel_est = est_p[first].inverse() @ est_p[last]
            delta = rel_est.inverse() @ rel_gt
            errors.append(np.linalg.norm(delta.translation) / length)
    if not errors:
        raise NotEvaluableError("no evaluable sub-trajectories")
    return float(np.mean(errors) * 100.0)


def rigid_align(src: np.ndarray, dst: np.ndarray, with_scale: bool = False):
    """Closed-form least-squares alignment of src onto dst.

    Returns (RigidTransform, scale). Raises AlignmentDegenerateError for
    fewer than 3 points or collinear configurations, where the rotation
    about the line is unconstrained.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 3 or len(src) != len(dst):
        raise AlignmentDegenerateError("need >= 3 matched points")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    sc = src - mu_s
    dc = dst - mu_d
    cov = dc.T @ sc / len(src)
    u, s, vt = np.linalg.svd(cov)
    if s[1] < 1e-12 * max(s[0], 1e-300):
        raise AlignmentDegenerateError("points are collinear")
    d = np.sign(np.linalg.det(u @ vt))
    sign = np.diag([1.0, 1.0, d])
    r = u @ sign @ vt
    if with_scale:
        var_s = (sc**2).sum() / len(src)
        scale = float(np.trace(np.diag(s) @ sign) / var_s)
    else:
        scale = 1.0
    t = mu_d - scale * r @ mu_s
    return RigidTransform(r, t), scale


def eval_ate(est: Trajectory, gt: Trajectory, with_scale: bool = False) -> float:
    """RMSE of positions after optimal rigid (optionally similarity) alignment."""
    est_p, gt_p = _match_trajectories(est, gt)
    if len(est_p) < 3:
        raise AlignmentDegenerateError("need >= 3 matched poses")
    src = np.stack([p.translation for p in est_p])
    dst = np.stack([p.translation for p in gt_p])
    tf, scale = rigid_align(src, dst, with_scale=with_scale)
    resid = (scale * src @ tf.rotation.T + tf.translation) - dst
    return float(np.sqrt((resid**2).sum(axis=1).mean()))


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Replace all points inside each voxel by their centroid."""
    pts = np.asarray(points, dtype=np.float64)
    if voxel <= 0 or len(pts) == 0:
        return pts.copy()
    keys = np.floor(pts / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, pts)
    return sums / counts[:, None]


def icp_point_to_point(
    src: np.ndarray,
    dst: np.ndarray,
    init: RigidTransform | None = None,
    max_iters: int = 30,
    tol: float = 1e-8,
):
    """Rigid ICP of src onto dst with nearest-neighbor association.

    Returns (transform, mean_residual, converged). Pair rejection keeps
    matches within 3x the median distance of the current iteration.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    tree = cKDTree(dst)
    tf = init if init is not None else RigidTransform.identity()
    d0, _ = tree.query(tf.apply(src), workers=-1)
    initial = float(d0.mean())
    prev = np.inf
    for _ in range(max_iters):
        moved = tf.apply(src)
        d, j = tree.query(moved, workers=-1)
        cut = 3.0 * max(np.median(d), 1e-12)
        keep = d <= cut
        if keep.sum() < 3:
            break
        try:
            step, _ = rigid_align(moved[keep], dst[j[keep]])
        except AlignmentDegenerateError:
            break
        tf = step @ tf
        cur = float(d.mean())
        if abs(prev - cur) < tol:
            break
        prev = cur
    d, _ = tree.query(tf.apply(src), workers=-1)
    final = float(d.mean())
    # "Converged" means the alignment did not diverge from its start.
    return tf, final, final <= initial + 1e-12


@dataclass
class SurfaceScore:
    mean_distance: float
    aligned: bool
    model_points: int
    reference_points: int


def eval_surface(
    model: PointCloud,
    reference: PointCloud,
    voxel: float = 0.2,
    align: bool = True,
    init: RigidTransform | None = None,
) -> SurfaceScore:
    """Mean distance from model points to the nearest reference point.

    The reference is voxel downsampled first; the model is rigidly aligned
    to it by ICP (initialized from `init`, e.g. a trajectory alignment)
    unless align=False. If ICP fails to converge the unaligned score is
    returned with aligned=False.
    """
    if len(model) == 0 or len(reference) == 0:
        raise NotEvaluableError("both clouds must be non-empty")
    ref = voxel_downsample(reference.points, voxel)
    pts = model.points
    if align:
        tf, _, converged = icp_point_to_point(pts, ref, init=init)
        if converged:
            pts = tf.apply(pts)
        else:
            tf0 = init if init is not None else RigidTransform.identity()
            pts = tf0.apply(pts)
        aligned = converged
    else:
        if init is not None:
            pts = init.apply(pts)
        aligned = False
    tree = cKDTree(ref)
    d, _ = tree.query(pts, workers=-1)
    return SurfaceScore(
        mean_distance=float(d.mean()),
        aligned=aligned,
        model_points=len(pts),
        reference_points=len(ref),
    )
