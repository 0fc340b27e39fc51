"""Synthetic scene rendering and dataset generation.

A small CPU raycaster over textured Lambertian primitives (infinite
planes, rectangles, axis-aligned boxes, spheres) with exact depth and
ground-truth poses. World convention matches the camera: x right, y down,
z forward; the ground plane sits at positive y below the camera.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .camera import CameraIntrinsics
from .depth_scale import write_depth_png, write_pfm
from .errors import SceneGenerationError
from .evaluate import PointCloud, Trajectory
from .frame import Frame
from .se3 import RigidTransform

_LUMA = np.array([0.299, 0.587, 0.114])
_EPS = 1e-9


def _normalize(v):
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class TextureSpec:
    """Procedural albedo: checkerboard plus two incommensurate waves.

    The waves guarantee nonzero image gradients inside checker cells,
    which the photometric term and the corner matcher both rely on.
    """

    base: float = 0.55
    checker_amp: float = 0.22
    checker_scale: float = 1.0
    wave_amp: float = 0.18
    wave_freq_u: float = 0.53
    wave_freq_v: float = 0.79
    tint: tuple[float, float, float] = (1.0, 0.95, 0.9)

    def albedo(self, su: np.ndarray, sv: np.ndarray) -> np.ndarray:
        checker = ((np.floor(su / self.checker_scale) + np.floor(sv / self.checker_scale)) % 2) * 2.0 - 1.0
        waves = 0.5 * (
            np.sin(2.0 * np.pi * self.wave_freq_u * su)
            + np.sin(2.0 * np.pi * self.wave_freq_v * sv)
        )
        return np.clip(self.base + self.checker_amp * checker + self.wave_amp * waves, 0.02, 1.0)


def _tangent_frame(normal):
    n = _normalize(np.asarray(normal, dtype=np.float64))
    aux = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    t1 = _normalize(np.cross(n, aux))
    t2 = np.cross(n, t1)
    return n, t1, t2


@dataclass(frozen=True)
class Plane:
    """Infinite textured plane through `point` with the given normal."""

    point: tuple[float, float, float]
    normal: tuple[float, float, float]
    texture: TextureSpec = field(default_factory=TextureSpec)

    def intersect(self, origin, dirs):
        n, _, _ = _tangent_frame(self.normal)
        p0 = np.asarray(self.point, dtype=np.float64)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((p0 - origin) @ n) / denom
        t[np.abs(denom) < _EPS] = np.inf
        t[t <= _EPS] = np.inf
        return t

    def surface(self, pts):
        n, t1, t2 = _tangent_frame(self.normal)
        rel = pts - np.asarray(self.point, dtype=np.float64)
        albedo = self.texture.albedo(rel @ t1, rel @ t2)
        normals = np.broadcast_to(n, pts.shape).copy()
        return albedo, normals

    def contains(self, p, margin=0.0):
        return False


@dataclass(frozen=True)
class Rect:
    """Finite plane patch: half_u x half_v around `center`."""

    center: tuple[float, float, float]
    normal: tuple[float, float, float]
    half_u: float
    half_v: float
    texture: TextureSpec = field(default_factory=TextureSpec)

    def intersect(self, origin, dirs):
        n, t1, t2 = _tangent_frame(self.normal)
        c = np.asarray(self.center, dtype=np.float64)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - origin) @ n) / denom
        t = np.where(np.abs(denom) < _EPS, np.inf, t)
        t = np.where(t <= _EPS, np.inf, t)
        with np.errstate(invalid="ignore"):
            pts = origin + t[:, None] * dirs
            rel = pts - c
            inside = (np.abs(rel @ t1) <= self.half_u) & (np.abs(rel @ t2) <= self.half_v)
        return np.where(inside, t, np.inf)

    def surface(self, pts):
        n, t1, t2 = _tangent_frame(self.normal)
        rel = pts - np.asarray(self.center, dtype=np.float64)
        albedo = self.texture.albedo(rel @ t1, rel @ t2)
        normals = np.broadcast_to(n, pts.shape).copy()
        return albedo, normals

    def contains(self, p, margin=0.0):
        return False


@dataclass(frozen=True)
class Box:
    """Axis-aligned box between corners minimum and maximum."""

    minimum: tuple[float, float, float]
    maximum: tuple[float, float, float]
    texture: TextureSpec = field(default_factory=TextureSpec)

    def intersect(self, origin, dirs):
        lo = np.asarray(self.minimum, dtype=np.float64)
        hi = np.asarray(self.maximum, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
        t_lo = (lo - origin) * inv
        t_hi = (hi - origin) * inv
        t1 = np.fmin(t_lo, t_hi)
        t2 = np.fmax(t_lo, t_hi)
        near = np.nanmax(t1, axis=1)
        far = np.nanmin(t2, axis=1)
        hit = (near <= far) & (near > _EPS)
        return np.where(hit, near, np.inf)

    def surface(self, pts):
        lo = np.asarray(self.minimum, dtype=np.float64)
        hi = np.asarray(self.maximum, dtype=np.float64)
        # The entry face is the axis whose boundary the point lies on.
        d_lo = np.abs(pts - lo)
        d_hi = np.abs(pts - hi)
        dist = np.minimum(d_lo, d_hi)
        axis = np.argmin(dist, axis=1)
        sign = np.where(np.take_along_axis(d_lo, axis[:, None], 1)[:, 0]
                        <= np.take_along_axis(d_hi, axis[:, None], 1)[:, 0], -1.0, 1.0)
        normals = np.zeros_like(pts)
        normals[np.arange(len(pts)), axis] = sign
        u_axis = (axis + 1) % 3
        v_axis = (axis + 2) % 3
        su = np.take_along_axis(pts, u_axis[:, None], 1)[:, 0]
        sv = np.take_along_axis(pts, v_axis[:, None], 1)[:, 0]
        return self.texture.albedo(su, sv), normals

    def contains(self, p, margin=0.0):
        lo = np.asarray(self.minimum) - margin
        hi = np.asarray(self.maximum) + margin
        return bool(np.all(p > lo) and np.all(p < hi))


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    texture: TextureSpec = field(default_factory=TextureSpec)

    def intersect(self, origin, dirs):
        c = np.asarray(self.center, dtype=np.float64)
        oc = origin - c
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * dirs @ oc
        cc = oc @ oc - self.radius**2
        disc = b * b - 4 * a * cc
        t = np.full(len(dirs), np.inf)
        ok = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        cand = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
        t[ok] = cand[ok]
        return t

    def surface(self, pts):
        c = np.asarray(self.center, dtype=np.float64)
        normals = (pts - c) / self.radius
        az = np.arctan2(normals[:, 1], normals[:, 0]) * self.radius
        el = np.arcsin(np.clip(normals[:, 2], -1, 1)) * self.radius
        return self.texture.albedo(az, el), normals

    def contains(self, p, margin=0.0):
        return bool(np.linalg.norm(p - np.asarray(self.center)) < self.radius + margin)


# -- trajectories ---------------------------------------------------------------


def look_at(origin, target, down=(0.0, 1.0, 0.0)) -> RigidTransform:
    """Camera-to-world pose at `origin` with +z toward `target`."""
    origin = np.asarray(origin, dtype=np.float64)
    z = _normalize(np.asarray(target, dtype=np.float64) - origin)
    d = np.asarray(down, dtype=np.float64)
    if abs(d @ z) > 0.99:
        d = np.array([0.0, 0.0, 1.0])
    x = _normalize(np.cross(d, z))
    y = np.cross(z, x)
    return RigidTransform(np.column_stack([x, y, z]), origin)


def waypoint_trajectory(
    waypoints,
    n_frames: int,
    speed: float = 1.0,
    fps: float = 10.0,
    look_ahead: float = 2.0,
    closed: bool = False,
) -> list[RigidTransform]:
    """Constant-speed poses along a polyline, looking down the path.

    With closed=True the path wraps around, so trajectories can revisit
    their start for loop-closure scenarios.
    """
    wp = np.asarray(waypoints, dtype=np.float64)
    if closed:
        wp = np.vstack([wp, wp[:1]])
    seg = np.diff(wp, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    if total <= 0:
        return [look_at(wp[0], wp[0] + np.array([0, 0, 1.0]))] * n_frames

    def point_at(s):
        if closed:
            s = s % total
        s = min(max(s, 0.0), total)
        i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        f = (s - cum[i]) / max(seg_len[i], 1e-12)
        return wp[i] + f * seg[i]

    step = speed / fps
    poses = []
    for i in range(n_frames):
        s = i * step
        p = point_at(s)
        q = point_at(s + look_ahead)
        if np.linalg.norm(q - p) < 1e-9:
            q = p + (seg[-1] / max(seg_len[-1], 1e-12))
        poses.append(look_at(p, q))
    return poses


def orbit_trajectory(center, radius: float, n_frames: int, sweep_deg: float = 360.0):
    """Camera circling `center` in the horizontal plane, looking inward."""
    c = np.asarray(center, dtype=np.float64)
    poses = []
    for i in range(n_frames):
        a = np.deg2rad(sweep_deg) * i / max(n_frames, 1)
        origin = c + radius * np.array([np.sin(a), 0.0, -np.cos(a)])
        poses.append(look_at(origin, c))
    return poses


# -- scenes ----------------------------------------------------------------------


@dataclass
class SceneSpec:
    """Primitives plus a camera path (explicit poses or waypoints + speed)."""

    primitives: list
    poses: list[RigidTransform] | None = None
    waypoints: list | None = None
    speed: float = 1.0
    fps: float = 10.0
    look_ahead: float = 2.0
    closed: bool = False
    light_dir: tuple[float, float, float] = (0.4, -0.7, 0.35)
    ambient: float = 0.35

    def __post_init__(self):
        if not self.primitives:
            raise SceneGenerationError("scene needs at least one primitive")

    def trajectory(self, n_frames: int) -> list[RigidTransform]:
        if self.poses is not None:
            if len(self.poses) < n_frames:
                raise SceneGenerationError(
                    f"scene provides {len(self.poses)} poses, need {n_frames}"
                )
            return list(self.poses[:n_frames])
        if self.waypoints is None:
            raise SceneGenerationError("scene needs poses or waypoints")
        return waypoint_trajectory(
            self.waypoints, n_frames, speed=self.speed, fps=self.fps,
            look_ahead=self.look_ahead, closed=self.closed,
        )


@dataclass
class RenderedFrame:
    frame: Frame
    normal_world: np.ndarray


def _cast(spec: SceneSpec, origin: np.ndarray, dirs: np.ndarray):
    """Nearest-hit raycast: returns (ray parameter t, primitive id) per ray."""
    best_t = np.full(len(dirs), np.inf)
    best_id = np.full(len(dirs), -1, dtype=np.int64)
    for pid, prim in enumerate(spec.primitives):
        t = prim.intersect(origin, dirs)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_id[closer] = pid
    return best_t, best_id


def _shade(spec: SceneSpec, origin, dirs, best_t, best_id) -> np.ndarray:
    albedo = np.zeros(len(dirs))
    normals = np.zeros((len(dirs), 3))
    for pid, prim in enumerate(spec.primitives):
        sel = best_id == pid
        if not sel.any():
            continue
        pts = origin + best_t[sel, None] * dirs[sel]
        a, n = prim.surface(pts)
        albedo[sel] = a
        normals[sel] = n
    light = _normalize(np.asarray(spec.light_dir, dtype=np.float64))
    lam = spec.ambient + (1.0 - spec.ambient) * np.abs(normals @ light)
    shade = np.where(best_id >= 0, albedo * lam, 0.0)
    tints = np.array(
        [np.asarray(p.texture.tint, dtype=np.float64) for p in spec.primitives]
    )
    color = np.zeros((len(dirs), 3))
    hit = best_id >= 0
    color[hit] = shade[hit, None] * tints[best_id[hit]]
    return np.clip(color, 0.0, 1.0), normals


def render_view(spec: SceneSpec, pose: RigidTransform, k: CameraIntrinsics,
                index: int = 0, time: float = 0.0, supersample: int = 1) -> RenderedFrame:
    """Raycast one camera view with exact per-pixel depth.

    supersample > 1 area-averages color over an s x s sub-pixel grid
    (anti-aliasing); depth and normals stay point samples at the pixel
    center so geometry remains exact.
    """
    for prim in spec.primitives:
        if prim.contains(pose.translation, margin=0.05):
            raise SceneGenerationError(f"camera at {pose.translation} is inside geometry")

    h, w = k.height, k.width
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    du = (u[None, :] - k.cx) / k.fx
    dv = (v[:, None] - k.cy) / k.fy
    dirs_cam = np.stack(
        [np.broadcast_to(du, (h, w)), np.broadcast_to(dv, (h, w)), np.ones((h, w))],
        axis=-1,
    ).reshape(-1, 3)
    dirs = dirs_cam @ pose.rotation.T
    origin = pose.translation

    # z=1 camera-frame ray directions make the ray parameter equal the depth.
    best_t, best_id = _cast(spec, origin, dirs)
    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    color, normals = _shade(spec, origin, dirs, best_t, best_id)

    s = int(supersample)
    if s > 1:
        acc = np.zeros_like(color)
        offsets = (np.arange(s) + 0.5) / s - 0.5
        for oy in offsets:
            for ox in offsets:
                ddu = (u[None, :] + ox - k.cx) / k.fx
                ddv = (v[:, None] + oy - k.cy) / k.fy
                d2 = np.stack(
                    [np.broadcast_to(ddu, (h, w)), np.broadcast_to(ddv, (h, w)),
                     np.ones((h, w))],
                    axis=-1,
                ).reshape(-1, 3) @ pose.rotation.T
                t2, id2 = _cast(spec, origin, d2)
                c2, _ = _shade(spec, origin, d2, t2, id2)
                acc += c2
        color = acc / (s * s)

    frame = Frame(
        index=index,
        time=time,
        intensity=(color @ _LUMA).reshape(h, w),
        color=color.reshape(h, w, 3),
        depth=depth.reshape(h, w),
        intrinsics=k,
    )
    return RenderedFrame(frame=frame, normal_world=normals.reshape(h, w, 3))


def synth_generate(
    spec: SceneSpec,
    n_frames: int,
    k: CameraIntrinsics,
    cloud_stride: int = 8,
) -> tuple[list[Frame], Trajectory, PointCloud]:
    """Render a full sequence: frames, ground-truth trajectory, ground-truth cloud."""
    poses = spec.trajectory(n_frames)
    frames = []
    gt = Trajectory()
    cloud_parts = []
    for i, pose in enumerate(poses):
        rf = render_view(spec, pose, k, index=i, time=i / spec.fps)
        frames.append(rf.frame)
        gt.append(i, pose)
        d = rf.frame.depth[::cloud_stride, ::cloud_stride]
        ys, xs = np.nonzero(d > 0)
        if len(xs):
            zz = d[ys, xs]
            uu = xs * cloud_stride
            vv = ys * cloud_stride
            pts = np.stack(
                [(uu - k.cx) * zz / k.fx, (vv - k.cy) * zz / k.fy, zz], axis=1
            )
            cloud_parts.append(pose.apply(pts))
    cloud = PointCloud(np.concatenate(cloud_parts) if cloud_parts else np.zeros((0, 3)))
    return frames, gt, cloud


# -- dataset on disk -------------------------------------------------------------


def write_dataset(
    out_dir,
    frames: list[Frame],
    trajectory: Trajectory,
    depth_format: str = "pfm",
    png_divisor: float = 256.0,
) -> None:
    """Write an odometry-benchmark style dataset directory.

    Layout: image_2/ 8-bit color PNGs, depth/ PFM or 16-bit PNG files,
    times.txt, calib.txt with the P2 projection row, poses.txt with one
    row-major 3x4 pose per line.
    """
    os.makedirs(os.path.join(out_dir, "image_2"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "depth"), exist_ok=True)
    k = frames[0].intrinsics
    with open(os.path.join(out_dir, "calib.txt"), "w") as fh:
        row = f"{k.fx:.12e} 0.000000000000e+00 {k.cx:.12e} 0.000000000000e+00 " \
              f"0.000000000000e+00 {k.fy:.12e} {k.cy:.12e} 0.000000000000e+00 " \
              f"0.000000000000e+00 0.000000000000e+00 1.000000000000e+00 0.000000000000e+00"
        for name in ("P0", "P1", "P2", "P3"):
            fh.write(f"{name}: {row}\n")
    with open(os.path.join(out_dir, "times.txt"), "w") as fh:
        for f in frames:
            fh.write(f"{f.time:.6e}\n")
    for f in frames:
        img = np.clip(np.round(f.color * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(os.path.join(out_dir, "image_2", f"{f.index:06d}.png"))
        if depth_format == "pfm":
            write_pfm(os.path.join(out_dir, "depth", f"{f.index:06d}.pfm"), f.depth)
        elif depth_format == "png":
            write_depth_png(
                os.path.join(out_dir, "depth", f"{f.index:06d}.png"), f.depth, png_divisor
            )
        else:
            raise ValueError(f"unknown depth format {depth_format!r}")
    from .kitti import export_trajectory_kitti

    export_trajectory_kitti(trajectory, os.path.join(out_dir, "poses.txt"))


# -- reusable scene presets -------------------------------------------------------


def wall_scene(distance: float = 3.5) -> SceneSpec:
    """A textured wall ahead of the origin plus floor: dense-tracking testbed."""
    prims = [
        Rect(center=(0.0, 0.0, distance), normal=(0.0, 0.0, -1.0),
             half_u=6.0, half_v=4.0,
             texture=TextureSpec(checker_scale=0.7, tint=(1.0, 0.9, 0.8))),
        Plane(point=(0.0, 1.6, 0.0), normal=(0.0, -1.0, 0.0),
              texture=TextureSpec(checker_scale=0.9, wave_freq_u=0.41, tint=(0.8, 0.9, 1.0))),
        Box(minimum=(-2.5, 0.2, distance - 1.6), maximum=(-1.3, 1.6, distance - 0.6),
            texture=TextureSpec(checker_scale=0.35, tint=(0.9, 1.0, 0.85))),
        Sphere(center=(1.8, 0.6, distance - 1.2), radius=0.7,
               texture=TextureSpec(checker_scale=0.5, tint=(1.0, 0.85, 0.95))),
    ]
    return SceneSpec(primitives=prims, poses=[RigidTransform.identity()])


def ground_scene(camera_height: float = 1.65) -> SceneSpec:
    """Flat ground below the camera plus a few boxes: scale-recovery testbed."""
    prims = [
        Plane(point=(0.0, camera_height, 0.0), normal=(0.0, -1.0, 0.0),
              texture=TextureSpec(checker_scale=1.5)),
        Box(minimum=(-4.0, camera_height - 2.0, 8.0), maximum=(-2.0, camera_height, 10.0)),
        Box(minimum=(2.5, camera_height - 1.5, 12.0), maximum=(4.5, camera_height, 14.0)),
    ]
    return SceneSpec(primitives=prims, poses=[RigidTransform.identity()])


def square_route_scene(side: float = 16.0, camera_height: float = 1.5) -> SceneSpec:
    """Ground plane with box 'buildings' lining a square route.

    Waypoints run the square counterclockwise starting at the origin;
    use closed=True trajectories to revisit the start.
    """
    h = camera_height
    prims = [
        Plane(point=(0.0, h, 0.0), normal=(0.0, -1.0, 0.0),
              texture=TextureSpec(checker_scale=2.0, tint=(0.85, 0.95, 1.0))),
    ]
    margin = side * 0.33
    step = side / 2.0
    rng_positions = []
    for i in range(3):
        for j in range(3):
            rng_positions.append((-margin + i * (side + 2 * margin) / 2.0,
                                  -margin + j * (side + 2 * margin) / 2.0))
    # Boxes offset from the route on both sides, varied sizes for texture parallax.
    for idx, (x, z) in enumerate(rng_positions):
        if 0.0 < x < side and 0.0 < z < side:
            continue  # keep the interior clear of the path
        size = 1.2 + 0.35 * ((idx * 2654435761) % 5)
        tex = TextureSpec(
            checker_scale=0.5 + 0.13 * (idx % 4),
            wave_freq_u=0.47 + 0.11 * (idx % 3),
            tint=(1.0 - 0.06 * (idx % 3), 0.9 + 0.03 * (idx % 2), 0.85 + 0.05 * (idx % 3)),
        )
        prims.append(Box(minimum=(x - size, h - 2.0 - 0.3 * (idx % 3), z - size),
                         maximum=(x + size, h, z + size), texture=tex))
    waypoints = [(0.0, 0.0, 0.0), (0.0, 0.0, side), (side, 0.0, side), (side, 0.0, 0.0)]
    return SceneSpec(primitives=prims, waypoints=waypoints, closed=True, look_ahead=3.0)
