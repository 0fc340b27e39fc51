"""Depth ingestion and metric scale recovery.

Depth maps arrive as files (16-bit PNG with a configurable divisor, or
32-bit float PFM) or from the synthetic renderer. Monocular depth carries
an unknown global scale; it is recovered either from a fitted ground
plane plus the known camera height, or from a closed-form least-squares
fit against sparse reference ranges.
"""

import re
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .camera import CameraIntrinsics, backproject_grid
from .errors import DegenerateScaleError, DepthFormatError, NoPlaneError


# -- depth files ---------------------------------------------------------------


def write_pfm(path, data: np.ndarray):
    """Write a grayscale PFM (float32, little-endian, bottom-up rows)."""
    data = np.asarray(data, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{data.shape[1]} {data.shape[0]}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(data[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() not in (b"Pf", b"PF"):
            raise DepthFormatError(f"{path}: not a grayscale PFM")
        dims = fh.readline()
        m = re.match(rb"^(\d+)\s+(\d+)", dims)
        if not m:
            raise DepthFormatError(f"{path}: bad PFM dimensions line")
        w, h = int(m.group(1)), int(m.group(2))
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(4 * w * h), dtype=dtype, count=w * h)
        if len(data) != w * h:
            raise DepthFormatError(f"{path}: truncated PFM payload")
    return data.reshape(h, w)[::-1].astype(np.float64)


def write_depth_png(path, depth: np.ndarray, divisor: float):
    """Quantize metric depth to 16-bit PNG; 0 stays the invalid marker."""
    q = np.clip(np.round(np.asarray(depth, dtype=np.float64) * divisor), 0, 65535)
    Image.fromarray(q.astype(np.uint16)).save(path)


def load_depth(
    path,
    png_divisor: float = 5000.0,
    expected_size: tuple[int, int] | None = None,
) -> np.ndarray:
    """Load a depth file into meters. Zero pixels stay invalid.

    PNG files are 16-bit integers divided by `png_divisor`; PFM files are
    float32 meters. expected_size is (width, height) from the sequence
    intrinsics.
    """
    path = str(path)
    if path.lower().endswith(".pfm"):
        depth = read_pfm(path)
    elif path.lower().endswith(".png"):
        img = Image.open(path)
        arr = np.array(img)
        if arr.dtype not in (np.uint16, np.int32, np.uint8):
            raise DepthFormatError(f"{path}: unexpected PNG sample type {arr.dtype}")
        depth = arr.astype(np.float64) / png_divisor
    else:
        raise DepthFormatError(f"{path}: unsupported depth format")
    if expected_size is not None and (depth.shape[1], depth.shape[0]) != expected_size:
        raise DepthFormatError(
            f"{path}: {depth.shape[1]}x{depth.shape[0]} does not match "
            f"sequence size {expected_size[0]}x{expected_size[1]}"
        )
    if np.any(depth < 0) or not np.all(np.isfinite(depth)):
        raise DepthFormatError(f"{path}: negative or non-finite depths")
    return depth


def load_reference_points(path) -> np.ndarray:
    """Read per-frame reference ranges: one "u v range_m" triple per line."""
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            u, v, r = line.split()[:3]
            rows.append((float(u), float(v), float(r)))
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


# -- ground plane ----------------------------------------------------------------


@dataclass
class GroundPlaneFit:
    """Plane n . x = d in the camera frame, normal oriented upward."""

    normal: np.ndarray
    offset: float
    inlier_count: int
    camera_height_est: float


def fit_ground_plane(
    depth: np.ndarray,
    k: CameraIntrinsics,
    lower_band: float = 0.4,
    ransac_iters: int = 200,
    inlier_tol: float = 0.05,
    min_inliers: int = 300,
    seed: int = 0,
) -> GroundPlaneFit:
    """RANSAC + least-squares plane fit on the lower image band.

    Pixels from the lower `lower_band` fraction of the image are
    back-projected; the best RANSAC plane (within inlier_tol meters) is
    refined on its inliers. The camera height estimate is the distance
    from the camera origin to the plane.
    """
    h = depth.shape[0]
    band_mask = np.zeros_like(depth, dtype=bool)
    band_mask[int(round(h * (1.0 - lower_band))):] = True
    band_mask &= depth > 0
    pts = backproject_grid(depth, k)[band_mask]
    if len(pts) < min_inliers:
        raise NoPlaneError(f"only {int(band_mask.sum())} valid pixels in the lower band")

    rng = np.random.default_rng(seed)
    best_count = 0
    best_inliers = None
    for _ in range(ransac_iters):
        i, j, l = rng.choice(len(pts), size=3, replace=False)
        n = np.cross(pts[j] - pts[i], pts[l] - pts[i])
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n = n / norm
        d = n @ pts[i]
        inl = np.abs(pts @ n - d) < inlier_tol
        count = int(inl.sum())
        if count > best_count:
            best_count = count
            best_inliers = inl
    if best_count < min_inliers:
        raise NoPlaneError(f"best plane has {best_count} inliers < {min_inliers}")

    sel = pts[best_inliers]
    centroid = sel.mean(axis=0)
    cov = (sel - centroid).T @ (sel - centroid)
    _, vecs = np.linalg.eigh(cov)
    n = vecs[:, 0]
    # Upward = negative image-y direction in the camera frame.
    if n[1] > 0:
        n = -n
    d = float(n @ centroid)
    inl = np.abs(pts @ n - d) < inlier_tol
    return GroundPlaneFit(
        normal=n,
        offset=d,
        inlier_count=int(inl.sum()),
        camera_height_est=abs(d),
    )


# -- scale estimation --------------------------------------------------------------


def scale_from_ground_plane(fit: GroundPlaneFit, known_height: float) -> float:
    if known_height <= 0:
        raise ValueError("known camera height must be positive")
    if fit.camera_height_est <= 1e-9:
        raise DegenerateScaleError("estimated camera height is ~0")
    return known_height / fit.camera_height_est


def scale_from_reference_points(pred: np.ndarray, ref: np.ndarray) -> float:
    """Closed-form minimizer of ||s * pred - ref||^2: s = <pred, ref> / <pred, pred>."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if len(pred) != len(ref) or len(pred) == 0:
        raise DegenerateScaleError("need matched non-empty prediction/reference lists")
    denom = float(pred @ pred)
    if denom <= 0:
        raise DegenerateScaleError("sum of squared predictions is zero")
    return float(pred @ ref) / denom


def apply_scale(depth: np.ndarray, s: float) -> np.ndarray:
    """Multiply valid depths by s; invalid (zero) pixels stay invalid."""
    if s <= 0:
        raise ValueError("scale must be positive")
    out = np.asarray(depth, dtype=np.float64).copy()
    out[out > 0] *= s
    return out


@dataclass
class DepthSource:
    """How depth enters the pipeline and how its scale is recovered.

    kind "files" reads from the dataset's depth directory; "synthetic"
    marks renderer-provided depth. scale_mode is one of none, fixed,
    ground_plane, reference_points, or combined (reference points when
    present, ground plane otherwise).
    """

    kind: str = "files"
    scale_mode: str = "none"
    fixed_scale: float = 1.0
    known_camera_height: float = 1.65
    median_window: int = 9
    lower_band: float = 0.4
    ransac_iters: int = 200
    inlier_tol: float = 0.05
    min_inliers: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("files", "synthetic"):
            raise ValueError(f"unknown depth source kind {self.kind!r}")
        if self.scale_mode not in ("none", "fixed", "ground_plane", "reference_points", "combined"):
            raise ValueError(f"unknown scale mode {self.scale_mode!r}")
        if self.fixed_scale <= 0:
            raise ValueError("fixed scale must be positive")
        self._history: list[float] = []

    def _raw_scale(self, depth, k, ref_points) -> float | None:
        mode = self.scale_mode
        if mode == "combined":
            mode = (
                "reference_points"
                if ref_points is not None and len(ref_points) > 0
                else "ground_plane"
            )
        if mode == "none":
            return None
        if mode == "fixed":
            return self.fixed_scale
        if mode == "reference_points":
            if ref_points is None or len(ref_points) == 0:
                return None
            u = ref_points[:, 0].astype(np.int64)
            v = ref_points[:, 1].astype(np.int64)
            ok = (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
            u, v, rng = u[ok], v[ok], ref_points[ok, 2]
            d = depth[v, u]
            ok = d > 0
            if ok.sum() == 0:
                return None
            pts = np.stack(
                [(u[ok] - k.cx) * d[ok] / k.fx, (v[ok] - k.cy) * d[ok] / k.fy, d[ok]],
                axis=1,
            )
            pred_range = np.linalg.norm(pts, axis=1)
            return scale_from_reference_points(pred_range, rng[ok])
        fit = fit_ground_plane(
            depth, k,
            lower_band=self.lower_band, ransac_iters=self.ransac_iters,
            inlier_tol=self.inlier_tol, min_inliers=self.min_inliers, seed=self.seed,
        )
        return scale_from_ground_plane(fit, self.known_camera_height)

    def scale_for_frame(
        self,
        depth: np.ndarray,
        k: CameraIntrinsics,
        ref_points: np.ndarray | None = None,
    ) -> float:
        """Per-frame scale, median-filtered over the recent window.

        Frames where no estimate is possible reuse the smoothed history
        (or 1.0 before any estimate exists).
        """
        if self.scale_mode == "none":
            return 1.0
        try:
            raw = self._raw_scale(depth, k, ref_points)
        except (NoPlaneError, DegenerateScaleError):
            raw = None
        if raw is not None:
            self._history.append(float(raw))
            if len(self._history) > self.median_window:
                self._history = self._history[-self.median_window:]
        if not self._history:
            return 1.0
        return float(np.median(self._history))
