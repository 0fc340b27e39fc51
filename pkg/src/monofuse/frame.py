"""Image frames, pyramid construction, and depth-map normal estimation."""

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, backproject_grid
from .errors import ImageSizeError


@dataclass(frozen=True)
class Frame:
    """One ingested camera frame: grayscale + color + metric depth.

    depth is in meters with 0 marking invalid pixels; intensity and color
    are in [0, 1]. All planes match the intrinsics' width/height.
    """

    index: int
    time: float
    intensity: np.ndarray
    color: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        h, w = self.intensity.shape
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise ValueError("intensity size does not match intrinsics")
        if self.color.shape != (h, w, 3):
            raise ValueError("color size does not match intensity")
        if self.depth.shape != (h, w):
            raise ValueError("depth size does not match intensity")
        if np.any(self.depth < 0):
            raise ValueError("depth entries must be >= 0")
        for a in (self.intensity, self.color, self.depth):
            a.setflags(write=False)

    @staticmethod
    def from_gray_depth(index, time, intensity, depth, k) -> "Frame":
        color = np.repeat(intensity[..., None], 3, axis=2)
        return Frame(index, time, intensity, color, depth, k)


@dataclass(frozen=True)
class Pyramid:
    """Coarse-to-fine stack of frames; level 0 is full resolution."""

    levels: list[Frame] = field(default_factory=list)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i) -> Frame:
        return self.levels[i]


def _box_down(img: np.ndarray) -> np.ndarray:
    """2x2 box filter followed by subsampling (odd trailing row/col dropped)."""
    h2, w2 = img.shape[0] // 2, img.shape[1] // 2
    c = img[: 2 * h2, : 2 * w2]
    if img.ndim == 2:
        return 0.25 * (c[0::2, 0::2] + c[1::2, 0::2] + c[0::2, 1::2] + c[1::2, 1::2])
    return 0.25 * (c[0::2, 0::2] + c[1::2, 0::2] + c[0::2, 1::2] + c[1::2, 1::2])


def _depth_down(depth: np.ndarray) -> np.ndarray:
    """Subsample depth without averaging across discontinuities.

    Each 2x2 block contributes its first valid sample in (TL, TR, BL, BR)
    order; an all-invalid block stays invalid. Averaging is never applied,
    so no level can contain depths absent from the previous one.
    """
    h2, w2 = depth.shape[0] // 2, depth.shape[1] // 2
    c = depth[: 2 * h2, : 2 * w2]
    quads = np.stack([c[0::2, 0::2], c[0::2, 1::2], c[1::2, 0::2], c[1::2, 1::2]])
    valid = quads > 0
    first = np.argmax(valid, axis=0)
    out = np.take_along_axis(quads, first[None], axis=0)[0]
    out[~valid.any(axis=0)] = 0.0
    return out


def build_pyramid(f: Frame, levels: int = 3) -> Pyramid:
    """Downsample a frame into a pyramid, halving each level.

    Intensity and color are box filtered; depth uses nearest-valid
    subsampling; intrinsics scale all four parameters by 0.5 per level.
    """
    if levels < 1:
        raise ImageSizeError("pyramid needs at least one level")
    min_side = 2 ** (levels - 1)
    if f.intrinsics.width < min_side or f.intrinsics.height < min_side:
        raise ImageSizeError(
            f"{f.intrinsics.width}x{f.intrinsics.height} too small for {levels} levels"
        )
    out = [f]
    cur = f
    for _ in range(levels - 1):
        k = cur.intrinsics.halved()
        nxt = Frame(
            index=cur.index,
            time=cur.time,
            intensity=_box_down(cur.intensity)[: k.height, : k.width],
            color=_box_down(cur.color)[: k.height, : k.width],
            depth=_depth_down(cur.depth)[: k.height, : k.width],
            intrinsics=k,
        )
        out.append(nxt)
        cur = nxt
    return Pyramid(out)


def compute_normals(
    depth: np.ndarray, k: CameraIntrinsics, rel_threshold: float = 0.1
) -> np.ndarray:
    """Per-pixel unit normals (camera frame) from central differences.

    A pixel is invalid (zero vector) when the center or any 4-neighbor has
    invalid depth, or when a neighbor's depth differs from the center by
    more than rel_threshold relative, which keeps normals from smearing
    across object boundaries. Valid normals satisfy n . p < 0 (toward the
    camera).
    """
    pts = backproject_grid(depth, k)
    h, w = depth.shape
    normals = np.zeros((h, w, 3))
    if h < 3 or w < 3:
        return normals

    center = depth[1:-1, 1:-1]
    left, right = depth[1:-1, :-2], depth[1:-1, 2:]
    up, down = depth[:-2, 1:-1], depth[2:, 1:-1]
    valid = (center > 0) & (left > 0) & (right > 0) & (up > 0) & (down > 0)
    gap = rel_threshold * center
    valid &= (
        (np.abs(left - center) <= gap)
        & (np.abs(right - center) <= gap)
        & (np.abs(up - center) <= gap)
        & (np.abs(down - center) <= gap)
    )

    dpdu = pts[1:-1, 2:] - pts[1:-1, :-2]
    dpdv = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(dpdu, dpdv)
    norm = np.linalg.norm(n, axis=-1)
    valid &= norm > 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        n /= norm[..., None]
    # Orient toward the camera: n . p must be negative.
    flip = np.einsum("ijk,ijk->ij", n, pts[1:-1, 1:-1]) > 0
    n[flip] = -n[flip]
    n[~valid] = 0.0
    normals[1:-1, 1:-1] = n
    return normals
