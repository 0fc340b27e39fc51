"""Odometry-benchmark dataset ingestion and pose-file export.

Expected layout: image_2/ with numbered color frames, times.txt,
calib.txt carrying the P2 projection row, an optional poses.txt with one
row-major 3x4 camera-to-world pose per line, an optional depth/ directory
(PFM or 16-bit PNG, matched by frame number), and an optional ref_points/
directory with per-frame "u v range_m" files.
"""

import os
import re
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .camera import CameraIntrinsics
from .depth_scale import load_depth, load_reference_points
from .errors import DepthFormatError
from .evaluate import Trajectory
from .frame import Frame
from .se3 import RigidTransform

_LUMA = np.array([0.299, 0.587, 0.114])


def export_trajectory_kitti(traj: Trajectory, path) -> None:
    """One line per frame: the 12 row-major entries of the 3x4 [R|t] matrix."""
    with open(path, "w") as fh:
        for _, pose in traj:
            m = pose.matrix()[:3].reshape(-1)
            fh.write(" ".join(f"{v:.12g}" for v in m) + "\n")


def read_trajectory_kitti(path) -> Trajectory:
    traj = Trajectory()
    with open(path) as fh:
        idx = 0
        for line in fh:
            vals = [float(x) for x in line.split()]
            if not vals:
                continue
            if len(vals) != 12:
                raise ValueError(f"{path}: pose line needs 12 values, got {len(vals)}")
            m = np.array(vals).reshape(3, 4)
            traj.append(idx, RigidTransform(m[:, :3], m[:, 3]))
            idx += 1
    return traj


def _parse_calib(path) -> tuple[float, float, float, float]:
    with open(path) as fh:
        for line in fh:
            if line.startswith("P2:"):
                vals = [float(x) for x in line.split()[1:]]
                if len(vals) != 12:
                    raise DepthFormatError(f"{path}: P2 row needs 12 values")
                return vals[0], vals[5], vals[2], vals[6]
    raise DepthFormatError(f"{path}: no P2 projection row")


@dataclass
class SequenceSource:
    """Lazily loaded dataset sequence."""

    directory: str
    intrinsics: CameraIntrinsics
    times: np.ndarray
    image_files: list[str]
    depth_files: list[str | None]
    ref_files: list[str | None]
    ground_truth: Trajectory | None
    png_divisor: float

    def __len__(self):
        return len(self.image_files)

    def frame(self, i: int) -> Frame:
        """Load frame i; raises if its image or depth file is unreadable."""
        img = np.asarray(Image.open(self.image_files[i]).convert("RGB"), dtype=np.float64)
        color = img / 255.0
        dpath = self.depth_files[i]
        if dpath is None:
            raise DepthFormatError(f"frame {i}: no depth file")
        k = self.intrinsics
        depth = load_depth(dpath, png_divisor=self.png_divisor,
                           expected_size=(k.width, k.height))
        if color.shape[:2] != (k.height, k.width):
            raise DepthFormatError(f"frame {i}: image size mismatch")
        return Frame(
            index=i,
            time=float(self.times[i]) if i < len(self.times) else float(i),
            intensity=color @ _LUMA,
            color=color,
            depth=depth,
            intrinsics=k,
        )

    def reference_points(self, i: int):
        path = self.ref_files[i]
        return load_reference_points(path) if path else None


def load_kitti_sequence(directory, png_divisor: float = 256.0) -> SequenceSource:
    """Open an odometry-layout dataset; ground truth is optional."""
    calib = os.path.join(directory, "calib.txt")
    if not os.path.isfile(calib):
        raise FileNotFoundError(f"{directory}: calib.txt is required")
    fx, fy, cx, cy = _parse_calib(calib)

    image_dir = os.path.join(directory, "image_2")
    if not os.path.isdir(image_dir):
        raise FileNotFoundError(f"{directory}: image_2/ is required")
    image_files = sorted(
        os.path.join(image_dir, f)
        for f in os.listdir(image_dir)
        if re.match(r"^\d+\.(png|jpg|jpeg)$", f, re.IGNORECASE)
    )
    if not image_files:
        raise FileNotFoundError(f"{image_dir}: no numbered image files")

    with Image.open(image_files[0]) as im:
        width, height = im.size
    k = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)

    times_path = os.path.join(directory, "times.txt")
    if os.path.isfile(times_path):
        times = np.loadtxt(times_path, dtype=np.float64).reshape(-1)
    else:
        times = np.arange(len(image_files), dtype=np.float64) * 0.1

    depth_dir = os.path.join(directory, "depth")
    depth_files: list[str | None] = []
    ref_dir = os.path.join(directory, "ref_points")
    ref_files: list[str | None] = []
    for f in image_files:
        stem = os.path.splitext(os.path.basename(f))[0]
        found = None
        if os.path.isdir(depth_dir):
            for ext in (".pfm", ".png"):
                cand = os.path.join(depth_dir, stem + ext)
                if os.path.isfile(cand):
                    found = cand
                    break
        depth_files.append(found)
        rp = os.path.join(ref_dir, stem + ".txt")
        ref_files.append(rp if os.path.isfile(rp) else None)

    poses_path = os.path.join(directory, "poses.txt")
    gt = read_trajectory_kitti(poses_path) if os.path.isfile(poses_path) else None

    return SequenceSource(
        directory=str(directory),
        intrinsics=k,
        times=times,
        image_files=image_files,
        depth_files=depth_files,
        ref_files=ref_files,
        ground_truth=gt,
        png_divisor=png_divisor,
    )
