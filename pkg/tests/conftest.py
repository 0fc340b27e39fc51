import numpy as np
import pytest

from monofuse.camera import CameraIntrinsics
from monofuse.se3 import RigidTransform
from monofuse.synth import Box, Plane, Rect, SceneSpec, Sphere, TextureSpec


@pytest.fixture
def small_k():
    return CameraIntrinsics(fx=80.0, fy=80.0, cx=47.5, cy=35.5, width=96, height=72)


@pytest.fixture
def mid_k():
    return CameraIntrinsics(fx=160.0, fy=160.0, cx=79.5, cy=59.5, width=160, height=120)


def smooth_tex(fu=0.37, fv=0.61, amp=0.35):
    """Band-limited texture: safe for photometric sub-pixel interpolation."""
    return TextureSpec(checker_amp=0.0, wave_amp=amp, wave_freq_u=fu, wave_freq_v=fv)


def corner_scene() -> SceneSpec:
    """Three mutually tilted rectangles filling the view: constrains all 6 DOF
    through planes only, so point-to-plane alignment has no curvature bias."""
    return SceneSpec(
        primitives=[
            Rect(center=(-1.2, 0.0, 3.2), normal=(0.55, 0.0, -1.0),
                 half_u=4.0, half_v=4.0, texture=smooth_tex(0.37, 0.61)),
            Rect(center=(1.4, 0.0, 3.0), normal=(-0.6, 0.1, -1.0),
                 half_u=4.0, half_v=4.0, texture=smooth_tex(0.53, 0.31)),
            Rect(center=(0.0, 1.4, 2.2), normal=(0.05, -1.0, -0.25),
                 half_u=5.0, half_v=5.0, texture=smooth_tex(0.43, 0.71)),
        ],
        poses=[RigidTransform.identity()],
    )


def cluttered_scene() -> SceneSpec:
    """Wall + floor + box + sphere with checkered texture: corner-rich."""
    return SceneSpec(
        primitives=[
            Rect(center=(0.0, 0.0, 3.5), normal=(0.0, 0.0, -1.0), half_u=6.0, half_v=4.0,
                 texture=TextureSpec(checker_scale=0.7, tint=(1.0, 0.9, 0.8))),
            Plane(point=(0.0, 1.6, 0.0), normal=(0.0, -1.0, 0.0),
                  texture=TextureSpec(checker_scale=0.9, tint=(0.8, 0.9, 1.0))),
            Box(minimum=(-2.5, 0.2, 1.9), maximum=(-1.3, 1.6, 2.9),
                texture=TextureSpec(checker_scale=0.35)),
            Sphere(center=(1.8, 0.6, 2.3), radius=0.7,
                   texture=TextureSpec(checker_scale=0.5)),
        ],
        poses=[RigidTransform.identity()],
    )


def random_rigid(rng, max_trans=1.0, max_angle_rad=0.5) -> RigidTransform:
    from monofuse.se3 import se3_exp

    ax = rng.normal(size=3)
    ax /= np.linalg.norm(ax)
    td = rng.normal(size=3)
    td /= np.linalg.norm(td)
    angle = rng.uniform(0, max_angle_rad)
    trans = rng.uniform(0, max_trans)
    return se3_exp(np.concatenate([angle * ax, trans * td]))
