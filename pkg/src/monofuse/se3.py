"""Rigid transforms on SE(3) and their tangent-space parameterization.

The twist convention is (rx, ry, rz, tx, ty, tz): rotational part first,
in radians, translational part second, in meters.
"""

from dataclasses import dataclass, field

import numpy as np

_SMALL_ANGLE = 1e-8
_ORTHO_TOL = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(a) @ b == cross(a, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose as a 3x3 rotation and a 3-vector translation (meters).

    Arrays are copied on construction and marked read-only so a transform
    can be shared freely between pipeline stages.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        err = np.linalg.norm(r.T @ r - np.eye(3))
        if err > 1e-4:
            raise ValueError(f"rotation not orthonormal (|R^T R - I| = {err:.3g})")
        if err > _ORTHO_TOL:
            # Text-format pose files carry ~1e-6 precision; snap back onto SO(3)
            # so the orthonormality invariant holds for every instance.
            u, _, vt = np.linalg.svd(r)
            r = u @ vt
            if np.linalg.det(r) < 0:
                u[:, -1] = -u[:, -1]
                r = u @ vt
        if np.linalg.det(r) < 0:
            raise ValueError("rotation must have determinant +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return RigidTransform(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        v = np.asarray(vectors, dtype=np.float64)
        if v.ndim == 1:
            return self.rotation @ v
        return v @ self.rotation.T

    def orthonormalized(self) -> "RigidTransform":
        """Re-project the rotation onto SO(3); use after long composition chains."""
        u, _, vt = np.linalg.svd(self.rotation)
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, -1] = -u[:, -1]
            r = u @ vt
        return RigidTransform(r, self.translation)

    def almost_equal(self, other: "RigidTransform", tol: float = 1e-9) -> bool:
        return (
            np.allclose(self.rotation, other.rotation, atol=tol)
            and np.allclose(self.translation, other.translation, atol=tol)
        )

    def __repr__(self):
        t = self.translation
        return f"RigidTransform(t=[{t[0]:.4f}, {t[1]:.4f}, {t[2]:.4f}])"


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula; series expansion below the small-angle cutoff."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    s = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + s + 0.5 * (s @ s)
    s2 = s @ s
    return np.eye(3) + (np.sin(theta) / theta) * s + ((1.0 - np.cos(theta)) / theta**2) * s2


def so3_log(r: np.ndarray) -> tuple[np.ndarray, str]:
    """Rotation-matrix logarithm.

    Returns (omega, branch) where branch is "small", "generic" or "pi";
    the pi branch extracts the axis from the symmetric part, which stays
    stable where the generic formula divides by sin(theta) ~ 0.
    """
    r = np.asarray(r, dtype=np.float64)
    cos_theta = np.clip(0.5 * (np.trace(r) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < _SMALL_ANGLE:
        omega = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        return omega, "small"
    if np.pi - theta < 1e-6:
        # Near pi the trace loses half the precision (d acos ~ 1/sqrt(1-x^2));
        # recover the angle from the antisymmetric part and the axis from
        # (R + I)/2 = aa^T instead.
        m = 0.5 * (r + np.eye(3))
        axis = np.sqrt(np.maximum(np.diag(m), 0.0))
        k = int(np.argmax(axis))
        if axis[k] < 1e-12:
            return np.zeros(3), "pi"
        axis = m[:, k] / axis[k]
        axis /= np.linalg.norm(axis)
        anti = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        if anti @ axis < 0:
            axis = -axis
        theta = np.pi - np.arcsin(np.clip(0.5 * np.linalg.norm(anti), 0.0, 1.0))
        return theta * axis, "pi"
    scale = theta / (2.0 * np.sin(theta))
    omega = scale * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return omega, "generic"


def _so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    s = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * s + (s @ s) / 6.0
    s2 = s @ s
    return (
        np.eye(3)
        + ((1.0 - np.cos(theta)) / theta**2) * s
        + ((theta - np.sin(theta)) / theta**3) * s2
    )


def _so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    s = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * s + (s @ s) / 12.0
    s2 = s @ s
    coeff = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * s + coeff * s2


def se3_exp(xi: np.ndarray) -> RigidTransform:
    """Exponential map from a twist (rot, trans) to a rigid transform."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise ValueError("twist must be finite")
    omega, v = xi[:3], xi[3:]
    r = so3_exp(omega)
    t = _so3_left_jacobian(omega) @ v
    # Rodrigues output drifts from SO(3) by ~1e-16; constructor tolerance covers it.
    return RigidTransform(r, t)


def se3_log(t: RigidTransform, with_branch: bool = False):
    """Logarithm map, principal branch; inverse of se3_exp for angles < pi.

    With with_branch=True also returns which SO(3) branch was taken
    ("small", "generic" or "pi").
    """
    omega, branch = so3_log(t.rotation)
    v = _so3_left_jacobian_inv(omega) @ t.translation
    xi = np.concatenate([omega, v])
    if with_branch:
        return xi, branch
    return xi


def se3_interpolate(t: RigidTransform, alpha: float) -> RigidTransform:
    """Fractional transform: exp(alpha * log(t)). alpha in [0, 1] blends I -> t."""
    return se3_exp(alpha * se3_log(t))


def rotation_angle(r: np.ndarray) -> float:
    """Rotation angle in radians of a rotation matrix."""
    return float(np.arccos(np.clip(0.5 * (np.trace(np.asarray(r)) - 1.0), -1.0, 1.0)))


def pose_delta(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    """(translation meters, rotation radians) between two poses."""
    d = a.inverse() @ b
    return float(np.linalg.norm(d.translation)), rotation_angle(d.rotation)
