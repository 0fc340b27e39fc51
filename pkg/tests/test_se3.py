import numpy as np
import pytest

from monofuse.se3 import (
    RigidTransform,
    pose_delta,
    rotation_angle,
    se3_exp,
    se3_interpolate,
    se3_log,
    skew,
    so3_log,
)


def matrix_exp_series(a: np.ndarray, terms: int = 60) -> np.ndarray:
    """Brute-force matrix exponential by power series (independent oracle)."""
    out = np.eye(a.shape[0])
    term = np.eye(a.shape[0])
    for n in range(1, terms):
        term = term @ a / n
        out = out + term
    return out


def twist_hat(xi: np.ndarray) -> np.ndarray:
    m = np.zeros((4, 4))
    m[:3, :3] = skew(xi[:3])
    m[:3, 3] = xi[3:]
    return m


class TestExp:
    def test_zero_twist_is_identity(self):
        t = se3_exp(np.zeros(6))
        np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(t.translation, np.zeros(3), atol=1e-15)

    def test_pure_translation(self):
        t = se3_exp([0, 0, 0, 1.0, 2.0, 3.0])
        np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(t.translation, [1.0, 2.0, 3.0], atol=1e-15)

    def test_quarter_turn_about_x(self):
        t = se3_exp([np.pi / 2, 0, 0, 0, 0, 0])
        # 90 degrees about x, computed by hand: y -> z, z -> -y.
        expected = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
        np.testing.assert_allclose(t.rotation, expected, atol=1e-12)
        # And against the power-series matrix exponential oracle.
        series = matrix_exp_series(twist_hat(np.array([np.pi / 2, 0, 0, 0, 0, 0])))
        np.testing.assert_allclose(t.matrix(), series, atol=1e-12)

    def test_matches_series_oracle_on_random_twists(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            xi = rng.uniform(-1.5, 1.5, size=6)
            series = matrix_exp_series(twist_hat(xi))
            np.testing.assert_allclose(se3_exp(xi).matrix(), series, atol=1e-10)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            se3_exp([np.nan, 0, 0, 0, 0, 0])


class TestLog:
    def test_identity_gives_zero(self):
        np.testing.assert_allclose(se3_log(RigidTransform.identity()), np.zeros(6), atol=1e-15)

    def test_pure_translation_has_zero_rotation(self):
        xi = se3_log(RigidTransform(np.eye(3), [4.0, -1.0, 0.5]))
        np.testing.assert_allclose(xi[:3], np.zeros(3), atol=1e-15)
        np.testing.assert_allclose(xi[3:], [4.0, -1.0, 0.5], atol=1e-15)

    def test_round_trip_1000_random_twists(self):
        # Angles below 3.0 rad stay on the principal branch.
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(1000):
            ax = rng.normal(size=3)
            ax /= np.linalg.norm(ax)
            angle = rng.uniform(0, 3.0)
            xi = np.concatenate([angle * ax, rng.uniform(-5, 5, size=3)])
            back = se3_log(se3_exp(xi))
            worst = max(worst, np.max(np.abs(back - xi)))
        assert worst < 1e-9

    def test_pi_rotation_uses_stable_branch(self):
        for axis in (np.array([1.0, 0, 0]), np.array([0, 1.0, 0]),
                     np.array([0.6, 0.8, 0.0])):
            t = se3_exp(np.concatenate([np.pi * axis, [0.2, -0.1, 0.3]]))
            xi, branch = se3_log(t, with_branch=True)
            assert branch == "pi"
            # The axis may flip sign at pi; the rotation must match either way.
            np.testing.assert_allclose(
                se3_exp(xi).rotation, t.rotation, atol=1e-8
            )

    def test_small_angle_branch(self):
        xi = np.array([1e-10, -2e-10, 1e-10, 0.1, 0.2, 0.3])
        back, branch = se3_log(se3_exp(xi), with_branch=True)
        assert branch == "small"
        np.testing.assert_allclose(back, xi, atol=1e-12)


class TestRigidTransform:
    def test_orthonormality_invariant_after_construction(self):
        # Text-precision rotations snap back onto SO(3).
        noisy = np.eye(3) + 1e-6 * np.array([[0, 1, 0], [0, 0, 0], [0, 0, 0.0]])
        t = RigidTransform(noisy, np.zeros(3))
        assert np.linalg.norm(t.rotation.T @ t.rotation - np.eye(3)) < 1e-9
        assert abs(np.linalg.det(t.rotation) - 1.0) < 1e-9

    def test_rejects_garbage_rotation(self):
        with pytest.raises(ValueError):
            RigidTransform(np.eye(3) * 2.0, np.zeros(3))

    def test_compose_inverse(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = se3_exp(rng.uniform(-1, 1, 6))
            b = se3_exp(rng.uniform(-1, 1, 6))
            ab = a @ b
            p = rng.normal(size=3)
            np.testing.assert_allclose(ab.apply(p), a.apply(b.apply(p)), atol=1e-12)
            ident = ab @ ab.inverse()
            np.testing.assert_allclose(ident.matrix(), np.eye(4), atol=1e-12)

    def test_apply_batch_matches_single(self):
        t = se3_exp([0.1, 0.2, -0.1, 1.0, 0.0, -2.0])
        pts = np.random.default_rng(5).normal(size=(7, 3))
        batch = t.apply(pts)
        for i in range(7):
            np.testing.assert_allclose(batch[i], t.apply(pts[i]), atol=1e-14)

    def test_immutable_arrays(self):
        t = RigidTransform.identity()
        with pytest.raises(ValueError):
            t.rotation[0, 0] = 2.0


class TestHelpers:
    def test_interpolate_endpoints(self):
        t = se3_exp([0.3, -0.2, 0.1, 1.0, 2.0, -1.0])
        assert se3_interpolate(t, 0.0).almost_equal(RigidTransform.identity(), 1e-12)
        assert se3_interpolate(t, 1.0).almost_equal(t, 1e-12)

    def test_interpolate_half_composes(self):
        t = se3_exp([0.3, -0.2, 0.1, 1.0, 2.0, -1.0])
        half = se3_interpolate(t, 0.5)
        assert (half @ half).almost_equal(t, 1e-10)

    def test_rotation_angle_and_pose_delta(self):
        t = se3_exp([0.0, 0.5, 0.0, 1.0, 0.0, 0.0])
        assert abs(rotation_angle(t.rotation) - 0.5) < 1e-12
        d_t, d_r = pose_delta(RigidTransform.identity(), t)
        assert abs(d_r - 0.5) < 1e-12
        assert abs(d_t - np.linalg.norm(t.translation)) < 1e-12

    def test_so3_log_branch_labels(self):
        assert so3_log(np.eye(3))[1] == "small"
        assert so3_log(se3_exp([1.0, 0, 0, 0, 0, 0]).rotation)[1] == "generic"
