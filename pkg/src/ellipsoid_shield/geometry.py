"""Rigid-body poses and ellipsoidal shapes in 2 or 3 dimensions.

Rotations are stored as plain d x d matrices.  The runtime dimension d is
never hardcoded: every operation infers it from its arguments and supports
d = 2 and d = 3 only.  Angular quantities are a scalar for d = 2 and a
3-vector for d = 3 (so the tangent dimension is d*(d-1)/2 in both cases).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Orthonormality slack tolerated before a matrix is rejected as "not a
# rotation".  Integrators re-orthonormalize every step, so anything beyond
# this indicates a genuine bug upstream.
ROTATION_TOL = 1e-9

# Skewness slack accepted by vee().
SKEW_TOL = 1e-9


def wedge(a):
    """Map an angular velocity to the matrix generator of the rotation.

    For d=2 `a` is a scalar and the result is [[0, -a], [a, 0]].  For d=3
    `a` is a 3-vector and the result is the usual cross-product matrix.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim == 0 or a.shape == (1,):
        s = float(a)
        return np.array([[0.0, -s], [s, 0.0]])
    if a.shape == (3,):
        return np.array([
            [0.0, -a[2], a[1]],
            [a[2], 0.0, -a[0]],
            [-a[1], a[0], 0.0],
        ])
    raise ValueError(f"wedge expects a scalar or 3-vector, got shape {a.shape}")


def vee(S, tol=SKEW_TOL):
    """Inverse of wedge.  Rejects matrices that are not skew-symmetric."""
    S = np.asarray(S, dtype=float)
    if S.shape not in ((2, 2), (3, 3)):
        raise ValueError(f"vee expects a 2x2 or 3x3 matrix, got shape {S.shape}")
    if np.max(np.abs(S + S.T)) > tol:
        raise ValueError("vee: matrix is not skew-symmetric within tolerance")
    if S.shape == (2, 2):
        return 0.5 * (S[1, 0] - S[0, 1])
    return np.array([
        0.5 * (S[2, 1] - S[1, 2]),
        0.5 * (S[0, 2] - S[2, 0]),
        0.5 * (S[1, 0] - S[0, 1]),
    ])


def rotation_exp(omega, dt=1.0):
    """Closed-form rotation through angle ``omega * dt``.

    d=2: planar rotation by the scalar angle.  d=3: Rodrigues' formula.
    Small angles fall back to a series so the map is smooth through zero.
    """
    omega = np.asarray(omega, dtype=float)
    if omega.ndim == 0 or omega.shape == (1,):
        th = float(omega) * dt
        c, s = np.cos(th), np.sin(th)
        return np.array([[c, -s], [s, c]])
    if omega.shape != (3,):
        raise ValueError(f"rotation_exp expects a scalar or 3-vector, got {omega.shape}")
    phi = omega * dt
    th = np.sqrt(phi @ phi)
    K = wedge(phi)
    if th < 1e-10:
        # exp(K) ~ I + K + K^2/2 keeps the result orthonormal to O(th^3).
        return np.eye(3) + K + 0.5 * (K @ K)
    A = np.sin(th) / th
    B = (1.0 - np.cos(th)) / (th * th)
    return np.eye(3) + A * K + B * (K @ K)


def motion_exp(v, omega, dt):
    """Exact rigid displacement produced by a constant body twist over dt.

    Returns ``(R_rel, p_rel)`` with the new pose given by
    ``R' = R @ R_rel`` and ``p' = p + R @ p_rel``.  The translation part is
    the integral of the rotating velocity, not the straight-line chord.
    """
    v = np.asarray(v, dtype=float)
    d = v.shape[0]
    R_rel = rotation_exp(omega, dt)
    if d == 2:
        th = float(np.asarray(omega)) * dt
        if abs(th) < 1e-10:
            # V ~ I + th/2 * J, J the 90-degree generator.
            V = np.array([[1.0, -0.5 * th], [0.5 * th, 1.0]])
        else:
            s, c = np.sin(th), np.cos(th)
            V = np.array([[s / th, -(1.0 - c) / th], [(1.0 - c) / th, s / th]])
        return R_rel, V @ (v * dt)
    phi = np.asarray(omega, dtype=float) * dt
    th = np.sqrt(phi @ phi)
    K = wedge(phi)
    if th < 1e-10:
        V = np.eye(3) + 0.5 * K + (K @ K) / 6.0
    else:
        V = (np.eye(3)
             + ((1.0 - np.cos(th)) / th**2) * K
             + ((th - np.sin(th)) / th**3) * (K @ K))
    return R_rel, V @ (v * dt)


def nearest_rotation(R):
    """Project a near-rotation matrix back onto SO(d) (polar factor)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(R.shape[0])
    D[-1, -1] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def orthonormality_error(R):
    """max |R^T R - I|, the drift measure used by the integrators."""
    R = np.asarray(R, dtype=float)
    return float(np.max(np.abs(R.T @ R - np.eye(R.shape[0]))))


def normalized(x):
    """Rescale x to unit Euclidean norm, iterating until the computed norm
    is exactly 1.0 in floating point (the simulators rely on that)."""
    x = np.asarray(x, dtype=float)
    n = np.sqrt(x @ x)
    if n == 0.0:
        raise ValueError("cannot normalize the zero vector")
    for _ in range(4):
        if n == 1.0:
            return x
        x = x / n
        n = np.sqrt(x @ x)
    # Division can land one ulp off and then fixed-point there.  Nudge the
    # largest component by single ulps until the computed norm is exact.
    x = x.copy()
    for _ in range(64):
        if n == 1.0:
            break
        k = int(np.argmax(np.abs(x)))
        toward = 0.0 if n > 1.0 else np.copysign(np.inf, x[k])
        x[k] = np.nextafter(x[k], toward)
        n = np.sqrt(x @ x)
    return x


@dataclass
class Pose:
    """Rigid body pose: rotation R (d x d) and position p (d,)."""

    R: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        d = self.p.shape[0]
        if d not in (2, 3) or self.R.shape != (d, d):
            raise ValueError(f"inconsistent pose shapes R{self.R.shape}, p{self.p.shape}")
        if orthonormality_error(self.R) > ROTATION_TOL:
            raise ValueError("R is not orthonormal within tolerance")
        if np.linalg.det(self.R) < 0.0:
            raise ValueError("R must be a proper rotation (det +1)")

    @property
    def d(self):
        return self.p.shape[0]


@dataclass
class BodyVelocity:
    """Body-frame velocity: linear v (d,) and angular omega (scalar or 3-vector)."""

    v: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        self.omega = np.asarray(self.omega, dtype=float)
        d = self.v.shape[0]
        if d == 2 and self.omega.ndim not in (0,) and self.omega.shape != (1,):
            raise ValueError("d=2 angular velocity must be a scalar")
        if d == 3 and self.omega.shape != (3,):
            raise ValueError("d=3 angular velocity must be a 3-vector")

    @classmethod
    def zero(cls, d):
        return cls(np.zeros(d), np.zeros(3) if d == 3 else np.asarray(0.0))


@dataclass
class EllipsoidShape:
    """Semi-axis lengths of an ellipsoid, in meters."""

    q: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        if self.q.ndim != 1 or self.q.shape[0] not in (2, 3):
            raise ValueError("q must be a vector of 2 or 3 semi-axes")
        if np.any(self.q <= 0.0):
            raise ValueError("semi-axes must be strictly positive")


@dataclass
class ShapedBody:
    """An ellipsoidal rigid body: integer id, pose, and shape."""

    id: int
    pose: Pose
    shape: EllipsoidShape

    def __post_init__(self):
        if self.pose.d != self.shape.q.shape[0]:
            raise ValueError("pose and shape dimensions disagree")

    @property
    def d(self):
        return self.pose.d


def shaped_matrix(body: ShapedBody):
    """World-frame shape matrix R diag(q) R^T (symmetric positive definite,
    eigenvalues equal to the semi-axes)."""
    R, q = body.pose.R, body.shape.q
    return (R * q) @ R.T


def ellipsoid_value(body: ShapedBody, x):
    """Membership function of the body's ellipsoid at world point x.

    Negative inside, zero on the boundary, positive outside:
    (x - p)^T R diag(q)^-2 R^T (x - p) - 1.
    """
    R, q, p = body.pose.R, body.shape.q, body.pose.p
    y = R.T @ (np.asarray(x, dtype=float) - p)
    return float(y @ (y / (q * q))) - 1.0
