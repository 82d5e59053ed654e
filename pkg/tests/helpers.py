"""Shared test utilities: random body generation and a crude sampling
oracle for pairwise ellipsoid distance (used to guard the projection
oracle, which in turn guards everything else)."""

import numpy as np
from scipy.spatial import cKDTree

from ellipsoid_shield.geometry import EllipsoidShape, Pose, ShapedBody


def random_rotation(d, rng):
    A = rng.standard_normal((d, d))
    Q, _ = np.linalg.qr(A)
    if np.linalg.det(Q) < 0:
        Q[:, -1] *= -1.0
    return Q


def random_body(d, rng, center_scale=4.0, axes=(0.4, 2.0), body_id=0):
    q = rng.uniform(axes[0], axes[1], size=d)
    pose = Pose(random_rotation(d, rng), rng.uniform(-center_scale, center_scale, size=d))
    return ShapedBody(body_id, pose, EllipsoidShape(q))


def disjoint_pair(d, rng, axes=(0.4, 2.0), gap=(0.05, 4.0)):
    """Two bodies guaranteed disjoint: centers separated by more than the
    sum of the largest semi-axes plus a sampled gap."""
    qi = rng.uniform(axes[0], axes[1], size=d)
    qj = rng.uniform(axes[0], axes[1], size=d)
    sep = qi.max() + qj.max() + rng.uniform(*gap)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    pi = rng.uniform(-2.0, 2.0, size=d)
    pj = pi + sep * direction
    body_i = ShapedBody(1, Pose(random_rotation(d, rng), pi), EllipsoidShape(qi))
    body_j = ShapedBody(2, Pose(random_rotation(d, rng), pj), EllipsoidShape(qj))
    return body_i, body_j


def _unit_directions_2d(n, center=None, spread=np.pi):
    if center is None:
        ang = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    else:
        ang = center + np.linspace(-spread, spread, n)
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _fibonacci_cap(n, center=None, cap=np.pi):
    """n roughly-even unit vectors; all of the sphere by default, or a
    spherical cap of half-angle `cap` around `center`."""
    i = np.arange(n) + 0.5
    zmax, zmin = 1.0, np.cos(cap)
    z = zmax - (zmax - zmin) * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    th = np.pi * (1.0 + np.sqrt(5.0)) * i
    pts = np.stack([r * np.cos(th), r * np.sin(th), z], axis=1)
    if center is not None:
        c = center / np.linalg.norm(center)
        # rotate +z onto c
        v = np.cross([0.0, 0.0, 1.0], c)
        s = np.linalg.norm(v)
        if s < 1e-12:
            if c[2] > 0:
                return pts
            return pts * np.array([1.0, 1.0, -1.0])
        K = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
        R = np.eye(3) + K + K @ K * ((1 - c[2]) / s**2)
        pts = pts @ R.T
    return pts


def boundary_points(body, dirs):
    """Boundary points of the body for unit body-frame directions `dirs`."""
    return (body.shape.q * dirs) @ body.pose.R.T + body.pose.p


def sampled_min_distance(body_i, body_j, coarse=4096, refine=2048, rounds=3):
    """Crude distance oracle: dense boundary sampling, then zoom rounds
    around the best direction pair.  Overestimates the true distance by
    O(spacing^2 * curvature)."""
    d = body_i.d
    if d == 2:
        di = _unit_directions_2d(coarse)
        dj = _unit_directions_2d(coarse)
    else:
        di = _fibonacci_cap(coarse)
        dj = _fibonacci_cap(coarse)
    best = np.inf
    spread = np.pi
    for _ in range(rounds + 1):
        Pi = boundary_points(body_i, di)
        Pj = boundary_points(body_j, dj)
        tree = cKDTree(Pj)
        dist, idx = tree.query(Pi)
        k = int(np.argmin(dist))
        if dist[k] < best:
            best = float(dist[k])
        ci, cj = di[k], dj[idx[k]]
        spread /= 8.0
        if d == 2:
            ai, aj = np.arctan2(ci[1], ci[0]), np.arctan2(cj[1], cj[0])
            di = _unit_directions_2d(refine, center=ai, spread=spread)
            dj = _unit_directions_2d(refine, center=aj, spread=spread)
        else:
            di = _fibonacci_cap(refine, center=ci, cap=spread)
            dj = _fibonacci_cap(refine, center=cj, cap=spread)
    return best
