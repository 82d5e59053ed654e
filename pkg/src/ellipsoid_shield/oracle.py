"""Ground-truth minimum distance between two ellipsoids.

Alternating projections between the two convex bodies from several spread
starting points.  Each projection solves the scalar Lagrange-multiplier
root in the body frame, so the only linear algebra is d x d rotations.
This module is deliberately independent of the hyperplane machinery — it
is the oracle the rest of the package is audited against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ellipsoid_shield.geometry import ShapedBody

PROJ_RESIDUAL_TOL = 1e-12
PROJ_MAX_ITERS = 200

AP_MOVE_TOL = 1e-12
AP_MAX_ITERS = 100_000
OVERLAP_GAP = 1e-10


@dataclass
class OracleResult:
    """Minimum-distance report for a body pair."""

    distance: float
    x: np.ndarray          # witness on (or in) body_i
    y: np.ndarray          # witness on (or in) body_j
    overlap: bool
    iterations: int
    converged: bool
    history: np.ndarray | None = None  # per-iteration best gap when requested


def _project_rows(R, q, p, X, lam0=None):
    """Project the rows of X onto the ellipsoid (R, q, p).

    Returns (projected rows, multipliers).  Points already inside are
    returned unchanged with multiplier 0.  The multiplier root is solved
    with bracketed Newton (bisection fallback) to residual 1e-12.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = (X - p) @ R                       # body-frame rows
    q2 = q * q
    val = np.sum((Y / q) ** 2, axis=1)
    outside = val > 1.0
    lam = np.zeros(X.shape[0])
    if np.any(outside):
        Yo = Y[outside]
        w = q2 * Yo * Yo                  # q_m^2 y_m^2 per row
        lo = np.zeros(Yo.shape[0])
        hi = np.sqrt(np.sum(w, axis=1))   # g(hi) < 0 by construction
        lm = np.clip(lam0[outside], 0.0, hi) if lam0 is not None else 0.5 * hi
        for _ in range(PROJ_MAX_ITERS):
            den = (q2[None, :] + lm[:, None])
            g = np.sum(w / den**2, axis=1) - 1.0
            if np.all(np.abs(g) <= PROJ_RESIDUAL_TOL):
                break
            pos = g > 0.0
            lo = np.where(pos, lm, lo)
            hi = np.where(pos, hi, lm)
            dg = -2.0 * np.sum(w / den**3, axis=1)
            step = np.where(np.abs(g) > PROJ_RESIDUAL_TOL, g / dg, 0.0)
            lm_new = lm - step
            bad = (lm_new <= lo) | (lm_new >= hi)
            lm = np.where(bad, 0.5 * (lo + hi), lm_new)
        else:
            raise RuntimeError("ellipsoid projection did not converge")
        lam[outside] = lm
        Yp = q2[None, :] * Yo / (q2[None, :] + lm[:, None])
        Xp = X.copy()
        Xp[outside] = Yp @ R.T + p
        return Xp, lam
    return X.copy(), lam


def project_onto_ellipsoid(body: ShapedBody, x):
    """Euclidean projection of a world point onto the body's solid ellipsoid."""
    Xp, _ = _project_rows(body.pose.R, body.shape.q, body.pose.p,
                          np.asarray(x, dtype=float)[None, :])
    return Xp[0]


def _spread_starts(body: ShapedBody):
    """Boundary points of the body in 8 well-spread directions."""
    d = body.d
    if d == 2:
        ang = np.arange(8) * (np.pi / 4.0)
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        corners = np.array([[sx, sy, sz] for sx in (-1.0, 1.0)
                            for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)])
        dirs = corners / np.sqrt(3.0)
    # q ⊙ s with |s| = 1 lies exactly on the boundary in the body frame.
    return (body.shape.q * dirs) @ body.pose.R.T + body.pose.p


def min_distance(body_i: ShapedBody, body_j: ShapedBody,
                 tol=AP_MOVE_TOL, max_iters=AP_MAX_ITERS,
                 keep_history=False) -> OracleResult:
    """Minimum Euclidean distance between two solid ellipsoids.

    Runs alternating projections from 8 spread starting points on body_i
    and returns the best witness pair.  The per-lane gap sequence is
    non-increasing by construction and is asserted to be so.  Overlap is
    reported when the iterates coincide (gap <= 1e-10).
    """
    Ri, qi, pi = body_i.pose.R, body_i.shape.q, body_i.pose.p
    Rj, qj, pj = body_j.pose.R, body_j.shape.q, body_j.pose.p

    X = _spread_starts(body_i)
    lam_j = None
    lam_i = None
    prev_gap = np.full(X.shape[0], np.inf)
    hist = [] if keep_history else None
    iterations = 0
    converged = False
    for iterations in range(1, max_iters + 1):
        Y, lam_j = _project_rows(Rj, qj, pj, X, lam_j)
        X_new, lam_i = _project_rows(Ri, qi, pi, Y, lam_i)
        gap = np.sqrt(np.sum((X_new - Y) ** 2, axis=1))
        if np.any(gap > prev_gap + 1e-11 * np.maximum(1.0, prev_gap)):
            raise AssertionError("alternating projections gap increased")
        move = np.max(np.abs(X_new - X), axis=1)
        X = X_new
        prev_gap = gap
        if hist is not None:
            hist.append(float(np.min(gap)))
        if np.all(move <= tol) or np.min(gap) <= OVERLAP_GAP:
            converged = bool(np.all(move <= tol) or np.min(gap) <= OVERLAP_GAP)
            break

    k = int(np.argmin(prev_gap))
    dist = float(prev_gap[k])
    overlap = dist <= OVERLAP_GAP
    return OracleResult(
        distance=0.0 if overlap else dist,
        x=X[k],
        y=Y[k],
        overlap=overlap,
        iterations=iterations,
        converged=converged,
        history=np.asarray(hist) if hist is not None else None,
    )
