"""Separating-hyperplane margin between two ellipsoids and its derivatives.

The margin is parameterized by a unit vector z: body i's supporting
hyperplane with body-frame normal direction z is held against body j, and
h(z) is the signed distance from that plane to the closest point of body j.
h(z) is a guaranteed lower bound on the true gap for every z (weak
duality) and attains it at the optimal z (strong duality, disjoint
bodies), so maximizing over the unit sphere recovers the minimum distance
while staying differentiable in the bodies' poses.

All internals avoid `np.linalg.norm`/`abs` so the formulas stay valid for
complex-step differentiation (used by the higher-order vehicle filter).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ellipsoid_shield.geometry import ShapedBody, normalized
from ellipsoid_shield.oracle import min_distance

_J2 = np.array([[0.0, -1.0], [1.0, 0.0]])  # 90-degree generator, d=2


def _sqnorm(x):
    return x @ x


def _norm(x):
    # sqrt of the sum of squares, without conjugation: analytic in x, which
    # np.linalg.norm is not.
    return np.sqrt(x @ x)


class PairGeometry:
    """Shared quantities for an ordered body pair (i owns z) at a given z.

    Built once and reused by the margin, its gradient, and the input
    coefficients.  Dtype-agnostic: complex inputs flow through untouched.
    """

    __slots__ = ("d", "Ri", "qi", "pi", "Rj", "qj", "pj", "z", "Qi_inv",
                 "Qi_inv2", "Qj1", "Qj2", "u", "a", "b", "delta", "e", "h",
                 "rho", "sigma", "t")

    def __init__(self, Ri, qi, pi, Rj, qj, pj, z):
        self.d = len(pi)
        self.Ri, self.qi, self.pi = Ri, qi, pi
        self.Rj, self.qj, self.pj = Rj, qj, pj
        self.z = z
        self.Qi_inv = (Ri / qi) @ Ri.T
        self.Qi_inv2 = (Ri / (qi * qi)) @ Ri.T
        self.Qj1 = (Rj * qj) @ Rj.T
        self.Qj2 = (Rj * (qj * qj)) @ Rj.T
        self.u = self.Qi_inv @ z                 # plane normal, unnormalized
        self.a = _norm(self.u)
        w = self.Qj1 @ self.u
        self.b = _norm(w)
        self.delta = pj - pi
        self.e = self.delta @ self.u
        self.h = (self.e - self.b - 1.0) / self.a
        self.rho = 1.0 - self.e + self.b         # equals -a*h
        self.sigma = self.a * self.b
        self.t = self.Qj2 @ self.u               # shape-weighted normal of j

    @classmethod
    def of(cls, body_i: ShapedBody, body_j: ShapedBody, z):
        z = np.asarray(z)
        return cls(body_i.pose.R, body_i.shape.q, body_i.pose.p,
                   body_j.pose.R, body_j.shape.q, body_j.pose.p, z)

    def grad_z(self):
        """Euclidean gradient of the margin w.r.t. z (before any tangent
        projection)."""
        g = self.Qi_inv
        return ((self.rho / self.a**3) * (self.Qi_inv2 @ self.z)
                + (g @ self.delta) / self.a
                - (g @ self.t) / self.sigma)

    def input_rows(self):
        """Rows contracting with the motion channels of dh/dt.

        Returns (zeta, eta, mu, nu, xi):
          d=3: dh/dt = zeta·(R_i w_i) + eta·(R_i v_i) + mu·P u_z
                       + nu·(R_j w_j) + xi·(R_j v_j)
          d=2: dh/dt = zeta*w_i + eta·(R_i v_i) + mu·P u_z
                       + nu*w_j + xi·(R_j v_j)
        with P = I - z z^T the tangent projector.
        """
        a, rho, sigma = self.a, self.rho, self.sigma
        u, t, z, delta = self.u, self.t, self.z, self.delta
        Qi_inv = self.Qi_inv
        k1 = self.Qi_inv2 @ z
        eta = -u / a
        xi = u / a
        mu = (rho / a**3) * k1 + (Qi_inv @ delta) / a - (Qi_inv @ t) / sigma
        if self.d == 2:
            Jz = _J2 @ z
            Ju = _J2 @ u
            zeta = (-(rho / a**3) * (k1 @ Jz)
                    - (t @ (Ju - Qi_inv @ Jz)) / sigma
                    - ((Qi_inv @ delta) @ Jz + u @ (_J2 @ delta)) / a)
            nu = (t @ Ju) / sigma
        else:
            zh = _wedge3(z)
            uh = _wedge3(u)
            dh = _wedge3(delta)
            zeta = ((rho / a**3) * (zh.T @ k1)
                    + ((uh - Qi_inv @ zh).T @ t) / sigma
                    + (dh.T @ u + zh.T @ (Qi_inv @ delta)) / a)
            nu = -(uh.T @ t) / sigma
        return zeta, eta, mu, nu, xi


def _wedge3(a):
    # dtype-preserving 3-vector wedge (complex-step safe, unlike wedge())
    out = np.zeros((3, 3), dtype=np.asarray(a).dtype)
    out[0, 1], out[0, 2] = -a[2], a[1]
    out[1, 0], out[1, 2] = a[2], -a[0]
    out[2, 0], out[2, 1] = -a[1], a[0]
    return out


@dataclass
class Hyperplane:
    """Plane {x : normal·x = offset}; the owning body lies on the
    nonpositive side."""

    normal: np.ndarray
    offset: float

    def signed_distance(self, x):
        n2 = self.normal @ self.normal
        return float((self.normal @ np.asarray(x, dtype=float) - self.offset)
                     / np.sqrt(n2))


@dataclass
class CbfCoefficients:
    """Rows of dh/dt against each motion channel, plus the margin itself.

    zeta: angular channel of body i (scalar for d=2; a 3-row contracting
          with the world angular velocity R_i @ omega_i for d=3)
    eta:  linear channel of body i, contracting with R_i @ v_i
    mu:   hyperplane channel, contracting with (I - z z^T) @ u_z
    nu:   angular channel of body j (same convention as zeta)
    xi:   linear channel of body j, contracting with R_j @ v_j
    h:    current margin value
    """

    zeta: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    xi: np.ndarray
    h: float


def as_unit(z):
    """Validate and exactly re-normalize a hyperplane direction."""
    z = np.asarray(z, dtype=float)
    if z.shape not in ((2,), (3,)):
        raise ValueError("z must be a 2- or 3-vector")
    n2 = z @ z
    if not np.isfinite(n2) or abs(np.sqrt(n2) - 1.0) > 1e-6:
        raise ValueError("z must be a unit vector")
    return normalized(z)


def tangent_point(body_i: ShapedBody, z):
    """Boundary point of body i whose outward support direction is z."""
    Q = (body_i.pose.R * body_i.shape.q) @ body_i.pose.R.T
    return Q @ np.asarray(z, dtype=float) + body_i.pose.p


def hyperplane_of(body_i: ShapedBody, z):
    """Supporting hyperplane of body i at the tangent point of z."""
    z = np.asarray(z, dtype=float)
    n = ((body_i.pose.R / body_i.shape.q) @ body_i.pose.R.T) @ z
    return Hyperplane(normal=n, offset=1.0 + n @ body_i.pose.p)


def nearest_point(body_i: ShapedBody, body_j: ShapedBody, z):
    """Point of body j extremal toward body i's supporting hyperplane."""
    g = PairGeometry.of(body_i, body_j, z)
    return g.pj - g.t / g.b


def signed_distance(body_i: ShapedBody, body_j: ShapedBody, z):
    """Margin h(z): signed distance from body i's supporting hyperplane to
    the closest point of body j.  Lower-bounds the true gap for any unit z."""
    return float(PairGeometry.of(body_i, body_j, z).h)


def grad_z(body_i: ShapedBody, body_j: ShapedBody, z):
    """Euclidean gradient of h w.r.t. z (unprojected)."""
    return PairGeometry.of(body_i, body_j, z).grad_z()


def coefficients(body_i: ShapedBody, body_j: ShapedBody, z) -> CbfCoefficients:
    """Channel rows of dh/dt for the pair at the current z."""
    g = PairGeometry.of(body_i, body_j, z)
    zeta, eta, mu, nu, xi = g.input_rows()
    return CbfCoefficients(zeta=zeta, eta=eta, mu=mu, nu=nu, xi=xi, h=float(g.h))


def h_dot(body_i: ShapedBody, body_j: ShapedBody, z, u_i, u_j, u_z):
    """Time derivative of the margin under body velocities and z input."""
    z = np.asarray(z, dtype=float)
    c = coefficients(body_i, body_j, z)
    Ri, Rj = body_i.pose.R, body_j.pose.R
    P = np.eye(len(z)) - np.outer(z, z)
    if body_i.d == 2:
        ang = float(c.zeta) * float(u_i.omega) + float(c.nu) * float(u_j.omega)
    else:
        ang = c.zeta @ (Ri @ u_i.omega) + c.nu @ (Rj @ u_j.omega)
    return float(ang
                 + c.eta @ (Ri @ u_i.v)
                 + c.xi @ (Rj @ u_j.v)
                 + c.mu @ (P @ np.asarray(u_z, dtype=float)))


@dataclass
class MaximizeResult:
    """Best margin found over the unit sphere of hyperplane directions."""

    z: np.ndarray
    h: float
    iterations: int
    converged: bool
    grad_norm: float

    def __iter__(self):  # allows: z_star, h_star = maximize_h(...)
        yield self.z
        yield self.h


def _coarse_directions(d):
    if d == 2:
        ang = np.arange(32) * (2.0 * np.pi / 32.0)
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    n = 242
    i = np.arange(n) + 0.5
    zc = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - zc * zc))
    th = np.pi * (1.0 + np.sqrt(5.0)) * i
    return np.stack([r * np.cos(th), r * np.sin(th), zc], axis=1)


def _tangent_basis(z):
    d = len(z)
    if d == 2:
        return (_J2 @ z)[:, None]
    k = int(np.argmin(np.abs(z)))
    t1 = np.zeros(3)
    t1[k] = 1.0
    t1 = t1 - (t1 @ z) * z
    t1 /= np.sqrt(t1 @ t1)
    t2 = np.cross(z, t1)
    return np.stack([t1, t2], axis=1)


def maximize_h(body_i: ShapedBody, body_j: ShapedBody, z0=None,
               tol=1e-10, max_iters=10_000, certify=False) -> MaximizeResult:
    """Maximize the margin h over unit z.

    Projected gradient ascent with backtracking, then a damped Newton
    polish in a tangent chart.  For disjoint bodies the maximum equals the
    true minimum distance; `certify=True` checks disjointness with the
    projection oracle first and raises on overlap.
    """
    if certify and min_distance(body_i, body_j).overlap:
        raise ValueError("bodies overlap: the margin has no separating maximum")

    def value(z):
        return float(PairGeometry.of(body_i, body_j, z).h)

    def gradient(z):
        return PairGeometry.of(body_i, body_j, z).grad_z()

    if z0 is None:
        Qi_inv = (body_i.pose.R / body_i.shape.q) @ body_i.pose.R.T
        delta = body_j.pose.p - body_i.pose.p
        z = normalized(Qi_inv @ delta)
        if value(z) <= 0.0:
            dirs = _coarse_directions(body_i.d)
            vals = [value(dirs[k]) for k in range(dirs.shape[0])]
            z = normalized(dirs[int(np.argmax(vals))])
    else:
        z = as_unit(z0)

    h = value(z)
    step = 1.0
    iterations = 0
    grad_norm = np.inf

    # Phase 1: projected gradient ascent with backtracking line search.
    coarse_tol = max(tol, 1e-7)
    while iterations < max_iters:
        g = gradient(z)
        gp = g - (g @ z) * z
        grad_norm = float(np.sqrt(gp @ gp))
        if grad_norm <= coarse_tol:
            break
        iterations += 1
        accepted = False
        while step >= 1e-18:
            z_try = normalized(z + step * gp)
            h_try = value(z_try)
            if h_try >= h + 1e-4 * step * grad_norm**2:
                z, h = z_try, h_try
                step = min(step * 2.0, 1e3)
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break  # at numerical floor; leave the rest to the polish

    # Phase 2: damped Newton in a tangent chart, Hessian from central
    # differences of the analytic gradient.
    eps = 1e-6
    for _ in range(60):
        g = gradient(z)
        gp = g - (g @ z) * z
        grad_norm = float(np.sqrt(gp @ gp))
        if grad_norm <= tol:
            break
        iterations += 1
        T = _tangent_basis(z)
        m = T.shape[1]
        H = np.zeros((m, m))
        for l in range(m):
            for sgn, w in ((1.0, 1.0), (-1.0, -1.0)):
                th = sgn * eps * T[:, l]
                zp = z + th
                n = np.sqrt(zp @ zp)
                zt = zp / n
                gt = gradient(zt)
                Jc = (np.eye(len(z)) - np.outer(zt, zt)) @ T / n
                H[:, l] += w * (Jc.T @ gt)
        H = 0.5 * (H + H.T) / (2.0 * eps)
        rhs = T.T @ gp
        try:
            s = np.linalg.solve(H, -rhs)
        except np.linalg.LinAlgError:
            s = rhs  # fall back to a plain ascent direction
        if s @ rhs < 0.0:
            s = rhs  # Hessian not negative definite here; ascend instead
        improved = False
        scale = 1.0
        for _ in range(20):
            z_try = normalized(z + scale * (T @ s))
            g_try = gradient(z_try)
            gp_try = g_try - (g_try @ z_try) * z_try
            if (np.sqrt(gp_try @ gp_try) < grad_norm
                    or value(z_try) > h + 1e-14):
                z = z_try
                h = value(z)
                improved = True
                break
            scale *= 0.5
        if not improved:
            break

    g = gradient(z)
    gp = g - (g @ z) * z
    grad_norm = float(np.sqrt(gp @ gp))
    return MaximizeResult(z=z, h=h, iterations=iterations,
                          converged=grad_norm <= tol, grad_norm=grad_norm)
