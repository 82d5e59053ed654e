"""Nominal laws and the distributed safety-filter QPs.

Each ordered pair (i, j), i < j, carries one hyperplane channel owned by
the lower ID.  The pair's barrier condition dh/dt >= -gamma*h is split in
half: the owner enforces its share through (v_i, omega_i, u_z), the other
body through (v_j, omega_j).  Each body then solves one small QP per step
over its own stacked input.

Vehicles (planar bicycles) have relative degree two in the margin, so the
channel carries a velocity-level state r and the barrier is lifted to
h_veh = dh/dt + h; the split conditions act on (u_a, u_omega, u_r).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ellipsoid_shield.dynamics import (
    Z_RATE_LIMIT,
    SecondOrderHyperplane,
    VehicleParams,
    VehicleState,
    vehicle_body_velocity,
    vehicle_velocity_jacobian,
)
from ellipsoid_shield.geometry import BodyVelocity, Pose, ShapedBody, vee
from ellipsoid_shield.qp import QpProblem
from ellipsoid_shield.separation import PairGeometry, grad_z

_J2 = np.array([[0.0, -1.0], [1.0, 0.0]])
_CSTEP = 1e-100  # complex-step size; derivatives exact to machine precision
_CLAMP_GAIN = 50.0   # how fast the hyperplane rate may approach its cap
_RESYNC_GAIN = 20.0  # pull of the hyperplane rate toward the ascent rate


@dataclass
class ControllerParams:
    """Gains and weights for the nominal laws and safety filter."""

    alpha_gain: float = 10.0      # gamma in alpha(h) = gamma * h
    k_z: float = 20.0             # hyperplane ascent gain
    k_z_scheduled: bool = False   # divide k_z by (1 + h^2) when True
    k_v: float = 3.0
    k_omega: float = 0.5
    beta_v: float = 1.0
    beta_omega: float = 0.5
    split: float = 0.5

    def __post_init__(self):
        if self.alpha_gain <= 0.0 or self.k_z <= 0.0:
            raise ValueError("alpha_gain and k_z must be positive")
        if self.beta_v <= 0.0 or self.beta_omega <= 0.0:
            raise ValueError("weights must be positive")
        if self.split != 0.5:
            raise ValueError("the condition split is fixed at one half per side")

    def z_gain(self, h: float) -> float:
        if self.k_z_scheduled:
            return self.k_z / (1.0 + h * h)
        return self.k_z


@dataclass
class PairChannel:
    """Hyperplane state for an ordered pair; the lower ID owns it."""

    owner_id: int
    other_id: int
    hyperplane: object  # unit z (ndarray) or SecondOrderHyperplane
    last_h: float = float("nan")

    def __post_init__(self):
        if not self.owner_id < self.other_id:
            raise ValueError("the lower ID owns the hyperplane")

    @property
    def z(self):
        if isinstance(self.hyperplane, SecondOrderHyperplane):
            return self.hyperplane.z
        return self.hyperplane

    @property
    def r(self):
        if isinstance(self.hyperplane, SecondOrderHyperplane):
            return self.hyperplane.r
        raise AttributeError("first-order channel has no r state")


def rot_dof(d: int) -> int:
    return 1 if d == 2 else 3


def nominal_pose_input(body: ShapedBody, goal: Pose, k_v: float,
                       k_omega: float) -> BodyVelocity:
    """Proportional pose law in the body frame.

    Note the angular part vanishes when the attitude error is a half-turn
    (the antisymmetric part of R^T R_goal is zero there) — a dead point of
    the law, inherited by anything built on it.
    """
    R = body.pose.R
    v = k_v * (R.T @ (goal.p - body.pose.p))
    E = R.T @ goal.R
    omega = 0.5 * k_omega * vee(E - E.T)
    return BodyVelocity(v=v, omega=omega)


def nominal_z_input(body_i: ShapedBody, body_j: ShapedBody, z,
                    k_z: float) -> np.ndarray:
    """Gradient-ascent input for the hyperplane direction."""
    return k_z * grad_z(body_i, body_j, z)


def _channel_rows(body_i: ShapedBody, body_j: ShapedBody, z):
    """Constraint rows of dh/dt over body-frame inputs, plus h and mu P.

    Returns (row_vi, row_wi, row_z, row_vj, row_wj, h, mu) where the
    angular rows have length 1 (d=2) or 3 (d=3).
    """
    g = PairGeometry.of(body_i, body_j, z)
    zeta, eta, mu, nu, xi = g.input_rows()
    d = g.d
    P = np.eye(d) - np.outer(z, z)
    row_vi = eta @ body_i.pose.R
    row_vj = xi @ body_j.pose.R
    if d == 2:
        row_wi = np.array([zeta])
        row_wj = np.array([nu])
    else:
        row_wi = zeta @ body_i.pose.R
        row_wj = nu @ body_j.pose.R
    row_z = mu @ P
    return row_vi, row_wi, row_z, row_vj, row_wj, float(g.h), mu


def owner_constraint(channel: PairChannel, body_i: ShapedBody,
                     body_j: ShapedBody, gamma: float):
    """Owner half-condition as (row, rhs) over [v_i, omega_i, u_z]."""
    row_vi, row_wi, row_z, _, _, h, _ = _channel_rows(body_i, body_j,
                                                      channel.z)
    a = np.concatenate([row_vi, row_wi, row_z])
    return a, -0.5 * gamma * h


def other_constraint(channel: PairChannel, body_i: ShapedBody,
                     body_j: ShapedBody, gamma: float):
    """Non-owner half-condition as (row, rhs) over [v_j, omega_j]."""
    _, _, _, row_vj, row_wj, h, _ = _channel_rows(body_i, body_j, channel.z)
    a = np.concatenate([row_vj, row_wj])
    return a, -0.5 * gamma * h


@dataclass
class BodyLayout:
    """Index map of one body's stacked QP variable."""

    d: int
    owned_ids: list

    @property
    def n(self):
        return self.d + rot_dof(self.d) + self.d * len(self.owned_ids)

    @property
    def v(self):
        return slice(0, self.d)

    @property
    def omega(self):
        return slice(self.d, self.d + rot_dof(self.d))

    def z_slice(self, other_id):
        k = self.owned_ids.index(other_id)
        start = self.d + rot_dof(self.d) + self.d * k
        return slice(start, start + self.d)


def assemble_body_qp(body_id: int, bodies, channels, params: ControllerParams,
                     goals, coeff_cache=None):
    """Build one body's QP from the state snapshot.

    bodies/goals map IDs to ShapedBody/Pose; channels is every PairChannel
    this body participates in.  Returns (QpProblem, BodyLayout); the
    layout decodes u* back into (v, omega, u_z per owned pair).

    coeff_cache optionally maps (owner, other) -> _channel_rows output so
    the simulator can share per-pair work between the two bodies.
    """
    body = bodies[body_id]
    d = body.d
    owned = sorted((c for c in channels if c.owner_id == body_id),
                   key=lambda c: c.other_id)
    incoming = sorted((c for c in channels if c.other_id == body_id),
                      key=lambda c: c.owner_id)
    layout = BodyLayout(d=d, owned_ids=[c.other_id for c in owned])
    n = layout.n

    def rows_for(channel):
        key = (channel.owner_id, channel.other_id)
        if coeff_cache is not None and key in coeff_cache:
            return coeff_cache[key]
        out = _channel_rows(bodies[channel.owner_id],
                            bodies[channel.other_id], channel.z)
        if coeff_cache is not None:
            coeff_cache[key] = out
        return out

    u_nom = np.zeros(n)
    nominal = nominal_pose_input(body, goals[body_id], params.k_v,
                                 params.k_omega)
    u_nom[layout.v] = nominal.v
    u_nom[layout.omega] = nominal.omega

    W = np.ones(n)
    W[layout.v] = params.beta_v
    W[layout.omega] = params.beta_omega

    constraints = []
    gamma = params.alpha_gain
    for c in owned:
        row_vi, row_wi, row_z, _, _, h, mu = rows_for(c)
        a = np.zeros(n)
        a[layout.v] = row_vi
        a[layout.omega] = row_wi
        sl = layout.z_slice(c.other_id)
        a[sl] = row_z
        u_nom[sl] = params.z_gain(h) * mu
        constraints.append((a, -0.5 * gamma * h))
    for c in incoming:
        _, _, _, row_vj, row_wj, h, _ = rows_for(c)
        a = np.zeros(n)
        a[layout.v] = row_vj
        a[layout.omega] = row_wj
        constraints.append((a, -0.5 * gamma * h))

    return QpProblem(W=W, u_nom=u_nom, constraints=constraints), layout


# --- planar bicycle (relative degree two) ---------------------------------


@dataclass
class LinePath:
    """Directed line to trace: a point on it and its unit direction."""

    point: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        self.direction = np.asarray(self.direction, dtype=float)
        n = np.sqrt(self.direction @ self.direction)
        if n < 1e-12:
            raise ValueError("path direction must be nonzero")
        self.direction = self.direction / n

    def lateral_error(self, p) -> float:
        """Signed offset of p, positive to the left of the direction."""
        return float((_J2 @ self.direction) @ (np.asarray(p) - self.point))


def vehicle_nominal(state: VehicleState, path: LinePath,
                    target_speed: float = 5.0, k_lat: float = 0.1,
                    k_head: float = 1.0, k_steer: float = 1.5):
    """Line-tracing law: (u_a, u_omega).

    e1 is the lateral offset of the body origin (positive left of the
    path direction); e2 the sine of the heading error relative to the
    path.  Both are driven to zero along with the steering angle.
    """
    e1 = path.lateral_error(state.pose.p)
    R_line = np.stack([path.direction, _J2 @ path.direction], axis=1)
    E = R_line.T @ state.pose.R
    e2 = 0.5 * vee(E - E.T)  # sin(heading - line heading)
    u_a = -(state.speed - target_speed)
    u_omega = -k_lat * e1 - k_head * e2 - k_steer * state.steering
    return float(u_a), float(u_omega)


def _drift_pair(shape_i, state_i, shape_j, state_j, hyperplane,
                params: VehicleParams, move_z: bool = True):
    """Pair geometry displaced an imaginary instant along the zero-input
    flow (poses at current twists, z at (I - zz^T) r, speeds and steering
    frozen).  Imaginary parts / eps are exact time derivatives.

    move_z=False freezes the hyperplane direction, leaving only the
    bodies' contribution to the derivative."""
    eps = 1j * _CSTEP
    Vi = vehicle_body_velocity(state_i, params)
    Vj = vehicle_body_velocity(state_j, params)
    Ri, pi = state_i.pose.R, state_i.pose.p
    Rj, pj = state_j.pose.R, state_j.pose.p
    z, r = hyperplane.z, hyperplane.r

    Ri_e = Ri + eps * Vi.omega * (_J2 @ Ri)
    Rj_e = Rj + eps * Vj.omega * (_J2 @ Rj)
    pi_e = pi + eps * (Ri @ Vi.v)
    pj_e = pj + eps * (Rj @ Vj.v)
    z_e = z + eps * (r - (z @ r) * z) if move_z else z.astype(complex)
    core = PairGeometry(Ri_e, shape_i.q, pi_e, Rj_e, shape_j.q, pj_e, z_e)
    return core, Vi, Vj, z_e, r


def _h_dot_value(core, Vi, Vj, z, r):
    zeta, eta, mu, nu, xi = core.input_rows()
    P_r = r - (z @ r) * z
    return (zeta * Vi.omega + eta @ (core.Ri @ Vi.v) + mu @ P_r
            + nu * Vj.omega + xi @ (core.Rj @ Vj.v))


def vehicle_A_term(shape_i, state_i: VehicleState, shape_j,
                   state_j: VehicleState, hyperplane: SecondOrderHyperplane,
                   params: VehicleParams) -> float:
    """Input-independent part of d²h/dt²: the drift-flow derivative of
    dh/dt with accelerations and u_r frozen at zero."""
    core, Vi, Vj, z_e, r = _drift_pair(shape_i, state_i, shape_j, state_j,
                                       hyperplane, params)
    hdot = _h_dot_value(core, Vi, Vj, z_e, r)
    return float(np.imag(hdot) / _CSTEP)


def nominal_r_input(shape_i, state_i, shape_j, state_j,
                    hyperplane: SecondOrderHyperplane,
                    params: VehicleParams, k_z: float) -> np.ndarray:
    """Rate servo driving the hyperplane toward the gradient-ascent law.

    The second-order channel should realize the same rotation the
    first-order case commands directly, dz/dt = k_z * Pmu, so the nominal
    acceleration pulls the tangential rate toward that ascent rate (capped
    at the slew the plant allows).  A feedforward of k_z * d(dh/dz)/dt
    would track tighter while the channel hovers at the maximizer, but off
    that manifold - and the rate clamp forces the channel off it whenever
    the maximizer outruns the cap during a close pass - the same term
    grows with k_z times the z-curvature of h and fights the chase back,
    so the servo stands alone."""
    core, *_ = _drift_pair(shape_i, state_i, shape_j, state_j, hyperplane,
                           params)
    _, _, mu_c, _, _ = core.input_rows()
    z, r = hyperplane.z, hyperplane.r
    mu = np.real(mu_c)
    target = k_z * (mu - (z @ mu) * z)
    speed = float(np.sqrt(target @ target))
    if speed > Z_RATE_LIMIT:
        target *= Z_RATE_LIMIT / speed
    P_r = r - (z @ r) * z
    return _RESYNC_GAIN * (target - P_r)


def vehicle_constraints(channel: PairChannel, shape_i, state_i, shape_j,
                        state_j, params: VehicleParams):
    """Owner and non-owner half-conditions for one vehicle pair.

    Owner row spans (u_a_i, u_omega_i, u_r); non-owner row (u_a_j,
    u_omega_j).  Both right sides are -(A + dh/dt + h_veh)/2 with
    h_veh = dh/dt + h.
    """
    hyper = channel.hyperplane
    z, r = hyper.z, hyper.r
    body_i = ShapedBody(channel.owner_id, state_i.pose, shape_i)
    body_j = ShapedBody(channel.other_id, state_j.pose, shape_j)
    g = PairGeometry.of(body_i, body_j, z)
    zeta, eta, mu, nu, xi = g.input_rows()
    h = float(g.h)
    Vi = vehicle_body_velocity(state_i, params)
    Vj = vehicle_body_velocity(state_j, params)
    P = np.eye(2) - np.outer(z, z)
    hdot = float(zeta * Vi.omega + eta @ (state_i.pose.R @ Vi.v)
                 + mu @ (P @ r) + nu * Vj.omega
                 + xi @ (state_j.pose.R @ Vj.v))
    A = vehicle_A_term(shape_i, state_i, shape_j, state_j, hyper, params)
    h_veh = hdot + h
    rhs = -0.5 * (A + hdot + h_veh)

    Ji = vehicle_velocity_jacobian(state_i, params)
    Jj = vehicle_velocity_jacobian(state_j, params)
    row_i_pose = np.concatenate([eta @ state_i.pose.R, [zeta]]) @ Ji
    row_j_pose = np.concatenate([xi @ state_j.pose.R, [nu]]) @ Jj
    owner_row = np.concatenate([row_i_pose, mu @ P])
    return (owner_row, rhs), (row_j_pose, rhs)


@dataclass
class VehicleAgent:
    """One simulated vehicle: shape, dynamic state, and its path."""

    id: int
    shape: object
    state: VehicleState
    path: LinePath


def assemble_vehicle_qp(body_id: int, agents, channels,
                        cparams: ControllerParams, vparams: VehicleParams,
                        target_speed: float = 5.0, coeff_cache=None):
    """Vehicle counterpart of assemble_body_qp over (u_a, u_omega, u_r...).

    Returns (QpProblem, owned_ids); u_r blocks follow the two pose inputs
    in ascending other-ID order, two entries per owned pair.
    """
    me = agents[body_id]
    owned = sorted((c for c in channels if c.owner_id == body_id),
                   key=lambda c: c.other_id)
    incoming = sorted((c for c in channels if c.other_id == body_id),
                      key=lambda c: c.owner_id)
    owned_ids = [c.other_id for c in owned]
    n = 2 + 2 * len(owned)

    def rows_for(channel):
        key = (channel.owner_id, channel.other_id)
        if coeff_cache is not None and key in coeff_cache:
            return coeff_cache[key]
        a_i = agents[channel.owner_id]
        a_j = agents[channel.other_id]
        out = vehicle_constraints(channel, a_i.shape, a_i.state, a_j.shape,
                                  a_j.state, vparams)
        if coeff_cache is not None:
            coeff_cache[key] = out
        return out

    u_nom = np.zeros(n)
    u_a, u_w = vehicle_nominal(me.state, me.path, target_speed=target_speed)
    u_nom[0], u_nom[1] = u_a, u_w
    W = np.ones(n)
    W[0] = cparams.beta_v
    W[1] = cparams.beta_omega

    def scaled(a, rhs):
        # the acceleration rows carry Jacobian and curvature factors of
        # very uneven size; unit-norm rows keep the KKT system well scaled
        norm = float(np.sqrt(a @ a))
        return (a / norm, rhs / norm) if norm > 1e-12 else (a, rhs)

    constraints = []
    for k, c in enumerate(owned):
        (owner_row, rhs), _ = rows_for(c)
        a = np.zeros(n)
        a[:2] = owner_row[:2]
        a[2 + 2 * k: 4 + 2 * k] = owner_row[2:]
        constraints.append(scaled(a, rhs))
        other = agents[c.other_id]
        h = float(PairGeometry.of(
            ShapedBody(c.owner_id, me.state.pose, me.shape),
            ShapedBody(c.other_id, other.state.pose, other.shape),
            c.z).h)
        u_nom[2 + 2 * k: 4 + 2 * k] = nominal_r_input(
            me.shape, me.state, other.shape, other.state, c.hyperplane,
            vparams, cparams.z_gain(h))
        # The plant clamps the hyperplane's angular speed, so the QP must
        # not promise slew beyond it: with s = (Jz)^T r the exact input
        # derivative is ds/dt = (Jz)^T u_r - (z^T r) s, and each bound
        # |s| <= limit is kept by an exponential-approach half-space.
        z, r = c.hyperplane.z, c.hyperplane.r
        tang = _J2 @ z
        s = float(tang @ r)
        zr = float(z @ r)
        for sgn in (1.0, -1.0):
            a = np.zeros(n)
            a[2 + 2 * k: 4 + 2 * k] = -sgn * tang
            constraints.append(
                (a, -_CLAMP_GAIN * (Z_RATE_LIMIT - sgn * s) - sgn * zr * s))
    for c in incoming:
        _, (other_row, rhs) = rows_for(c)
        a = np.zeros(n)
        a[:2] = other_row
        constraints.append(scaled(a, rhs))

    return QpProblem(W=W, u_nom=u_nom, constraints=constraints), owned_ids
