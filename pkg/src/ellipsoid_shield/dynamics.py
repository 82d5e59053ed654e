"""Time integration for poses, hyperplane states, and the bicycle vehicle.

All steppers are pure functions; the simulator owns sequencing.  Pose
updates use the closed-form rigid-motion exponential per step (exact for
piecewise-constant body velocity), with a polar cleanup so orthonormality
never drifts.  Hyperplane states are Euler-stepped and renormalized to the
unit sphere exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ellipsoid_shield.geometry import (
    BodyVelocity,
    Pose,
    motion_exp,
    nearest_rotation,
    normalized,
)

Z_RATE_LIMIT = np.pi / 3.0  # rad/s cap on the unit vector's angular speed


def rbm_step(pose: Pose, V: BodyVelocity, dt: float) -> Pose:
    """Advance a pose by a constant body velocity for dt seconds."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    R_rel, p_rel = motion_exp(V.v, V.omega, dt)
    return Pose(nearest_rotation(pose.R @ R_rel), pose.p + pose.R @ p_rel)


def z_step(z, u_z, dt: float):
    """Euler step of the projected flow ż = (I − zzᵀ)u_z, renormalized."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    z = np.asarray(z, dtype=float)
    u_z = np.asarray(u_z, dtype=float)
    zdot = u_z - (z @ u_z) * z
    return normalized(z + dt * zdot)


@dataclass
class SecondOrderHyperplane:
    """Hyperplane direction with a velocity-level auxiliary state:
    ż = (I − zzᵀ)r, ṙ = u_r."""

    z: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        if self.z.shape != self.r.shape:
            raise ValueError("z and r must have matching dimension")
        if abs(np.sqrt(self.z @ self.z) - 1.0) > 1e-9:
            raise ValueError("z must be a unit vector")


def zr_step(state: SecondOrderHyperplane, u_r, dt: float,
            rate_limit: float = Z_RATE_LIMIT) -> SecondOrderHyperplane:
    """Euler step of the second-order hyperplane state.

    The angular speed of z is ‖(I − zzᵀ)r‖; it is kept within rate_limit
    both when applying the step and in the stored state afterwards, so a
    chain of steps never carries a faster rotation than the limit.  (An
    unlimited r would make the stored rate diverge from what the plant
    can realize and poison every condition built on ż = (I − zzᵀ)r.)
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    u_r = np.asarray(u_r, dtype=float)
    z, r = state.z, state.r
    zdot = r - (z @ r) * z
    speed = float(np.sqrt(zdot @ zdot))
    if speed > rate_limit:
        zdot = zdot * (rate_limit / speed)
    z2 = normalized(z + dt * zdot)
    r2 = r + dt * u_r
    tang = r2 - (z2 @ r2) * z2
    speed2 = float(np.sqrt(tang @ tang))
    if speed2 > rate_limit:
        r2 = r2 - tang + tang * (rate_limit / speed2)
    return SecondOrderHyperplane(z=z2, r=r2)


@dataclass
class VehicleParams:
    """Bicycle geometry: wheelbase and the center-of-mass split along it."""

    wheelbase: float = 2.7
    cm_ratio: float = 0.5

    def __post_init__(self):
        if self.wheelbase <= 0.0:
            raise ValueError("wheelbase must be positive")
        if not 0.0 <= self.cm_ratio <= 1.0:
            raise ValueError("cm_ratio must lie in [0, 1]")


@dataclass
class VehicleState:
    """Planar bicycle: pose of the body frame, forward speed, steering
    angle.  The model is singular at |steering| = π/2."""

    pose: Pose
    speed: float
    steering: float

    def __post_init__(self):
        if self.pose.d != 2:
            raise ValueError("vehicle pose must be planar")
        self.speed = float(self.speed)
        self.steering = float(self.steering)
        if abs(self.steering) >= np.pi / 2.0:
            raise ValueError("steering magnitude must stay below pi/2")


def vehicle_body_velocity(state: VehicleState,
                          params: VehicleParams) -> BodyVelocity:
    """Body-frame twist of the bicycle at its current speed and steering."""
    if abs(state.steering) >= np.pi / 2.0:
        raise ValueError("steering magnitude must stay below pi/2")
    T = np.tan(state.steering)
    s = np.sqrt(1.0 + (params.cm_ratio * T) ** 2)
    v_b = (state.speed / s) * np.array([1.0, params.cm_ratio * T])
    omega = state.speed * T / (params.wheelbase * s)
    return BodyVelocity(v=v_b, omega=float(omega))


def vehicle_velocity_jacobian(state: VehicleState,
                              params: VehicleParams) -> np.ndarray:
    """3x2 matrix mapping (u_a, u_ω) to (v̇_bx, v̇_by, ω̇).

    Columns are the partials of (v_b, ω) w.r.t. speed and steering: the
    inputs enter only through v̇ = u_a and φ̇ = u_ω.
    """
    if abs(state.steering) >= np.pi / 2.0:
        raise ValueError("steering magnitude must stay below pi/2")
    v = state.speed
    sig = params.cm_ratio
    ell = params.wheelbase
    T = np.tan(state.steering)
    c2 = 1.0 + T * T  # sec² of the steering angle
    s = np.sqrt(1.0 + (sig * T) ** 2)
    dir_b = np.array([1.0, sig * T])

    dvb_dv = dir_b / s
    dvb_dphi = v * (-(sig * sig * T * c2 / s**3) * dir_b
                    + np.array([0.0, sig * c2]) / s)
    dw_dv = T / (ell * s)
    dw_dphi = v * c2 / (ell * s**3)

    J = np.zeros((3, 2))
    J[:2, 0] = dvb_dv
    J[:2, 1] = dvb_dphi
    J[2, 0] = dw_dv
    J[2, 1] = dw_dphi
    return J


def vehicle_step(state: VehicleState, params: VehicleParams,
                 u_a: float, u_omega: float, dt: float) -> VehicleState:
    """Advance the bicycle: pose by the current twist, then Euler updates
    of speed and steering.  Raises if steering leaves (−π/2, π/2)."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    V = vehicle_body_velocity(state, params)
    pose = rbm_step(state.pose, V, dt)
    speed = state.speed + dt * float(u_a)
    steering = state.steering + dt * float(u_omega)
    if abs(steering) >= np.pi / 2.0:
        raise ValueError("steering left the valid range (-pi/2, pi/2)")
    return VehicleState(pose=pose, speed=speed, steering=steering)
