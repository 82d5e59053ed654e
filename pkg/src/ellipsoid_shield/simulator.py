"""Closed-loop fixed-step simulation of safety-filtered multi-body motion.

Each control period every body assembles its quadratic program from a
shared state snapshot, the programs are solved independently, and all
inputs are applied simultaneously.  Hyperplane directions evolve together
with the bodies (first-order in the rigid-body modes, second-order in the
vehicle mode).  Runs are deterministic: the scenario seed drives the only
random draw (the initial separating directions).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .controllers import (ControllerParams, PairChannel, VehicleAgent,
                          assemble_body_qp, assemble_vehicle_qp)
from .dynamics import (SecondOrderHyperplane, VehicleParams, rbm_step,
                       vehicle_body_velocity, vehicle_step, z_step, zr_step)
from .geometry import BodyVelocity, Pose, ShapedBody
from .oracle import min_distance
from .qp import QpInfeasibleError, solve
from .separation import PairGeometry, maximize_h

MODES = ("rbm2d", "rbm3d", "vehicle2d")
SAFETY_SLACK = 1e-4   # tolerated dip of h below zero (discretization)
AUDIT_SLACK = 1e-6    # allowed excess of h over the audited distance
KKT_TOL = 1e-8
_WARM_TRIES = 64      # random separating-direction attempts per pair


class ScenarioError(ValueError):
    """The scenario cannot be simulated (bad data, initial overlap)."""


class SimulationError(RuntimeError):
    """A run aborted mid-flight (infeasible QP, KKT failure, dynamics)."""


@dataclass
class Scenario:
    """Complete description of one simulation run."""

    mode: str
    bodies: list
    params: ControllerParams
    dt: float
    t_end: float
    seed: int = 0
    oracle_every: int = 10
    goals: dict = field(default_factory=dict)      # id -> Pose (rbm modes)
    static_ids: frozenset = frozenset()
    vehicles: dict = field(default_factory=dict)   # id -> VehicleState
    paths: dict = field(default_factory=dict)      # id -> LinePath
    vehicle_params: VehicleParams = field(default_factory=VehicleParams)
    target_speed: float = 5.0
    name: str = "scenario"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ScenarioError(f"unknown mode {self.mode!r}")
        if not self.dt > 0.0:
            raise ScenarioError("dt must be positive")
        if not self.t_end > 0.0:
            raise ScenarioError("t_end must be positive")
        if self.oracle_every < 0:
            raise ScenarioError("oracle_every must be >= 0 (0 = off)")
        if not self.bodies:
            raise ScenarioError("scenario needs at least one body")
        ids = [b.id for b in self.bodies]
        if len(set(ids)) != len(ids):
            raise ScenarioError("body ids must be unique")
        d = 2 if self.mode != "rbm3d" else 3
        for b in self.bodies:
            if b.d != d:
                raise ScenarioError(
                    f"body {b.id} is {b.d}-dimensional, mode wants {d}")
        self.static_ids = frozenset(self.static_ids)
        if self.mode == "vehicle2d":
            if self.static_ids:
                raise ScenarioError("vehicle mode has no static bodies")
            for i in ids:
                if i not in self.vehicles:
                    raise ScenarioError(f"body {i} has no vehicle state")
                if i not in self.paths:
                    raise ScenarioError(f"body {i} has no path")
        else:
            for i in ids:
                if i not in self.static_ids and i not in self.goals:
                    raise ScenarioError(f"moving body {i} has no goal")

    @property
    def d(self) -> int:
        return self.bodies[0].d

    @property
    def body_ids(self):
        return sorted(b.id for b in self.bodies)

    @property
    def pair_ids(self):
        ids = self.body_ids
        return [(i, j) for a, i in enumerate(ids) for j in ids[a + 1:]]

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.t_end / self.dt - 1e-9))


@dataclass
class SimState:
    """Mutable part of a run: the bodies' kinematic states at one time."""

    t: float
    k: int
    bodies: dict                    # id -> ShapedBody at the current pose
    vehicles: dict = field(default_factory=dict)  # id -> VehicleState


@dataclass
class QpStat:
    solve_ms: float
    n: int
    m: int
    active: tuple
    kkt_residual: float


@dataclass
class BodyRecord:
    pose: Pose
    velocity: object   # BodyVelocity, or None on the final row
    speed: float = None
    steering: float = None


@dataclass
class PairRecord:
    z: np.ndarray
    h: float
    w_star: float = None
    r: np.ndarray = None


@dataclass
class StepRecord:
    """What one control period decided: inputs applied at the snapshot."""

    inputs: dict      # id -> BodyVelocity (rbm) or (u_a, u_omega) tuple
    qp: dict          # id -> QpStat
    pair_h: dict      # (i, j) -> h used in this period's constraints
    u_z: dict         # (i, j) -> hyperplane input (u_z or u_r)


@dataclass
class TrajectoryLog:
    """Full record of a run, one entry per logged instant."""

    mode: str
    d: int
    dt: float
    body_ids: list
    times: list = field(default_factory=list)
    bodies: list = field(default_factory=list)  # dict id -> BodyRecord
    pairs: list = field(default_factory=list)   # dict (i,j) -> PairRecord
    qp: list = field(default_factory=list)      # dict id -> QpStat
    goal_errors: dict = field(default_factory=dict)
    failed: bool = False
    failure_reason: str = None

    def h_series(self, pair):
        """(times, h values) for one ordered pair."""
        t = np.array(self.times)
        h = np.array([row[pair].h for row in self.pairs])
        return t, h

    def min_h(self):
        values = [rec.h for row in self.pairs for rec in row.values()]
        return min(values) if values else None

    def summary(self) -> dict:
        gaps = [abs(rec.h - rec.w_star) for row in self.pairs
                for rec in row.values() if rec.w_star is not None]
        times = [s.solve_ms for row in self.qp for s in row.values()]
        return {
            "min_h": self.min_h(),
            "max_h_minus_wstar": max(gaps) if gaps else None,
            "goal_errors": dict(self.goal_errors),
            "qp_time_median_ms": float(np.median(times)) if times else None,
        }


def _signed_h(body_i: ShapedBody, body_j: ShapedBody, z) -> float:
    return float(PairGeometry.of(body_i, body_j, z).h)


def warm_start(scenario: Scenario) -> dict:
    """Initial separating direction for every pair.

    Seeded random directions are tried first, so the hyperplane starts
    somewhere inside the separating range rather than at the optimum;
    pairs the sampler misses fall back to the deterministic ascent
    initializer of maximize_h, and finally to the optimum itself.
    Raises ScenarioError when two bodies overlap at the start.
    """
    rng = np.random.default_rng(scenario.seed)
    bodies = {b.id: b for b in scenario.bodies}
    d = scenario.d
    channels = {}
    for (i, j) in scenario.pair_ids:
        bi, bj = bodies[i], bodies[j]
        if min_distance(bi, bj).overlap:
            raise ScenarioError(f"initial overlap between bodies {i} and {j}")
        if scenario.mode == "vehicle2d":
            # The channel carries a stored rate r; starting anywhere but
            # the flat spot of h would bank a rate far beyond the z-rate
            # clamp and upset the relative-degree-two condition, so the
            # second-order channel starts at rest on the maximizer.
            z = maximize_h(bi, bj).z
            hyper = SecondOrderHyperplane(z=z, r=np.zeros(d))
        else:
            z = None
            for _ in range(_WARM_TRIES):
                cand = rng.standard_normal(d)
                norm = float(np.sqrt(cand @ cand))
                if norm < 1e-12:
                    continue
                cand = cand / norm
                if _signed_h(bi, bj, cand) > 0.0:
                    z = cand
                    break
            if z is None:
                z = maximize_h(bi, bj).z  # disjoint: the maximum is > 0
            hyper = z
        channels[(i, j)] = PairChannel(i, j, hyper,
                                       last_h=_signed_h(bi, bj, z))
    return channels


def _initial_state(scenario: Scenario) -> SimState:
    bodies = {b.id: b for b in scenario.bodies}
    vehicles = dict(scenario.vehicles)
    return SimState(t=0.0, k=0, bodies=bodies, vehicles=vehicles)


def _group_by_body(channels: dict) -> dict:
    by_body = {}
    for c in channels.values():
        by_body.setdefault(c.owner_id, []).append(c)
        by_body.setdefault(c.other_id, []).append(c)
    return by_body


def _solve_timed(body_id, assemble):
    """Run one body's assemble+solve, mapping failures to SimulationError."""
    t0 = time.perf_counter()
    prob, layout = assemble()
    try:
        sol = solve(prob)
    except QpInfeasibleError as exc:
        raise SimulationError(
            f"QP infeasible for body {body_id}: constraint {exc.index} "
            f"violated by {exc.violation:.3e}") from exc
    ms = (time.perf_counter() - t0) * 1e3
    if sol.kkt_residual > KKT_TOL:
        raise SimulationError(
            f"KKT residual {sol.kkt_residual:.3e} for body {body_id}")
    stat = QpStat(solve_ms=ms, n=prob.n, m=prob.m,
                  active=tuple(sol.active_set),
                  kkt_residual=sol.kkt_residual)
    return sol, layout, stat


def _step_rbm(scenario: Scenario, state: SimState, channels: dict):
    params = scenario.params
    bodies = state.bodies
    by_body = _group_by_body(channels)
    cache = {}
    inputs, u_z, qp_stats = {}, {}, {}

    for i in scenario.body_ids:
        if i in scenario.static_ids:
            inputs[i] = BodyVelocity.zero(scenario.d)
            continue
        sol, layout, stat = _solve_timed(
            i, lambda i=i: assemble_body_qp(i, bodies, by_body.get(i, ()),
                                            params, scenario.goals,
                                            coeff_cache=cache))
        u = sol.u_star
        omega = u[layout.omega]
        inputs[i] = BodyVelocity(v=u[layout.v].copy(),
                                 omega=float(omega[0]) if scenario.d == 2
                                 else omega.copy())
        for oid in layout.owned_ids:
            u_z[(i, oid)] = u[layout.z_slice(oid)].copy()
        qp_stats[i] = stat

    pair_h = {}
    for key, c in channels.items():
        rows = cache.get(key)
        if rows is not None:
            h, mu = float(rows[5]), rows[6]
        else:  # both endpoints static: nobody assembled this pair
            g = PairGeometry.of(bodies[key[0]], bodies[key[1]], c.z)
            h, mu = float(g.h), g.grad_z()
        pair_h[key] = h
        if key not in u_z:  # static owner still steers its hyperplane
            u_z[key] = params.z_gain(h) * mu

    dt = scenario.dt
    new_bodies = {}
    for i, b in bodies.items():
        if i in scenario.static_ids:
            new_bodies[i] = b
        else:
            new_bodies[i] = ShapedBody(b.id, rbm_step(b.pose, inputs[i], dt),
                                       b.shape)
    new_channels = {}
    for key, c in channels.items():
        z2 = z_step(c.z, u_z[key], dt)
        new_channels[key] = PairChannel(c.owner_id, c.other_id, z2,
                                        last_h=pair_h[key])
    new_state = SimState(t=state.t + dt, k=state.k + 1, bodies=new_bodies,
                         vehicles={})
    record = StepRecord(inputs=inputs, qp=qp_stats, pair_h=pair_h, u_z=u_z)
    return new_state, new_channels, record


def _step_vehicle(scenario: Scenario, state: SimState, channels: dict):
    params = scenario.params
    vparams = scenario.vehicle_params
    shapes = {b.id: b.shape for b in scenario.bodies}
    agents = {i: VehicleAgent(i, shapes[i], state.vehicles[i],
                              scenario.paths[i])
              for i in scenario.body_ids}
    by_body = _group_by_body(channels)
    cache = {}
    inputs, u_r, qp_stats = {}, {}, {}

    for i in scenario.body_ids:
        sol, owned_ids, stat = _solve_timed(
            i, lambda i=i: assemble_vehicle_qp(
                i, agents, by_body.get(i, ()), params, vparams,
                target_speed=scenario.target_speed, coeff_cache=cache))
        u = sol.u_star
        inputs[i] = (float(u[0]), float(u[1]))
        for k, oid in enumerate(owned_ids):
            u_r[(i, oid)] = u[2 + 2 * k: 4 + 2 * k].copy()
        qp_stats[i] = stat

    pair_h = {}
    for key, c in channels.items():
        bi = ShapedBody(key[0], state.vehicles[key[0]].pose, shapes[key[0]])
        bj = ShapedBody(key[1], state.vehicles[key[1]].pose, shapes[key[1]])
        pair_h[key] = _signed_h(bi, bj, c.z)

    dt = scenario.dt
    new_vehicles = {}
    for i in scenario.body_ids:
        u_a, u_w = inputs[i]
        try:
            new_vehicles[i] = vehicle_step(state.vehicles[i], vparams,
                                           u_a, u_w, dt)
        except ValueError as exc:
            raise SimulationError(
                f"vehicle {i} left its valid state at t={state.t:.3f}: "
                f"{exc}") from exc
    new_bodies = {i: ShapedBody(i, new_vehicles[i].pose, shapes[i])
                  for i in scenario.body_ids}
    new_channels = {}
    for key, c in channels.items():
        hyper2 = zr_step(c.hyperplane, u_r[key], dt)
        new_channels[key] = PairChannel(c.owner_id, c.other_id, hyper2,
                                        last_h=pair_h[key])
    new_state = SimState(t=state.t + dt, k=state.k + 1, bodies=new_bodies,
                         vehicles=new_vehicles)
    record = StepRecord(inputs=inputs, qp=qp_stats, pair_h=pair_h, u_z=u_r)
    return new_state, new_channels, record


def step(scenario: Scenario, state: SimState, channels: dict):
    """Advance one control period.

    All QPs are assembled from the same snapshot and every input is
    applied simultaneously.  Returns (state', channels', StepRecord);
    the record holds the inputs decided at state.t.
    """
    if scenario.mode == "vehicle2d":
        return _step_vehicle(scenario, state, channels)
    return _step_rbm(scenario, state, channels)


def _body_record(scenario, state, body_id, velocity):
    if scenario.mode == "vehicle2d":
        # the twist follows from speed and steering, so it is defined on
        # every row including the final one
        vs = state.vehicles[body_id]
        twist = vehicle_body_velocity(vs, scenario.vehicle_params)
        return BodyRecord(pose=vs.pose, velocity=twist, speed=vs.speed,
                          steering=vs.steering)
    return BodyRecord(pose=state.bodies[body_id].pose, velocity=velocity)


def _pair_h_now(scenario, state, channels):
    out = {}
    for key, c in channels.items():
        out[key] = _signed_h(state.bodies[key[0]], state.bodies[key[1]],
                             c.z)
    return out


def run(scenario: Scenario, channels: dict = None) -> TrajectoryLog:
    """Simulate the scenario end to end.

    The returned log has ceil(t_end/dt)+1 entries; entry k pairs the
    state at t_k with the inputs decided there (the final entry has no
    inputs).  Safety (h >= -1e-4) and, when auditing is on, weak duality
    along the trajectory (h <= w* + 1e-6) are checked at every logged
    instant; a breach marks the log failed but the run continues.
    Infeasible or non-certified QPs abort with SimulationError.
    """
    if channels is None:
        channels = warm_start(scenario)
    state = _initial_state(scenario)
    log = TrajectoryLog(mode=scenario.mode, d=scenario.d, dt=scenario.dt,
                        body_ids=scenario.body_ids)
    n_steps = scenario.n_steps
    every = scenario.oracle_every

    def fail(reason):
        if not log.failed:
            log.failed = True
            log.failure_reason = reason

    for k in range(n_steps + 1):
        t = k * scenario.dt
        last = k == n_steps
        if last:
            record = None
            pair_h = _pair_h_now(scenario, state, channels)
        else:
            new_state, new_channels, record = step(scenario, state, channels)
            pair_h = record.pair_h

        audit = every > 0 and k % every == 0
        pair_row = {}
        for key, c in channels.items():
            h = pair_h[key]
            w_star = None
            if audit:
                res = min_distance(state.bodies[key[0]],
                                   state.bodies[key[1]])
                w_star = 0.0 if res.overlap else float(res.distance)
                if h > w_star + AUDIT_SLACK:
                    fail(f"h exceeds the audited distance for pair {key} "
                         f"at t={t:.3f}: h={h:.6e}, w*={w_star:.6e}")
            if h < -SAFETY_SLACK:
                fail(f"safety violated for pair {key} at t={t:.3f}: "
                     f"h={h:.6e}")
            r = c.r if scenario.mode == "vehicle2d" else None
            pair_row[key] = PairRecord(z=np.array(c.z, dtype=float), h=h,
                                       w_star=w_star,
                                       r=None if r is None
                                       else np.array(r, dtype=float))

        body_row = {}
        for i in scenario.body_ids:
            vel = None if last else record.inputs[i]
            body_row[i] = _body_record(scenario, state, i, vel)

        log.times.append(t)
        log.bodies.append(body_row)
        log.pairs.append(pair_row)
        log.qp.append({} if last else dict(record.qp))

        if not last:
            state, channels = new_state, new_channels

    for i in scenario.body_ids:
        if scenario.mode == "vehicle2d":
            err = abs(scenario.paths[i].lateral_error(
                state.vehicles[i].pose.p))
            log.goal_errors[str(i)] = float(err)
        elif i not in scenario.static_ids:
            gap = state.bodies[i].pose.p - scenario.goals[i].p
            log.goal_errors[str(i)] = float(np.sqrt(gap @ gap))
    return log
