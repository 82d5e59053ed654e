"""Nominal laws, constraint assembly, and the vehicle second-order terms."""

from __future__ import annotations

import math

import numpy as np
import pytest

from ellipsoid_shield.controllers import (
    _RESYNC_GAIN,
    BodyLayout,
    ControllerParams,
    LinePath,
    PairChannel,
    assemble_body_qp,
    assemble_vehicle_qp,
    nominal_pose_input,
    nominal_r_input,
    nominal_z_input,
    other_constraint,
    owner_constraint,
    vehicle_A_term,
    vehicle_constraints,
    vehicle_nominal,
)
from ellipsoid_shield.dynamics import (
    Z_RATE_LIMIT,
    SecondOrderHyperplane,
    VehicleParams,
    VehicleState,
    vehicle_body_velocity,
    z_step,
)
from ellipsoid_shield.geometry import (
    BodyVelocity,
    EllipsoidShape,
    Pose,
    ShapedBody,
    rotation_exp,
)
from ellipsoid_shield.dynamics import rbm_step
from ellipsoid_shield.qp import solve
from ellipsoid_shield.separation import (
    grad_z,
    h_dot,
    maximize_h,
    signed_distance,
)

from helpers import disjoint_pair, random_rotation


def rot2(a):
    return np.array([[math.cos(a), -math.sin(a)],
                     [math.sin(a), math.cos(a)]])


def random_unit(d, rng):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


# --- nominal laws -----------------------------------------------------------


def test_nominal_pose_input_at_goal():
    rng = np.random.default_rng(51)
    for d in (2, 3):
        R = random_rotation(d, rng)
        p = rng.uniform(-2, 2, size=d)
        body = ShapedBody(0, Pose(R, p), EllipsoidShape(np.ones(d)))
        u = nominal_pose_input(body, Pose(R, p), 3.0, 0.5)
        assert np.allclose(u.v, 0.0, atol=1e-14)
        assert np.allclose(u.omega, 0.0, atol=1e-14)


def test_nominal_pose_input_translation_gain():
    body = ShapedBody(0, Pose(np.eye(3), np.zeros(3)),
                      EllipsoidShape(np.ones(3)))
    goal = Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))
    u = nominal_pose_input(body, goal, 3.0, 0.5)
    assert np.allclose(u.v, [3.0, 0.0, 0.0], atol=1e-14)
    assert np.allclose(u.omega, 0.0, atol=1e-14)


def test_nominal_pose_input_half_turn_dead_point():
    # A pi attitude error has zero antisymmetric part: the law stalls there.
    body = ShapedBody(0, Pose(np.eye(3), np.zeros(3)),
                      EllipsoidShape(np.ones(3)))
    goal_R = rotation_exp(np.array([0.0, 0.0, math.pi]))
    u = nominal_pose_input(body, Pose(goal_R, np.zeros(3)), 3.0, 0.5)
    assert np.allclose(u.omega, 0.0, atol=1e-12)


def test_nominal_pose_input_rotation_direction():
    # Small positive yaw error produces positive spin toward the goal.
    body = ShapedBody(0, Pose(np.eye(2), np.zeros(2)),
                      EllipsoidShape(np.ones(2)))
    goal = Pose(rot2(0.3), np.zeros(2))
    u = nominal_pose_input(body, goal, 3.0, 0.5)
    assert u.omega == pytest.approx(0.5 * math.sin(0.3), abs=1e-12)


def test_nominal_z_input_vanishes_at_maximizer():
    rng = np.random.default_rng(52)
    for d in (2, 3):
        bi, bj = disjoint_pair(d, rng)
        res = maximize_h(bi, bj)
        u = nominal_z_input(bi, bj, res.z, 20.0)
        P = np.eye(d) - np.outer(res.z, res.z)
        assert np.linalg.norm(P @ u) <= 20.0 * 1e-8


def test_nominal_z_input_rotates_toward_neighbor():
    # Unit circles side by side, z pointing sideways: the projected input
    # must push z toward the neighbor direction (+x).
    bi = ShapedBody(0, Pose(np.eye(2), np.zeros(2)),
                    EllipsoidShape(np.ones(2)))
    bj = ShapedBody(1, Pose(np.eye(2), np.array([4.0, 0.0])),
                    EllipsoidShape(np.ones(2)))
    z = np.array([0.0, 1.0])
    u = nominal_z_input(bi, bj, z, 20.0)
    P = np.eye(2) - np.outer(z, z)
    assert (P @ u)[0] > 0.0


def test_scheduled_gain_halves():
    params = ControllerParams(k_z=20.0, k_z_scheduled=True)
    assert params.z_gain(0.0) == pytest.approx(20.0)
    assert params.z_gain(1.0) == pytest.approx(10.0)
    flat = ControllerParams(k_z=20.0)
    assert flat.z_gain(5.0) == 20.0


def test_controller_params_validation():
    with pytest.raises(ValueError):
        ControllerParams(alpha_gain=0.0)
    with pytest.raises(ValueError):
        ControllerParams(split=0.4)
    with pytest.raises(ValueError):
        PairChannel(owner_id=3, other_id=2, hyperplane=np.array([1.0, 0.0]))


# --- half-condition rows ----------------------------------------------------


def test_constraint_rows_reassemble_h_dot():
    # Owner and other rows, contracted with the actual inputs, must add up
    # to dh/dt exactly; their right sides split -gamma*h in half.
    rng = np.random.default_rng(53)
    gamma = 10.0
    for d in (2, 3):
        k = 1 if d == 2 else 3
        for _ in range(15):
            bi, bj = disjoint_pair(d, rng)
            z = random_unit(d, rng)
            ch = PairChannel(0, 1, hyperplane=z)
            a_own, b_own = owner_constraint(ch, bi, bj, gamma)
            a_oth, b_oth = other_constraint(ch, bi, bj, gamma)
            u_i = BodyVelocity(rng.standard_normal(d),
                               float(rng.standard_normal()) if d == 2
                               else rng.standard_normal(3))
            u_j = BodyVelocity(rng.standard_normal(d),
                               float(rng.standard_normal()) if d == 2
                               else rng.standard_normal(3))
            u_z = rng.standard_normal(d)
            own_vec = np.concatenate([u_i.v, np.atleast_1d(u_i.omega), u_z])
            oth_vec = np.concatenate([u_j.v, np.atleast_1d(u_j.omega)])
            total = a_own @ own_vec + a_oth @ oth_vec
            expected = h_dot(bi, bj, z, u_i, u_j, u_z)
            assert total == pytest.approx(expected, abs=1e-10)
            h = signed_distance(bi, bj, z)
            assert b_own == pytest.approx(-0.5 * gamma * h, abs=1e-12)
            assert b_oth == b_own
            assert a_own.shape == (d + k + d,)
            assert a_oth.shape == (d + k,)


def test_constraint_row_norms_at_least_one():
    # The linear-velocity block alone has unit norm, so the filter is
    # never structurally infeasible.
    rng = np.random.default_rng(54)
    for d in (2, 3):
        for _ in range(50):
            bi, bj = disjoint_pair(d, rng)
            z = random_unit(d, rng)
            ch = PairChannel(0, 1, hyperplane=z)
            a_own, _ = owner_constraint(ch, bi, bj, 10.0)
            a_oth, _ = other_constraint(ch, bi, bj, 10.0)
            assert np.linalg.norm(a_own) >= 1.0 - 1e-12
            assert np.linalg.norm(a_oth) >= 1.0 - 1e-12


# --- per-body QP assembly ---------------------------------------------------


def _two_body_setup(d, rng, ids=(1, 2), gap=(1.0, 2.0)):
    bi, bj = disjoint_pair(d, rng, gap=gap)
    bi = ShapedBody(ids[0], bi.pose, bi.shape)
    bj = ShapedBody(ids[1], bj.pose, bj.shape)
    z = maximize_h(bi, bj).z
    channel = PairChannel(ids[0], ids[1], hyperplane=z)
    bodies = {ids[0]: bi, ids[1]: bj}
    goals = {b.id: Pose(b.pose.R, b.pose.p + rng.uniform(-1, 1, size=d))
             for b in (bi, bj)}
    return bodies, goals, [channel]


def test_assemble_counts_two_bodies():
    rng = np.random.default_rng(55)
    bodies, goals, channels = _two_body_setup(3, rng)
    params = ControllerParams()
    prob1, lay1 = assemble_body_qp(1, bodies, channels, params, goals)
    prob2, lay2 = assemble_body_qp(2, bodies, channels, params, goals)
    assert prob1.n == 9 and prob1.m == 1      # v(3) + omega(3) + z(3)
    assert prob2.n == 6 and prob2.m == 1      # v(3) + omega(3)
    assert lay1.owned_ids == [2] and lay2.owned_ids == []
    assert np.allclose(prob1.W[:3], params.beta_v)
    assert np.allclose(prob1.W[3:6], params.beta_omega)
    assert np.allclose(prob1.W[6:], 1.0)


def test_assemble_counts_sixteen_bodies():
    rng = np.random.default_rng(56)
    ids = list(range(1, 17))
    bodies = {}
    for k, i in enumerate(ids):
        # place on a wide circle so every pair is far apart
        ang = 2 * math.pi * k / 16
        p = 40.0 * np.array([math.cos(ang), math.sin(ang)])
        bodies[i] = ShapedBody(i, Pose(np.eye(2), p),
                               EllipsoidShape(np.array([1.0, 0.6])))
    channels = []
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            i, j = ids[a], ids[b]
            z = maximize_h(bodies[i], bodies[j]).z
            channels.append(PairChannel(i, j, hyperplane=z))
    goals = {i: bodies[i].pose for i in ids}
    prob, layout = assemble_body_qp(8, bodies, channels, ControllerParams(),
                                    goals)
    owner_rows = sum(1 for c in channels if c.owner_id == 8)
    other_rows = sum(1 for c in channels if c.other_id == 8)
    assert owner_rows == 8 and other_rows == 7
    assert prob.m == 15
    assert prob.n == 2 + 1 + 2 * 8
    assert layout.owned_ids == list(range(9, 17))


def test_assemble_isolated_body_keeps_nominal():
    rng = np.random.default_rng(57)
    for d in (2, 3):
        bodies, goals, channels = _two_body_setup(d, rng, gap=(30.0, 40.0))
        params = ControllerParams()
        prob, layout = assemble_body_qp(1, bodies, channels, params, goals)
        sol = solve(prob)
        assert np.linalg.norm(sol.u_star - prob.u_nom) <= 1e-9
        # decoded nominal matches the standalone laws
        nom = nominal_pose_input(bodies[1], goals[1], params.k_v,
                                 params.k_omega)
        assert np.allclose(prob.u_nom[layout.v], nom.v)
        assert np.allclose(prob.u_nom[layout.z_slice(2)],
                           nominal_z_input(bodies[1], bodies[2],
                                           channels[0].z, params.k_z))


def test_assemble_uses_scheduled_gain():
    rng = np.random.default_rng(58)
    bodies, goals, channels = _two_body_setup(2, rng)
    params = ControllerParams(k_z=20.0, k_z_scheduled=True)
    prob, layout = assemble_body_qp(1, bodies, channels, params, goals)
    h = signed_distance(bodies[1], bodies[2], channels[0].z)
    expect = (20.0 / (1.0 + h * h)) * grad_z(bodies[1], bodies[2],
                                             channels[0].z)
    assert np.allclose(prob.u_nom[layout.z_slice(2)], expect, atol=1e-12)


def test_assemble_coeff_cache_shared():
    rng = np.random.default_rng(59)
    bodies, goals, channels = _two_body_setup(2, rng)
    params = ControllerParams()
    cache = {}
    prob1, _ = assemble_body_qp(1, bodies, channels, params, goals, cache)
    assert (1, 2) in cache
    prob2, _ = assemble_body_qp(2, bodies, channels, params, goals, cache)
    nocache1, _ = assemble_body_qp(1, bodies, channels, params, goals)
    nocache2, _ = assemble_body_qp(2, bodies, channels, params, goals)
    for a, b in ((prob1, nocache1), (prob2, nocache2)):
        assert np.allclose(a.u_nom, b.u_nom)
        for (ra, ba), (rb, bb) in zip(a.constraints, b.constraints):
            assert np.allclose(ra, rb) and ba == bb


def test_layout_slices():
    layout = BodyLayout(d=3, owned_ids=[4, 7])
    assert layout.n == 3 + 3 + 6
    assert layout.v == slice(0, 3)
    assert layout.omega == slice(3, 6)
    assert layout.z_slice(4) == slice(6, 9)
    assert layout.z_slice(7) == slice(9, 12)


# --- vehicle laws and second-order terms ------------------------------------


def _random_vehicle_pair(rng, min_sep=6.0, max_sep=12.0):
    vp = VehicleParams(wheelbase=2.7, cm_ratio=0.5)
    shapes = [EllipsoidShape(np.array([2.0, 1.0])),
              EllipsoidShape(np.array([2.0, 1.0]))]
    sep = rng.uniform(min_sep, max_sep)
    ang = rng.uniform(0, 2 * math.pi)
    p_i = rng.uniform(-2, 2, size=2)
    p_j = p_i + sep * np.array([math.cos(ang), math.sin(ang)])
    st_i = VehicleState(Pose(rot2(rng.uniform(-math.pi, math.pi)), p_i),
                        speed=float(rng.uniform(0.5, 8.0)),
                        steering=float(rng.uniform(-1.0, 1.0)))
    st_j = VehicleState(Pose(rot2(rng.uniform(-math.pi, math.pi)), p_j),
                        speed=float(rng.uniform(0.5, 8.0)),
                        steering=float(rng.uniform(-1.0, 1.0)))
    bi = ShapedBody(1, st_i.pose, shapes[0])
    bj = ShapedBody(2, st_j.pose, shapes[1])
    z = maximize_h(bi, bj).z
    # nudge z off the maximizer so generic terms are exercised
    z = rot2(rng.uniform(-0.5, 0.5)) @ z
    r = rng.uniform(-0.35, 0.35, size=2)
    hyper = SecondOrderHyperplane(z, r)
    return vp, shapes, st_i, st_j, hyper


def _drift_states(vp, st_i, st_j, hyper, s, nsub=20, move_z=True):
    """Integrate the zero-input flow to (possibly negative) time s."""
    dt = s / nsub
    si, sj, z, r = st_i, st_j, hyper.z, hyper.r

    def pose_advance(state):
        V = vehicle_body_velocity(state, vp)
        if dt >= 0:
            pose = rbm_step(state.pose, V, dt)
        else:
            pose = rbm_step(state.pose, BodyVelocity(-V.v, -V.omega), -dt)
        return VehicleState(pose, state.speed, state.steering)

    for _ in range(nsub):
        si = pose_advance(si)
        sj = pose_advance(sj)
        if move_z:
            z = z_step(z, r, dt) if dt >= 0 else z_step(z, -r, -dt)
    return si, sj, z


def _h_dot_at(vp, shapes, st_i, st_j, z, r):
    bi = ShapedBody(1, st_i.pose, shapes[0])
    bj = ShapedBody(2, st_j.pose, shapes[1])
    Vi = vehicle_body_velocity(st_i, vp)
    Vj = vehicle_body_velocity(st_j, vp)
    return h_dot(bi, bj, z, Vi, Vj, r)


def test_vehicle_A_term_zero_at_rest():
    vp = VehicleParams()
    st = VehicleState(Pose(np.eye(2), np.zeros(2)), 0.0, 0.0)
    st2 = VehicleState(Pose(np.eye(2), np.array([8.0, 0.0])), 0.0, 0.0)
    shape = EllipsoidShape(np.array([2.0, 1.0]))
    hyper = SecondOrderHyperplane(np.array([1.0, 0.0]), np.zeros(2))
    A = vehicle_A_term(shape, st, shape, st2, hyper, vp)
    assert A == 0.0


def test_vehicle_A_term_joint_translation_cancels():
    # Equal world velocity, aligned headings, no spin, r=0: the margin is
    # constant so its second derivative vanishes.
    vp = VehicleParams()
    shape = EllipsoidShape(np.array([2.0, 1.0]))
    R = rot2(0.4)
    st_i = VehicleState(Pose(R, np.zeros(2)), 3.0, 0.0)
    st_j = VehicleState(Pose(R, np.array([5.0, 3.0])), 3.0, 0.0)
    hyper = SecondOrderHyperplane(np.array([1.0, 0.0]), np.zeros(2))
    A = vehicle_A_term(shape, st_i, shape, st_j, hyper, vp)
    assert abs(A) <= 1e-9


def test_vehicle_A_term_matches_drift_fd():
    rng = np.random.default_rng(60)
    delta = 1e-5
    for _ in range(20):
        vp, shapes, st_i, st_j, hyper = _random_vehicle_pair(rng)
        A = vehicle_A_term(shapes[0], st_i, shapes[1], st_j, hyper, vp)
        plus = _drift_states(vp, st_i, st_j, hyper, +delta)
        minus = _drift_states(vp, st_i, st_j, hyper, -delta)
        fd = (_h_dot_at(vp, shapes, plus[0], plus[1], plus[2], hyper.r)
              - _h_dot_at(vp, shapes, minus[0], minus[1], minus[2],
                          hyper.r)) / (2 * delta)
        assert abs(fd - A) <= 1e-4 * max(1.0, abs(A))


def test_nominal_r_input_servos_to_capped_ascent_rate():
    rng = np.random.default_rng(61)
    k_z = 7.0
    for _ in range(12):
        vp, shapes, st_i, st_j, hyper = _random_vehicle_pair(rng)
        u_r = nominal_r_input(shapes[0], st_i, shapes[1], st_j, hyper, vp,
                              k_z)
        z, r = hyper.z, hyper.r
        bi = ShapedBody(1, st_i.pose, shapes[0])
        bj = ShapedBody(2, st_j.pose, shapes[1])
        mu = grad_z(bi, bj, z)
        target = k_z * (mu - (z @ mu) * z)
        speed = np.linalg.norm(target)
        if speed > Z_RATE_LIMIT:
            target *= Z_RATE_LIMIT / speed
        expected = _RESYNC_GAIN * (target - (r - (z @ r) * z))
        assert np.allclose(u_r, expected, atol=1e-12)


def test_nominal_r_input_vanishes_on_ascent_manifold():
    # when the stored tangential rate already equals the (capped) ascent
    # rate there is nothing to correct
    rng = np.random.default_rng(62)
    k_z = 3.0
    for _ in range(8):
        vp, shapes, st_i, st_j, hyper = _random_vehicle_pair(rng)
        z = hyper.z
        bi = ShapedBody(1, st_i.pose, shapes[0])
        bj = ShapedBody(2, st_j.pose, shapes[1])
        mu = grad_z(bi, bj, z)
        target = k_z * (mu - (z @ mu) * z)
        speed = np.linalg.norm(target)
        if speed > Z_RATE_LIMIT:
            target *= Z_RATE_LIMIT / speed
        on_manifold = SecondOrderHyperplane(z, target + 0.4 * z)
        u_r = nominal_r_input(shapes[0], st_i, shapes[1], st_j, on_manifold,
                              vp, k_z)
        assert np.linalg.norm(u_r) <= 1e-10


def test_nominal_r_input_damps_rate_at_maximizer():
    # at the maximizer the ascent rate is zero, so any leftover tangential
    # rate is pulled straight down
    rng = np.random.default_rng(63)
    vp = VehicleParams(wheelbase=2.7, cm_ratio=0.5)
    shapes = [EllipsoidShape(np.array([2.0, 1.0])),
              EllipsoidShape(np.array([2.0, 1.0]))]
    st_i = VehicleState(Pose(np.eye(2), np.zeros(2)), 1.0, 0.1)
    st_j = VehicleState(Pose(rot2(0.7), np.array([8.0, 1.0])), 2.0, -0.2)
    bi = ShapedBody(1, st_i.pose, shapes[0])
    bj = ShapedBody(2, st_j.pose, shapes[1])
    z = maximize_h(bi, bj).z
    tang = np.array([-z[1], z[0]])
    r = 0.3 * tang + 0.9 * z
    u_r = nominal_r_input(shapes[0], st_i, shapes[1], st_j,
                          SecondOrderHyperplane(z, r), vp, 5.0)
    assert np.allclose(u_r, -_RESYNC_GAIN * 0.3 * tang, atol=1e-6)


def _full_flow(vp, shapes, st_i, st_j, hyper, inputs, s, nsub=20):
    """Integrate the closed pair flow with constant inputs to time s."""
    u_ai, u_wi, u_aj, u_wj, u_r = inputs
    dt = s / nsub
    si, sj, z, r = st_i, st_j, hyper.z, hyper.r
    for _ in range(nsub):
        Vi = vehicle_body_velocity(si, vp)
        Vj = vehicle_body_velocity(sj, vp)
        if dt >= 0:
            pose_i = rbm_step(si.pose, Vi, dt)
            pose_j = rbm_step(sj.pose, Vj, dt)
            z = z_step(z, r, dt)
        else:
            pose_i = rbm_step(si.pose, BodyVelocity(-Vi.v, -Vi.omega), -dt)
            pose_j = rbm_step(sj.pose, BodyVelocity(-Vj.v, -Vj.omega), -dt)
            z = z_step(z, -r, -dt)
        si = VehicleState(pose_i, si.speed + dt * u_ai,
                          si.steering + dt * u_wi)
        sj = VehicleState(pose_j, sj.speed + dt * u_aj,
                          sj.steering + dt * u_wj)
        r = r + dt * u_r
    return si, sj, z, r


def test_vehicle_constraints_reassemble_h_ddot():
    # A + owner row . inputs_i + other row . inputs_j must equal the
    # second time derivative of h along the true closed flow.
    rng = np.random.default_rng(62)
    delta = 1e-5
    vparams = None
    for _ in range(15):
        vp, shapes, st_i, st_j, hyper = _random_vehicle_pair(rng)
        ch = PairChannel(1, 2, hyperplane=hyper)
        (own, rhs_i), (oth, rhs_j) = vehicle_constraints(
            ch, shapes[0], st_i, shapes[1], st_j, vp)
        assert rhs_i == rhs_j
        inputs = (float(rng.uniform(-2, 2)), float(rng.uniform(-1, 1)),
                  float(rng.uniform(-2, 2)), float(rng.uniform(-1, 1)),
                  rng.uniform(-1, 1, size=2))
        A = vehicle_A_term(shapes[0], st_i, shapes[1], st_j, hyper, vp)
        pred = (A + own @ np.concatenate([[inputs[0], inputs[1]], inputs[4]])
                + oth @ np.array([inputs[2], inputs[3]]))
        plus = _full_flow(vp, shapes, st_i, st_j, hyper, inputs, +delta)
        minus = _full_flow(vp, shapes, st_i, st_j, hyper, inputs, -delta)
        fd = (_h_dot_at(vp, shapes, plus[0], plus[1], plus[2], plus[3])
              - _h_dot_at(vp, shapes, minus[0], minus[1], minus[2],
                          minus[3])) / (2 * delta)
        assert abs(fd - pred) <= 1e-4 * max(1.0, abs(pred))


def test_vehicle_constraints_rhs_formula():
    rng = np.random.default_rng(63)
    for _ in range(10):
        vp, shapes, st_i, st_j, hyper = _random_vehicle_pair(rng)
        ch = PairChannel(1, 2, hyperplane=hyper)
        (_, rhs), _ = vehicle_constraints(ch, shapes[0], st_i, shapes[1],
                                          st_j, vp)
        bi = ShapedBody(1, st_i.pose, shapes[0])
        bj = ShapedBody(2, st_j.pose, shapes[1])
        h = signed_distance(bi, bj, hyper.z)
        hdot = _h_dot_at(vp, shapes, st_i, st_j, hyper.z, hyper.r)
        A = vehicle_A_term(shapes[0], st_i, shapes[1], st_j, hyper, vp)
        h_veh = hdot + h
        assert rhs == pytest.approx(-0.5 * (A + hdot + h_veh), abs=1e-10)


def test_vehicle_constraints_slack_when_far_and_still():
    vp = VehicleParams()
    shape = EllipsoidShape(np.array([2.0, 1.0]))
    st_i = VehicleState(Pose(np.eye(2), np.zeros(2)), 0.0, 0.0)
    st_j = VehicleState(Pose(np.eye(2), np.array([20.0, 0.0])), 0.0, 0.0)
    hyper = SecondOrderHyperplane(np.array([1.0, 0.0]), np.zeros(2))
    ch = PairChannel(1, 2, hyperplane=hyper)
    (own, rhs_i), (oth, rhs_j) = vehicle_constraints(ch, shape, st_i, shape,
                                                     st_j, vp)
    # zero input satisfies both halves strictly
    assert rhs_i < 0.0 and rhs_j < 0.0


def test_vehicle_nominal_on_line():
    path = LinePath(np.zeros(2), np.array([1.0, 0.0]))
    st = VehicleState(Pose(np.eye(2), np.array([3.0, 0.0])), 5.0, 0.0)
    u_a, u_w = vehicle_nominal(st, path)
    assert u_a == 0.0 and u_w == 0.0


def test_vehicle_nominal_speed_error():
    path = LinePath(np.zeros(2), np.array([1.0, 0.0]))
    st = VehicleState(Pose(np.eye(2), np.zeros(2)), 4.0, 0.0)
    u_a, _ = vehicle_nominal(st, path)
    assert u_a == pytest.approx(1.0, abs=1e-12)


def test_vehicle_nominal_lateral_offset():
    # One meter to the left of the line, aligned, zero steering.
    path = LinePath(np.zeros(2), np.array([1.0, 0.0]))
    st = VehicleState(Pose(np.eye(2), np.array([0.0, 1.0])), 5.0, 0.0)
    _, u_w = vehicle_nominal(st, path)
    assert u_w == pytest.approx(-0.1, abs=1e-12)


def test_vehicle_nominal_heading_error():
    path = LinePath(np.zeros(2), np.array([1.0, 0.0]))
    st = VehicleState(Pose(rot2(0.2), np.zeros(2)), 5.0, 0.0)
    _, u_w = vehicle_nominal(st, path)
    assert u_w == pytest.approx(-math.sin(0.2), abs=1e-12)


def test_line_path_normalizes_direction():
    path = LinePath(np.zeros(2), np.array([3.0, 4.0]))
    assert np.linalg.norm(path.direction) == pytest.approx(1.0, abs=1e-15)
    assert path.lateral_error(np.array([0.0, 0.0])) == 0.0


def test_assemble_vehicle_qp_far_apart_keeps_nominal():
    vp = VehicleParams()
    cp = ControllerParams(beta_v=1.0, beta_omega=10.0, k_z=1000.0,
                          k_z_scheduled=True)
    shape = EllipsoidShape(np.array([2.0, 1.0]))
    from ellipsoid_shield.controllers import VehicleAgent
    agents = {
        1: VehicleAgent(1, shape,
                        VehicleState(Pose(np.eye(2), np.array([0.0, -1.0])),
                                     5.0, 0.0),
                        LinePath(np.array([0.0, -1.0]), np.array([1.0, 0.0]))),
        2: VehicleAgent(2, shape,
                        VehicleState(Pose(rot2(math.pi),
                                          np.array([60.0, 1.0])), 5.0, 0.0),
                        LinePath(np.array([0.0, 1.0]), np.array([-1.0, 0.0]))),
    }
    bi = ShapedBody(1, agents[1].state.pose, shape)
    bj = ShapedBody(2, agents[2].state.pose, shape)
    hyper = SecondOrderHyperplane(maximize_h(bi, bj).z, np.zeros(2))
    channels = [PairChannel(1, 2, hyperplane=hyper)]
    prob, owned = assemble_vehicle_qp(1, agents, channels, cp, vp)
    assert prob.n == 4 and owned == [2]
    sol = solve(prob)
    assert np.linalg.norm(sol.u_star - prob.u_nom) <= 1e-9
    prob2, owned2 = assemble_vehicle_qp(2, agents, channels, cp, vp)
    assert prob2.n == 2 and owned2 == []


def test_vehicle_qp_caps_hyperplane_slew():
    # a demanding pair row would happily buy unbounded rotation speed from
    # the cheap u_r block; the cap rows must stop it at the plant's limit
    vp = VehicleParams()
    cp = ControllerParams(beta_v=1.0, beta_omega=10.0, k_z=1000.0,
                          k_z_scheduled=True)
    shape = EllipsoidShape(np.array([2.0, 1.0]))
    from ellipsoid_shield.controllers import VehicleAgent
    agents = {
        1: VehicleAgent(1, shape,
                        VehicleState(Pose(np.eye(2), np.array([0.0, 0.0])),
                                     6.0, 0.0),
                        LinePath(np.array([0.0, 0.0]), np.array([1.0, 0.0]))),
        2: VehicleAgent(2, shape,
                        VehicleState(Pose(rot2(math.pi),
                                          np.array([7.0, 0.6])), 6.0, 0.0),
                        LinePath(np.array([0.0, 0.6]), np.array([-1.0, 0.0]))),
    }
    bi = ShapedBody(1, agents[1].state.pose, shape)
    bj = ShapedBody(2, agents[2].state.pose, shape)
    z = rot2(0.35) @ maximize_h(bi, bj).z
    mu = grad_z(bi, bj, z)
    p_mu = mu - (z @ mu) * z
    # stored rate already near the cap, pointing where the pair row wants
    r = 0.99 * Z_RATE_LIMIT * p_mu / np.linalg.norm(p_mu)
    channels = [PairChannel(1, 2, hyperplane=SecondOrderHyperplane(z, r))]
    prob, _ = assemble_vehicle_qp(1, agents, channels, cp, vp)
    sol = solve(prob)
    u_r = sol.u_star[2:4]
    tang = np.array([-z[1], z[0]])
    s = float(tang @ r)
    budget = 50.0 * (Z_RATE_LIMIT - abs(s)) + float(z @ r) * s
    assert abs(float(tang @ u_r)) <= budget + 1e-8
    # without the cap rows the pair row buys far more slew than the plant
    # can deliver
    from ellipsoid_shield.qp import QpProblem
    bare = QpProblem(W=prob.W, u_nom=prob.u_nom,
                     constraints=[prob.constraints[0]])
    free_u_r = solve(bare).u_star[2:4]
    assert abs(float(tang @ free_u_r)) > budget
