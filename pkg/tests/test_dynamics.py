"""Dynamics oracles: analytic pendulum, finite differences, energy/momentum."""

import json

import numpy as np
import pytest

from forgebody.model import ModelError, load_model, default_model_path
from forgebody.dynamics import (
    ContactCache, ExternalWrench, SimState, default_q, forward_dynamics,
    forward_kinematics, gravity_torques, mass_matrix, point_jacobian,
    site_positions, step, step_batch, _contact_forces,
)


@pytest.fixture(scope="module")
def robot():
    return load_model(default_model_path())


@pytest.fixture(scope="module")
def arm():
    return load_model(default_model_path("z1_arm_fixed"))


@pytest.fixture(scope="module")
def pendulum():
    return load_model(default_model_path("pendulum"))


def _planar_doc():
    return json.load(open(default_model_path()))


# ---------------------------------------------------------------------------
# load_model

def test_shipped_model_shape(robot):
    assert robot.n_joints == 7
    assert robot.dof == 10
    assert robot.floating


def test_arm_model_shape(arm):
    assert arm.dof == 3
    assert arm.n_joints == 3
    assert not arm.floating


def test_zero_mass_rejected():
    doc = _planar_doc()
    doc["links"][2]["mass"] = 0.0
    with pytest.raises(ModelError, match="shank_f"):
        load_model(doc)


def test_negative_inertia_rejected():
    doc = _planar_doc()
    doc["links"][5]["inertia"] = -1.0
    with pytest.raises(ModelError, match="arm1"):
        load_model(doc)


def test_dangling_site_rejected():
    doc = _planar_doc()
    doc["sites"]["gripper"]["link"] = "nope"
    with pytest.raises(ModelError, match="sites.gripper"):
        load_model(doc)


def test_bad_limits_rejected():
    doc = _planar_doc()
    doc["joints"][0]["limits"] = [0.5, -0.5]
    with pytest.raises(ModelError, match="limits"):
        load_model(doc)


def test_q_def_outside_limits_rejected():
    doc = _planar_doc()
    doc["q_def"][0] = 3.0
    with pytest.raises(ModelError, match="q_def"):
        load_model(doc)


# ---------------------------------------------------------------------------
# forward kinematics

def _chain_doc():
    """Three links in a straight line, unit-ish offsets."""
    return {
        "name": "chain",
        "base": {"type": "fixed", "origin": [0.0, 0.0], "pitch": 0.0},
        "links": [
            {"name": "root", "mass": 1.0, "inertia": 0.1},
            {"name": "a", "mass": 1.0, "com": [0.2, 0.0], "inertia": 0.01, "length": 0.4},
            {"name": "b", "mass": 1.0, "com": [0.15, 0.0], "inertia": 0.01, "length": 0.3},
        ],
        "joints": [
            {"name": "j1", "parent": "root", "child": "a", "pivot": [0.1, 0.05],
             "limits": [-3, 3], "kp": 1, "kd": 0.1, "torque_limit": 10},
            {"name": "j2", "parent": "a", "child": "b", "pivot": [0.4, 0.0],
             "limits": [-3, 3], "kp": 1, "kd": 0.1, "torque_limit": 10},
        ],
        "sites": {"tip": {"link": "b", "offset": [0.3, 0.0]}},
        "contact": {"sites": [], "feet": []},
        "q_def": [0.0, 0.0],
    }


def test_zero_angle_chain_sums_offsets():
    m = load_model(_chain_doc())
    tip = forward_kinematics(m, np.zeros(2))["tip"]["pos"]
    np.testing.assert_allclose(tip, [0.1 + 0.4 + 0.3, 0.05], atol=1e-12)


def test_base_translation_equivariance(robot):
    q = default_q(robot)
    ref = forward_kinematics(robot, q)
    q2 = q.copy()
    q2[0] += 1.0
    shifted = forward_kinematics(robot, q2)
    for name in robot.sites:
        np.testing.assert_allclose(shifted[name]["pos"] - ref[name]["pos"], [1.0, 0.0], atol=1e-12)


def test_site_velocity_matches_finite_difference(robot):
    rng = np.random.default_rng(7)
    for _ in range(5):
        q = default_q(robot) + rng.uniform(-0.4, 0.4, robot.dof)
        qd = rng.normal(0, 1, robot.dof)
        _, vel = site_positions(robot, q[None], ["gripper"], qd[None])
        dt = 1e-7
        p_plus = site_positions(robot, (q + dt * qd)[None], ["gripper"])[0, 0]
        p_minus = site_positions(robot, (q - dt * qd)[None], ["gripper"])[0, 0]
        fd = (p_plus - p_minus) / (2 * dt)
        np.testing.assert_allclose(vel[0, 0], fd, rtol=1e-6, atol=1e-6)


# ---------------------------------------------------------------------------
# point_jacobian

def test_jacobian_base_translation_block(robot):
    J = point_jacobian(robot, default_q(robot), "gripper")
    np.testing.assert_allclose(J[:, :2], np.eye(2), atol=1e-12)


def test_jacobian_off_path_columns_zero(robot):
    # leg joints are not on the gripper's kinematic path
    J = point_jacobian(robot, default_q(robot), "gripper")
    leg_cols = J[:, 3:7]
    np.testing.assert_allclose(leg_cols, 0.0, atol=1e-12)
    # and arm joints are not on the foot's path
    Jf = point_jacobian(robot, default_q(robot), "foot_front")
    np.testing.assert_allclose(Jf[:, 7:], 0.0, atol=1e-12)


def test_jacobian_matches_central_differences(robot):
    rng = np.random.default_rng(11)
    eps = 1e-6
    for _ in range(10):
        q = default_q(robot) + rng.uniform(-0.5, 0.5, robot.dof)
        for site in ("gripper", "foot_front", "base_rear"):
            J = point_jacobian(robot, q, site)
            Jfd = np.zeros_like(J)
            for i in range(robot.dof):
                qp, qm = q.copy(), q.copy()
                qp[i] += eps
                qm[i] -= eps
                pp = site_positions(robot, qp[None], [site])[0, 0]
                pm = site_positions(robot, qm[None], [site])[0, 0]
                Jfd[:, i] = (pp - pm) / (2 * eps)
            np.testing.assert_allclose(J, Jfd, atol=1e-6)


def test_unknown_site_rejected(robot):
    with pytest.raises(ModelError):
        point_jacobian(robot, default_q(robot), "nope")


# ---------------------------------------------------------------------------
# forward dynamics

def test_pendulum_analytic(pendulum):
    # I_pivot qdd = -m g l_com cos(angle), angle measured from horizontal
    I_piv = 0.02083 + 1.0 * 0.25**2
    for ang in (0.3, -1.0, 1.3, 0.0):
        s = SimState.initial(pendulum, np.array([ang]))
        qdd = forward_dynamics(pendulum, s, np.zeros(1))
        expected = -1.0 * 9.81 * 0.25 * np.cos(ang) / I_piv
        np.testing.assert_allclose(qdd[0], expected, rtol=1e-12, atol=1e-12)


def test_zero_gravity_equilibrium():
    doc = _planar_doc()
    doc["gravity"] = 0.0
    m = load_model(doc)
    q = default_q(m)
    q[1] = 5.0  # airborne, no contact
    s = SimState.initial(m, q)
    qdd = forward_dynamics(m, s, np.zeros(7))
    np.testing.assert_allclose(qdd, 0.0, atol=1e-12)


def test_external_force_matches_dense_solve(arm):
    rng = np.random.default_rng(5)
    q = arm.q_def + rng.uniform(-0.3, 0.3, 3)
    s = SimState.initial(arm, q)
    F = np.array([12.0, -7.0])
    qdd = forward_dynamics(arm, s, np.zeros(3), [ExternalWrench("gripper", F)])
    # independent dense route: M qdd = J^T F - h
    M = mass_matrix(arm, q)
    J = point_jacobian(arm, q, "gripper")
    from forgebody.dynamics import bias_forces
    h = bias_forces(arm, q, np.zeros(3))
    expected = np.linalg.solve(M, J.T @ F - h)
    np.testing.assert_allclose(qdd, expected, atol=1e-10)


def test_torque_dimension_checked(arm):
    s = SimState.initial(arm)
    with pytest.raises(ValueError):
        forward_dynamics(arm, s, np.zeros(5))


# ---------------------------------------------------------------------------
# gravity_torques

def test_horizontal_link_torque(pendulum):
    tau = gravity_torques(pendulum, np.array([0.0]))
    np.testing.assert_allclose(tau[0], 1.0 * 9.81 * 0.25, rtol=1e-12)


def test_vertical_link_torque_zero(pendulum):
    tau = gravity_torques(pendulum, np.array([-np.pi / 2]))
    np.testing.assert_allclose(tau[0], 0.0, atol=1e-12)


def test_gravity_compensation_self_consistency(arm):
    rng = np.random.default_rng(13)
    for _ in range(10):
        q = rng.uniform(arm.joint_limits[:, 0], arm.joint_limits[:, 1])
        s = SimState.initial(arm, q)
        qdd = forward_dynamics(arm, s, gravity_torques(arm, q))
        assert np.abs(qdd).max() < 1e-6


# ---------------------------------------------------------------------------
# step

def _settle(model, seconds=3.0):
    s = SimState.initial(model, default_q(model))
    for _ in range(int(seconds * 50)):
        s = step(model, s, model.q_def)
    return s


def test_standing_equilibrium(robot):
    s = _settle(robot)
    z0 = s.q[1]
    worst = 0.0
    for _ in range(50):
        s = step(robot, s, robot.q_def)
        worst = max(worst, abs(s.q[1] - z0))
    assert worst < 1e-3, f"base height drifted {worst * 1000:.2f} mm"
    assert abs(s.q[2]) < 0.1


def test_free_pendulum_energy_drift(pendulum):
    from forgebody.dynamics import fk, _mc, _attached_points

    def energy(q, qd):
        poses = fk(pendulum, q[None], qd[None])
        mc = _mc(pendulum)
        coms, vel = _attached_points(pendulum, poses, np.arange(2), mc.coms)
        T = 0.5 * np.sum(mc.masses * np.sum(vel[0] ** 2, -1)) \
            + 0.5 * np.sum(mc.inertias * poses.omegas[0] ** 2)
        V = np.sum(mc.masses * 9.81 * coms[0][:, 1])
        return T + V

    q = np.array([0.3])
    qd = np.zeros(1)
    E0 = energy(q, qd)
    qb, qdb, t = q[None], qd[None], 0.0
    anchor = np.zeros((1, 0))
    active = np.zeros((1, 0), dtype=bool)
    lo = hi = E0
    for _ in range(500):  # 10 s
        qb, qdb, t, anchor, active, _, _ = step_batch(
            pendulum, qb, qdb, t, None, anchor, active, torques=np.zeros((1, 1)))
        E = energy(qb[0], qdb[0])
        lo, hi = min(lo, E), max(hi, E)
    assert (hi - lo) / abs(E0) < 0.01


def test_contact_normal_force_law():
    doc = _planar_doc()
    doc["contact"]["k_n"] = 5000.0
    m = load_model(doc)
    pos = np.array([[[0.0, -0.01]]])      # 1 cm penetration
    vel = np.zeros((1, 1, 2))             # at rest: no damping contribution
    forces, _, _ = _contact_forces(m, pos, vel, np.zeros((1, 1)), np.zeros((1, 1), dtype=bool))
    np.testing.assert_allclose(forces[0, 0, 1], 50.0, rtol=1e-12)


def test_step_updates_caches(robot):
    s = _settle(robot, 1.0)
    assert s.last_torques.shape == (7,)
    assert s.contact_cache.forces.shape == (5, 2)
    assert s.contact_cache.forces[:2, 1].sum() > 100  # feet carry the robot


# ---------------------------------------------------------------------------
# invariants

def test_mass_matrix_spd(robot):
    rng = np.random.default_rng(17)
    qs = np.tile(default_q(robot), (1000, 1))
    qs[:, 2] += rng.uniform(-1, 1, 1000)
    qs[:, 3:] = rng.uniform(robot.joint_limits[:, 0], robot.joint_limits[:, 1], (1000, 7))
    M = mass_matrix(robot, qs)
    np.testing.assert_allclose(M, M.transpose(0, 2, 1), atol=1e-12)
    eigs = np.linalg.eigvalsh(M)
    assert eigs.min() > 0.0


def test_linear_momentum_conserved():
    doc = _planar_doc()
    doc["gravity"] = 0.0
    m = load_model(doc)
    from forgebody.dynamics import fk, _mc, _attached_points

    def momentum(q, qd):
        poses = fk(m, q[None], qd[None])
        mc = _mc(m)
        _, vel = _attached_points(m, poses, np.arange(8), mc.coms)
        return (mc.masses[:, None] * vel[0]).sum(0)

    rng = np.random.default_rng(3)
    q = default_q(m)
    q[1] = 5.0  # airborne: contacts never engage
    qd = rng.uniform(-0.15, 0.15, 10)
    p0 = momentum(q, qd)
    qb, qdb, t = q[None], qd[None], 0.0
    anchor = np.zeros((1, 5))
    active = np.zeros((1, 5), dtype=bool)
    for _ in range(50):  # 1 s
        qb, qdb, t, anchor, active, _, _ = step_batch(
            m, qb, qdb, t, None, anchor, active, torques=np.zeros((1, 7)))
    drift = np.abs(momentum(qb[0], qdb[0]) - p0).max()
    assert drift / np.linalg.norm(p0) < 1e-6

    # refinement check: halving dt halves the accumulated drift (per-step
    # error is O(dt^2) over T/dt steps), so conservation is structural
    drifts = []
    for dt in (0.002, 0.001):
        qb, qdb, t = q[None], qd[None], 0.0
        n = int(round(0.2 / dt))
        qb_, qdb_ = qb, qdb
        for _ in range(n):
            qb_, qdb_, t, anchor, active, _, _ = step_batch(
                m, qb_, qdb_, t, None, anchor, active,
                torques=np.zeros((1, 7)), substeps=1, dt=dt)
        drifts.append(np.abs(momentum(qb_[0], qdb_[0]) - p0).max())
    assert drifts[1] < 0.65 * drifts[0] + 1e-15


def test_friction_cone(robot):
    s = _settle(robot, 2.0)
    mu = robot.contact.mu
    for _ in range(100):
        s = step(robot, s, robot.q_def, [ExternalWrench("gripper", np.array([40.0, -20.0]))])
        ft, fn = s.contact_cache.forces[:, 0], s.contact_cache.forces[:, 1]
        assert (fn >= 0).all()
        assert (np.abs(ft) <= mu * fn + 1e-9).all()


def test_step_deterministic(robot):
    s1 = _settle(robot, 0.5)
    s2 = _settle(robot, 0.5)
    assert np.array_equal(s1.q, s2.q)
    assert np.array_equal(s1.qd, s2.qd)
    assert np.array_equal(s1.contact_cache.forces, s2.contact_cache.forces)


def test_translation_invariance(robot):
    rng = np.random.default_rng(23)
    targets = robot.q_def + rng.uniform(-0.1, 0.1, (25, 7))

    def run(x0):
        q = default_q(robot)
        q[0] = x0
        s = SimState.initial(robot, q)
        for k in range(25):
            s = step(robot, s, targets[k])
        return s

    a = run(0.0)
    b = run(1.0)
    np.testing.assert_allclose(b.q[0] - a.q[0], 1.0, atol=1e-9)
    np.testing.assert_allclose(b.q[1:], a.q[1:], atol=1e-9)
    np.testing.assert_allclose(b.qd, a.qd, atol=1e-9)
