"""Reward stack and episode termination.

All terms are vectorized over a leading batch axis. Task terms use
exponential kernels so the reward stays positive; the safety/smoothness
penalties enter through a multiplicative exp(r_l) gate with r_l <= 0,
which keeps early termination unattractive.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .model import RobotModel
from .dynamics import CONTROL_DT


@dataclass
class RewardWeights:
    gripper_position: float = 5.0
    gripper_position_scale: float = 0.5
    gripper_force: float = 5.0
    gripper_force_scale: float = 20.0
    body_velocity: float = 1.0
    body_velocity_scale: float = 0.25
    swing: float = 0.9
    swing_scale: float = 4.0
    stance: float = 4.0
    stance_scale: float = 4.0
    collision: float = -5.0
    arm_limit: float = -3.0
    leg_limit: float = -1.0
    joint_velocity: float = -8e-4
    joint_acceleration: float = -3e-7
    action_rate: float = -0.05
    action_curvature: float = -0.02
    arm_torque_limit: float = -0.0015
    limit_margin: float = 0.9      # fraction of the limit that triggers the penalty
    torque_margin: float = 0.8

    @classmethod
    def from_dict(cls, d: dict) -> "RewardWeights":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown reward weight(s): {sorted(bad)}")
        return cls(**d)


@dataclass
class RewardBreakdown:
    r_x_g: np.ndarray
    r_f_g: np.ndarray
    r_v_b: np.ndarray
    swing: np.ndarray
    stance: np.ndarray
    r_l: np.ndarray
    total: np.ndarray


@dataclass(frozen=True)
class RegParams:
    """Per-model constants for the regularization terms."""

    limits: np.ndarray          # (nj, 2)
    arm_mask: np.ndarray        # (nj,) bool: joints on the gripper's chain
    leg_mask: np.ndarray
    torque_limits: np.ndarray   # (nj,)

    @classmethod
    def from_model(cls, model: RobotModel) -> "RegParams":
        grip = model.site("gripper")
        arm = model.ancestry[grip.link].copy()
        return cls(model.joint_limits.copy(), arm, ~arm, model.torque_limits.copy())


def task_rewards(gripper_pos, p_cmd_xy, c_f, measured_force, f_cmd,
                 base_vel_x, v_cmd, foot_forces, foot_vel_x, stance_cmd,
                 w: RewardWeights = RewardWeights()):
    """Tracking and gait terms.

    gripper_pos/p_cmd_xy: (..., 2) task frame; measured_force/f_cmd (..., 2);
    foot_forces (..., n_feet, 2); foot_vel_x/stance_cmd (..., n_feet).
    Mode gating: c_f == 1 zeroes the position term, c_f == 0 the force term.
    """
    c_f = np.asarray(c_f, dtype=np.float64)
    pos_err = np.linalg.norm(np.asarray(gripper_pos) - np.asarray(p_cmd_xy), axis=-1)
    r_x_g = w.gripper_position * (1.0 - c_f) * np.exp(-pos_err / w.gripper_position_scale)
    force_err = np.linalg.norm(np.asarray(measured_force) - np.asarray(f_cmd), axis=-1)
    r_f_g = w.gripper_force * c_f * np.exp(-force_err / w.gripper_force_scale)
    vel_err = np.abs(np.asarray(base_vel_x) - np.asarray(v_cmd))
    r_v_b = w.body_velocity * np.exp(-vel_err / w.body_velocity_scale)
    f2 = np.sum(np.asarray(foot_forces) ** 2, axis=-1)
    stance_cmd = np.asarray(stance_cmd, dtype=np.float64)
    swing = w.swing * np.sum((1.0 - stance_cmd) * np.exp(-f2 / w.swing_scale), axis=-1)
    stance = w.stance * np.sum(
        stance_cmd * np.exp(-np.asarray(foot_vel_x) ** 2 / w.stance_scale), axis=-1)
    return r_x_g, r_f_g, r_v_b, swing, stance


def regularization(q, qd, qdd, a_t, a_prev, a_prev2, torques, collision,
                   params: RegParams, w: RewardWeights = RewardWeights()):
    """Safety and smoothness penalty sum r_l <= 0.

    q/qd/qdd/torques are joint-space (..., nj); a_* are actions; collision is
    a 0/1 flag. Joint-limit and torque indicators are evaluated per joint and
    summed.
    """
    q = np.asarray(q, dtype=np.float64)
    lo, hi = params.limits[:, 0], params.limits[:, 1]
    beyond = (q > w.limit_margin * hi) | (q < w.limit_margin * lo)
    arm_beyond = np.sum(beyond & params.arm_mask, axis=-1)
    leg_beyond = np.sum(beyond & params.leg_mask, axis=-1)
    over_torque = np.abs(np.asarray(torques)) > w.torque_margin * params.torque_limits
    arm_over = np.sum(over_torque & params.arm_mask, axis=-1)

    r_l = w.collision * np.asarray(collision, dtype=np.float64)
    r_l = r_l + w.arm_limit * arm_beyond + w.leg_limit * leg_beyond
    r_l = r_l + w.joint_velocity * np.sum(np.asarray(qd) ** 2, axis=-1)
    r_l = r_l + w.joint_acceleration * np.sum(np.asarray(qdd) ** 2, axis=-1)
    da = np.linalg.norm(np.asarray(a_prev) - np.asarray(a_t), axis=-1)
    d2a = np.linalg.norm(np.asarray(a_prev2) - 2 * np.asarray(a_prev) + np.asarray(a_t), axis=-1)
    r_l = r_l + w.action_rate * da + w.action_curvature * d2a ** 2
    r_l = r_l + w.arm_torque_limit * arm_over
    return r_l


def total_reward(breakdown: RewardBreakdown) -> np.ndarray:
    """(r_v_b + swing + stance + r_x_g + r_f_g) * exp(r_l); never negative."""
    task = (breakdown.r_v_b + breakdown.swing + breakdown.stance
            + breakdown.r_x_g + breakdown.r_f_g)
    return task * np.exp(breakdown.r_l)


def compute_reward(gripper_pos, p_cmd_xy, c_f, measured_force, f_cmd,
                   base_vel_x, v_cmd, foot_forces, foot_vel_x, stance_cmd,
                   q, qd, qdd, a_t, a_prev, a_prev2, torques, collision,
                   params: RegParams, w: RewardWeights = RewardWeights()) -> RewardBreakdown:
    r_x_g, r_f_g, r_v_b, swing, stance = task_rewards(
        gripper_pos, p_cmd_xy, c_f, measured_force, f_cmd,
        base_vel_x, v_cmd, foot_forces, foot_vel_x, stance_cmd, w)
    r_l = regularization(q, qd, qdd, a_t, a_prev, a_prev2, torques, collision, params, w)
    b = RewardBreakdown(r_x_g, r_f_g, r_v_b, swing, stance, r_l, None)
    b.total = total_reward(b)
    return b


# ---------------------------------------------------------------------------
# termination

TERM_NONE = 0
TERM_GRIPPER_COLLISION = 1
TERM_BODY_HEIGHT_LOW = 2
TERM_NON_FINITE = 3

TERM_NAMES = {
    TERM_NONE: "none",
    TERM_GRIPPER_COLLISION: "gripper_collision",
    TERM_BODY_HEIGHT_LOW: "body_height_low",
    TERM_NON_FINITE: "non_finite_state",
}


@dataclass
class TerminationEvent:
    cause: str
    time: float


def gripper_body_collision(model: RobotModel, q: np.ndarray,
                           gripper_pos: np.ndarray) -> np.ndarray:
    """Gripper within the base body's proximity envelope (batched)."""
    base = model.links[0]
    half = base.length / 2.0
    radius = base.thickness / 2.0 + model.gripper_clearance
    if model.floating:
        cx, cz, pitch = q[:, 0], q[:, 1], q[:, 2]
    else:
        cx = np.full(q.shape[0], model.base_origin[0])
        cz = np.full(q.shape[0], model.base_origin[1])
        pitch = np.full(q.shape[0], model.base_pitch)
    # gripper in base frame
    dx = gripper_pos[:, 0] - cx
    dz = gripper_pos[:, 1] - cz
    lx = np.cos(pitch) * dx + np.sin(pitch) * dz
    lz = -np.sin(pitch) * dx + np.cos(pitch) * dz
    nearest = np.clip(lx, -half, half)
    return (lx - nearest) ** 2 + lz ** 2 < radius ** 2


def termination_codes(model: RobotModel, q: np.ndarray, qd: np.ndarray,
                      gripper_pos: np.ndarray) -> np.ndarray:
    """Per-environment failure codes (0 = alive)."""
    B = q.shape[0]
    codes = np.zeros(B, dtype=np.int64)
    bad = ~(np.isfinite(q).all(axis=1) & np.isfinite(qd).all(axis=1))
    codes[bad] = TERM_NON_FINITE
    ok = ~bad
    grip = (gripper_pos[:, 1] < 0.0) | gripper_body_collision(model, q, gripper_pos)
    codes[ok & grip & (codes == 0)] = TERM_GRIPPER_COLLISION
    if model.floating:
        low = q[:, 1] < model.termination_height
        codes[ok & low & (codes == 0)] = TERM_BODY_HEIGHT_LOW
    return codes


def check_termination(model: RobotModel, state) -> TerminationEvent | None:
    """Single-robot wrapper around :func:`termination_codes`."""
    from .dynamics import site_positions
    q = state.q[None]
    if np.isfinite(state.q).all():
        grip = site_positions(model, q, ["gripper"])
    else:
        grip = np.zeros((1, 1, 2))
    code = termination_codes(model, q, state.qd[None], grip[:, 0])[0]
    if code == TERM_NONE:
        return None
    return TerminationEvent(TERM_NAMES[int(code)], float(state.t))
