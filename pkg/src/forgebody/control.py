"""Deployment-time controllers layered on the trained policy.

Impedance mode turns force commands into a spring-damper law on the
estimated gripper position; compliant mode commands zero force plus an
optional payload-weight offset. The Jacobian-transpose controller is an
analytic oracle (no learning) used to validate the force-measurement
pipeline end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import CONTROL_DT, gravity_torques, point_jacobian, step_batch
from .model import RobotModel
from .tasking import FORCE_RANGE, FIELD_KD, FIELD_KP

JT_JOINT_DAMPING = 2.0        # N m s/rad; vanishes at steady state
JT_CONDITION_LIMIT = 1e4


class SingularPose(RuntimeError):
    """Arm too close to a singular stretch for Jacobian-transpose control."""


@dataclass
class ImpedanceGains:
    kp: float = 200.0             # N/m
    kd: float = 10.0              # N s/m
    x_des: np.ndarray = field(default_factory=lambda: np.zeros(2))  # task frame [m]

    def __post_init__(self):
        if self.kp < 0 or self.kd < 0:
            raise ValueError("impedance gains must be non-negative")
        self.x_des = np.asarray(self.x_des, dtype=np.float64)


class ImpedanceController:
    """F_cmd = -Kp (x_hat - x_des) - Kd v_hat, clamped to the trained force box.

    The gripper velocity is a finite difference of the estimated position,
    low-pass filtered (one pole). Estimates older than three control periods
    hold the previous command and raise the ``stale`` flag.
    """

    def __init__(self, gains: ImpedanceGains, control_dt: float = CONTROL_DT,
                 cutoff_hz: float = 5.0):
        self.gains = gains
        self.dt = control_dt
        self.alpha = float(np.exp(-2.0 * np.pi * cutoff_hz * control_dt))
        self.v_hat = np.zeros(2)
        self.last_x: np.ndarray | None = None
        self.last_t: float | None = None
        self.last_cmd = np.zeros(2)
        self.stale = False
        self.clamped = False

    def reset(self, x_des: np.ndarray | None = None):
        if x_des is not None:
            self.gains.x_des = np.asarray(x_des, dtype=np.float64)
        self.v_hat = np.zeros(2)
        self.last_x = None
        self.last_t = None
        self.last_cmd = np.zeros(2)
        self.stale = False

    def command(self, x_hat: np.ndarray, t: float) -> np.ndarray:
        x_hat = np.asarray(x_hat, dtype=np.float64)
        if self.last_t is not None and (t - self.last_t) > 3.0 * self.dt + 1e-9:
            # estimate stream broke: hold the last command and re-sync so the
            # next fresh estimate resumes without a bogus velocity spike
            self.stale = True
            self.last_x = x_hat.copy()
            self.last_t = t
            self.v_hat = np.zeros(2)
            return self.last_cmd.copy()
        self.stale = False
        if self.last_x is not None:
            dt = max(t - self.last_t, 1e-9)
            v_raw = (x_hat - self.last_x) / dt
            self.v_hat = self.alpha * self.v_hat + (1.0 - self.alpha) * v_raw
        self.last_x = x_hat.copy()
        self.last_t = t
        raw = -self.gains.kp * (x_hat - self.gains.x_des) - self.gains.kd * self.v_hat
        cmd = np.clip(raw, -FORCE_RANGE, FORCE_RANGE)
        self.clamped = bool((cmd != raw).any())
        self.last_cmd = cmd
        return cmd


def impedance_command(x_hat: np.ndarray, v_hat: np.ndarray,
                      gains: ImpedanceGains) -> np.ndarray:
    """Stateless impedance law for given position/velocity estimates."""
    raw = -gains.kp * (np.asarray(x_hat) - gains.x_des) - gains.kd * np.asarray(v_hat)
    return np.clip(raw, -FORCE_RANGE, FORCE_RANGE)


def compliant_command(payload_weight_offset: float = 0.0) -> tuple[np.ndarray, bool]:
    """Zero force everywhere except an upward term matching the payload weight.

    Returns (F_cmd, clamped_flag); offsets beyond the trained range clamp.
    """
    offset = float(payload_weight_offset)
    clamped = offset > FORCE_RANGE
    return np.array([0.0, min(offset, FORCE_RANGE)]), clamped


def payload_offset(mass_kg: float, gravity: float = 9.81) -> float:
    return mass_kg * gravity


# ---------------------------------------------------------------------------
# Jacobian-transpose oracle (fixed-base arm)

def jt_force_controller(model: RobotModel, q: np.ndarray, qd: np.ndarray,
                        F_cmd: np.ndarray) -> np.ndarray:
    """tau = J^T F_cmd + gravity compensation (+ viscous damping, zero at rest).

    Fixed-base models only; refuses near-singular stretches. In steady state
    against an anchored field the measured applied force equals the command.
    """
    if model.floating:
        raise ValueError("the Jacobian-transpose oracle requires a fixed-base model")
    J = point_jacobian(model, q, "gripper")
    sv = np.linalg.svd(J, compute_uv=False)
    cond = sv[0] / max(sv[-1], 1e-300)
    if cond > JT_CONDITION_LIMIT:
        raise SingularPose(f"gripper Jacobian condition number {cond:.3g} > "
                           f"{JT_CONDITION_LIMIT:.0e}; move off the singular stretch")
    tau = J.T @ np.asarray(F_cmd, dtype=np.float64) + gravity_torques(model, q)
    return tau - JT_JOINT_DAMPING * np.asarray(qd, dtype=np.float64)


def run_jt_trial(model: RobotModel, q0: np.ndarray, F_cmd: np.ndarray,
                 seconds: float = 4.0, field_kp: float = FIELD_KP,
                 field_kd: float = FIELD_KD, settle_window: float = 0.5):
    """Drive the fixed-base arm against a world-anchored field with jt torques.

    The field anchors at the gripper's start position. Returns
    ``(measured_force, trace)`` where measured is the mean applied force
    (-F_e) over the last ``settle_window`` seconds.
    """
    from .dynamics import site_positions

    q = np.asarray(q0, dtype=np.float64)[None].copy()
    qd = np.zeros_like(q)
    anchor_pos = site_positions(model, q, ["gripper"])[0, 0].copy()
    S = len(model.contact.sites)
    canchor = np.zeros((1, S))
    cactive = np.zeros((1, S), dtype=bool)
    F_cmd = np.asarray(F_cmd, dtype=np.float64)
    steps = int(round(seconds / CONTROL_DT))
    window = max(1, int(round(settle_window / CONTROL_DT)))
    trace = np.zeros((steps, 2))

    from .dynamics import _attached_points, fk

    grip = model.site("gripper")

    def field_fn(qb, qdb, t, poses):
        gpos, gvel = _attached_points(model, poses, np.array([grip.link]),
                                      grip.offset.reshape(1, 2))
        F = field_kp * (anchor_pos - gpos[:, 0]) - field_kd * gvel[:, 0]
        return [("gripper", F.reshape(1, 1, 2))]

    def torque_fn(qb, qdb):
        return jt_force_controller(model, qb[0], qdb[0], F_cmd)[None]

    t = 0.0
    for k in range(steps):
        q, qd, t, canchor, cactive, _, _ = step_batch(
            model, q, qd, t, None, canchor, cactive, torque_fn=torque_fn,
            external_fn=field_fn)
        poses = fk(model, q, qd)
        gpos, gvel = _attached_points(model, poses, np.array([grip.link]),
                                      grip.offset.reshape(1, 2))
        F_e = field_kp * (anchor_pos - gpos[0, 0]) - field_kd * gvel[0, 0]
        trace[k] = -F_e
    measured = trace[-window:].mean(axis=0)
    return measured, trace
