"""Command generation, the virtual force field, and the gait clock.

Commands are (force, end-effector position, base velocity, mode flag)
tuples. Force and position targets follow piecewise-linear schedules in
time; the mode flag gates which of the two is live. The force field is a
spring-damper anchored at a setpoint that the gripper pushes against, which
is both the training-time stand-in for contact and the measuring instrument
for applied force.

Everything here is either a pure function or a small per-environment record;
the vectorized training environment calls the same closed-form profile
functions on arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

# command ranges (per-axis box for force, polar box for position)
FORCE_RANGE = 70.0                      # N, each axis in [-70, 70]
POS_R_RANGE = (0.3, 0.9)                # m
POS_TH_RANGE = (-0.4 * math.pi, 0.4 * math.pi)   # rad
VEL_RANGE = (-1.0, 1.0)                 # m/s
STAND_THRESHOLD = 0.1                   # |v_cmd| below this freezes the gait

FIELD_KP = 700.0                        # N/m
FIELD_KD = 6.0                          # N s/m

ZERO_FORCE_PROB = 0.2
RAMP_RANGE = (2.0, 4.0)                 # s, force ramp duration
HOLD_TIME = 1.5                         # s, force hold duration
POS_INTERP_TIME = 4.0                   # s, position target interpolation

EPISODE_SECONDS = 20.0
MODE_SWITCHES_PER_EPISODE = 2


@dataclass
class CommandVector:
    F_cmd: np.ndarray               # world frame [N], zero unless C_f == 1
    p_cmd: np.ndarray               # (r, theta) task frame, zero unless C_f == 0
    v_cmd: float                    # base forward velocity [m/s]
    C_f: int                        # 1 = force tracking, 0 = position tracking

    @classmethod
    def zero(cls) -> "CommandVector":
        return cls(np.zeros(2), np.zeros(2), 0.0, 0)

    def gated(self) -> "CommandVector":
        """Apply mode gating: the off-mode command components are zero."""
        if self.C_f:
            return replace(self, p_cmd=np.zeros(2), F_cmd=self.F_cmd.copy())
        return replace(self, F_cmd=np.zeros(2), p_cmd=self.p_cmd.copy())

    def clamped(self) -> "CommandVector":
        return CommandVector(
            np.clip(self.F_cmd, -FORCE_RANGE, FORCE_RANGE),
            np.array([np.clip(self.p_cmd[0], *POS_R_RANGE),
                      np.clip(self.p_cmd[1], *POS_TH_RANGE)]),
            float(np.clip(self.v_cmd, *VEL_RANGE)),
            int(self.C_f),
        ).gated()


def polar_to_xy(p_cmd: np.ndarray) -> np.ndarray:
    """(..., 2) polar (r, theta) -> cartesian task-frame offsets."""
    r, th = p_cmd[..., 0], p_cmd[..., 1]
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)


# ---------------------------------------------------------------------------
# force field

@dataclass
class ForceField:
    x_s: np.ndarray                 # setpoint, task frame (moves with the robot)
    kp: float = FIELD_KP
    kd: float = FIELD_KD
    active: bool = True

    def __post_init__(self):
        if self.kp < 0 or self.kd < 0:
            raise ValueError("force field gains must be non-negative")


def field_force(field: ForceField, gripper_pos: np.ndarray, gripper_vel: np.ndarray,
                setpoint_vel: np.ndarray | float = 0.0) -> np.ndarray:
    """Spring-damper force on the gripper, kp (x_s - x_g) + kd (xd_s - xd_g).

    Positions/velocities must share a frame with the setpoint (the spring
    and damping terms only involve differences, so any non-rotating frame
    works). Inactive fields exert nothing. The measured applied force used
    everywhere else is the reaction -F_e.
    """
    if not field.active:
        return np.zeros_like(np.asarray(gripper_pos, dtype=np.float64))
    gripper_pos = np.asarray(gripper_pos, dtype=np.float64)
    gripper_vel = np.asarray(gripper_vel, dtype=np.float64)
    sv = np.asarray(setpoint_vel, dtype=np.float64)
    return field.kp * (field.x_s - gripper_pos) + field.kd * (sv - gripper_vel)


def on_mode_switch_to_force(gripper_pos_body: np.ndarray, kp: float = FIELD_KP,
                            kd: float = FIELD_KD) -> ForceField:
    """Anchor a fresh field at the gripper's current (body/task frame) position."""
    return ForceField(np.array(gripper_pos_body, dtype=np.float64).copy(), kp, kd, True)


# ---------------------------------------------------------------------------
# schedules

@dataclass
class CommandSchedule:
    """Piecewise-linear keyframe schedule; evaluation clamps outside the range."""

    times: np.ndarray               # strictly increasing [s]
    values: np.ndarray              # (K, D)

    def __post_init__(self):
        if not (np.diff(self.times) > 0).all():
            raise ValueError("keyframe times must be strictly increasing")

    def value(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.times, self.values[:, d])
                         for d in range(self.values.shape[1])])

    @property
    def end_time(self) -> float:
        return float(self.times[-1])


def sample_force_schedule(rng: np.random.Generator, t_now: float) -> CommandSchedule:
    """Ramp 0 -> target over t_F ~ U[2,4] s, hold 1.5 s, ramp back over t_F.

    With probability 0.2 the target is exactly zero so fully compliant
    behavior keeps being practiced.
    """
    t_ramp = rng.uniform(*RAMP_RANGE)
    target = rng.uniform(-FORCE_RANGE, FORCE_RANGE, 2)
    if rng.random() < ZERO_FORCE_PROB:
        target = np.zeros(2)
    times = t_now + np.array([0.0, t_ramp, t_ramp + HOLD_TIME, 2 * t_ramp + HOLD_TIME])
    values = np.stack([np.zeros(2), target, target, np.zeros(2)])
    return CommandSchedule(times, values)


def sample_position_schedule(rng: np.random.Generator, current_cmd: np.ndarray,
                             t_now: float) -> CommandSchedule:
    """Linear interpolation from the previous (r, theta) command to a fresh draw."""
    target = np.array([rng.uniform(*POS_R_RANGE), rng.uniform(*POS_TH_RANGE)])
    times = t_now + np.array([0.0, POS_INTERP_TIME])
    values = np.stack([np.asarray(current_cmd, dtype=np.float64), target])
    return CommandSchedule(times, values)


def force_profile(t, t0, t_ramp, hold: float = HOLD_TIME):
    """Closed-form ramp/hold/ramp scale in [0, 1]; vectorized over arrays."""
    up = (t - t0) / t_ramp
    down = (t0 + 2 * t_ramp + hold - t) / t_ramp
    return np.clip(np.minimum(up, down), 0.0, 1.0)


def interp_profile(t, t0, duration=POS_INTERP_TIME):
    """Closed-form 0 -> 1 linear interpolation scale; vectorized."""
    return np.clip((t - t0) / duration, 0.0, 1.0)


# ---------------------------------------------------------------------------
# mode timeline

@dataclass
class ModeTimeline:
    """C_f over one episode: two uniformly drawn switch times, value redrawn per segment."""

    switch_times: np.ndarray        # (2,) sorted
    values: np.ndarray              # (3,) in {0, 1}

    def c_f(self, t: float) -> int:
        return int(self.values[int(np.searchsorted(self.switch_times, t, side="right"))])


def resample_mode(rng: np.random.Generator,
                  episode_length: float = EPISODE_SECONDS) -> ModeTimeline:
    times = np.sort(rng.uniform(0.0, episode_length, MODE_SWITCHES_PER_EPISODE))
    values = rng.integers(0, 2, MODE_SWITCHES_PER_EPISODE + 1)
    return ModeTimeline(times, values)


# ---------------------------------------------------------------------------
# gait clock

@dataclass
class GaitClock:
    frequency: float = 1.5          # Hz
    duty: float = 0.5
    offsets: tuple[float, ...] = (0.0, 0.5)
    phase: float = 0.0
    standing: bool = True


def gait_step(phase, v_cmd, dt: float, frequency: float = 1.5, duty: float = 0.5,
              offsets=(0.0, 0.5)):
    """Advance the gait phase and evaluate per-foot clocks; vectorized.

    Below the standing threshold the phase freezes and every foot is
    commanded to stance so the robot does not step in place. Returns
    ``(new_phase, theta_feet, stance)`` with theta/stance shaped
    ``(..., n_feet)``.
    """
    phase = np.asarray(phase, dtype=np.float64)
    v_cmd = np.asarray(v_cmd, dtype=np.float64)
    walking = np.abs(v_cmd) >= STAND_THRESHOLD
    new_phase = np.where(walking, (phase + frequency * dt) % 1.0, phase)
    off = np.asarray(offsets, dtype=np.float64)
    leg_phase = (new_phase[..., None] + off) % 1.0
    theta = np.sin(2 * math.pi * leg_phase)
    stance = np.where(walking[..., None], (leg_phase < duty).astype(np.float64), 1.0)
    return new_phase, theta, stance


def gait_clock_step(clock: GaitClock, v_cmd: float, dt: float):
    """Single-clock wrapper; mutates the clock and returns (theta_feet, stance)."""
    new_phase, theta, stance = gait_step(
        np.array(clock.phase), np.array(v_cmd), dt,
        clock.frequency, clock.duty, clock.offsets)
    clock.phase = float(new_phase)
    clock.standing = bool(abs(v_cmd) < STAND_THRESHOLD)
    return theta, stance
