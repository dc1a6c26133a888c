"""Vectorized training environment.

Runs B independent planar robots through the force/position/locomotion task:
mode timelines with two random switches per episode, ramp-hold-ramp force
schedules against a body-frame spring-damper field, linearly interpolated
position targets, a trot-style gait clock, the full reward stack, failure
terminations and timeout resets, and per-step (observation, command) history
maintenance.

Positions and commands live in the task frame: origin at
(base_x + frame_x_offset, frame_height), world-aligned axes, so commands are
invariant to body height and pitch and move with the robot along x.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .dynamics import CONTROL_DT, PHYSICS_DT, _attached_points, _mc, step_batch
from .model import RobotModel
from .policy import build_observation, entry_dim, obs_dim, HISTORY, PRIV_DIM
from .rewards import (RegParams, RewardWeights, compute_reward, gripper_body_collision,
                      termination_codes, TERM_NONE)
from .tasking import (EPISODE_SECONDS, FIELD_KD, FIELD_KP, FORCE_RANGE, HOLD_TIME,
                      POS_INTERP_TIME, POS_R_RANGE, POS_TH_RANGE, RAMP_RANGE,
                      STAND_THRESHOLD, ZERO_FORCE_PROB, force_profile, gait_step,
                      interp_profile, polar_to_xy)


@dataclass
class TaskConfig:
    frame_x_offset: float = 0.2
    frame_height: float = 0.60
    episode_seconds: float = EPISODE_SECONDS
    mode: str = "both"                  # "both" | "position" | "force"
    p_stand: float = 0.5                # chance a sampled v_cmd is zero
    f_range: float = FORCE_RANGE        # per-axis force command box [N]
    r_range: tuple[float, float] = POS_R_RANGE
    th_range: tuple[float, float] = POS_TH_RANGE
    gait_frequency: float = 1.5
    gait_duty: float = 0.5
    gait_offsets: tuple[float, ...] = (0.0, 0.5)
    field_kp: float = FIELD_KP
    field_kd: float = FIELD_KD
    position_hold: float = 1.0          # settle time before resampling a position
    reset_joint_noise: float = 0.1
    reset_height_noise: float = 0.03
    friction_range: tuple[float, float] | None = None   # per-episode mu, off by default
    payload_range: tuple[float, float] | None = None    # per-episode gripper payload [kg]
    stagger_starts: bool = True     # randomize initial episode phase per env
    rewards: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown task config key(s): {sorted(bad)}")
        d = dict(d)
        for k in ("gait_offsets", "friction_range", "payload_range",
                  "r_range", "th_range"):
            if k in d and d[k] is not None:
                d[k] = tuple(d[k])
        return cls(**d)


class VecEnv:
    """B parallel robots sharing one model; single-context, deterministic."""

    def __init__(self, model: RobotModel, cfg: TaskConfig = TaskConfig(),
                 n_envs: int = 1, seed: int = 0):
        self.model = model
        self.cfg = cfg
        self.B = n_envs
        self.rng = np.random.default_rng(seed)
        self.weights = RewardWeights.from_dict(cfg.rewards) if cfg.rewards else RewardWeights()
        self.reg = RegParams.from_model(model)
        self.nj = model.n_joints
        self.dof = model.dof
        self.n_feet = len(model.foot_sites)
        if self.n_feet and len(cfg.gait_offsets) != self.n_feet:
            raise ValueError(f"gait_offsets must have one entry per foot "
                             f"({self.n_feet}), got {len(cfg.gait_offsets)}")
        self.entry = entry_dim(model)
        self.max_steps = int(round(cfg.episode_seconds / CONTROL_DT))
        mc = _mc(model)
        self.foot_slots = mc.foot_slots
        self.csites = list(model.contact.sites)
        self.grip_slot = self.csites.index("gripper") if "gripper" in self.csites else -1
        self.base_x0 = 0.0 if model.floating else model.base_origin[0]

        # settled default pose: drop + PD-hold until quiescent, reused for resets
        self.q_settled = self._settle_default()

        B = n_envs
        S = len(self.csites)
        self.q = np.zeros((B, self.dof))
        self.qd = np.zeros((B, self.dof))
        self.anchor = np.zeros((B, S))
        self.active = np.zeros((B, S), dtype=bool)
        self.t = np.zeros(B)
        self.steps = np.zeros(B, dtype=np.int64)
        self.a_prev = np.zeros((B, self.nj))
        self.a_prev2 = np.zeros((B, self.nj))
        self.qd_prev = np.zeros((B, self.nj))
        self.phase = np.zeros(B)
        self.theta_feet = np.zeros((B, self.n_feet))
        self.stance = np.ones((B, self.n_feet))
        self.history = np.zeros((B, HISTORY, self.entry))
        # command machinery
        self.switch_times = np.zeros((B, 2))
        self.mode_vals = np.zeros((B, 3), dtype=np.int64)
        self.v_vals = np.zeros((B, 3))
        self.seg = np.zeros(B, dtype=np.int64)
        self.f_t0 = np.zeros(B)
        self.f_ramp = np.ones(B)
        self.f_target = np.zeros((B, 2))
        self.p_t0 = np.zeros(B)
        self.p_from = np.zeros((B, 2))
        self.p_to = np.zeros((B, 2))
        self.field_anchor = np.zeros((B, 2))       # task frame unless world_field
        self.field_active = np.zeros(B, dtype=bool)
        self.world_field = False                    # harness override: world-frame anchors
        self.field_kp = np.full(B, cfg.field_kp)
        self.anchor_vel = np.zeros((B, 2))          # harness-driven anchor velocity
        self.mu = np.full(B, model.contact.mu)
        self.payload = np.zeros(B)
        # live command values (exposed to the policy and rewards)
        self.c_f = np.zeros(B, dtype=np.int64)
        self.F_cmd = np.zeros((B, 2))
        self.p_cmd = np.zeros((B, 2))               # (r, theta)
        self.v_cmd = np.zeros(B)
        # measurements from the last step
        self.F_e = np.zeros((B, 2))                 # field force on the gripper
        self.grip_task = np.zeros((B, 2))
        self.grip_vel = np.zeros((B, 2))
        self.base_vel_x = np.zeros(B)
        self.collision = np.zeros(B)
        self.term_codes = np.zeros(B, dtype=np.int64)
        self.extra_wrench_fn: Callable | None = None   # harness pushes
        self.manual = False        # harness sets commands directly
        self.auto_reset = True     # done envs restart immediately

        self.reset_all()
        if cfg.stagger_starts and n_envs > 1:
            # desynchronize episode phases so rollouts sample the whole task
            # cycle instead of everyone's warm-up at once
            self.steps[:] = self.rng.integers(0, self.max_steps, self.B)
            self.t[:] = self.steps * CONTROL_DT
            self._evaluate_commands(np.arange(self.B))
            self.history[:] = 0.0
            self._push_history(np.arange(self.B))

    # -- initialization ----------------------------------------------------

    def _settle_default(self) -> np.ndarray:
        from .dynamics import default_q
        q = default_q(self.model)[None].copy()
        qd = np.zeros_like(q)
        S = len(self.csites)
        anchor = np.zeros((1, S))
        active = np.zeros((1, S), dtype=bool)
        t = 0.0
        targets = self.model.q_def[None]
        for _ in range(150):
            q, qd, t, anchor, active, _, _ = step_batch(
                self.model, q, qd, t, targets, anchor, active)
        return q[0]

    def frame_origin(self, q: np.ndarray) -> np.ndarray:
        x = q[:, 0] if self.model.floating else np.full(q.shape[0], self.base_x0)
        return np.stack([x + self.cfg.frame_x_offset,
                         np.full(q.shape[0], self.cfg.frame_height)], axis=1)

    def reset_all(self):
        self._reset(np.ones(self.B, dtype=bool))

    def _sample_v(self, k: int) -> np.ndarray:
        v = self.rng.uniform(-1.0, 1.0, k)
        stand = self.rng.random(k) < self.cfg.p_stand
        return np.where(stand, 0.0, v)

    def _sample_force_schedule(self, idx: np.ndarray, t_now: np.ndarray):
        k = len(idx)
        self.f_t0[idx] = t_now
        self.f_ramp[idx] = self.rng.uniform(*RAMP_RANGE, k)
        target = self.rng.uniform(-self.cfg.f_range, self.cfg.f_range, (k, 2))
        zero = self.rng.random(k) < ZERO_FORCE_PROB
        target[zero] = 0.0
        self.f_target[idx] = target

    def _sample_position_schedule(self, idx: np.ndarray, t_now: np.ndarray,
                                  from_cmd: np.ndarray):
        k = len(idx)
        self.p_t0[idx] = t_now
        self.p_from[idx] = from_cmd
        self.p_to[idx] = np.stack([self.rng.uniform(*self.cfg.r_range, k),
                                   self.rng.uniform(*self.cfg.th_range, k)], axis=1)

    def _reset(self, mask: np.ndarray):
        idx = np.flatnonzero(mask)
        if len(idx) == 0:
            return
        k = len(idx)
        q0 = np.tile(self.q_settled, (k, 1))
        nb = self.model.nb
        q0[:, nb:] += self.rng.uniform(-self.cfg.reset_joint_noise,
                                       self.cfg.reset_joint_noise, (k, self.nj))
        q0[:, nb:] = np.clip(q0[:, nb:], self.model.joint_limits[:, 0],
                             self.model.joint_limits[:, 1])
        if self.model.floating:
            q0[:, 1] += self.rng.uniform(-self.cfg.reset_height_noise,
                                         self.cfg.reset_height_noise, k)
        self.q[idx] = q0
        self.qd[idx] = 0.0
        self.anchor[idx] = 0.0
        self.active[idx] = False
        self.t[idx] = 0.0
        self.steps[idx] = 0
        self.a_prev[idx] = 0.0
        self.a_prev2[idx] = 0.0
        self.qd_prev[idx] = 0.0
        self.phase[idx] = 0.0
        self.history[idx] = 0.0
        # episode command plan
        self.switch_times[idx] = np.sort(
            self.rng.uniform(0.0, self.cfg.episode_seconds, (k, 2)), axis=1)
        if self.cfg.mode == "position":
            self.mode_vals[idx] = 0
        elif self.cfg.mode == "force":
            self.mode_vals[idx] = 1
        else:
            self.mode_vals[idx] = self.rng.integers(0, 2, (k, 3))
        self.v_vals[idx] = self._sample_v(3 * k).reshape(k, 3)
        if self.n_feet == 0:
            self.v_vals[idx] = 0.0
        self.seg[idx] = 0
        if self.cfg.friction_range is not None:
            self.mu[idx] = self.rng.uniform(*self.cfg.friction_range, k)
        if self.cfg.payload_range is not None:
            self.payload[idx] = self.rng.uniform(*self.cfg.payload_range, k)
        self.field_active[idx] = False
        self.F_e[idx] = 0.0
        self.term_codes[idx] = TERM_NONE

        self._refresh_kinematics(idx)
        # seed the first segment's task for each fresh episode
        force_now = self.mode_vals[idx, 0] == 1
        fidx = idx[force_now]
        if len(fidx):
            self._anchor_field(fidx)
            self._sample_force_schedule(fidx, self.t[fidx])
        pidx = idx[~force_now]
        if len(pidx):
            # start interpolating from the pose the gripper actually holds
            gp = self.grip_task[pidx]
            r = np.linalg.norm(gp, axis=1)
            th = np.arctan2(gp[:, 1], gp[:, 0])
            cur = np.stack([np.clip(r, *self.cfg.r_range),
                            np.clip(th, *self.cfg.th_range)], axis=1)
            self._sample_position_schedule(pidx, self.t[pidx], cur)
        self._evaluate_commands(idx)
        if self.n_feet:
            _, th0, st0 = gait_step(self.phase[idx], self.v_cmd[idx], 0.0,
                                    self.cfg.gait_frequency, self.cfg.gait_duty,
                                    self.cfg.gait_offsets)
            self.theta_feet[idx] = th0
            self.stance[idx] = st0
        self._push_history(idx)

    def _anchor_field(self, idx: np.ndarray):
        self.field_active[idx] = True
        if self.world_field:
            origin = self.frame_origin(self.q[idx])
            self.field_anchor[idx] = origin + self.grip_task[idx]
        else:
            self.field_anchor[idx] = self.grip_task[idx]

    # -- command evaluation -------------------------------------------------

    def _evaluate_commands(self, idx: np.ndarray | None = None):
        """Refresh (C_f, F_cmd, p_cmd, v_cmd) from the timelines at current t."""
        sel = np.arange(self.B) if idx is None else idx
        t = self.t[sel]
        seg = (t[:, None] > self.switch_times[sel]).sum(axis=1)
        old_seg = self.seg[sel]
        changed = seg != old_seg
        self.seg[sel] = seg
        c_f = self.mode_vals[sel, seg]
        self.c_f[sel] = c_f
        self.v_cmd[sel] = self.v_vals[sel, seg]

        # mode transitions: anchor the field / restart position interpolation.
        # The active field is the ground truth for "currently in force mode",
        # which keeps redrawn-but-equal mode values and multi-segment time
        # jumps consistent.
        ch = sel[changed]
        if len(ch):
            now_force = self.mode_vals[ch, self.seg[ch]] == 1
            enter_force = ch[now_force & ~self.field_active[ch]]
            if len(enter_force):
                self._anchor_field(enter_force)
                self._sample_force_schedule(enter_force, self.t[enter_force])
            enter_pos = ch[~now_force & self.field_active[ch]]
            if len(enter_pos):
                self.field_active[enter_pos] = False
                # the position command was gated to zero during force mode:
                # restart the interpolation from the pose the gripper holds now
                gp = self.grip_task[enter_pos]
                cur = np.stack([
                    np.clip(np.linalg.norm(gp, axis=1), *self.cfg.r_range),
                    np.clip(np.arctan2(gp[:, 1], gp[:, 0]), *self.cfg.th_range)], axis=1)
                self._sample_position_schedule(enter_pos, self.t[enter_pos], cur)

        # chain schedules when they run out
        force_mode = self.c_f[sel] == 1
        fsel = sel[force_mode]
        if len(fsel):
            done = self.t[fsel] > self.f_t0[fsel] + 2 * self.f_ramp[fsel] + HOLD_TIME
            redo = fsel[done]
            if len(redo):
                self._sample_force_schedule(redo, self.t[redo])
            scale = force_profile(self.t[fsel], self.f_t0[fsel], self.f_ramp[fsel])
            self.F_cmd[fsel] = self.f_target[fsel] * scale[:, None]
            self.p_cmd[fsel] = 0.0
        psel = sel[~force_mode]
        if len(psel):
            expired = self.t[psel] > self.p_t0[psel] + POS_INTERP_TIME + self.cfg.position_hold
            redo = psel[expired]
            if len(redo):
                self._sample_position_schedule(redo, self.t[redo], self.p_to[redo])
            s = interp_profile(self.t[psel], self.p_t0[psel])
            self.p_cmd[psel] = self.p_from[psel] + s[:, None] * (self.p_to[psel] - self.p_from[psel])
            self.F_cmd[psel] = 0.0

    # -- kinematic refresh ---------------------------------------------------

    def _refresh_kinematics(self, idx: np.ndarray | None = None):
        """Update task-frame gripper pose/velocity caches (full batch only)."""
        from .dynamics import fk
        poses = fk(self.model, self.q, self.qd)
        grip = self.model.site("gripper")
        gpos, gvel = _attached_points(self.model, poses,
                                      np.array([grip.link]), grip.offset.reshape(1, 2))
        origin = self.frame_origin(self.q)
        self.grip_world = gpos[:, 0]
        self.grip_task = gpos[:, 0] - origin
        self.grip_vel = gvel[:, 0]
        self.base_vel_x = self.qd[:, 0] if self.model.floating else np.zeros(self.B)
        if self.n_feet:
            names = list(self.model.foot_sites)
            sites = [self.model.site(n) for n in names]
            fpos, fvel = _attached_points(
                self.model, poses, np.array([s.link for s in sites]),
                np.stack([s.offset for s in sites]))
            self.foot_vel_x = fvel[..., 0]
        else:
            self.foot_vel_x = np.zeros((self.B, 0))

    def _field_force_at(self, gpos_world, gvel_world, q, qd):
        """Field force for current world gripper state; honors anchor frame."""
        if self.world_field:
            anchor_world = self.field_anchor
            anchor_vel = self.anchor_vel
        else:
            origin = self.frame_origin(q)
            anchor_world = origin + self.field_anchor
            base_vx = qd[:, 0] if self.model.floating else np.zeros(self.B)
            anchor_vel = np.stack([base_vx, np.zeros(self.B)], axis=1)
        F = (self.field_kp[:, None] * (anchor_world - gpos_world)
             + self.cfg.field_kd * (anchor_vel - gvel_world))
        return F * self.field_active[:, None]

    # -- stepping -------------------------------------------------------------

    def _external_fn(self, q, qd, t, poses):
        grip = self.model.site("gripper")
        gpos, gvel = _attached_points(self.model, poses,
                                      np.array([grip.link]), grip.offset.reshape(1, 2))
        F = self._field_force_at(gpos[:, 0], gvel[:, 0], q, qd)
        if self.payload.any():
            F = F + np.stack([np.zeros(self.B), -self.payload * self.model.gravity], axis=1)
        out = [("gripper", F.reshape(self.B, 1, 2))]
        if self.extra_wrench_fn is not None:
            out.extend(self.extra_wrench_fn(q, qd, t, poses))
        return out

    def step(self, actions: np.ndarray):
        """Advance one control period under decoded joint targets.

        ``actions`` are raw policy outputs (B, nj); decoding (scale + default
        pose + limit clamp) happens here. Returns
        ``(hist_flat, reward, done, timeout, info)``.
        """
        actions = np.asarray(actions, dtype=np.float64)
        targets = np.clip(0.25 * actions + self.model.q_def,
                          self.model.joint_limits[:, 0], self.model.joint_limits[:, 1])
        qd_before = self.qd[:, self.model.nb:].copy()

        self.q, self.qd, _, self.anchor, self.active, cforces, tau = step_batch(
            self.model, self.q, self.qd, 0.0, targets, self.anchor, self.active,
            external_fn=self._external_fn, contact_mu=self.mu, check_finite=False)
        self.t += CONTROL_DT
        self.steps += 1

        self._refresh_kinematics()
        self.F_e = self._field_force_at(self.grip_world, self.grip_vel, self.q, self.qd)
        measured = -self.F_e

        # gait clock
        if self.n_feet:
            self.phase, self.theta_feet, self.stance = gait_step(
                self.phase, self.v_cmd, CONTROL_DT, self.cfg.gait_frequency,
                self.cfg.gait_duty, self.cfg.gait_offsets)

        # collision flag: contact on any non-foot site, or gripper-body proximity
        nonfoot = np.ones(len(self.csites), dtype=bool)
        nonfoot[self.foot_slots] = False
        contact_any = (cforces[:, nonfoot, 1] > 0).any(axis=1) if nonfoot.any() else \
            np.zeros(self.B, dtype=bool)
        prox = gripper_body_collision(self.model, self.q, self.grip_world)
        self.collision = (contact_any | prox).astype(np.float64)

        qd_j = self.qd[:, self.model.nb:]
        qdd = (qd_j - qd_before) / CONTROL_DT
        foot_forces = cforces[:, self.foot_slots] if self.n_feet else np.zeros((self.B, 0, 2))

        breakdown = compute_reward(
            self.grip_task, polar_to_xy(self.p_cmd), self.c_f, measured, self.F_cmd,
            self.base_vel_x, self.v_cmd, foot_forces, self.foot_vel_x, self.stance,
            self.q[:, self.model.nb:], qd_j, qdd, actions, self.a_prev, self.a_prev2,
            tau, self.collision, self.reg, self.weights)
        reward = breakdown.total

        self.term_codes = termination_codes(self.model, self.q, self.qd, self.grip_world)
        failed = self.term_codes != TERM_NONE
        timeout = (self.steps >= self.max_steps) & ~failed
        done = failed | timeout

        self.a_prev2 = self.a_prev.copy()
        self.a_prev = actions.copy()
        self.qd_prev = qd_j.copy()

        # advance commands and write the next observation for every finite env,
        # including timed-out ones: their pre-reset state is what a value
        # bootstrap needs
        finite = np.flatnonzero(np.isfinite(self.q).all(axis=1)
                                & np.isfinite(self.qd).all(axis=1))
        if len(finite):
            if not self.manual:
                self._evaluate_commands(finite)
            self._push_history(finite)

        info = {
            "e_t": self.privileged(),
            "breakdown": breakdown,
            "measured_force": measured,
            "term_codes": self.term_codes.copy(),
        }
        if done.any():
            info["final_hist"] = self.history[done].reshape(done.sum(), -1).copy()
            info["final_e"] = info["e_t"][done].copy()
            if self.auto_reset:
                self._reset(done)
        return self.history.reshape(self.B, -1), reward, done, timeout, info

    def _push_history(self, idx: np.ndarray):
        obs = build_observation(self.model, self.q[idx], self.qd[idx],
                                self.theta_feet[idx], self.a_prev[idx])
        cmd = np.concatenate([
            self.F_cmd[idx], self.p_cmd[idx],
            self.v_cmd[idx, None], self.c_f[idx, None].astype(np.float64)], axis=1)
        self.history[idx, :-1] = self.history[idx, 1:]
        self.history[idx, -1] = np.concatenate([obs, cmd], axis=1)

    def privileged(self) -> np.ndarray:
        """e_t: body velocity (3), gripper task position (2), field force (2)."""
        e = np.zeros((self.B, PRIV_DIM))
        if self.model.floating:
            e[:, 0] = self.qd[:, 0]
            e[:, 1] = self.qd[:, 1]
            e[:, 2] = self.qd[:, 2]
        e[:, 3:5] = self.grip_task
        e[:, 5:7] = self.F_e
        return e

    def hist_flat(self) -> np.ndarray:
        return self.history.reshape(self.B, -1)

    # -- state snapshot for exact resume ------------------------------------

    _SNAP_KEYS = ("q", "qd", "anchor", "active", "t", "steps", "a_prev", "a_prev2",
                  "qd_prev", "phase", "theta_feet", "stance", "history",
                  "switch_times", "mode_vals", "v_vals", "seg", "f_t0", "f_ramp",
                  "f_target", "p_t0", "p_from", "p_to", "field_anchor",
                  "field_active", "field_kp", "mu", "payload", "c_f", "F_cmd",
                  "p_cmd", "v_cmd", "F_e", "grip_task", "grip_vel", "grip_world",
                  "base_vel_x", "foot_vel_x", "collision", "term_codes")

    def snapshot(self) -> dict:
        state = {k: getattr(self, k).copy() for k in self._SNAP_KEYS}
        state["rng"] = self.rng.bit_generator.state
        return state

    def restore(self, snap: dict):
        for k in self._SNAP_KEYS:
            setattr(self, k, snap[k].copy())
        self.rng.bit_generator.state = snap["rng"]
