"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The trained-policy criteria need a desk checkpoint. The fixture looks for
  1. $FORGEBODY_ACCEPT_CKPT,
  2. artifacts/desk/latest.ckpt,
and trains the shipped desk config from scratch if neither exists (budget:
a few hours of CPU; see README).
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from forgebody.dynamics import (SimState, default_q, forward_dynamics,
                                gravity_torques, mass_matrix, point_jacobian,
                                site_positions, step_batch)
from forgebody.model import load_model, default_model_path

REPO = Path(__file__).resolve().parents[1]
ARTIFACTS = REPO / "artifacts"


def _accept(name: str, ok: bool, detail: str):
    print(f"\nACCEPT {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="session")
def robot():
    return load_model(default_model_path())


@pytest.fixture(scope="session")
def arm():
    return load_model(default_model_path("z1_arm_fixed"))


@pytest.fixture(scope="session")
def desk_bundle(robot):
    """Trained desk policy: env override, cached artifact, or train now."""
    from forgebody.learn import TrainConfig, train
    from forgebody.policy import load_checkpoint

    override = os.environ.get("FORGEBODY_ACCEPT_CKPT")
    if override:
        return load_checkpoint(override, robot)
    cached = ARTIFACTS / "desk" / "latest.ckpt"
    if not cached.exists():
        cfg = TrainConfig.from_json(REPO / "configs" / "train_desk.json")
        train(cfg, ARTIFACTS / "desk", resume=(ARTIFACTS / "desk" / "resume.pt").exists())
    return load_checkpoint(cached, robot)


# ---------------------------------------------------------------------------
# 1. dynamics oracles

def test_accept_dynamics_oracles(robot, arm):
    t0 = time.time()
    pend = load_model(default_model_path("pendulum"))

    # pendulum energy drift < 1 % over 10 s
    from forgebody.dynamics import fk, _mc, _attached_points

    def energy(q, qd):
        poses = fk(pend, q[None], qd[None])
        mc = _mc(pend)
        coms, vel = _attached_points(pend, poses, np.arange(2), mc.coms)
        T = 0.5 * np.sum(mc.masses * np.sum(vel[0] ** 2, -1)) \
            + 0.5 * np.sum(mc.inertias * poses.omegas[0] ** 2)
        return T + np.sum(mc.masses * 9.81 * coms[0][:, 1])

    q, qd, t = np.array([[0.3]]), np.zeros((1, 1)), 0.0
    anchor, active = np.zeros((1, 0)), np.zeros((1, 0), dtype=bool)
    E0 = energy(q[0], qd[0])
    lo = hi = E0
    for _ in range(500):
        q, qd, t, anchor, active, _, _ = step_batch(pend, q, qd, t, None, anchor,
                                                    active, torques=np.zeros((1, 1)))
        E = energy(q[0], qd[0])
        lo, hi = min(lo, E), max(hi, E)
    drift = (hi - lo) / abs(E0)

    # mass matrix SPD at 1000 random configurations
    rng = np.random.default_rng(0)
    qs = np.tile(default_q(robot), (1000, 1))
    qs[:, 2] += rng.uniform(-1, 1, 1000)
    qs[:, 3:] = rng.uniform(robot.joint_limits[:, 0], robot.joint_limits[:, 1], (1000, 7))
    M = mass_matrix(robot, qs)
    min_eig = float(np.linalg.eigvalsh(M).min())
    sym = float(np.abs(M - M.transpose(0, 2, 1)).max())

    # jacobian vs central differences at 1e-6
    jac_err = 0.0
    eps = 1e-6
    for _ in range(5):
        qr = default_q(robot) + rng.uniform(-0.5, 0.5, robot.dof)
        J = point_jacobian(robot, qr, "gripper")
        for i in range(robot.dof):
            qp, qm = qr.copy(), qr.copy()
            qp[i] += eps
            qm[i] -= eps
            fd = (site_positions(robot, qp[None], ["gripper"])[0, 0]
                  - site_positions(robot, qm[None], ["gripper"])[0, 0]) / (2 * eps)
            jac_err = max(jac_err, float(np.abs(J[:, i] - fd).max()))

    # gravity-torque self-consistency
    qdd_max = 0.0
    for _ in range(10):
        qa = rng.uniform(arm.joint_limits[:, 0], arm.joint_limits[:, 1])
        s = SimState.initial(arm, qa)
        qdd = forward_dynamics(arm, s, gravity_torques(arm, qa))
        qdd_max = max(qdd_max, float(np.abs(qdd).max()))

    ok = drift < 0.01 and min_eig > 0 and sym < 1e-9 and jac_err < 1e-6 and qdd_max < 1e-6
    _accept("dynamics-oracles", ok,
            f"energy drift {drift * 100:.3f} %/10 s, min eig {min_eig:.2e}, "
            f"jacobian FD err {jac_err:.2e}, gravity-comp |qdd| {qdd_max:.2e}, "
            f"{time.time() - t0:.0f} s")


# ---------------------------------------------------------------------------
# 2. reward goldens

def test_accept_reward_goldens(robot):
    from forgebody.rewards import RegParams, compute_reward
    t0 = time.time()
    goldens = json.loads((Path(__file__).parent / "data" / "reward_goldens.json").read_text())
    limits = np.array(goldens["limits"])
    arm_mask = np.zeros(7, dtype=bool)
    arm_mask[4:] = True
    tau_max = np.full(7, 100.0)
    tau_max[4:] = goldens["tau_max_arm"]
    params = RegParams(limits, arm_mask, ~arm_mask, tau_max)
    worst = 0.0
    for case in goldens["cases"]:
        b = compute_reward(
            np.array(case["p_ee"]), np.array(case["p_cmd_xy"]), case["c_f"],
            np.array(case["F"]), np.array(case["F_cmd"]), case["v_b"], case["v_cmd"],
            np.array(case["foot_forces"]), np.array(case["foot_vel_x"]),
            np.array(case["stance"]), np.array(case["q"]), np.array(case["qd"]),
            np.array(case["qdd"]), np.array(case["a_t"]), np.array(case["a_prev"]),
            np.array(case["a_prev2"]),
            np.concatenate([np.zeros(4), case["arm_tau"]]), case["collision"], params)
        for name, exp in case["expected"].items():
            worst = max(worst, abs(float(getattr(b, name)) - exp))

    rng = np.random.default_rng(42)
    n = 1_000_000
    fuzz = compute_reward(
        rng.normal(0, 1, (n, 2)), rng.normal(0, 1, (n, 2)), rng.integers(0, 2, n),
        rng.normal(0, 80, (n, 2)), rng.normal(0, 70, (n, 2)),
        rng.normal(0, 2, n), rng.uniform(-1, 1, n),
        rng.normal(0, 200, (n, 2, 2)), rng.normal(0, 3, (n, 2)),
        rng.integers(0, 2, (n, 2)).astype(float),
        rng.uniform(-3, 3, (n, 7)), rng.normal(0, 10, (n, 7)), rng.normal(0, 500, (n, 7)),
        rng.normal(0, 3, (n, 7)), rng.normal(0, 3, (n, 7)), rng.normal(0, 3, (n, 7)),
        rng.normal(0, 120, (n, 7)), rng.integers(0, 2, n).astype(float), params)
    nonneg = bool((fuzz.total >= 0).all())
    ok = worst < 1e-9 and nonneg
    _accept("reward-goldens", ok,
            f"20 goldens worst |err| {worst:.2e}, 1e6 fuzz non-negative: {nonneg}, "
            f"{time.time() - t0:.0f} s")


# ---------------------------------------------------------------------------
# 3. force-field law

def test_accept_force_field_law():
    from forgebody.tasking import ForceField, field_force, sample_force_schedule
    t0 = time.time()
    rng = np.random.default_rng(0)
    f = ForceField(np.array([0.3, -0.1]))
    n = 2000
    xg = rng.normal(0, 0.3, (n, 2))
    vg = rng.normal(0, 1.0, (n, 2))
    vs = rng.normal(0, 0.2, (n, 2))
    F = np.stack([field_force(f, xg[i], vg[i], vs[i]) for i in range(n)])
    worst = 0.0
    for ax in range(2):
        A = np.stack([xg[:, ax], vg[:, ax], vs[:, ax], np.ones(n)], axis=1)
        coef, *_ = np.linalg.lstsq(A, F[:, ax], rcond=None)
        worst = max(worst, abs(coef[0] + 700.0), abs(coef[1] + 6.0), abs(coef[2] - 6.0))
    zeros = sum(np.all(sample_force_schedule(rng, 0.0).values == 0.0)
                for _ in range(100_000))
    freq = zeros / 100_000
    ok = worst < 1e-9 and abs(freq - 0.20) < 0.01
    _accept("force-field-law", ok,
            f"regression |err| {worst:.2e} (kp 700, kd 6), zero-branch {freq:.4f}, "
            f"{time.time() - t0:.0f} s")


# ---------------------------------------------------------------------------
# 4. measurement pipeline (jt oracle, no learning)

def test_accept_measurement_pipeline(arm):
    from forgebody.control import run_jt_trial
    t0 = time.time()
    rng = np.random.default_rng(1)
    worst = 0.0
    n_poses = 20
    tried = 0
    while tried < n_poses:
        q0 = rng.uniform(arm.joint_limits[:, 0], arm.joint_limits[:, 1])
        grip = site_positions(arm, q0[None], ["gripper"])[0, 0]
        r = np.linalg.norm(grip - np.array([0.2, 0.61]))
        if not (0.30 <= r <= 0.65) or grip[1] < 0.15:
            continue  # stay clear of the singular stretch and the ground
        F_cmd = rng.uniform(-30.0, 30.0, 2)
        measured, _ = run_jt_trial(arm, q0, F_cmd, seconds=5.0)
        worst = max(worst, float(np.linalg.norm(measured - F_cmd)))
        tried += 1
    ok = worst < 2.0
    _accept("measurement-pipeline", ok,
            f"jt oracle worst |measured - commanded| {worst:.3f} N over "
            f"{n_poses} poses, cmds <= 30 N, {time.time() - t0:.0f} s")


# ---------------------------------------------------------------------------
# 5. ppo machinery

def test_accept_ppo_machinery():
    from forgebody.learn import TrainConfig, train
    from tests.test_learn import (_gae_bruteforce, _random_batch, _tiny_setup)
    from forgebody.learn import gae, ppo_loss
    t0 = time.time()

    rng = np.random.default_rng(0)
    gae_err = 0.0
    for _ in range(5):
        batch = _random_batch(rng)
        adv, _ = gae(batch, 0.99, 0.95, normalize=False)
        gae_err = max(gae_err, float(np.abs(adv - _gae_bruteforce(batch, 0.99, 0.95)).max()))

    nets, args = _tiny_setup()

    def loss_fn():
        loss, _ = ppo_loss(nets, *args, clip_eps=0.2, value_coef=0.7,
                           entropy_coef=0.01, estimator_coef=1.3,
                           detach_estimator=False)
        return loss

    loss_fn().backward()
    frng = np.random.default_rng(9)
    eps = 1e-6
    grad_rel = 0.0
    for p in nets.parameters():
        grad = p.grad.detach().clone().reshape(-1)
        flat = p.data.reshape(-1)
        for idx in frng.choice(len(flat), size=min(3, len(flat)), replace=False):
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = loss_fn().item()
            flat[idx] = orig - eps
            down = loss_fn().item()
            flat[idx] = orig
            fd = (up - down) / (2 * eps)
            scale = max(abs(fd), abs(grad[idx].item()), 1e-8)
            grad_rel = max(grad_rel, abs(fd - grad[idx].item()) / scale)

    ratios = []
    for seed in (0, 1, 2):
        cfg = TrainConfig.from_json(REPO / "configs" / "smoke_pendulum.json")
        cfg.seed = seed
        out = ARTIFACTS / f"smoke_s{seed}"
        metrics = out / "metrics.csv"
        if not metrics.exists() or sum(1 for _ in open(metrics)) < cfg.updates + 1:
            train(cfg, out)
        rows = [l.strip().split(",") for l in open(metrics)][1:]
        rewards = [float(r[2]) for r in rows]
        base = np.mean(rewards[:3])
        final = np.mean(rewards[-10:])
        ratios.append(final / base)
    ok = gae_err < 1e-6 and grad_rel < 1e-4 and all(r >= 3.0 for r in ratios)
    _accept("ppo-machinery", ok,
            f"gae oracle err {gae_err:.2e}, grad FD rel {grad_rel:.2e}, "
            f"smoke ratios {[round(r, 2) for r in ratios]} (need >= 3.0), "
            f"{time.time() - t0:.0f} s")


# ---------------------------------------------------------------------------
# 6-8. trained-policy criteria

def test_accept_desk_force_tracking(robot, desk_bundle):
    from forgebody.evaluation import force_sweep
    t0 = time.time()
    rep = force_sweep(desk_bundle, robot, n_setpoints=300, seed=5,
                      out_dir=ARTIFACTS / "accept_eval")
    ok = rep.interior_tracking_mean <= 14.0
    _accept("desk-force-tracking", ok,
            f"interior mean tracking err {rep.interior_tracking_mean:.2f} N "
            f"(<= 14 N), edge {rep.edge_tracking_mean:.2f} N, "
            f"estimation {rep.interior_estimation_mean:.2f} N, "
            f"failures {rep.n_failures}/{rep.n_trials}, {time.time() - t0:.0f} s")


def test_accept_compliance(robot, desk_bundle):
    from forgebody.evaluation import compliance_probe
    t0 = time.time()
    rep = compliance_probe(desk_bundle, robot, push_force=20.0,
                           out_dir=ARTIFACTS / "accept_eval")
    ok = rep.displacement >= 0.1 and rep.mean_force <= 5.0 and not rep.terminated
    _accept("compliance-probe", ok,
            f"displacement {rep.displacement * 100:.1f} cm (>= 10), mean force "
            f"{rep.mean_force:.2f} N (<= 5), terminated {rep.terminated}, "
            f"{time.time() - t0:.0f} s")


def test_accept_workspace(robot, arm, desk_bundle):
    from forgebody.evaluation import workspace_eval
    t0 = time.time()
    rep = workspace_eval(desk_bundle, robot, arm, out_dir=ARTIFACTS / "accept_eval")
    ok = rep.ratio >= 1.15
    _accept("workspace-hull", ok,
            f"whole-body {rep.whole_body_area:.3f} m^2 vs arm {rep.arm_area:.3f} m^2, "
            f"ratio {rep.ratio:.3f} (>= 1.15), {time.time() - t0:.0f} s")


def test_accept_position_error(robot, desk_bundle):
    from forgebody.evaluation import position_error_eval
    t0 = time.time()
    rep = position_error_eval(desk_bundle, robot, n=300, seed=11,
                              out_dir=ARTIFACTS / "accept_eval")
    ok = rep.mean_abs_x <= 0.08 and rep.mean_abs_z <= 0.08
    _accept("position-error", ok,
            f"mean |err| x {rep.mean_abs_x * 100:.1f} cm, z {rep.mean_abs_z * 100:.1f} cm "
            f"(<= 8 cm), unsettled {rep.n_unsettled}, {time.time() - t0:.0f} s")


def test_accept_impedance(robot, arm, desk_bundle):
    from forgebody.evaluation import impedance_probe, impedance_probe_oracle
    t0 = time.time()
    oracle = impedance_probe_oracle(arm, push_force=14.0, kp=200.0)
    trained = impedance_probe(desk_bundle, robot, push_force=14.0, kp=200.0)
    ok = oracle.relative_error <= 0.10 and trained.relative_error <= 0.30
    _accept("impedance", ok,
            f"oracle deflection {oracle.displacement * 100:.2f} cm vs expected "
            f"{oracle.expected * 100:.2f} (rel {oracle.relative_error:.3f} <= 0.10); "
            f"trained {trained.displacement * 100:.2f} cm "
            f"(rel {trained.relative_error:.3f} <= 0.30), {time.time() - t0:.0f} s")


# ---------------------------------------------------------------------------
# 9. checkpoint / determinism / service latency

def test_accept_checkpoint_roundtrip(robot, tmp_path):
    from forgebody.policy import PolicyBundle, load_checkpoint, policy_step, save_checkpoint
    bundle = PolicyBundle.initial(robot, seed=12)
    p = tmp_path / "rt.ckpt"
    save_checkpoint(bundle, p)
    loaded = load_checkpoint(p, robot)
    hist = np.random.default_rng(0).normal(0, 1, (3, bundle.flat_dim))
    a1, e1, _ = policy_step(bundle, hist)
    a2, e2, _ = policy_step(loaded, hist)
    bit_exact = np.array_equal(a1, a2) and np.array_equal(e1, e2) and all(
        torch.equal(v1, v2) for v1, v2 in zip(bundle.nets.state_dict().values(),
                                              loaded.nets.state_dict().values()))
    _accept("checkpoint-roundtrip", bit_exact, "save -> load outputs bit-identical")


def test_accept_training_determinism(tmp_path):
    from forgebody.learn import TrainConfig, train
    import csv
    t0 = time.time()

    def run(out, updates, resume=False):
        cfg = TrainConfig.from_json(REPO / "configs" / "smoke_pendulum.json")
        cfg.n_envs = 8
        cfg.horizon = 8
        cfg.updates = updates
        cfg.checkpoint_every = 2
        cfg.torch_threads = 1
        train(cfg, out, resume=resume)

    run(tmp_path / "full", 4)
    run(tmp_path / "part", 2)
    run(tmp_path / "part", 4, resume=True)
    rows_full = list(csv.DictReader(open(tmp_path / "full" / "metrics.csv")))
    rows_part = list(csv.DictReader(open(tmp_path / "part" / "metrics.csv")))
    same = all(rf[c] == rp[c]
               for rf, rp in zip(rows_full, rows_part)
               for c in rf if c != "wall_time")
    _accept("training-determinism", same,
            f"interrupted+resumed run matches uninterrupted metrics exactly, "
            f"{time.time() - t0:.0f} s")


def test_accept_service_latency(robot, tmp_path):
    import json as _json
    from starlette.testclient import TestClient
    from forgebody.policy import PolicyBundle, save_checkpoint
    from forgebody.service import create_app

    bundle = PolicyBundle.initial(robot, seed=1)
    ckpt = tmp_path / "svc.ckpt"
    save_checkpoint(bundle, ckpt)
    app = create_app(ckpt, default_model_path(), fast=True)
    ok = False
    detail = ""
    with TestClient(app) as client:
        with client.websocket_connect("/ws") as ws:
            _json.loads(ws.receive_text())
            ws.send_text(_json.dumps({"type": "pause"}))
            time.sleep(0.05)
            ws.send_text(_json.dumps({"type": "command", "seq": 99,
                                      "mode": "position", "p_cmd": [0.55, 0.1]}))
            time.sleep(0.05)
            # drain everything produced before the pause landed
            last_seq = None
            ws.send_text(_json.dumps({"type": "step"}))
            for _ in range(2000):
                msg = _json.loads(ws.receive_text())
                if msg["type"] != "state":
                    continue
                if msg["cmd_seq"] == 99:
                    ok = True
                    detail = (f"command latched before tick {msg['seq']} visible in "
                              f"state of tick {msg['seq']}")
                    break
                last_seq = msg["seq"]
    _accept("service-latency", ok, detail or "command never reflected")
