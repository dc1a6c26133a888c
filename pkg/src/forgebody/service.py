"""Real-time simulation server and session recording/replay.

One authoritative tick task advances the simulator at 50 Hz wall clock
(drift-corrected; ``fast=True`` removes pacing for headless tests), applies
the latest teleoperation command (latest-wins mailbox), runs the policy
deterministically, and fans out state frames to every connected WebSocket
client through bounded queues that can never block the tick.

Wire format: newline-free JSON messages, one per frame, each carrying the
protocol version and a monotone sequence number. Recordings are
length-prefixed JSON frames (4-byte little-endian length + payload).
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import struct
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .control import ImpedanceController, ImpedanceGains, compliant_command
from .dynamics import CONTROL_DT
from .env import TaskConfig, VecEnv
from .model import load_model
from .policy import load_checkpoint, policy_step
from .rewards import TERM_NAMES
from .tasking import FORCE_RANGE, POS_R_RANGE, POS_TH_RANGE, VEL_RANGE

PROTOCOL_VERSION = 1
TICK_PERIOD = CONTROL_DT
MODES = ("position", "force", "impedance", "compliant")

log = logging.getLogger("forgebody.service")


def command_limits() -> dict:
    """Training-range command box; the UI clamps with exactly these numbers."""
    return {
        "force": FORCE_RANGE,
        "r": list(POS_R_RANGE),
        "theta": list(POS_TH_RANGE),
        "velocity": list(VEL_RANGE),
        "payload_offset": FORCE_RANGE,
        "impedance_kp": [0.0, 2000.0],
        "impedance_kd": [0.0, 100.0],
    }


class Recorder:
    def __init__(self, path: str | Path):
        self.fh = open(path, "wb")

    def write(self, frame: dict):
        data = json.dumps(frame, separators=(",", ":")).encode()
        self.fh.write(struct.pack("<I", len(data)))
        self.fh.write(data)

    def close(self):
        self.fh.close()


def read_recording(path: str | Path):
    """Yield frames from a recording; raises on corruption with frame index."""
    raw = Path(path).read_bytes()
    off = 0
    idx = 0
    while off < len(raw):
        if off + 4 > len(raw):
            raise ValueError(f"corrupt recording: truncated length prefix at frame {idx}")
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + n > len(raw):
            raise ValueError(f"corrupt recording: truncated payload at frame {idx}")
        try:
            yield json.loads(raw[off:off + n].decode())
        except json.JSONDecodeError:
            raise ValueError(f"corrupt recording: bad JSON at frame {idx}") from None
        off += n
        idx += 1


class SimSession:
    """Authoritative simulation state owned by the tick task."""

    def __init__(self, checkpoint: str | Path, model_path: str | Path,
                 task: TaskConfig | None = None, seed: int = 0):
        self.model = load_model(model_path)
        self.bundle = load_checkpoint(checkpoint, self.model)
        self.bundle.deployed = True
        self.env = VecEnv(self.model, task or TaskConfig(), n_envs=1, seed=seed)
        self.env.manual = True
        self.env.auto_reset = False
        self.mode = "position"
        self.payload_offset = 0.0
        self.impedance = ImpedanceController(ImpedanceGains())
        self.seq = 0
        self.cmd_seq = -1
        self.paused = False
        self.pending: dict | None = None
        self.pending_events: list[dict] = []
        self.e_hat = np.zeros(self.bundle.priv_dim)
        hold = self._current_rth()
        self.env.c_f[:] = 0
        self.env.p_cmd[:] = hold
        self.env.v_cmd[:] = 0.0

    def _current_rth(self):
        gp = self.env.grip_task[0]
        r = float(np.clip(np.linalg.norm(gp), *self.env.cfg.r_range))
        th = float(np.clip(np.arctan2(gp[1], gp[0]), *self.env.cfg.th_range))
        return np.array([r, th])

    def _warn(self, message: str):
        self.pending_events.append({"event": "warning", "message": message})

    def apply_command(self, msg: dict):
        """Latched command application; clamps out-of-range values and warns."""
        self.cmd_seq = int(msg.get("seq", self.cmd_seq))
        mode = msg.get("mode", self.mode)
        if mode not in MODES:
            self._warn(f"unknown mode {mode!r} ignored")
            mode = self.mode
        entering_force = mode != "position" and self.mode == "position"
        self.mode = mode

        if "v_cmd" in msg and msg["v_cmd"] is not None:
            v = float(msg["v_cmd"])
            vc = float(np.clip(v, *VEL_RANGE))
            if vc != v:
                self._warn(f"v_cmd {v} clamped to {vc}")
            self.env.v_cmd[:] = vc
        if "gains" in msg and msg["gains"]:
            g = msg["gains"]
            kp = float(g.get("kp", self.impedance.gains.kp))
            kd = float(g.get("kd", self.impedance.gains.kd))
            self.impedance.gains.kp = max(0.0, kp)
            self.impedance.gains.kd = max(0.0, kd)
            if "x_des" in g and g["x_des"] is not None:
                self.impedance.gains.x_des = np.asarray(g["x_des"], dtype=np.float64)
        if "payload_offset" in msg and msg["payload_offset"] is not None:
            p = float(msg["payload_offset"])
            self.payload_offset = min(max(p, 0.0), FORCE_RANGE)
            if self.payload_offset != p:
                self._warn(f"payload offset {p} clamped to {self.payload_offset}")

        if mode == "position":
            self.env.c_f[:] = 0
            self.env.field_active[:] = False
            if "p_cmd" in msg and msg["p_cmd"] is not None:
                r, th = float(msg["p_cmd"][0]), float(msg["p_cmd"][1])
                rc = float(np.clip(r, *self.env.cfg.r_range))
                thc = float(np.clip(th, *self.env.cfg.th_range))
                if rc != r or thc != th:
                    self._warn(f"p_cmd ({r:.3f},{th:.3f}) clamped to ({rc:.3f},{thc:.3f})")
                self.env.p_cmd[:] = [rc, thc]
            self.env.F_cmd[:] = 0.0
        else:
            self.env.c_f[:] = 1
            self.env.p_cmd[:] = 0.0
            if entering_force or not self.env.field_active[0]:
                self.env._anchor_field(np.array([0]))
                self.impedance.reset(self.env.grip_task[0].copy())
            if mode == "force" and "F_cmd" in msg and msg["F_cmd"] is not None:
                F = np.asarray(msg["F_cmd"], dtype=np.float64)
                Fc = np.clip(F, -FORCE_RANGE, FORCE_RANGE)
                if not np.array_equal(F, Fc):
                    self._warn(f"F_cmd {F.tolist()} clamped to {Fc.tolist()}")
                self.env.F_cmd[:] = Fc
            if mode == "impedance" and "gains" in msg and msg["gains"] \
                    and msg["gains"].get("x_des") is None and entering_force:
                self.impedance.gains.x_des = self.env.grip_task[0].copy()

    def reset(self):
        self.env._reset(np.array([True]))
        self.mode = "position"
        self.env.c_f[:] = 0
        self.env.p_cmd[:] = self._current_rth()
        self.env.F_cmd[:] = 0.0
        self.env.v_cmd[:] = 0.0
        self.env.field_active[:] = False

    def tick(self) -> dict:
        """One control step: apply latched command, run policy, advance physics."""
        if self.pending is not None:
            self.apply_command(self.pending)
            self.pending = None
        if self.mode == "impedance":
            x_hat = self.e_hat[3:5]
            self.env.F_cmd[:] = self.impedance.command(x_hat, float(self.env.t[0]))
            if self.impedance.stale:
                self._warn("stale position estimate; holding impedance command")
        elif self.mode == "compliant":
            F, clamped = compliant_command(self.payload_offset)
            self.env.F_cmd[:] = F
        act, e_hat, _ = policy_step(self.bundle, self.env.hist_flat(),
                                    deterministic=True)
        self.e_hat = e_hat[0]
        _, reward, done, timeout, info = self.env.step(act)
        b = info["breakdown"]
        frame = self.state_frame(reward, b, info)
        if done[0]:
            cause = TERM_NAMES.get(int(info["term_codes"][0]), "timeout")
            self.pending_events.append(
                {"event": "termination", "cause": cause, "t": float(self.env.t[0])})
            self.reset()
        return frame

    def state_frame(self, reward, b, info) -> dict:
        env = self.env
        q = env.q[0]
        base = [float(q[0]), float(q[1]), float(q[2])] if self.model.floating else \
            [float(self.model.base_origin[0]), float(self.model.base_origin[1]),
             float(self.model.base_pitch)]
        origin = env.frame_origin(env.q)[0]
        setpoint = None
        if env.field_active[0]:
            sp = env.field_anchor[0] if env.world_field else origin + env.field_anchor[0]
            setpoint = [float(sp[0]), float(sp[1])]
        self.seq += 1
        return {
            "type": "state", "v": PROTOCOL_VERSION, "seq": self.seq,
            "t": float(env.t[0]),
            "q": [float(v) for v in q],
            "qd": [float(v) for v in env.qd[0]],
            "base": base,
            "gripper": [float(v) for v in env.grip_world[0]],
            "gripper_task": [float(v) for v in env.grip_task[0]],
            "frame_origin": [float(v) for v in origin],
            "field_setpoint": setpoint,
            "mode": self.mode,
            "c_f": int(env.c_f[0]),
            "F_cmd": [float(v) for v in env.F_cmd[0]],
            "p_cmd": [float(v) for v in env.p_cmd[0]],
            "v_cmd": float(env.v_cmd[0]),
            "measured_force": [float(v) for v in info["measured_force"][0]],
            "estimated_force": [float(-v) for v in self.e_hat[5:7]],
            "estimated_gripper": [float(v) for v in self.e_hat[3:5]],
            "reward": {k: float(getattr(b, k)[0]) for k in
                       ("r_x_g", "r_f_g", "r_v_b", "swing", "stance", "r_l", "total")},
            "cmd_seq": self.cmd_seq,
        }

    def hello(self) -> dict:
        return {
            "type": "hello", "v": PROTOCOL_VERSION, "seq": 0,
            "protocol": PROTOCOL_VERSION,
            "model": {"name": self.model.name, "dof": self.model.dof,
                      "n_joints": self.model.n_joints,
                      "floating": self.model.floating,
                      "links": [{"name": l.name, "length": l.length,
                                 "thickness": l.thickness} for l in self.model.links],
                      "joints": [{"name": j.name, "parent": j.parent, "child": j.child,
                                  "pivot": [float(j.pivot[0]), float(j.pivot[1])]}
                                 for j in self.model.joints],
                      "sites": {n: {"link": s.link,
                                    "offset": [float(s.offset[0]), float(s.offset[1])]}
                                for n, s in self.model.sites.items()},
                      "hash": self.model.source_hash},
            "checkpoint": {"model_name": self.bundle.model_name,
                           "model_hash": self.bundle.model_hash,
                           "history": self.bundle.history,
                           "entry": self.bundle.entry},
            "limits": command_limits(),
            "tick_period": TICK_PERIOD,
        }


class Broadcast:
    """Fan-out of frames to clients; slow consumers drop old frames, never the tick."""

    def __init__(self):
        self.queues: set[asyncio.Queue] = set()

    def subscribe(self) -> asyncio.Queue:
        q: asyncio.Queue = asyncio.Queue(maxsize=64)
        self.queues.add(q)
        return q

    def unsubscribe(self, q: asyncio.Queue):
        self.queues.discard(q)

    def publish(self, frame: dict):
        for q in list(self.queues):
            if q.full():
                try:
                    q.get_nowait()
                except asyncio.QueueEmpty:
                    pass
            q.put_nowait(frame)


def create_app(checkpoint: str | Path, model_path: str | Path, fast: bool = False,
               record: str | Path | None = None, seed: int = 0) -> FastAPI:
    app = FastAPI()
    session = SimSession(checkpoint, model_path, seed=seed)
    bus = Broadcast()
    recorder = Recorder(record) if record else None
    app.state.session = session
    app.state.bus = bus
    app.state.tick_count = 0
    if recorder:
        recorder.write(session.hello())

    def emit(frame: dict):
        bus.publish(frame)
        if recorder:
            recorder.write(frame)

    def run_tick():
        frame = session.tick()
        app.state.tick_count += 1
        emit(frame)
        for ev in session.pending_events:
            ev = {"type": "event", "v": PROTOCOL_VERSION, "seq": session.seq, **ev}
            emit(ev)
        session.pending_events.clear()

    app.state.run_tick = run_tick

    async def tick_loop():
        next_t = time.monotonic()
        while True:
            if session.paused:
                await asyncio.sleep(0.005 if not fast else 0)
                next_t = time.monotonic()
                continue
            run_tick()
            if fast:
                await asyncio.sleep(0)
            else:
                next_t += TICK_PERIOD
                delay = next_t - time.monotonic()
                if delay > 0:
                    await asyncio.sleep(delay)
                else:
                    next_t = time.monotonic()   # fell behind: drop drift, keep going
                    await asyncio.sleep(0)

    from contextlib import asynccontextmanager

    @asynccontextmanager
    async def lifespan(app_):
        app.state.tick_task = asyncio.create_task(tick_loop())
        yield
        app.state.tick_task.cancel()
        if recorder:
            recorder.close()

    app.router.lifespan_context = lifespan

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "ticks": app.state.tick_count,
                "clients": len(bus.queues)}

    @app.get("/info")
    def info():
        return session.hello()

    @app.websocket("/ws")
    async def ws(sock: WebSocket):
        await sock.accept()
        await sock.send_text(json.dumps(session.hello(), separators=(",", ":")))
        queue = bus.subscribe()

        async def reader():
            while True:
                text = await sock.receive_text()
                try:
                    msg = json.loads(text)
                except json.JSONDecodeError:
                    raise ProtocolError("message is not valid JSON")
                mtype = msg.get("type")
                if mtype == "command":
                    session.pending = msg       # latest wins
                elif mtype == "reset":
                    session.reset()
                elif mtype == "pause":
                    session.paused = True
                elif mtype == "resume":
                    session.paused = False
                elif mtype == "step":
                    if session.paused:
                        run_tick()
                else:
                    raise ProtocolError(f"unknown message type {mtype!r}")

        async def writer():
            while True:
                frame = await queue.get()
                await sock.send_text(json.dumps(frame, separators=(",", ":")))

        tasks = [asyncio.create_task(reader()), asyncio.create_task(writer())]
        try:
            done, pending = await asyncio.wait(tasks, return_when=asyncio.FIRST_EXCEPTION)
            for t in done:
                exc = t.exception()
                if isinstance(exc, ProtocolError):
                    log.warning("client protocol violation: %s", exc)
                    await sock.close(code=1002, reason=str(exc))
        except WebSocketDisconnect:
            pass
        finally:
            for t in tasks:
                t.cancel()
            bus.unsubscribe(queue)

    # static teleoperation client, when built
    ui_dist = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if ui_dist.exists():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=ui_dist, html=True), name="ui")
    return app


class ProtocolError(RuntimeError):
    pass


def create_replay_app(recording: str | Path, speed: float = 1.0) -> FastAPI:
    """Serve a recorded session over the same protocol, frame-accurately."""
    frames = list(read_recording(recording))
    if not frames or frames[0].get("type") != "hello":
        raise ValueError("recording does not start with a hello frame")
    hello, stream = frames[0], frames[1:]
    app = FastAPI()

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "frames": len(stream), "replay": True}

    @app.get("/info")
    def info():
        return hello

    @app.websocket("/ws")
    async def ws(sock: WebSocket):
        await sock.accept()
        await sock.send_text(json.dumps(hello, separators=(",", ":")))
        try:
            for frame in stream:
                await sock.send_text(json.dumps(frame, separators=(",", ":")))
                if speed > 0:
                    await asyncio.sleep(TICK_PERIOD / speed)
            await sock.close()
        except WebSocketDisconnect:
            pass
    return app


def serve(checkpoint, model_path, port: int = 8750, host: str = "127.0.0.1",
          fast: bool = False, record=None, seed: int = 0):
    import uvicorn
    app = create_app(checkpoint, model_path, fast=fast, record=record, seed=seed)
    uvicorn.run(app, host=host, port=port, log_level="warning")


def serve_replay(recording, port: int = 8750, host: str = "127.0.0.1",
                 speed: float = 1.0):
    import uvicorn
    uvicorn.run(create_replay_app(recording, speed), host=host, port=port,
                log_level="warning")
