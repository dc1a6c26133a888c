// Wire protocol shared with the simulation server: message shapes, the
// version gate, and command clamping that mirrors the server exactly.
import { LIMITS } from "./gen/limits.js";

export const PROTOCOL_VERSION = 1;

export type Mode = "position" | "force" | "impedance" | "compliant";

export interface LinkInfo {
  name: string;
  length: number;
  thickness: number;
}

export interface JointInfo {
  name: string;
  parent: number;
  child: number;
  pivot: [number, number];
}

export interface ModelInfo {
  name: string;
  dof: number;
  n_joints: number;
  floating: boolean;
  links: LinkInfo[];
  joints: JointInfo[];
  sites: Record<string, { link: number; offset: [number, number] }>;
  hash: string;
}

export interface Hello {
  type: "hello";
  protocol: number;
  model: ModelInfo;
  checkpoint: Record<string, unknown>;
  limits: Record<string, unknown>;
  tick_period: number;
}

export interface StateFrame {
  type: "state";
  v: number;
  seq: number;
  t: number;
  q: number[];
  qd: number[];
  base: [number, number, number];
  gripper: [number, number];
  gripper_task: [number, number];
  frame_origin: [number, number];
  field_setpoint: [number, number] | null;
  mode: Mode;
  c_f: number;
  F_cmd: [number, number];
  p_cmd: [number, number];
  v_cmd: number;
  measured_force: [number, number];
  estimated_force: [number, number];
  estimated_gripper: [number, number];
  reward: Record<string, number>;
  cmd_seq: number;
}

export interface EventFrame {
  type: "event";
  seq: number;
  event: "termination" | "warning";
  cause?: string;
  message?: string;
  t?: number;
}

export type ServerMessage = Hello | StateFrame | EventFrame;

export interface Gains {
  kp: number;
  kd: number;
  x_des?: [number, number] | null;
}

export interface CommandDraft {
  mode: Mode;
  F_cmd: [number, number];
  p_cmd: [number, number]; // (r, theta)
  v_cmd: number;
  gains: Gains;
  payload_offset: number;
}

export function defaultDraft(): CommandDraft {
  return {
    mode: "position",
    F_cmd: [0, 0],
    p_cmd: [0.6, 0.0],
    v_cmd: 0,
    gains: { kp: 200, kd: 10, x_des: null },
    payload_offset: 0,
  };
}

const clampScalar = (v: number, lo: number, hi: number) =>
  Math.min(hi, Math.max(lo, v));

// Identical semantics to the server: per-axis force box, polar position box,
// velocity interval, non-negative payload capped at the force range.
export function clampDraft(d: CommandDraft): CommandDraft {
  return {
    mode: d.mode,
    F_cmd: [
      clampScalar(d.F_cmd[0], -LIMITS.force, LIMITS.force),
      clampScalar(d.F_cmd[1], -LIMITS.force, LIMITS.force),
    ],
    p_cmd: [
      clampScalar(d.p_cmd[0], LIMITS.r[0], LIMITS.r[1]),
      clampScalar(d.p_cmd[1], LIMITS.theta[0], LIMITS.theta[1]),
    ],
    v_cmd: clampScalar(d.v_cmd, LIMITS.velocity[0], LIMITS.velocity[1]),
    gains: {
      kp: clampScalar(d.gains.kp, LIMITS.impedance_kp[0], LIMITS.impedance_kp[1]),
      kd: clampScalar(d.gains.kd, LIMITS.impedance_kd[0], LIMITS.impedance_kd[1]),
      x_des: d.gains.x_des ?? null,
    },
    payload_offset: clampScalar(d.payload_offset, 0, LIMITS.payload_offset),
  };
}

export function encodeCommand(d: CommandDraft, seq: number): string {
  const c = clampDraft(d);
  const msg: Record<string, unknown> = { type: "command", seq, mode: c.mode, v_cmd: c.v_cmd };
  if (c.mode === "position") msg.p_cmd = c.p_cmd;
  if (c.mode === "force") msg.F_cmd = c.F_cmd;
  if (c.mode === "impedance") msg.gains = c.gains;
  if (c.mode === "compliant") msg.payload_offset = c.payload_offset;
  return JSON.stringify(msg);
}

// Unknown message types are tolerated on the client (forward compatibility);
// returns null for anything unusable.
export function parseServer(text: string): ServerMessage | null {
  let msg: unknown;
  try {
    msg = JSON.parse(text);
  } catch {
    return null;
  }
  const m = msg as { type?: string };
  if (m.type === "hello" || m.type === "state" || m.type === "event") {
    return msg as ServerMessage;
  }
  return null;
}

export function versionCompatible(hello: Hello): boolean {
  return hello.protocol === PROTOCOL_VERSION;
}
