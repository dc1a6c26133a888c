// WebSocket session: hello/version gating, frame intake decoupled from
// rendering via a latest-frame buffer plus chart ring buffers, and
// auto-reconnect with capped backoff.
import {
  EventFrame, Hello, ServerMessage, StateFrame, parseServer, versionCompatible,
} from "./protocol.js";

export type ConnectionState =
  | "connecting" | "open" | "version-mismatch" | "closed";

export const BACKOFF_BASE_MS = 500;
export const BACKOFF_CAP_MS = 5000;

export function backoffDelay(attempt: number): number {
  return Math.min(BACKOFF_CAP_MS, BACKOFF_BASE_MS * 2 ** attempt);
}

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: ((ev?: unknown) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: string }) => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export class Session {
  state: ConnectionState = "closed";
  hello: Hello | null = null;
  latest: StateFrame | null = null;
  events: EventFrame[] = [];
  framesReceived = 0;
  droppedSeqs = 0;
  private lastSeq = -1;
  private cmdSeq = 0;
  private sock: SocketLike | null = null;
  private attempt = 0;
  private closedByUser = false;
  onframe: ((f: StateFrame) => void) | null = null;
  onstatechange: ((s: ConnectionState) => void) | null = null;
  onevent: ((e: EventFrame) => void) | null = null;

  constructor(private url: string, private factory: SocketFactory,
              private schedule: (fn: () => void, ms: number) => void =
                (fn, ms) => setTimeout(fn, ms)) {}

  connect() {
    this.closedByUser = false;
    this.setState("connecting");
    const sock = this.factory(this.url);
    this.sock = sock;
    sock.onopen = () => {
      this.attempt = 0;
    };
    sock.onmessage = (ev) => this.handle(ev.data);
    sock.onclose = () => {
      if (this.state !== "version-mismatch") this.setState("closed");
      this.sock = null;
      if (!this.closedByUser && this.state !== "version-mismatch") {
        const delay = backoffDelay(this.attempt++);
        this.schedule(() => this.connect(), delay);
      }
    };
  }

  close() {
    this.closedByUser = true;
    this.sock?.close();
  }

  private setState(s: ConnectionState) {
    this.state = s;
    this.onstatechange?.(s);
  }

  private handle(text: string) {
    const msg = parseServer(text);
    if (!msg) return;
    if (msg.type === "hello") {
      this.hello = msg;
      if (!versionCompatible(msg)) {
        this.setState("version-mismatch");
        this.sock?.close();
        return;
      }
      this.setState("open");
      return;
    }
    if (this.state !== "open") return;
    if (msg.type === "state") {
      if (this.lastSeq >= 0 && msg.seq > this.lastSeq + 1) {
        this.droppedSeqs += msg.seq - this.lastSeq - 1;
      }
      this.lastSeq = msg.seq;
      this.latest = msg;
      this.framesReceived += 1;
      this.onframe?.(msg);
    } else if (msg.type === "event") {
      this.events.push(msg);
      if (this.events.length > 50) this.events.shift();
      this.onevent?.(msg);
    }
  }

  // Commands go out immediately (no batching): round-trip latency is one
  // server tick. Returns the sequence number used, or -1 when blocked.
  send(payload: string | object): number {
    if (this.state !== "open" || !this.sock) return -1;
    const seq = ++this.cmdSeq;
    const text = typeof payload === "string"
      ? payload
      : JSON.stringify({ ...payload, seq });
    this.sock.send(text);
    return seq;
  }
}

export class RingBuffer {
  data: Float64Array;
  filled = 0;
  private head = 0;

  constructor(public capacity: number) {
    this.data = new Float64Array(capacity);
  }

  push(v: number) {
    this.data[this.head] = v;
    this.head = (this.head + 1) % this.capacity;
    if (this.filled < this.capacity) this.filled += 1;
  }

  // oldest-first copy of the window
  values(): Float64Array {
    const out = new Float64Array(this.filled);
    const start = (this.head - this.filled + this.capacity) % this.capacity;
    for (let i = 0; i < this.filled; i++) {
      out[i] = this.data[(start + i) % this.capacity];
    }
    return out;
  }

  last(): number | null {
    return this.filled ? this.data[(this.head - 1 + this.capacity) % this.capacity] : null;
  }
}

// 30 s of force/position traces at the 50 Hz tick rate.
export const TRACE_SECONDS = 30;
export const TICK_HZ = 50;

export class Traces {
  fCmdX = new RingBuffer(TRACE_SECONDS * TICK_HZ);
  fCmdZ = new RingBuffer(TRACE_SECONDS * TICK_HZ);
  fMeasX = new RingBuffer(TRACE_SECONDS * TICK_HZ);
  fMeasZ = new RingBuffer(TRACE_SECONDS * TICK_HZ);
  fEstX = new RingBuffer(TRACE_SECONDS * TICK_HZ);
  fEstZ = new RingBuffer(TRACE_SECONDS * TICK_HZ);
  posErr = new RingBuffer(TRACE_SECONDS * TICK_HZ);

  push(f: StateFrame) {
    this.fCmdX.push(f.F_cmd[0]);
    this.fCmdZ.push(f.F_cmd[1]);
    this.fMeasX.push(f.measured_force[0]);
    this.fMeasZ.push(f.measured_force[1]);
    this.fEstX.push(f.estimated_force[0]);
    this.fEstZ.push(f.estimated_force[1]);
    if (f.c_f === 0) {
      const r = f.p_cmd[0];
      const th = f.p_cmd[1];
      const tx = f.frame_origin[0] + r * Math.cos(th);
      const tz = f.frame_origin[1] + r * Math.sin(th);
      this.posErr.push(Math.hypot(f.gripper[0] - tx, f.gripper[1] - tz));
    } else {
      this.posErr.push(0);
    }
  }
}
