// Teleoperation client entry point: wires the session, input handlers and
// the render loop. Rendering runs on requestAnimationFrame decoupled from
// WebSocket intake; dropped display frames never stall input handling.
import { Session, Traces } from "./client.js";
import { xyToPolar } from "./kinematics.js";
import {
  CommandDraft, Mode, StateFrame, clampDraft, defaultDraft, encodeCommand,
} from "./protocol.js";
import {
  Ctx2D, FORCE_ARROW_SCALE, drawScene, drawStripChart, defaultView, toPx,
} from "./render.js";
import { LIMITS } from "./gen/limits.js";

const $ = (id: string) => document.getElementById(id)!;

const sceneCanvas = $("scene") as HTMLCanvasElement;
const chartCanvas = $("charts") as HTMLCanvasElement;
const sceneCtx = sceneCanvas.getContext("2d") as unknown as Ctx2D;
const chartCtx = chartCanvas.getContext("2d") as unknown as Ctx2D;

const wsUrl = `${location.protocol === "https:" ? "wss" : "ws"}://${location.host}/ws`;
const session = new Session(wsUrl, (url) => new WebSocket(url) as never);
const traces = new Traces();
const draft: CommandDraft = defaultDraft();
let draftDirty = false;
let lastTermination: { cause?: string; until: number } | null = null;
let fps = 0;
let framesThisSecond = 0;
let lastFpsStamp = performance.now();

session.onframe = (f: StateFrame) => {
  traces.push(f);
};

session.onevent = (e) => {
  if (e.event === "termination") {
    lastTermination = { cause: e.cause, until: performance.now() + 2500 };
  }
  appendLog(e.event === "termination"
    ? `episode terminated (${e.cause}), auto-reset`
    : `warning: ${e.message}`);
};

session.onstatechange = (s) => {
  const banner = $("banner");
  if (s === "version-mismatch") {
    banner.textContent = "protocol version mismatch: update the client or the server";
    banner.className = "banner error";
  } else if (s === "open") {
    banner.textContent = "";
    banner.className = "banner";
    syncDraftUi();
  } else {
    banner.textContent = s === "connecting" ? "connecting..." : "disconnected, retrying...";
    banner.className = "banner warn";
  }
};

function appendLog(text: string) {
  const el = $("log");
  const line = document.createElement("div");
  line.textContent = `${new Date().toLocaleTimeString()}  ${text}`;
  el.prepend(line);
  while (el.childElementCount > 8) el.removeChild(el.lastChild!);
}

// ---------------------------------------------------------------------------
// command input

function sendDraft() {
  if (session.state !== "open") return;
  session.send(encodeCommand(draft, 0).replace('"seq":0', `"seq":${Date.now() % 1e9}`));
}

function setMode(mode: Mode) {
  draft.mode = mode;
  if (mode === "compliant") {
    draft.F_cmd = [0, 0];     // compliant resets the force arrow
  }
  syncDraftUi();
  sendDraft();
}

function syncDraftUi() {
  for (const m of ["position", "force", "impedance", "compliant"] as Mode[]) {
    $(`mode-${m}`).classList.toggle("active", draft.mode === m);
  }
  ($("v-slider") as HTMLInputElement).value = String(draft.v_cmd);
  $("v-value").textContent = draft.v_cmd.toFixed(2);
  ($("kp-input") as HTMLInputElement).value = String(draft.gains.kp);
  ($("kd-input") as HTMLInputElement).value = String(draft.gains.kd);
  ($("payload-input") as HTMLInputElement).value = String(draft.payload_offset);
  $("payload-row").classList.toggle("enabled", draft.mode === "compliant");
  $("gains-row").classList.toggle("enabled", draft.mode === "impedance");
}

for (const m of ["position", "force", "impedance", "compliant"] as Mode[]) {
  $(`mode-${m}`).addEventListener("click", () => setMode(m));
}
$("reset-btn").addEventListener("click", () => session.send({ type: "reset" }));

($("v-slider") as HTMLInputElement).addEventListener("input", (ev) => {
  draft.v_cmd = Number((ev.target as HTMLInputElement).value);
  $("v-value").textContent = draft.v_cmd.toFixed(2);
  draftDirty = true;
});
window.addEventListener("keydown", (ev) => {
  if (ev.key === "ArrowRight") draft.v_cmd = Math.min(LIMITS.velocity[1], draft.v_cmd + 0.1);
  else if (ev.key === "ArrowLeft") draft.v_cmd = Math.max(LIMITS.velocity[0], draft.v_cmd - 0.1);
  else if (ev.key === " ") draft.v_cmd = 0;
  else return;
  ev.preventDefault();
  draftDirty = true;
  syncDraftUi();
});
($("kp-input") as HTMLInputElement).addEventListener("change", (ev) => {
  draft.gains.kp = Number((ev.target as HTMLInputElement).value);
  draftDirty = true;
});
($("kd-input") as HTMLInputElement).addEventListener("change", (ev) => {
  draft.gains.kd = Number((ev.target as HTMLInputElement).value);
  draftDirty = true;
});
($("payload-input") as HTMLInputElement).addEventListener("change", (ev) => {
  draft.payload_offset = Number((ev.target as HTMLInputElement).value);
  draftDirty = true;
});

// marker/arrow dragging on the scene canvas
let dragging: "target" | "force" | null = null;

function canvasToWorld(ev: MouseEvent): [number, number] {
  const rect = sceneCanvas.getBoundingClientRect();
  const px = (ev.clientX - rect.left) * (sceneCanvas.width / rect.width);
  const py = (ev.clientY - rect.top) * (sceneCanvas.height / rect.height);
  const view = defaultView(sceneCtx);
  return [
    view.centerX + (px - sceneCanvas.width / 2) / view.pxPerMeter,
    (view.groundY - py) / view.pxPerMeter,
  ];
}

sceneCanvas.addEventListener("mousedown", (ev) => {
  dragging = draft.mode === "position" ? "target"
    : draft.mode === "force" ? "force" : null;
  if (dragging) applyDrag(ev);
});
window.addEventListener("mousemove", (ev) => {
  if (dragging) applyDrag(ev);
});
window.addEventListener("mouseup", () => {
  dragging = null;
});

function applyDrag(ev: MouseEvent) {
  const f = session.latest;
  if (!f) return;
  const [wx, wz] = canvasToWorld(ev);
  if (dragging === "target") {
    const [r, th] = xyToPolar(wx, wz, f.frame_origin);
    draft.p_cmd = [r, th];            // clamped on encode: marker stays in the arc
  } else if (dragging === "force") {
    draft.F_cmd = [(wx - f.gripper[0]) / FORCE_ARROW_SCALE,
                   (wz - f.gripper[1]) / FORCE_ARROW_SCALE];
  }
  Object.assign(draft, clampDraft(draft));
  draftDirty = true;
}

// command dispatch: immediately on change, at most once per tick
setInterval(() => {
  if (draftDirty && session.state === "open") {
    draftDirty = false;
    sendDraft();
  }
}, 20);

// ---------------------------------------------------------------------------
// render loop

function renderLoop() {
  requestAnimationFrame(renderLoop);
  const f = session.latest;
  if (!f || !session.hello) return;
  framesThisSecond += 1;
  const now = performance.now();
  if (now - lastFpsStamp > 1000) {
    fps = framesThisSecond;
    framesThisSecond = 0;
    lastFpsStamp = now;
    $("status").textContent =
      `mode ${f.mode} | t ${f.t.toFixed(1)} s | render ${fps} fps | ` +
      `frames ${session.framesReceived} | reward ${f.reward.total.toFixed(2)}`;
  }
  const overlay = lastTermination && now < lastTermination.until
    ? { termination: { type: "event", seq: 0, event: "termination",
                       cause: lastTermination.cause } as never }
    : null;
  drawScene(sceneCtx, session.hello.model, f, defaultView(sceneCtx), overlay);

  // drafted command preview (outline) on top of the server-echoed state
  if (draft.mode === "position") {
    const c = clampDraft(draft);
    const view = defaultView(sceneCtx);
    const [tx, ty] = toPx(view, sceneCanvas.width,
                          f.frame_origin[0] + c.p_cmd[0] * Math.cos(c.p_cmd[1]),
                          f.frame_origin[1] + c.p_cmd[0] * Math.sin(c.p_cmd[1]));
    sceneCtx.strokeStyle = "#3af";
    sceneCtx.globalAlpha = 0.5;
    sceneCtx.beginPath();
    sceneCtx.arc(tx, ty, 10, 0, Math.PI * 2);
    sceneCtx.stroke();
    sceneCtx.globalAlpha = 1;
  }

  const w = chartCanvas.width;
  const h3 = chartCanvas.height / 3;
  chartCtx.clearRect(0, 0, w, chartCanvas.height);
  drawStripChart(chartCtx, 0, 0, w, h3 - 4, [
    { values: traces.fCmdX.values(), color: "#6cf" },
    { values: traces.fMeasX.values(), color: "#fa4" },
    { values: traces.fEstX.values(), color: "#9f9", dashed: true },
  ], "force x [N]: cmd / measured / estimated", 80);
  drawStripChart(chartCtx, 0, h3, w, h3 - 4, [
    { values: traces.fCmdZ.values(), color: "#6cf" },
    { values: traces.fMeasZ.values(), color: "#fa4" },
    { values: traces.fEstZ.values(), color: "#9f9", dashed: true },
  ], "force z [N]", 80);
  drawStripChart(chartCtx, 0, 2 * h3, w, h3 - 4, [
    { values: traces.posErr.values(), color: "#e8e" },
  ], "gripper position error [m]", 0.5);
}

session.connect();
renderLoop();
