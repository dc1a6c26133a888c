// Canvas scene: robot linkage, ground, force-field spring, command/measured/
// estimated force arrows, and a termination overlay. Drawing goes through a
// minimal context interface so tests can record draw calls.
import { segments, sitePosition, polarToXy } from "./kinematics.js";
import { EventFrame, ModelInfo, StateFrame } from "./protocol.js";

export interface Ctx2D {
  canvas: { width: number; height: number };
  lineWidth: number;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  fillStyle: string | CanvasGradient | CanvasPattern;
  font: string;
  globalAlpha: number;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  stroke(): void;
  fill(): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  clearRect(x: number, y: number, w: number, h: number): void;
  fillText(t: string, x: number, y: number): void;
  setLineDash(d: number[]): void;
}

export interface View {
  pxPerMeter: number;
  centerX: number; // world x at canvas center
  groundY: number; // canvas y of world z = 0
}

export function defaultView(ctx: Ctx2D): View {
  return {
    pxPerMeter: ctx.canvas.width / 3.2,
    centerX: 0.45,
    groundY: ctx.canvas.height * 0.82,
  };
}

export function toPx(view: View, w: number, x: number, z: number): [number, number] {
  return [w / 2 + (x - view.centerX) * view.pxPerMeter,
          view.groundY - z * view.pxPerMeter];
}

function arrow(ctx: Ctx2D, view: View, w: number, from: [number, number],
               vec: [number, number], scale: number, style: string,
               dashed = false, outline = false) {
  const mag = Math.hypot(vec[0], vec[1]);
  if (mag < 1e-6) return;
  const [x0, y0] = toPx(view, w, from[0], from[1]);
  const [x1, y1] = toPx(view, w, from[0] + vec[0] * scale, from[1] + vec[1] * scale);
  ctx.setLineDash(dashed ? [6, 4] : []);
  ctx.strokeStyle = style;
  ctx.lineWidth = outline ? 4 : 2;
  ctx.globalAlpha = outline ? 0.45 : 1.0;
  ctx.beginPath();
  ctx.moveTo(x0, y0);
  ctx.lineTo(x1, y1);
  ctx.stroke();
  // arrowhead
  const ang = Math.atan2(y1 - y0, x1 - x0);
  ctx.beginPath();
  ctx.moveTo(x1, y1);
  ctx.lineTo(x1 - 9 * Math.cos(ang - 0.4), y1 - 9 * Math.sin(ang - 0.4));
  ctx.moveTo(x1, y1);
  ctx.lineTo(x1 - 9 * Math.cos(ang + 0.4), y1 - 9 * Math.sin(ang + 0.4));
  ctx.stroke();
  ctx.globalAlpha = 1.0;
  ctx.setLineDash([]);
}

function spring(ctx: Ctx2D, view: View, w: number, a: [number, number],
                b: [number, number]) {
  const [x0, y0] = toPx(view, w, a[0], a[1]);
  const [x1, y1] = toPx(view, w, b[0], b[1]);
  const n = 8;
  ctx.strokeStyle = "#c96";
  ctx.lineWidth = 1.5;
  ctx.setLineDash([]);
  ctx.beginPath();
  ctx.moveTo(x0, y0);
  const dx = (x1 - x0) / n;
  const dy = (y1 - y0) / n;
  const px = -(y1 - y0);
  const py = x1 - x0;
  const norm = Math.hypot(px, py) || 1;
  for (let i = 1; i < n; i++) {
    const off = i % 2 === 0 ? 5 : -5;
    ctx.lineTo(x0 + dx * i + (px / norm) * off, y0 + dy * i + (py / norm) * off);
  }
  ctx.lineTo(x1, y1);
  ctx.stroke();
}

export const FORCE_ARROW_SCALE = 0.004; // meters of arrow per newton

export interface Overlay {
  termination: EventFrame | null;
}

export function drawScene(ctx: Ctx2D, model: ModelInfo, frame: StateFrame,
                          view: View, overlay: Overlay | null = null) {
  const w = ctx.canvas.width;
  const h = ctx.canvas.height;
  ctx.clearRect(0, 0, w, h);

  // ground
  ctx.fillStyle = "#2a2d33";
  ctx.fillRect(0, view.groundY, w, h - view.groundY);
  ctx.strokeStyle = "#555";
  ctx.lineWidth = 1;
  ctx.beginPath();
  ctx.moveTo(0, view.groundY);
  ctx.lineTo(w, view.groundY);
  ctx.stroke();

  // command target (position mode): marker + reach arc hints
  if (frame.c_f === 0) {
    const target = polarToXy(frame.p_cmd[0], frame.p_cmd[1], frame.frame_origin);
    const [tx, ty] = toPx(view, w, target[0], target[1]);
    ctx.strokeStyle = "#6cf";
    ctx.lineWidth = 2;
    ctx.beginPath();
    ctx.arc(tx, ty, 7, 0, Math.PI * 2);
    ctx.stroke();
    ctx.beginPath();
    ctx.moveTo(tx - 11, ty);
    ctx.lineTo(tx + 11, ty);
    ctx.moveTo(tx, ty - 11);
    ctx.lineTo(tx, ty + 11);
    ctx.stroke();
  }

  // field setpoint + spring to the gripper
  if (frame.field_setpoint) {
    const [sx, sy] = toPx(view, w, frame.field_setpoint[0], frame.field_setpoint[1]);
    spring(ctx, view, w, frame.field_setpoint, frame.gripper);
    ctx.fillStyle = "#fc3";
    ctx.beginPath();
    ctx.arc(sx, sy, 5, 0, Math.PI * 2);
    ctx.fill();
  }

  // robot linkage
  for (const seg of segments(model, frame)) {
    const [x0, y0] = toPx(view, w, seg.a[0], seg.a[1]);
    const [x1, y1] = toPx(view, w, seg.b[0], seg.b[1]);
    ctx.strokeStyle = seg.link === "base" ? "#9ab" : "#dde";
    ctx.lineWidth = Math.max(3, seg.thickness * view.pxPerMeter * 0.5);
    ctx.setLineDash([]);
    ctx.beginPath();
    ctx.moveTo(x0, y0);
    ctx.lineTo(x1, y1);
    ctx.stroke();
  }

  // gripper
  const [gx, gy] = toPx(view, w, frame.gripper[0], frame.gripper[1]);
  ctx.fillStyle = "#f66";
  ctx.beginPath();
  ctx.arc(gx, gy, 5, 0, Math.PI * 2);
  ctx.fill();

  // force arrows at the gripper: commanded = outlined, measured = solid,
  // estimated = dashed
  arrow(ctx, view, w, frame.gripper, frame.F_cmd, FORCE_ARROW_SCALE, "#6cf", false, true);
  arrow(ctx, view, w, frame.gripper, frame.measured_force, FORCE_ARROW_SCALE, "#fa4");
  arrow(ctx, view, w, frame.gripper, frame.estimated_force, FORCE_ARROW_SCALE, "#9f9", true);

  if (overlay?.termination) {
    ctx.fillStyle = "rgba(120, 20, 20, 0.55)";
    ctx.fillRect(0, 0, w, h);
    ctx.fillStyle = "#fff";
    ctx.font = "20px system-ui";
    ctx.fillText(`episode terminated: ${overlay.termination.cause} (auto-reset)`,
                 w * 0.18, h * 0.45);
  }
}

export interface ChartSeries {
  values: Float64Array;
  color: string;
  dashed?: boolean;
}

export function drawStripChart(ctx: Ctx2D, x: number, y: number, w: number,
                               h: number, series: ChartSeries[], label: string,
                               yAbs: number) {
  ctx.fillStyle = "#14161a";
  ctx.fillRect(x, y, w, h);
  ctx.strokeStyle = "#333";
  ctx.lineWidth = 1;
  ctx.setLineDash([]);
  ctx.beginPath();
  ctx.moveTo(x, y + h / 2);
  ctx.lineTo(x + w, y + h / 2);
  ctx.stroke();
  for (const s of series) {
    const n = s.values.length;
    if (n < 2) continue;
    ctx.strokeStyle = s.color;
    ctx.setLineDash(s.dashed ? [4, 3] : []);
    ctx.lineWidth = 1.2;
    ctx.beginPath();
    for (let i = 0; i < n; i++) {
      const px = x + (i / (n - 1)) * w;
      const py = y + h / 2 - (s.values[i] / yAbs) * (h / 2);
      const pc = Math.min(y + h, Math.max(y, py));
      if (i === 0) ctx.moveTo(px, pc);
      else ctx.lineTo(px, pc);
    }
    ctx.stroke();
  }
  ctx.setLineDash([]);
  ctx.fillStyle = "#889";
  ctx.font = "11px system-ui";
  ctx.fillText(label, x + 6, y + 13);
}
