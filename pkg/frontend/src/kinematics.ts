// Planar forward kinematics mirrored from the simulator: enough to draw the
// linkage from a state frame plus the model geometry in the hello message.
import { ModelInfo, StateFrame } from "./protocol.js";

export interface Segment {
  a: [number, number];
  b: [number, number];
  link: string;
  thickness: number;
}

export function linkPoses(model: ModelInfo, frame: StateFrame) {
  const L = model.links.length;
  const nb = model.floating ? 3 : 0;
  const angles = new Array<number>(L).fill(0);
  const origins: [number, number][] = new Array(L);
  const basePitch = model.floating ? frame.q[2] : frame.base[2];
  origins[0] = model.floating ? [frame.q[0], frame.q[1]] : [frame.base[0], frame.base[1]];
  angles[0] = basePitch;
  for (let j = 0; j < model.joints.length; j++) {
    const { parent, child, pivot } = model.joints[j];
    const ap = angles[parent];
    angles[child] = ap + frame.q[nb + j];
    const [px, pz] = pivot;
    origins[child] = [
      origins[parent][0] + Math.cos(ap) * px - Math.sin(ap) * pz,
      origins[parent][1] + Math.sin(ap) * px + Math.cos(ap) * pz,
    ];
  }
  return { angles, origins };
}

export function segments(model: ModelInfo, frame: StateFrame): Segment[] {
  const { angles, origins } = linkPoses(model, frame);
  const out: Segment[] = [];
  for (let l = 0; l < model.links.length; l++) {
    const len = model.links[l].length;
    const a = origins[l];
    const half = l === 0 ? len / 2 : 0; // the base link is centered on its origin
    const ax = a[0] - Math.cos(angles[l]) * half;
    const az = a[1] - Math.sin(angles[l]) * half;
    out.push({
      a: [ax, az],
      b: [ax + Math.cos(angles[l]) * (l === 0 ? len : len),
          az + Math.sin(angles[l]) * (l === 0 ? len : len)],
      link: model.links[l].name,
      thickness: model.links[l].thickness || 0.04,
    });
  }
  return out;
}

export function sitePosition(model: ModelInfo, frame: StateFrame,
                             site: string): [number, number] {
  const s = model.sites[site];
  const { angles, origins } = linkPoses(model, frame);
  const a = angles[s.link];
  return [
    origins[s.link][0] + Math.cos(a) * s.offset[0] - Math.sin(a) * s.offset[1],
    origins[s.link][1] + Math.sin(a) * s.offset[0] + Math.cos(a) * s.offset[1],
  ];
}

export function polarToXy(r: number, theta: number,
                          origin: [number, number]): [number, number] {
  return [origin[0] + r * Math.cos(theta), origin[1] + r * Math.sin(theta)];
}

export function xyToPolar(x: number, z: number,
                          origin: [number, number]): [number, number] {
  const dx = x - origin[0];
  const dz = z - origin[1];
  return [Math.hypot(dx, dz), Math.atan2(dz, dx)];
}
