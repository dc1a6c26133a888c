// Generated by scripts/gen.mjs from limits.json; do not edit.
export const LIMITS = {
  "force": 70,
  "r": [
    0.3,
    0.9
  ],
  "theta": [
    -1.2566370614359172,
    1.2566370614359172
  ],
  "velocity": [
    -1,
    1
  ],
  "payload_offset": 70,
  "impedance_kp": [
    0,
    2000
  ],
  "impedance_kd": [
    0,
    100
  ]
} as const;
