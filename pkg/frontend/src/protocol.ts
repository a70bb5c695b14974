/** Line-delimited JSON bridge protocol, version 1.
 *
 * The server streams `state` frames at the policy rate; the client sends
 * `intervene_toggle`, `marker_delta`, and `hand_pose` messages. This module
 * owns the wire types, parsing, and validation for both directions.
 */

export const PROTOCOL_VERSION = 1;

export interface StateFrame {
  type: "state";
  v: number;
  t: number;
  tick: number;
  i_t: 0 | 1;
  mode: string;
  task_id: string;
  q_arm: number[];
  hand_act: number[];
  ee: number[];
  fingertips: number[][];
  object: number[];
  object_size: number;
  extraction: number;
  pinched: boolean;
  grasped: boolean;
  outcome: string;
}

export interface ErrorFrame {
  type: "error";
  v: number;
  reason: string;
}

export type ServerFrame = StateFrame | ErrorFrame;

export interface InterveneToggle {
  type: "intervene_toggle";
}

export interface MarkerDelta {
  type: "marker_delta";
  dx: number;
  dy: number;
  dz: number;
  droll: number;
  dpitch: number;
  dyaw: number;
}

export interface HandPose {
  type: "hand_pose";
  curls: [number, number, number, number, number];
}

export type ClientMessage = InterveneToggle | MarkerDelta | HandPose;

export class ProtocolError extends Error {}

function isFiniteNumber(x: unknown): x is number {
  return typeof x === "number" && Number.isFinite(x);
}

function isNumberArray(x: unknown, length?: number): x is number[] {
  return (
    Array.isArray(x) &&
    (length === undefined || x.length === length) &&
    x.every(isFiniteNumber)
  );
}

/** Parse one server line; throws ProtocolError on anything malformed. */
export function parseServerFrame(line: string): ServerFrame {
  let raw: unknown;
  try {
    raw = JSON.parse(line);
  } catch {
    throw new ProtocolError(`not valid JSON: ${line.slice(0, 80)}`);
  }
  if (typeof raw !== "object" || raw === null || !("type" in raw)) {
    throw new ProtocolError("frame must be an object with a 'type' field");
  }
  const frame = raw as Record<string, unknown>;
  if (frame.type === "error") {
    if (typeof frame.reason !== "string") {
      throw new ProtocolError("error frame requires a string 'reason'");
    }
    return { type: "error", v: Number(frame.v ?? PROTOCOL_VERSION), reason: frame.reason };
  }
  if (frame.type !== "state") {
    throw new ProtocolError(`unknown server frame type ${String(frame.type)}`);
  }
  if (frame.v !== PROTOCOL_VERSION) {
    throw new ProtocolError(`unsupported protocol version ${String(frame.v)}`);
  }
  if (
    !isFiniteNumber(frame.t) ||
    !isFiniteNumber(frame.tick) ||
    (frame.i_t !== 0 && frame.i_t !== 1) ||
    typeof frame.mode !== "string" ||
    typeof frame.task_id !== "string" ||
    !isNumberArray(frame.q_arm) ||
    !isNumberArray(frame.hand_act) ||
    !isNumberArray(frame.ee) ||
    !Array.isArray(frame.fingertips) ||
    !frame.fingertips.every((tip) => isNumberArray(tip, 3)) ||
    !isNumberArray(frame.object, 3) ||
    !isFiniteNumber(frame.object_size) ||
    !isFiniteNumber(frame.extraction) ||
    typeof frame.pinched !== "boolean" ||
    typeof frame.grasped !== "boolean" ||
    typeof frame.outcome !== "string"
  ) {
    throw new ProtocolError("state frame payload is malformed");
  }
  return frame as unknown as StateFrame;
}

/** Serialize one client message to a protocol line (without newline). */
export function serializeClientMessage(msg: ClientMessage): string {
  if (msg.type === "hand_pose") {
    if (msg.curls.length !== 5 || !msg.curls.every(isFiniteNumber)) {
      throw new ProtocolError("hand_pose requires exactly 5 finite curls");
    }
  }
  if (msg.type === "marker_delta") {
    for (const v of [msg.dx, msg.dy, msg.dz, msg.droll, msg.dpitch, msg.dyaw]) {
      if (!isFiniteNumber(v)) {
        throw new ProtocolError("marker_delta fields must be finite numbers");
      }
    }
  }
  return JSON.stringify(msg);
}
