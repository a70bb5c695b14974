/** Client session state: a pure mirror of what the server last reported.
 *
 * Invariant: `mode` and `i_t` always come from the last server state frame —
 * the client never speculates about authority, even right after sending a
 * toggle.
 */

import { ServerFrame, StateFrame } from "./protocol.js";

export type ConnectionStatus = "disconnected" | "connecting" | "connected";

export interface InputState {
  heldKeys: Set<string>;
  dragVector: { dx: number; dy: number };
  curlSliders: [number, number, number, number, number];
}

export interface ClientSessionState {
  status: ConnectionStatus;
  lastState: StateFrame | null;
  lastError: string | null;
  input: InputState;
  /** Authority mirror; equals last server-reported mode, never client-set. */
  mode: string;
  i_t: 0 | 1;
}

export function initialSession(): ClientSessionState {
  return {
    status: "disconnected",
    lastState: null,
    lastError: null,
    input: {
      heldKeys: new Set(),
      dragVector: { dx: 0, dy: 0 },
      curlSliders: [0, 0, 0, 0, 0],
    },
    mode: "autonomous",
    i_t: 0,
  };
}

/** Fold one server frame into the session; returns the same object mutated. */
export function applyServerFrame(
  session: ClientSessionState,
  frame: ServerFrame,
): ClientSessionState {
  if (frame.type === "error") {
    session.lastError = frame.reason;
    return session;
  }
  session.lastState = frame;
  session.mode = frame.mode;
  session.i_t = frame.i_t;
  return session;
}

export function setConnectionStatus(
  session: ClientSessionState,
  status: ConnectionStatus,
): ClientSessionState {
  session.status = status;
  return session;
}
