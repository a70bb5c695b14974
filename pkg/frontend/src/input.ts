/** Maps raw UI events to rate-limited client messages.
 *
 * - "i" keydown toggles intervention; key repeat is debounced until keyup.
 * - Pointer drags become marker_delta translations; with a modifier held
 *   they become rotations. Capped at 30 Hz (arm command rate).
 * - Curl slider motion becomes hand_pose messages, capped at 90 Hz.
 * - Events arriving while disconnected are handed to the transport, which
 *   buffers them for up to one second.
 */

import { ClientMessage, MarkerDelta } from "./protocol.js";

export const MARKER_RATE_HZ = 30;
export const HAND_RATE_HZ = 90;

export interface KeyEventLike {
  key: string;
  kind: "down" | "up";
}

export interface DragEventLike {
  dx: number;
  dy: number;
  dz?: number;
  modifier?: boolean;
}

export const DRAG_TO_METERS = 0.0005; // pixels of drag per emitted meter
export const DRAG_TO_RADIANS = 0.002;

class RateLimiter {
  private lastEmit = -Infinity;
  constructor(private readonly minIntervalMs: number) {}

  allow(nowMs: number): boolean {
    if (nowMs - this.lastEmit < this.minIntervalMs) return false;
    this.lastEmit = nowMs;
    return true;
  }
}

export class InputMapper {
  private iHeld = false;
  private readonly markerLimiter = new RateLimiter(1000 / MARKER_RATE_HZ);
  private readonly handLimiter = new RateLimiter(1000 / HAND_RATE_HZ);
  private readonly clock: () => number;

  constructor(clock: () => number = Date.now) {
    this.clock = clock;
  }

  /** Key events: exactly one toggle per physical press of "i". */
  onKey(event: KeyEventLike): ClientMessage[] {
    if (event.key.toLowerCase() !== "i") return [];
    if (event.kind === "up") {
      this.iHeld = false;
      return [];
    }
    if (this.iHeld) return []; // auto-repeat while held: debounced
    this.iHeld = true;
    return [{ type: "intervene_toggle" }];
  }

  /** Pointer drags: translations, or rotations with the modifier held. */
  onDrag(event: DragEventLike): ClientMessage[] {
    if (!this.markerLimiter.allow(this.clock())) return [];
    const delta: MarkerDelta = {
      type: "marker_delta",
      dx: 0,
      dy: 0,
      dz: 0,
      droll: 0,
      dpitch: 0,
      dyaw: 0,
    };
    if (event.modifier) {
      delta.droll = event.dx * DRAG_TO_RADIANS;
      delta.dpitch = event.dy * DRAG_TO_RADIANS;
      delta.dyaw = (event.dz ?? 0) * DRAG_TO_RADIANS;
    } else {
      delta.dx = event.dx * DRAG_TO_METERS;
      delta.dy = event.dy * DRAG_TO_METERS;
      delta.dz = (event.dz ?? 0) * DRAG_TO_METERS;
    }
    return [delta];
  }

  /** Slider positions: one hand_pose per allowed tick, clamped to [0, 1]. */
  onSliders(curls: number[]): ClientMessage[] {
    if (curls.length !== 5) return [];
    if (!this.handLimiter.allow(this.clock())) return [];
    const clamped = curls.map((c) => Math.min(1, Math.max(0, c))) as [
      number,
      number,
      number,
      number,
      number,
    ];
    return [{ type: "hand_pose", curls: clamped }];
  }
}
