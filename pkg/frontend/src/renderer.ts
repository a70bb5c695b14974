/** 2.5D scene renderer: turns a state frame into a list of draw commands.
 *
 * Top and side orthographic projections of the arm skeleton, fingertips,
 * and object, plus an extraction progress bar and an intervention banner.
 * Kept as pure data so a canvas adapter (or a test) can consume it; the UI
 * never computes scene state itself — everything derives from the frame.
 */

import { ServerFrame, StateFrame } from "./protocol.js";

export type DrawCommand =
  | { kind: "clear" }
  | { kind: "polyline"; view: "top" | "side"; points: [number, number][]; label: string }
  | { kind: "point"; view: "top" | "side"; at: [number, number]; label: string }
  | { kind: "circle"; view: "top" | "side"; at: [number, number]; r: number; label: string }
  | { kind: "bar"; fraction: number; success: boolean; label: string }
  | { kind: "banner"; text: string }
  | { kind: "badge"; text: string };

function project(view: "top" | "side", p: number[]): [number, number] {
  // top view: x/y plane; side view: x/z plane
  return view === "top" ? [p[0] ?? 0, p[1] ?? 0] : [p[0] ?? 0, p[2] ?? 0];
}

const EXTRACTION_SUCCESS = 0.5;

function sceneCommands(state: StateFrame): DrawCommand[] {
  const commands: DrawCommand[] = [{ kind: "clear" }];
  for (const view of ["top", "side"] as const) {
    commands.push({
      kind: "polyline",
      view,
      points: [project(view, [0, 0, 0]), project(view, state.ee)],
      label: "arm",
    });
    state.fingertips.forEach((tip, i) => {
      commands.push({ kind: "point", view, at: project(view, tip), label: `tip${i}` });
    });
    commands.push({
      kind: "circle",
      view,
      at: project(view, state.object),
      r: state.object_size,
      label: "object",
    });
  }
  commands.push({
    kind: "bar",
    fraction: Math.min(1, Math.max(0, state.extraction)),
    success: state.extraction >= EXTRACTION_SUCCESS || state.outcome === "success",
    label: "extraction",
  });
  if (state.i_t === 1) {
    commands.push({ kind: "banner", text: "OPERATOR IN CONTROL" });
  }
  if (state.outcome !== "running") {
    commands.push({ kind: "badge", text: state.outcome });
  }
  return commands;
}

/** Render a frame; malformed input yields an error badge, never a throw. */
export function renderScene(frame: ServerFrame | null | undefined): DrawCommand[] {
  try {
    if (!frame) return [{ kind: "clear" }, { kind: "badge", text: "no signal" }];
    if (frame.type === "error") {
      return [{ kind: "clear" }, { kind: "badge", text: `server error: ${frame.reason}` }];
    }
    return sceneCommands(frame);
  } catch (err) {
    return [{ kind: "clear" }, { kind: "badge", text: `render error: ${(err as Error).message}` }];
  }
}
