"""Marker-based teleoperation: anchor-relative arm mapping, the intervention
state machine, the control multiplexer, and the multi-rate scheduler.

Rates: policy inference at 20 Hz, arm teleop at 30 Hz, hand loop at 90 Hz.
All three divide a 180 Hz base tick, so the simulated-clock scheduler is a
single deterministic loop; a wall-clock mode paces the same loop for live use.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, compose, inverse

__all__ = [
    "BASE_RATE_HZ",
    "POLICY_RATE_HZ",
    "ARM_RATE_HZ",
    "HAND_RATE_HZ",
    "MarkerFrame",
    "AnchorState",
    "InterventionState",
    "ProtocolError",
    "map_marker_to_ee",
    "multiplex",
    "TickRecord",
    "EpisodeLog",
    "run_scheduler",
    "save_marker_replay",
    "load_marker_replay",
]

BASE_RATE_HZ = 180
POLICY_RATE_HZ = 20
ARM_RATE_HZ = 30
HAND_RATE_HZ = 90
_POLICY_DIV = BASE_RATE_HZ // POLICY_RATE_HZ  # 9
_ARM_DIV = BASE_RATE_HZ // ARM_RATE_HZ  # 6
_HAND_DIV = BASE_RATE_HZ // HAND_RATE_HZ  # 2

STALE_TICK_LIMIT = 3


class ProtocolError(RuntimeError):
    """Intervention state machine misuse (double trigger/release)."""


@dataclass(frozen=True)
class MarkerFrame:
    """Timestamped 6-DoF pose of the handheld marker cube (camera frame)."""

    timestamp: float
    pose: Pose


@dataclass(frozen=True)
class AnchorState:
    """Poses captured at the takeover instant; all later motion is relative."""

    t_ee0: Pose
    t_m0: Pose
    t_robot_cube: Pose


def map_marker_to_ee(anchor: AnchorState, t_m: Pose) -> Pose:
    """EE target = T_EE0 · T_robot_cube⁻¹ · T_M0⁻¹ · T_M · T_robot_cube."""
    return compose(
        anchor.t_ee0,
        inverse(anchor.t_robot_cube),
        inverse(anchor.t_m0),
        t_m,
        anchor.t_robot_cube,
    )


def marker_from_ee(anchor: AnchorState, t_ee: Pose) -> Pose:
    """Inverse of map_marker_to_ee: the marker pose that commands `t_ee`."""
    return compose(
        anchor.t_m0,
        anchor.t_robot_cube,
        inverse(anchor.t_ee0),
        t_ee,
        inverse(anchor.t_robot_cube),
    )


@dataclass
class InterventionState:
    """Mode + binary flag mirror + alternating transition log."""

    mode: str = "autonomous"
    transitions: list = field(default_factory=list)
    anchor: AnchorState | None = None

    @property
    def i_t(self) -> int:
        return 1 if self.mode == "intervening" else 0

    def trigger(self, timestamp: float, anchor: AnchorState) -> None:
        if self.mode != "autonomous":
            raise ProtocolError("trigger while already intervening")
        self.mode = "intervening"
        self.anchor = anchor
        self.transitions.append((timestamp, "intervening"))

    def release(self, timestamp: float) -> None:
        if self.mode != "intervening":
            raise ProtocolError("release without prior trigger")
        self.mode = "autonomous"
        self.anchor = None
        self.transitions.append((timestamp, "autonomous"))


def multiplex(i_t: int, u_policy, u_human):
    """Control law: the human command is executed exactly when I_t = 1."""
    return u_human if i_t else u_policy


# ---------------------------------------------------------------------------
# Scheduler
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TickRecord:
    """One executed hand-loop tick."""

    tick: int
    time: float
    i_t: int
    source: str  # "policy" or "human"
    arm_command: np.ndarray
    hand_command: np.ndarray
    observation: np.ndarray


@dataclass
class EpisodeLog:
    records: list = field(default_factory=list)
    transitions: list = field(default_factory=list)
    faults: list = field(default_factory=list)
    policy_inferences: int = 0
    arm_ticks: int = 0
    hand_ticks: int = 0
    outcome: str = "running"

    def intervention_windows(self):
        """[(start_tick, end_tick_exclusive), ...] from the logged flags."""
        windows, start = [], None
        for r in self.records:
            if r.i_t and start is None:
                start = r.tick
            elif not r.i_t and start is not None:
                windows.append((start, r.tick))
                start = None
        if start is not None:
            windows.append((start, self.records[-1].tick + 1))
        return windows


def _chunk_arm_target(chunk, k, frac, n):
    """Arm part of chunk step k, linearly interpolated toward step k+1."""
    h = len(chunk)
    a = chunk[min(k, h - 1), :n]
    b = chunk[min(k + 1, h - 1), :n]
    return (1.0 - frac) * a + frac * b


def run_scheduler(policy_fn, source, plant, duration_s: float,
                  t_robot_cube: Pose | None = None, realtime: bool = False) -> EpisodeLog:
    """Run the three-rate control loop for `duration_s` simulated seconds.

    policy_fn(observation) -> (H, n+m) action chunk.
    source: teleop provider with
        wants_intervention(t, plant) -> bool,
        marker(t, anchor) -> MarkerFrame | None   (arm ticks while intervening),
        hand_command(t) -> (m,) array | None       (hand ticks while intervening).
    plant: environment adapter with
        observation() -> vector, ee_pose() -> Pose, arm_dof -> int,
        solve_arm(pose, seed_q) -> q_arm, set_arm_target(q), set_hand_target(x),
        step_control() -> None (advance one 90 Hz control tick),
        q_arm -> current arm configuration, done() -> bool.
    """
    t_robot_cube = t_robot_cube or Pose.identity()
    log = EpisodeLog()
    n = plant.arm_dof
    chunk = None
    chunk_tick = 0
    state = InterventionState()
    latest_marker = MarkerFrame(0.0, Pose.identity())
    stale_marker = 0
    stale_hand = 0
    arm_target = np.asarray(plant.q_arm, dtype=float).copy()
    hand_target = None
    total_ticks = int(round(duration_s * BASE_RATE_HZ))
    wall_start = time.monotonic()

    for tick in range(total_ticks):
        t = tick / BASE_RATE_HZ
        if realtime:
            lag = wall_start + t - time.monotonic()
            if lag > 0:
                time.sleep(lag)

        # Intervention edges are sampled at the base rate.
        want = bool(source.wants_intervention(t, plant))
        if want and state.mode == "autonomous":
            anchor = AnchorState(plant.ee_pose(), latest_marker.pose, t_robot_cube)
            state.trigger(t, anchor)
            log.transitions.append((t, "intervening"))
        elif not want and state.mode == "intervening":
            state.release(t)
            log.transitions.append((t, "autonomous"))

        if tick % _POLICY_DIV == 0:
            obs = plant.observation()
            proposed = np.asarray(policy_fn(obs), dtype=float)
            log.policy_inferences += 1
            if state.i_t == 0:  # stale-during-intervention: discard, keep timing
                chunk = proposed
                chunk_tick = tick
        if tick % _ARM_DIV == 0:
            log.arm_ticks += 1
            if state.i_t:
                frame = source.marker(t, state.anchor)
                if frame is None:
                    stale_marker += 1
                    if stale_marker > STALE_TICK_LIMIT:
                        log.faults.append((t, "arm", "stale marker source"))
                else:
                    stale_marker = 0
                    latest_marker = frame
                    target_pose = map_marker_to_ee(state.anchor, frame.pose)
                    arm_target = plant.solve_arm(target_pose, np.asarray(plant.q_arm))
            elif chunk is not None:
                k_f = (tick - chunk_tick) / _HAND_DIV
                k = int(k_f)
                arm_target = _chunk_arm_target(chunk, k, k_f - k, n)
            plant.set_arm_target(arm_target)
        if tick % _HAND_DIV == 0:
            log.hand_ticks += 1
            u_policy = None
            if chunk is not None:
                k = min((tick - chunk_tick) // _HAND_DIV, len(chunk) - 1)
                u_policy = chunk[k, n:]
            u_human = source.hand_command(t) if state.i_t else None
            if state.i_t and u_human is None:
                stale_hand += 1
                if stale_hand > STALE_TICK_LIMIT:
                    log.faults.append((t, "hand", "stale hand source"))
            elif state.i_t:
                stale_hand = 0
            cmd = multiplex(state.i_t, u_policy, u_human)
            if cmd is not None:
                hand_target = np.asarray(cmd, dtype=float)
                plant.set_hand_target(hand_target)
            plant.step_control()
            log.records.append(
                TickRecord(
                    tick=tick // _HAND_DIV,
                    time=t,
                    i_t=state.i_t,
                    source="human" if state.i_t else "policy",
                    arm_command=arm_target.copy(),
                    hand_command=(hand_target.copy() if hand_target is not None
                                  else np.zeros(0)),
                    observation=plant.observation(),
                )
            )
            if plant.done():
                break
    log.outcome = plant.outcome() if hasattr(plant, "outcome") else "running"
    return log


# ---------------------------------------------------------------------------
# Marker replay files: line-delimited JSON {t, qw,qx,qy,qz, x,y,z}
# ---------------------------------------------------------------------------


def save_marker_replay(path, frames) -> None:
    last = -np.inf
    with open(path, "w") as fh:
        for f in frames:
            if f.timestamp <= last:
                raise ValueError("marker timestamps must strictly increase")
            last = f.timestamp
            qw, qx, qy, qz = f.pose.quaternion()
            x, y, z = f.pose.translation
            fh.write(json.dumps({
                "t": f.timestamp, "qw": qw, "qx": qx, "qy": qy, "qz": qz,
                "x": x, "y": y, "z": z,
            }) + "\n")


def load_marker_replay(path) -> list:
    frames, last = [], -np.inf
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            if d["t"] <= last:
                raise ValueError("marker timestamps must strictly increase")
            last = d["t"]
            pose = Pose.from_quaternion(
                d["qw"], d["qx"], d["qy"], d["qz"], (d["x"], d["y"], d["z"])
            )
            frames.append(MarkerFrame(d["t"], pose))
    return frames
