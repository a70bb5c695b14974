"""Desk-scale kinematic manipulation environment.

Two tasks: pulling a tissue edge out of a box (pinch + vertical retract) and
lifting a plush sphere (multi-finger cage + lift). Contact is replaced by
geometric predicates so every run is exactly reproducible from (seed,
commands). The environment doubles as the scheduler's plant adapter.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry as geo
from .geometry import Pose

__all__ = [
    "TaskSpec",
    "SimState",
    "DeskEnv",
    "ScriptedExpert",
    "step_sim",
    "check_success",
    "tissue_task",
    "plush_task",
    "OBS_DIM",
    "TASK_IDS",
    "HAND_MOUNT",
]

TASK_IDS = {"tissue_extraction": 0, "plush_grasp": 1}

# Observation layout (18): q_arm[6], hand_act[6], object xyz[3], object size,
# extraction scalar, task id.
OBS_DIM = 18

# Task-wide EE orientation: tool axis pointing down (rotation of pi about y).
# The hand mount then turns the finger direction (+x in hand frame) downward.
EE_ROT_AXIS_ANGLE = ((0.0, 1.0, 0.0), np.pi)
HAND_MOUNT = Pose.from_axis_angle((0.0, 1.0, 0.0), -np.pi / 2.0)


def task_pose(position) -> Pose:
    """EE pose at `position` with the fixed task orientation."""
    return Pose.from_axis_angle(*EE_ROT_AXIS_ANGLE, position)

ARM_RATE_LIMIT = 0.015  # rad per 90 Hz control tick (~1.3 rad/s)
HAND_RATE_LIMIT = 0.05
CAGE_MIN_FLEXION = 0.5  # rad mean finger flexion required for a wrap grasp

HOME_EE = np.array([0.35, 0.0, 0.28])


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    tick_limit: int = 720  # 8 s at 90 Hz
    spawn_center: tuple = (0.38, 0.0, 0.05)
    spawn_range: tuple = (0.04, 0.06, 0.0)
    object_size: float = 0.03
    pinch_threshold: float = 0.008
    edge_radius: float = 0.03
    extract_travel: float = 0.05
    lift_height: float = 0.10
    cage_scale: float = 1.2
    cage_arc_deg: float = 120.0
    palm_distance: float = 0.16

    def __post_init__(self):
        if self.task_id not in TASK_IDS:
            raise ValueError(f"unknown task {self.task_id!r}")
        if self.tick_limit < 1:
            raise ValueError("tick_limit must be >= 1")


def tissue_task(**kw) -> TaskSpec:
    return TaskSpec(task_id="tissue_extraction", **kw)


def plush_task(**kw) -> TaskSpec:
    kw.setdefault("object_size", 0.04)
    return TaskSpec(task_id="plush_grasp", **kw)


@dataclass(frozen=True)
class SimState:
    q_arm: np.ndarray
    hand_act: np.ndarray
    object_pos: np.ndarray  # tissue edge point, or plush sphere centre
    spawn_pos: np.ndarray
    extraction: float = 0.0
    extract_anchor: float | None = None
    highwater: float = 0.0
    pinched: bool = False
    grasped: bool = False
    grasp_offset: np.ndarray | None = None  # sphere centre in EE frame
    lifted: bool = False
    dropped: bool = False
    tick: int = 0
    outcome: str = "running"


def _world_tips(arm: geo.ArmModel, hand: geo.HandModel, q_arm, hand_act):
    ee = geo.fk_ee(arm, q_arm)
    mount = geo.compose(ee, HAND_MOUNT)
    q = geo.expand_coupling(hand, hand.clamp_actuated(hand_act))
    tips = geo.fk_fingertips(hand, q)
    return ee, np.stack([mount.apply(t) for t in tips])


def _cage_ok(tips, center, radius, spec: TaskSpec, flexion: float = 1.0) -> bool:
    # Straight fingers cannot cage a ball: require the hand to actually wrap.
    if flexion < CAGE_MIN_FLEXION:
        return False
    near = [t for t in tips if np.linalg.norm(t - center) < spec.cage_scale * radius]
    if len(near) < 3:
        return False
    angles = sorted(np.arctan2(t[1] - center[1], t[0] - center[0]) for t in near)
    gaps = np.diff(angles + [angles[0] + 2 * np.pi])
    return (2 * np.pi - gaps.max()) > np.deg2rad(spec.cage_arc_deg)


def step_sim(state: SimState, command, spec: TaskSpec,
             arm: geo.ArmModel, hand: geo.HandModel) -> SimState:
    """One 90 Hz quasi-static tick: rate-limited motion, then predicates."""
    arm_target, hand_target = command
    dq = np.clip(np.asarray(arm_target, dtype=float) - state.q_arm,
                 -ARM_RATE_LIMIT, ARM_RATE_LIMIT)
    q_arm = arm.clamp(state.q_arm + dq)
    dh = np.clip(np.asarray(hand_target, dtype=float) - state.hand_act,
                 -HAND_RATE_LIMIT, HAND_RATE_LIMIT)
    hand_act = hand.clamp_actuated(state.hand_act + dh)

    ee, tips = _world_tips(arm, hand, q_arm, hand_act)
    obj = state.object_pos.copy()
    extraction = state.extraction
    pinched, grasped, lifted, dropped = (
        state.pinched, state.grasped, state.lifted, state.dropped
    )
    grasp_offset = state.grasp_offset

    extract_anchor = state.extract_anchor
    highwater = state.highwater
    if spec.task_id == "tissue_extraction":
        gap = np.linalg.norm(tips[0] - tips[1])
        mid = (tips[0] + tips[1]) / 2.0
        if gap < spec.pinch_threshold and np.linalg.norm(mid - obj) < spec.edge_radius:
            if not pinched:
                extract_anchor = obj[2]
                highwater = obj[2]
            pinched = True
            obj = mid  # edge follows the pinch while held
            highwater = max(highwater, mid[2])
            # high-water rule: only net upward travel since lock counts, so
            # oscillation cannot pump the scalar
            extraction = min(1.0, max(extraction, (highwater - extract_anchor) / spec.extract_travel))
        else:
            pinched = False
    else:
        if grasped:
            obj = ee.apply(grasp_offset)
        flexion = float(np.mean(hand_act[1:]))
        if _cage_ok(tips, obj, spec.object_size, spec, flexion) and np.linalg.norm(
            ee.translation - obj
        ) < spec.palm_distance:
            if not grasped:
                inv = geo.inverse(ee)
                grasp_offset = inv.apply(obj)
            grasped = True
        elif grasped and not lifted:
            grasped = False
            dropped = True
        if grasped and obj[2] > state.spawn_pos[2] + spec.lift_height:
            lifted = True

    nxt = replace(
        state, q_arm=q_arm, hand_act=hand_act, object_pos=obj,
        extraction=extraction, extract_anchor=extract_anchor,
        highwater=highwater, pinched=pinched, grasped=grasped,
        grasp_offset=grasp_offset, lifted=lifted, dropped=dropped,
        tick=state.tick + 1,
    )
    return replace(nxt, outcome=check_success(nxt, spec))


def check_success(state: SimState, spec: TaskSpec) -> str:
    if state.outcome == "success":
        return "success"  # success persists
    if spec.task_id == "tissue_extraction":
        if state.extraction > 0.5:
            return "success"
    else:
        if state.lifted:
            return "success"
        if state.dropped:
            return "failure"
    if state.tick >= spec.tick_limit:
        return "failure"
    return "running"


class DeskEnv:
    """Owns a SimState and exposes the scheduler's plant protocol."""

    def __init__(self, spec: TaskSpec, seed: int = 0,
                 arm: geo.ArmModel | None = None, hand: geo.HandModel | None = None):
        self.spec = spec
        self.arm = arm or geo.desk_arm_model()
        self.hand = hand or geo.desk_hand_model()
        self.arm_dof = len(self.arm.joints)
        self._home_q = geo.ik_solve(self.arm, task_pose(HOME_EE), np.zeros(self.arm_dof))
        self.reset(seed)

    def reset(self, seed: int = 0) -> SimState:
        rng = np.random.default_rng(seed)
        c = np.asarray(self.spec.spawn_center)
        r = np.asarray(self.spec.spawn_range)
        pos = c + rng.uniform(-r, r)
        self.state = SimState(
            q_arm=self._home_q.copy(),
            hand_act=np.zeros(self.hand.m),
            object_pos=pos.copy(),
            spawn_pos=pos.copy(),
        )
        self._arm_target = self._home_q.copy()
        self._hand_target = np.zeros(self.hand.m)
        return self.state

    # -- plant protocol -----------------------------------------------------

    @property
    def q_arm(self) -> np.ndarray:
        return self.state.q_arm

    def ee_pose(self) -> Pose:
        return geo.fk_ee(self.arm, self.state.q_arm)

    def fingertips(self) -> np.ndarray:
        _, tips = _world_tips(self.arm, self.hand, self.state.q_arm, self.state.hand_act)
        return tips

    def observation(self) -> np.ndarray:
        s = self.state
        return np.concatenate([
            s.q_arm, s.hand_act, s.object_pos, [self.spec.object_size],
            [s.extraction], [float(TASK_IDS[self.spec.task_id])],
        ])

    def solve_arm(self, pose: Pose, seed_q) -> np.ndarray:
        try:
            return geo.ik_solve(self.arm, pose, seed_q, restarts=1)
        except geo.UnreachableTargetError:
            return np.asarray(seed_q, dtype=float)

    def set_arm_target(self, q) -> None:
        self._arm_target = np.asarray(q, dtype=float)

    def set_hand_target(self, x) -> None:
        self._hand_target = np.asarray(x, dtype=float)

    def step_control(self) -> None:
        self.state = step_sim(
            self.state, (self._arm_target, self._hand_target),
            self.spec, self.arm, self.hand,
        )

    def done(self) -> bool:
        return self.state.outcome != "running"

    def outcome(self) -> str:
        return self.state.outcome


# ---------------------------------------------------------------------------
# Scripted expert / intervenor oracle
# ---------------------------------------------------------------------------

OPEN_CURLS = np.zeros(5)
PINCH_CURLS = np.array([0.46, 0.52, 0.0, 0.0, 0.0])
PINCH_ABD = np.array([0.08, 0.0, 0.0, 0.0, 0.0])
PREPINCH_SCALE = 0.8
POWER_CURLS = np.array([0.55, 0.85, 0.85, 0.85, 0.85])
POWER_ABD = np.array([0.05, 0.0, 0.0, 0.0, 0.0])

NO_PROGRESS_WINDOW_S = 0.5
NO_PROGRESS_EPS = 0.002  # metres of required approach per window
PREMATURE_FLEXION = 1.2
PREMATURE_DISTANCE = 0.12


class ScriptedExpert:
    """Deterministic near-optimal controller speaking the human interfaces.

    Emits marker frames (arm) and human-hand curl keypoints (hand) exactly as
    a live operator would. `mode="drive"` holds control for the whole episode
    (demo collection); `mode="monitor"` watches an autonomous policy and takes
    over when the failure predictor trips, keeping control to episode end.

    Motion is a latched phase machine (align, descend, close, lift): targets
    are functions of the phase plus state captured at phase entry, never of
    continuously shifting feedback, so the commands cannot chatter.
    """

    def __init__(self, env: DeskEnv, retarget_fn, mode: str = "drive",
                 noise: float = 0.0, seed: int = 0):
        if mode not in ("drive", "monitor"):
            raise ValueError("mode must be drive or monitor")
        self.env = env
        self.retarget_fn = retarget_fn  # HumanHandSample -> actuated vector
        self.mode = mode
        self.noise = noise
        self.rng = np.random.default_rng(seed)
        self.intervening = mode == "drive"
        self._progress: list = []  # (t, distance-to-goal)
        self.keypoint_log: list = []
        self.phase = "align"
        self._grip_anchor = None
        self._ee_target = env.ee_pose().translation.copy()
        # EE offsets that land the relevant hand feature on the object,
        # computed once from the models (orientation is task-constant).
        r_ee = task_pose((0, 0, 0)).rotation
        m = HAND_MOUNT.rotation

        def rel_tips(curls, abd):
            from . import retargeting
            act = retarget_fn(retargeting.sample_from_params(curls, abd))
            q = geo.expand_coupling(env.hand, env.hand.clamp_actuated(act))
            return (r_ee @ (m @ geo.fk_fingertips(env.hand, q).T)).T

        pinch_tips = rel_tips(PINCH_CURLS, PINCH_ABD)
        self._pinch_off = -((pinch_tips[0] + pinch_tips[1]) / 2.0)
        power_tips = rel_tips(POWER_CURLS, POWER_ABD)
        self._grasp_off = -power_tips.mean(axis=0)

    # -- failure predictor ----------------------------------------------------

    def _goal_distance(self) -> float:
        s = self.env.state
        if self.env.spec.task_id == "tissue_extraction":
            tips = self.env.fingertips()
            mid = (tips[0] + tips[1]) / 2.0
            return float(np.linalg.norm(mid - s.object_pos) + max(0.0, 0.5 - s.extraction))
        return float(np.linalg.norm(self.env.ee_pose().translation - s.object_pos)
                     + (0.0 if s.grasped else 0.05))

    def wants_intervention(self, t: float, plant) -> bool:
        if self.mode == "drive":
            return True
        if self.intervening:
            return True  # hold control to episode end
        d = self._goal_distance()
        self._progress.append((t, d))
        horizon = t - NO_PROGRESS_WINDOW_S
        self._progress = [(tt, dd) for tt, dd in self._progress if tt >= horizon]
        stalled = (
            len(self._progress) > 1
            and self._progress[0][0] <= horizon + 1.0 / 180.0
            and self._progress[0][1] - d < NO_PROGRESS_EPS
        )
        s = self.env.state
        flex = float(np.mean(s.hand_act[2:]))
        premature = (
            flex > PREMATURE_FLEXION
            and np.linalg.norm(self.env.ee_pose().translation - s.object_pos)
            > PREMATURE_DISTANCE
            and not (s.pinched or s.grasped)
        )
        if stalled or premature:
            self.intervening = True
            self.phase = "align"
            self._grip_anchor = None
        return self.intervening

    # -- phase machine ---------------------------------------------------------

    def _tick_phase(self) -> None:
        s = self.env.state
        spec = self.env.spec
        ee = self.env.ee_pose().translation
        if self.phase == "align" and self._grip_anchor is None:
            # latch the object position on entering align so the approach
            # target never tracks an object the hand is already moving
            self._grip_anchor = s.object_pos.copy()
        if spec.task_id == "tissue_extraction":
            grip = self._grip_anchor + self._pinch_off
            if self.phase == "align":
                self._ee_target = grip + np.array([0.0, 0.0, 0.04])
                if np.linalg.norm(ee - self._ee_target) < 0.01:
                    self.phase = "descend"
            elif self.phase == "descend":
                self._ee_target = grip
                if np.linalg.norm(ee - self._ee_target) < 0.006:
                    self.phase = "close"
            elif self.phase == "close":
                if s.pinched:
                    self.phase = "lift"
                    self._ee_target = ee + np.array(
                        [0.0, 0.0, 1.6 * spec.extract_travel + 0.02]
                    )
            elif self.phase == "lift" and not s.pinched and s.extraction <= 0.5:
                self.phase = "align"
                self._grip_anchor = None
        else:
            grip = self._grip_anchor + self._grasp_off
            if self.phase == "align":
                self._ee_target = grip + np.array([0.0, 0.0, 0.05])
                if np.linalg.norm(ee - self._ee_target) < 0.01:
                    self.phase = "descend"
            elif self.phase == "descend":
                self._ee_target = grip
                if np.linalg.norm(ee - self._ee_target) < 0.006:
                    self.phase = "close"
            elif self.phase == "close":
                if s.grasped:
                    self.phase = "lift"
                    self._ee_target = np.array(
                        [ee[0], ee[1], s.spawn_pos[2] + spec.lift_height + 0.06]
                    )
            elif self.phase == "lift" and s.dropped:
                self.phase = "align"
                self._grip_anchor = None

    def desired_curls(self):
        if self.env.spec.task_id == "tissue_extraction":
            if self.phase in ("close", "lift"):
                return PINCH_CURLS, PINCH_ABD
            return PREPINCH_SCALE * PINCH_CURLS, PINCH_ABD
        if self.phase in ("close", "lift"):
            return POWER_CURLS, POWER_ABD
        return OPEN_CURLS, 0.0 * POWER_ABD

    # -- teleop source protocol -------------------------------------------------

    def marker(self, t: float, anchor):
        from . import teleop
        self._tick_phase()
        target = self._ee_target
        if self.noise:
            target = target + self.rng.normal(scale=self.noise, size=3)
        return teleop.MarkerFrame(t, teleop.marker_from_ee(anchor, task_pose(target)))

    def hand_command(self, t: float):
        from . import retargeting
        curls, abd = self.desired_curls()
        if self.noise:
            curls = np.clip(curls + self.rng.normal(scale=self.noise * 3.0, size=5), 0.0, 1.0)
        sample = retargeting.sample_from_params(curls, abd)
        self.keypoint_log.append((t, sample))
        return self.retarget_fn(sample)
