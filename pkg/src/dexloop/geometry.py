"""Rigid-body math and kinematic chain models for the desk arm and coupled-joint hand.

Everything here is pure and operates on immutable inputs, so all functions are
safe to call concurrently from the control loops.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

SCHEMA_VERSION = 1

_ORTHO_TOL = 1e-9


class DimensionError(ValueError):
    """Vector length does not match the owning model."""


class UnreachableTargetError(RuntimeError):
    """IK failed to converge; carries the best residual seen."""

    def __init__(self, msg, position_residual, orientation_residual, best_q):
        super().__init__(msg)
        self.position_residual = float(position_residual)
        self.orientation_residual = float(orientation_residual)
        self.best_q = np.asarray(best_q, dtype=float)


def _unit(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("zero axis")
    return v / n


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a rotation of `angle` about `axis`."""
    k = _unit(axis)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * kx + (1.0 - math.cos(angle)) * (kx @ kx)


def rotation_log(rotation: np.ndarray) -> np.ndarray:
    """Axis-angle vector (so(3) log) of a rotation matrix."""
    r = np.asarray(rotation, dtype=float)
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos_theta)
    if theta < 1e-12:
        return np.zeros(3)
    if theta > math.pi - 1e-6:
        # Near pi the off-diagonal formula degenerates; recover the axis from R + I.
        m = (r + np.eye(3)) / 2.0
        axis = _unit(np.array([math.sqrt(max(m[i, i], 0.0)) for i in range(3)]))
        # Fix signs from the off-diagonal terms.
        if m[0, 1] < 0:
            axis[1] = -abs(axis[1])
        if m[0, 2] < 0:
            axis[2] = -abs(axis[2])
        return theta * axis
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return theta / (2.0 * math.sin(theta)) * w


@dataclass(frozen=True)
class Pose:
    """Rigid transform: 3x3 rotation plus translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_axis_angle(axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return Pose(axis_angle_matrix(axis, angle), np.asarray(translation, dtype=float))

    @staticmethod
    def from_translation(translation) -> "Pose":
        return Pose(np.eye(3), np.asarray(translation, dtype=float))

    @staticmethod
    def from_quaternion(qw, qx, qy, qz, translation=(0.0, 0.0, 0.0)) -> "Pose":
        n = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        qw, qx, qy, qz = qw / n, qx / n, qy / n, qz / n
        r = np.array(
            [
                [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
                [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
                [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
            ]
        )
        return Pose(r, np.asarray(translation, dtype=float))

    def quaternion(self) -> np.ndarray:
        """(qw, qx, qy, qz) with qw >= 0."""
        r = self.rotation
        tr = np.trace(r)
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2.0
            q = np.array(
                [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
            )
        else:
            i = int(np.argmax(np.diag(r)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = math.sqrt(max(1.0 + r[i, i] - r[j, j] - r[k, k], 0.0)) * 2.0
            q = np.empty(4)
            q[0] = (r[k, j] - r[j, k]) / s
            q[1 + i] = 0.25 * s
            q[1 + j] = (r[j, i] + r[i, j]) / s
            q[1 + k] = (r[k, i] + r[i, k]) / s
        if q[0] < 0:
            q = -q
        return q

    def is_valid(self, tol: float = _ORTHO_TOL) -> bool:
        r = self.rotation
        return (
            np.all(np.isfinite(r))
            and np.all(np.isfinite(self.translation))
            and np.max(np.abs(r @ r.T - np.eye(3))) <= tol
            and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, point) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=float) + self.translation


def compose(a: Pose, b: Pose, *rest: Pose) -> Pose:
    """Rigid product a.b[.c...] (rightmost applied first)."""
    out = Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)
    for p in rest:
        out = Pose(out.rotation @ p.rotation, out.rotation @ p.translation + out.translation)
    return out


def inverse(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """(position distance in m, orientation rotation-log angle in rad) between two poses."""
    dp = float(np.linalg.norm(a.translation - b.translation))
    dr = float(np.linalg.norm(rotation_log(a.rotation.T @ b.rotation)))
    return dp, dr


# ---------------------------------------------------------------------------
# Arm model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArmJoint:
    axis: np.ndarray          # unit rotation axis in the parent frame
    offset: Pose              # static transform from parent joint frame
    lower: float
    upper: float

    def __post_init__(self):
        object.__setattr__(self, "axis", _unit(self.axis))
        if not self.lower < self.upper:
            raise ValueError("joint limits must satisfy lo < hi")


@dataclass(frozen=True)
class ArmModel:
    joints: tuple
    tool: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        if self.n < 3:
            raise ValueError("arm needs at least 3 joints")

    @property
    def n(self) -> int:
        return len(self.joints)

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.lower for j in self.joints])

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.upper for j in self.joints])

    def max_reach(self) -> float:
        reach = sum(float(np.linalg.norm(j.offset.translation)) for j in self.joints)
        return reach + float(np.linalg.norm(self.tool.translation))

    def clamp(self, q) -> np.ndarray:
        return np.clip(np.asarray(q, dtype=float), self.lower, self.upper)


def fk_ee(model: ArmModel, q_arm) -> Pose:
    """End-effector pose in the base frame for joint angles `q_arm`."""
    q = np.asarray(q_arm, dtype=float)
    if q.shape != (model.n,):
        raise DimensionError(f"expected {model.n} joint angles, got {q.shape}")
    t = Pose.identity()
    for joint, angle in zip(model.joints, q):
        t = compose(t, joint.offset)
        t = compose(t, Pose(axis_angle_matrix(joint.axis, float(angle)), np.zeros(3)))
    return compose(t, model.tool)


def _fk_frames(model: ArmModel, q):
    """Joint origins and world-frame axes along the chain, plus the EE pose."""
    t = Pose.identity()
    origins, axes = [], []
    for joint, angle in zip(model.joints, q):
        t = compose(t, joint.offset)
        origins.append(t.translation.copy())
        axes.append(t.rotation @ joint.axis)
        t = compose(t, Pose(axis_angle_matrix(joint.axis, float(angle)), np.zeros(3)))
    return origins, axes, compose(t, model.tool)


def _geometric_jacobian(model: ArmModel, q):
    origins, axes, ee = _fk_frames(model, q)
    p = ee.translation
    jac = np.zeros((6, model.n))
    for i in range(model.n):
        jac[:3, i] = np.cross(axes[i], p - origins[i])
        jac[3:, i] = axes[i]
    return jac, ee


_ROT_WEIGHT = 0.3  # meters-per-radian exchange rate in the scalar IK error


def _task_error(model, target, q):
    jac, ee = _geometric_jacobian(model, q)
    e = np.concatenate(
        [target.translation - ee.translation, rotation_log(target.rotation @ ee.rotation.T)]
    )
    dp = float(np.linalg.norm(e[:3]))
    dr = float(np.linalg.norm(e[3:]))
    return jac, e, dp, dr


def _dls_descend(model, target, q0, damping, max_iters, step_clamp, pos_tol, rot_tol):
    """Damped-least-squares descent with accept/reject steps (LM-style damping)."""
    q = model.clamp(q0)
    jac, e, dp, dr = _task_error(model, target, q)
    err = dp + _ROT_WEIGHT * dr
    lam = damping
    rejects = 0
    best = (q.copy(), dp, dr)
    for _ in range(max_iters):
        if dp < pos_tol and dr < rot_tol:
            return q, dp, dr, True
        # Active-set DLS step: joints pinned at a limit (and pushing outward)
        # are removed from the solve so the remaining joints still descend.
        active = np.zeros(model.n, dtype=bool)
        for _ in range(3):
            jw = jac.copy()
            jw[:, active] = 0.0
            dq = jw.T @ np.linalg.solve(jw @ jw.T + lam**2 * np.eye(6), e)
            step = float(np.max(np.abs(dq)))
            if step > step_clamp:
                dq *= step_clamp / step
            q_try = model.clamp(q + dq)
            newly = ((q_try <= model.lower) & (dq < 0)) | ((q_try >= model.upper) & (dq > 0))
            if not np.any(newly & ~active):
                break
            active |= newly
        jac_try, e_try, dp_try, dr_try = _task_error(model, target, q_try)
        err_try = dp_try + _ROT_WEIGHT * dr_try
        if err_try < err:
            q, jac, e, dp, dr, err = q_try, jac_try, e_try, dp_try, dr_try, err_try
            lam = max(lam * 0.5, 1e-4)
            rejects = 0
            if err < best[1] + _ROT_WEIGHT * best[2]:
                best = (q.copy(), dp, dr)
        else:
            lam = min(lam * 4.0, 1.0)
            rejects = rejects + 1
            if rejects >= 8:
                break
    if dp < pos_tol and dr < rot_tol:
        return q, dp, dr, True
    return best[0], best[1], best[2], False


def _branch_flips(model: ArmModel, q):
    """Candidate seeds flipping wrist-style redundant branches of a stalled iterate."""
    out = []
    for i in range(model.n - 2):
        flip = q.copy()
        for d, s in ((i, math.pi), (i + 1, -2 * q[i + 1]), (i + 2, math.pi)):
            v = flip[d] + s
            if v > model.upper[d]:
                v -= 2 * math.pi
            if v < model.lower[d]:
                v += 2 * math.pi
            flip[d] = v
        out.append(model.clamp(flip))
    return out


def ik_solve(
    model: ArmModel,
    target: Pose,
    seed,
    pos_tol: float = 1e-4,
    rot_tol: float = 1e-3,
    damping: float = 1e-2,
    max_iters: int = 100,
    step_clamp: float = 0.2,
    restarts: int = 6,
) -> np.ndarray:
    """Damped-least-squares IK: joint angles whose FK matches `target` within tolerance.

    Retries from deterministic perturbations of the seed when the first descent
    stalls in a local minimum. Raises UnreachableTargetError when no attempt
    converges, carrying the best residual seen.
    """
    seed = np.asarray(seed, dtype=float)
    if seed.shape != (model.n,):
        raise DimensionError(f"expected seed of length {model.n}")
    if float(np.linalg.norm(target.translation)) > model.max_reach():
        raise UnreachableTargetError(
            "target position beyond maximum reach", math.inf, math.inf, seed
        )
    mid = (model.lower + model.upper) / 2.0
    span = model.upper - model.lower
    rng = np.random.default_rng(
        np.uint64(abs(hash(tuple(np.round(target.translation, 9)))) % (2**63))
    )
    attempts = [seed, mid]
    for _ in range(restarts):
        attempts.append(mid + (rng.random(model.n) - 0.5) * 0.8 * span)
    best = (None, math.inf, math.inf)

    def run(q0):
        nonlocal best
        q, dp, dr, ok = _dls_descend(
            model, target, q0, damping, max_iters, step_clamp, pos_tol, rot_tol
        )
        if not ok and dp + _ROT_WEIGHT * dr < best[1] + _ROT_WEIGHT * best[2]:
            best = (q, dp, dr)
        return q if ok else None

    for q0 in attempts:
        q = run(q0)
        if q is not None:
            return q
    # Escape phase: flip redundant branches of the best iterate (revolute joints
    # admit +-pi-wrapped / sign-flipped solutions) and jitter around it; the
    # flips are recomputed each round as the best iterate improves.
    for _ in range(2):
        for q0 in _branch_flips(model, best[0]) + [
            model.clamp(best[0] + rng.normal(0.0, sigma, model.n))
            for sigma in (0.2, 0.2, 0.6, 0.6, 1.5, 1.5)
        ]:
            q = run(q0)
            if q is not None:
                return q
    # Last resort: best-of-N random initialization. FK is cheap, so score a
    # large pool of random configurations and descend from the closest ones.
    pool = mid + (rng.random((400, model.n)) - 0.5) * 0.95 * span
    scores = []
    for qs in pool:
        _, _, dp, dr = _task_error(model, target, qs)
        scores.append(dp + _ROT_WEIGHT * dr)
    for idx in np.argsort(scores)[:8]:
        q = run(pool[idx])
        if q is not None:
            return q
    raise UnreachableTargetError(
        f"IK did not converge: pos residual {best[1]:.3e} m, rot residual {best[2]:.3e} rad",
        best[1],
        best[2],
        best[0],
    )


# ---------------------------------------------------------------------------
# Hand model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HandJoint:
    axis: np.ndarray
    offset: np.ndarray        # translation from the previous joint, meters
    lower: float
    upper: float

    def __post_init__(self):
        object.__setattr__(self, "axis", _unit(self.axis))
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float).reshape(3))
        if not self.lower < self.upper:
            raise ValueError("joint limits must satisfy lo < hi")


@dataclass(frozen=True)
class Finger:
    name: str
    base: np.ndarray          # finger root position in the hand base frame
    joints: tuple
    tip_offset: np.ndarray    # distal link, from the last joint to the fingertip
    base_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "base", np.asarray(self.base, dtype=float).reshape(3))
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "tip_offset", np.asarray(self.tip_offset, dtype=float).reshape(3))
        object.__setattr__(
            self, "base_rotation", np.asarray(self.base_rotation, dtype=float).reshape(3, 3)
        )


@dataclass(frozen=True)
class Coupling:
    passive: int              # flat joint index driven by the coupling
    driver: int               # flat index of the actuated joint
    ratio: float


@dataclass(frozen=True)
class HandModel:
    """Five-finger hand with a reduced set of actuated joints.

    Joint vectors are flat concatenations over fingers in order
    (thumb, index, middle, ring, little).
    """

    fingers: tuple
    actuated: tuple           # flat indices of actuated joints, defines X_act ordering
    couplings: tuple

    def __post_init__(self):
        object.__setattr__(self, "fingers", tuple(self.fingers))
        object.__setattr__(self, "actuated", tuple(self.actuated))
        object.__setattr__(self, "couplings", tuple(self.couplings))
        names = [f.name for f in self.fingers]
        if names != ["thumb", "index", "middle", "ring", "little"]:
            raise ValueError("fingers must be ordered thumb, index, middle, ring, little")
        passive = set(range(self.joint_count)) - set(self.actuated)
        coupled = [c.passive for c in self.couplings]
        if sorted(coupled) != sorted(passive):
            raise ValueError("every passive joint must appear in exactly one coupling entry")
        for c in self.couplings:
            if c.driver not in self.actuated:
                raise ValueError("coupling driver must be an actuated joint")

    @property
    def joint_count(self) -> int:
        return sum(len(f.joints) for f in self.fingers)

    @property
    def m(self) -> int:
        return len(self.actuated)

    def flat_joints(self):
        out = []
        for f in self.fingers:
            out.extend(f.joints)
        return out

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.lower for j in self.flat_joints()])

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.upper for j in self.flat_joints()])

    @property
    def actuated_lower(self) -> np.ndarray:
        lo = self.lower
        return np.array([lo[i] for i in self.actuated])

    @property
    def actuated_upper(self) -> np.ndarray:
        up = self.upper
        return np.array([up[i] for i in self.actuated])

    def finger_slices(self):
        slices, start = [], 0
        for f in self.fingers:
            slices.append(slice(start, start + len(f.joints)))
            start += len(f.joints)
        return slices

    def clamp_actuated(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.actuated_lower, self.actuated_upper)


def expand_coupling(model: HandModel, actuated) -> np.ndarray:
    """Full joint vector from the actuated vector via the coupling map, clamped to limits."""
    x = np.asarray(actuated, dtype=float)
    if x.shape != (model.m,):
        raise DimensionError(f"expected {model.m} actuated values, got {x.shape}")
    q = np.zeros(model.joint_count)
    for k, idx in enumerate(model.actuated):
        q[idx] = x[k]
    for c in model.couplings:
        q[c.passive] = c.ratio * q[c.driver]
    return np.clip(q, model.lower, model.upper)


def fk_fingertips(model: HandModel, q) -> np.ndarray:
    """(5, 3) fingertip positions in the hand base frame."""
    q = np.asarray(q, dtype=float)
    if q.shape != (model.joint_count,):
        raise DimensionError(f"expected {model.joint_count} joint angles, got {q.shape}")
    tips = np.zeros((5, 3))
    for fi, (finger, sl) in enumerate(zip(model.fingers, model.finger_slices())):
        r = finger.base_rotation.copy()
        p = finger.base.copy()
        for joint, angle in zip(finger.joints, q[sl]):
            p = p + r @ joint.offset
            r = r @ axis_angle_matrix(joint.axis, float(angle))
        tips[fi] = p + r @ finger.tip_offset
    return tips


def finger_bases(model: HandModel) -> np.ndarray:
    return np.stack([f.base for f in model.fingers])


# ---------------------------------------------------------------------------
# Default desk-scale models
# ---------------------------------------------------------------------------

# Human-hand reference geometry used by both the synthetic data generator and
# the (scaled) robot hand, meters. Fingers point along +x, palm normal +z,
# flexion about +y curls fingertips toward -z.
HUMAN_FINGER_GEOMETRY = {
    "thumb": {"base": (0.025, 0.040, 0.0), "links": (0.048, 0.034), "tip": 0.030},
    "index": {"base": (0.088, 0.026, 0.0), "links": (0.045, 0.027), "tip": 0.022},
    "middle": {"base": (0.092, 0.004, 0.0), "links": (0.050, 0.030), "tip": 0.023},
    "ring": {"base": (0.088, -0.018, 0.0), "links": (0.046, 0.028), "tip": 0.022},
    "little": {"base": (0.080, -0.038, 0.0), "links": (0.037, 0.022), "tip": 0.019},
}

# Fixed passive-joint ratios of the desk hand (and of the synthetic human
# generator, so the human and robot fingertip curves coincide up to scale).
PIP_RATIO = 0.8
DIP_RATIO = 0.6
THUMB_DISTAL_RATIO = 0.7

MCP_RANGE = (-0.5, 2.4)
THUMB_ABD_RANGE = (-1.2, 1.2)
THUMB_FLEX_RANGE = (-0.5, 2.4)

# Fixed thumb mounting orientation (shared by the synthetic human hand and the
# desk hand): pre-rotated toward the fingers so pinch opposition sits near the
# middle of the abduction/flexion ranges. Tuned numerically; see retargeting.
THUMB_BASE_YAW = -1.15     # about +z, toward the finger column
THUMB_BASE_ROLL = 0.6083   # about the local +x, tilting flexion toward the palm


def thumb_base_rotation() -> np.ndarray:
    return axis_angle_matrix((0, 0, 1), THUMB_BASE_YAW) @ axis_angle_matrix((1, 0, 0), THUMB_BASE_ROLL)


def desk_hand_model(scale: float = 0.8) -> HandModel:
    """Five-finger desk hand: one actuated flexion per non-thumb finger with
    coupled PIP/DIP, plus an actuated thumb (abduction + flexion) with a
    coupled distal joint. m = 6; geometry is `scale` x the human reference."""
    fingers = []
    g = HUMAN_FINGER_GEOMETRY["thumb"]
    fingers.append(
        Finger(
            name="thumb",
            base=scale * np.asarray(g["base"]),
            joints=(
                HandJoint(axis=(0, 0, 1), offset=(0, 0, 0), lower=THUMB_ABD_RANGE[0], upper=THUMB_ABD_RANGE[1]),
                HandJoint(axis=(0, 1, 0), offset=(0, 0, 0), lower=THUMB_FLEX_RANGE[0], upper=THUMB_FLEX_RANGE[1]),
                HandJoint(
                    axis=(0, 1, 0),
                    offset=(scale * g["links"][0], 0, 0),
                    lower=THUMB_FLEX_RANGE[0] * THUMB_DISTAL_RATIO,
                    upper=THUMB_FLEX_RANGE[1] * THUMB_DISTAL_RATIO,
                ),
            ),
            tip_offset=(scale * g["links"][1] + scale * g["tip"], 0, 0),
            base_rotation=thumb_base_rotation(),
        )
    )
    for name in ("index", "middle", "ring", "little"):
        g = HUMAN_FINGER_GEOMETRY[name]
        l1, l2 = g["links"]
        fingers.append(
            Finger(
                name=name,
                base=scale * np.asarray(g["base"]),
                joints=(
                    HandJoint(axis=(0, 1, 0), offset=(0, 0, 0), lower=MCP_RANGE[0], upper=MCP_RANGE[1]),
                    HandJoint(
                        axis=(0, 1, 0),
                        offset=(scale * l1, 0, 0),
                        lower=MCP_RANGE[0] * PIP_RATIO,
                        upper=MCP_RANGE[1] * PIP_RATIO,
                    ),
                    HandJoint(
                        axis=(0, 1, 0),
                        offset=(scale * l2, 0, 0),
                        lower=MCP_RANGE[0] * DIP_RATIO,
                        upper=MCP_RANGE[1] * DIP_RATIO,
                    ),
                ),
                tip_offset=(scale * g["tip"], 0, 0),
            )
        )
    # Flat layout: thumb joints 0..2, then 3 per finger.
    actuated = (0, 1, 3, 6, 9, 12)
    couplings = (
        Coupling(passive=2, driver=1, ratio=THUMB_DISTAL_RATIO),
        Coupling(passive=4, driver=3, ratio=PIP_RATIO),
        Coupling(passive=5, driver=3, ratio=DIP_RATIO),
        Coupling(passive=7, driver=6, ratio=PIP_RATIO),
        Coupling(passive=8, driver=6, ratio=DIP_RATIO),
        Coupling(passive=10, driver=9, ratio=PIP_RATIO),
        Coupling(passive=11, driver=9, ratio=DIP_RATIO),
        Coupling(passive=13, driver=12, ratio=PIP_RATIO),
        Coupling(passive=14, driver=12, ratio=DIP_RATIO),
    )
    return HandModel(fingers=tuple(fingers), actuated=actuated, couplings=couplings)


def desk_arm_model() -> ArmModel:
    """6-DoF desk arm (z-y-y-z-y-z wrist-partitioned chain), ~0.8 m reach."""
    j = ArmJoint
    return ArmModel(
        joints=(
            j(axis=(0, 0, 1), offset=Pose.from_translation((0, 0, 0.10)), lower=-2.9, upper=2.9),
            j(axis=(0, 1, 0), offset=Pose.from_translation((0, 0, 0.10)), lower=-1.9, upper=1.9),
            j(axis=(0, 1, 0), offset=Pose.from_translation((0, 0, 0.25)), lower=-1.9, upper=1.9),
            j(axis=(0, 0, 1), offset=Pose.from_translation((0, 0, 0.20)), lower=-2.9, upper=2.9),
            j(axis=(0, 1, 0), offset=Pose.from_translation((0, 0, 0.10)), lower=-1.9, upper=1.9),
            j(axis=(0, 0, 1), offset=Pose.from_translation((0, 0, 0.05)), lower=-2.9, upper=2.9),
        ),
        tool=Pose.from_translation((0, 0, 0.08)),
    )


# ---------------------------------------------------------------------------
# Model definition files
# ---------------------------------------------------------------------------


def _pose_to_json(p: Pose):
    q = p.quaternion()
    return {"quaternion": [float(v) for v in q], "translation": [float(v) for v in p.translation]}


def _pose_from_json(d) -> Pose:
    qw, qx, qy, qz = d["quaternion"]
    return Pose.from_quaternion(qw, qx, qy, qz, d["translation"])


def arm_model_to_json(model: ArmModel) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "arm",
        "joints": [
            {
                "axis": [float(v) for v in j.axis],
                "offset": _pose_to_json(j.offset),
                "limits": [j.lower, j.upper],
            }
            for j in model.joints
        ],
        "tool": _pose_to_json(model.tool),
    }


def arm_model_from_json(doc: dict) -> ArmModel:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {doc.get('schema_version')!r}")
    return ArmModel(
        joints=tuple(
            ArmJoint(axis=j["axis"], offset=_pose_from_json(j["offset"]), lower=j["limits"][0], upper=j["limits"][1])
            for j in doc["joints"]
        ),
        tool=_pose_from_json(doc["tool"]),
    )


def hand_model_to_json(model: HandModel) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "hand",
        "fingers": [
            {
                "name": f.name,
                "base": [float(v) for v in f.base],
                "joints": [
                    {
                        "axis": [float(v) for v in j.axis],
                        "offset": [float(v) for v in j.offset],
                        "limits": [j.lower, j.upper],
                    }
                    for j in f.joints
                ],
                "tip_offset": [float(v) for v in f.tip_offset],
                "base_rotation": [[float(v) for v in row] for row in f.base_rotation],
            }
            for f in model.fingers
        ],
        "actuated": list(model.actuated),
        "couplings": [
            {"passive": c.passive, "driver": c.driver, "ratio": c.ratio} for c in model.couplings
        ],
    }


def hand_model_from_json(doc: dict) -> HandModel:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {doc.get('schema_version')!r}")
    fingers = tuple(
        Finger(
            name=f["name"],
            base=f["base"],
            joints=tuple(
                HandJoint(axis=j["axis"], offset=j["offset"], lower=j["limits"][0], upper=j["limits"][1])
                for j in f["joints"]
            ),
            tip_offset=f["tip_offset"],
            base_rotation=f.get("base_rotation", np.eye(3)),
        )
        for f in doc["fingers"]
    )
    return HandModel(
        fingers=fingers,
        actuated=tuple(doc["actuated"]),
        couplings=tuple(Coupling(c["passive"], c["driver"], c["ratio"]) for c in doc["couplings"]),
    )


def save_model(model, path):
    doc = arm_model_to_json(model) if isinstance(model, ArmModel) else hand_model_to_json(model)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def load_model(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("kind") == "arm":
        return arm_model_from_json(doc)
    if doc.get("kind") == "hand":
        return hand_model_from_json(doc)
    raise ValueError(f"unknown model kind {doc.get('kind')!r}")
