"""Two-stage human-to-robot hand retargeting.

Stage 1 fits the four non-thumb fingers against intra-finger root-to-tip
vector targets; stage 2 freezes them and fits a thumb mapping with a set of
geometric regularizers (direction preservation, workspace coverage, mapping
flatness, pinch preservation) plus an inter-fingertip pair-vector term.

Ground truth comes from a synthetic parametric human hand whose finger
geometry the desk robot hand mirrors at 0.8 scale, so an exact mapping exists
for zero abduction and the held-out vector residual is a meaningful metric.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from . import geometry as geo
from . import nets
from .geometry import HUMAN_FINGER_GEOMETRY, HandModel, desk_hand_model

FINGER_ORDER = ("thumb", "index", "middle", "ring", "little")
NON_THUMB = ("index", "middle", "ring", "little")
KEYPOINT_COUNT = 21
KEYPOINT_DIM = KEYPOINT_COUNT * 3

# Keypoints are O(0.1 m); feed the nets decimeters so activations start in a
# healthy range.
INPUT_SCALE = 10.0

# Curl=1 maps to this MCP flexion; PIP/DIP follow the hand's coupling ratios,
# so the human tip curve equals the robot's up to uniform scale.
CURL_TO_MCP = 1.9
THUMB_CURL_TO_FLEX = 1.9

# (thumb_abduction, thumb_curl, finger_curl) per pinch target, tuned so the
# human thumb tip meets each fingertip within ~1.5 mm.
PINCH_PARAMS = {
    "index": (0.08, 0.437, 0.499),
    "middle": (-0.26, 0.378, 0.567),
    "ring": (-0.30, 0.294, 0.578),
    "little": (-0.28, 0.21, 0.567),
}

# Straight-finger root-to-tip lengths of the non-thumb fingers, meters.
_FULL_LENGTHS = {
    name: sum(HUMAN_FINGER_GEOMETRY[name]["links"]) + HUMAN_FINGER_GEOMETRY[name]["tip"]
    for name in NON_THUMB
}
MEAN_HUMAN_FINGER_LENGTH = float(np.mean(list(_FULL_LENGTHS.values())))


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


# ---------------------------------------------------------------------------
# Synthetic human hand
# ---------------------------------------------------------------------------


def human_hand_keypoints(curls, abductions) -> np.ndarray:
    """21 keypoints (wrist frame) of the parametric human hand.

    Order: wrist, then 4 points per finger (root, two intermediate joints,
    tip) for thumb, index, middle, ring, little. curls in [0, 1], abductions
    in radians about the palm normal; order follows FINGER_ORDER.
    """
    curls = np.asarray(curls, dtype=float)
    abductions = np.asarray(abductions, dtype=float)
    pts = [np.zeros(3)]
    for fi, name in enumerate(FINGER_ORDER):
        g = HUMAN_FINGER_GEOMETRY[name]
        base = np.asarray(g["base"], dtype=float)
        if name == "thumb":
            flex = THUMB_CURL_TO_FLEX * curls[fi]
            r = (
                geo.thumb_base_rotation()
                @ geo.axis_angle_matrix((0, 0, 1), abductions[fi])
                @ geo.axis_angle_matrix((0, 1, 0), flex)
            )
            p1 = base + r @ np.array([g["links"][0], 0, 0])
            r = r @ geo.axis_angle_matrix((0, 1, 0), geo.THUMB_DISTAL_RATIO * flex)
            p2 = p1 + r @ np.array([g["links"][1], 0, 0])
            tip = p2 + r @ np.array([g["tip"], 0, 0])
            pts.extend([base, p1, p2, tip])
        else:
            mcp = CURL_TO_MCP * curls[fi]
            angles = (mcp, geo.PIP_RATIO * mcp, geo.DIP_RATIO * mcp)
            links = (g["links"][0], g["links"][1], g["tip"])
            r = geo.axis_angle_matrix((0, 0, 1), abductions[fi])
            p = base.copy()
            chain = [base.copy()]
            for link, ang in zip(links, angles):
                r = r @ geo.axis_angle_matrix((0, 1, 0), ang)
                p = p + r @ np.array([link, 0, 0])
                chain.append(p.copy())
            pts.extend(chain)
    return np.stack(pts)


_FINGER_ROOT_IDX = {name: 1 + 4 * i for i, name in enumerate(FINGER_ORDER)}
_FINGER_TIP_IDX = {name: 4 + 4 * i for i, name in enumerate(FINGER_ORDER)}


@dataclass(frozen=True)
class HumanHandSample:
    """One synthetic hand pose: 21 keypoints plus derived per-finger vectors."""

    keypoints: np.ndarray
    tag: str = "random"
    curls: np.ndarray | None = None
    abductions: np.ndarray | None = None
    root_to_tip: np.ndarray = field(init=False)
    extents: np.ndarray = field(init=False)

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=float).reshape(KEYPOINT_COUNT, 3)
        if not np.all(np.isfinite(kp)):
            raise ValueError("keypoints must be finite")
        object.__setattr__(self, "keypoints", kp)
        roots = np.stack([kp[_FINGER_ROOT_IDX[n]] for n in FINGER_ORDER])
        tips = np.stack([kp[_FINGER_TIP_IDX[n]] for n in FINGER_ORDER])
        r = tips - roots
        d = np.linalg.norm(r, axis=1)
        if np.any(d <= 0):
            raise ValueError("degenerate finger extension")
        object.__setattr__(self, "root_to_tip", r)
        object.__setattr__(self, "extents", d)

    @property
    def tips(self) -> np.ndarray:
        return np.stack([self.keypoints[_FINGER_TIP_IDX[n]] for n in FINGER_ORDER])

    def flat(self) -> np.ndarray:
        return self.keypoints.ravel()


def sample_from_params(curls, abductions, tag="random") -> HumanHandSample:
    return HumanHandSample(
        keypoints=human_hand_keypoints(curls, abductions),
        tag=tag,
        curls=np.asarray(curls, dtype=float),
        abductions=np.asarray(abductions, dtype=float),
    )


def synth_human_dataset(seed: int, count: int, abduction_scale: float = 0.06):
    """Deterministic synthetic dataset mixing open hands, power grasps,
    per-finger pinches, and random poses.

    Non-thumb abduction stays small (natural grasping posture; the desk hand
    has no finger abduction to mirror it), thumb abduction spans +-0.3 rad.
    """
    if count <= 0:
        raise ValueError("count must be > 0")
    rng = np.random.default_rng(seed)
    samples = []
    pinch_names = list(PINCH_PARAMS)
    for k in range(count):
        u = rng.random()
        abd = rng.uniform(-abduction_scale, abduction_scale, size=5)
        abd[0] = rng.uniform(-0.3, 0.3)
        if u < 0.06:
            curls = rng.uniform(0.0, 0.05, size=5)
            tag = "open_hand"
        elif u < 0.28:
            curls = rng.uniform(0.78, 1.0, size=5)
            curls[0] = rng.uniform(0.5, 0.9)
            tag = "power_grasp"
        elif u < 0.48:
            name = pinch_names[k % 4]
            t_abd, t_curl, f_curl = PINCH_PARAMS[name]
            curls = rng.uniform(0.05, 0.35, size=5)
            curls[0] = t_curl + rng.uniform(-0.02, 0.02)
            curls[FINGER_ORDER.index(name)] = f_curl + rng.uniform(-0.02, 0.02)
            abd[0] = t_abd + rng.uniform(-0.02, 0.02)
            tag = f"pinch_{name}"
        else:
            curls = rng.uniform(0.0, 1.0, size=5)
            tag = "random"
        samples.append(sample_from_params(curls, abd, tag))
    return samples


# ---------------------------------------------------------------------------
# Loss configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Stage1LossConfig:
    """Distance-dependent weight s(d) = 1 + beta*exp(-d/d0), scale f(d) = kappa*d."""

    weight_beta: float = 1.0
    weight_d0: float = 0.03
    kappa: float = 0.8
    gamma: float = 1e-5
    eps: float = 1e-6

    def __post_init__(self):
        if self.gamma < 0 or self.eps <= 0:
            raise ValueError("gamma must be >= 0 and eps > 0")

    def s(self, d):
        return 1.0 + self.weight_beta * np.exp(-np.asarray(d) / self.weight_d0)

    def f(self, d):
        return self.kappa * np.asarray(d)


# Fingertip pairs for the inter-finger kinematic term: all four thumb-finger
# pairs plus adjacent finger-finger pairs (indices into FINGER_ORDER).
DEFAULT_PAIR_SET = ((0, 1), (0, 2), (0, 3), (0, 4), (1, 2), (2, 3), (3, 4))


@dataclass(frozen=True)
class Stage2LossConfig:
    lambda_dir: float = 1.0
    lambda_cover: float = 10.0
    lambda_flat: float = 0.01
    lambda_pinch: float = 200.0
    lambda_kin: float = 200.0
    pinch_distance: float = 0.02
    pairs: tuple = DEFAULT_PAIR_SET
    stage1: Stage1LossConfig = field(default_factory=Stage1LossConfig)

    def __post_init__(self):
        for lam in (self.lambda_dir, self.lambda_cover, self.lambda_flat, self.lambda_pinch, self.lambda_kin):
            if lam < 0:
                raise ValueError("loss weights must be non-negative")
        thumb_pairs = [p for p in self.pairs if 0 in p]
        finger_pairs = [p for p in self.pairs if 0 not in p]
        if len(thumb_pairs) < 4 or len(finger_pairs) < 2:
            raise ValueError("pair set needs all 4 thumb-finger pairs and >=2 finger-finger pairs")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4000
    batch_size: int = 64
    lr: float = 3e-3
    seed: int = 0
    hidden: tuple = (128, 128)
    holdout_fraction: float = 0.1


# ---------------------------------------------------------------------------
# Differentiable robot hand kinematics (torch)
# ---------------------------------------------------------------------------


def _torch_rot(axis, theta: torch.Tensor) -> torch.Tensor:
    """Batch Rodrigues rotation about a fixed axis; theta is (B,)."""
    k = np.asarray(axis, dtype=float)
    kx = torch.tensor(
        [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]]
    )
    kx2 = kx @ kx
    s = torch.sin(theta)[:, None, None]
    c = torch.cos(theta)[:, None, None]
    return torch.eye(3) + s * kx + (1.0 - c) * kx2


class TorchHand:
    """Differentiable fingertip FK over the HandModel, batched."""

    def __init__(self, model: HandModel):
        self.model = model
        self.lower = torch.tensor(model.lower)
        self.upper = torch.tensor(model.upper)
        self.bases = torch.tensor(geo.finger_bases(model))

    def expand(self, actuated: torch.Tensor) -> torch.Tensor:
        """(B, m) actuated -> (B, joint_count) full configuration, clamped."""
        b = actuated.shape[0]
        cols = [torch.zeros(b)] * self.model.joint_count
        for k, idx in enumerate(self.model.actuated):
            cols[idx] = actuated[:, k]
        for c in self.model.couplings:
            cols[c.passive] = c.ratio * cols[c.driver]
        q = torch.stack(cols, dim=1)
        return torch.clamp(q, self.lower, self.upper)

    def fingertips(self, q: torch.Tensor) -> torch.Tensor:
        """(B, joint_count) -> (B, 5, 3) fingertip positions."""
        b = q.shape[0]
        tips = []
        for finger, sl in zip(self.model.fingers, self.model.finger_slices()):
            r = torch.tensor(finger.base_rotation).expand(b, 3, 3)
            p = torch.tensor(finger.base).expand(b, 3)
            for j, joint in enumerate(finger.joints):
                off = torch.tensor(joint.offset)
                p = p + (r @ off).reshape(b, 3)
                r = r @ _torch_rot(joint.axis, q[:, sl][:, j])
            tip = torch.tensor(finger.tip_offset)
            tips.append(p + (r @ tip).reshape(b, 3))
        return torch.stack(tips, dim=1)


def bounded_angles(raw: torch.Tensor, lower, upper) -> torch.Tensor:
    """tanh squashing into the open interval (lower, upper)."""
    lo = torch.as_tensor(lower)
    hi = torch.as_tensor(upper)
    mid = (lo + hi) / 2.0
    half = (hi - lo) / 2.0
    return mid + half * torch.tanh(raw)


def bounded_angles_np(raw, lower, upper):
    mid = (np.asarray(lower) + np.asarray(upper)) / 2.0
    half = (np.asarray(upper) - np.asarray(lower)) / 2.0
    return mid + half * np.tanh(np.asarray(raw, dtype=float))


# ---------------------------------------------------------------------------
# Retargeting network
# ---------------------------------------------------------------------------

# Actuated vector layout of the desk hand: [thumb_abd, thumb_flex, index_mcp,
# middle_mcp, ring_mcp, little_mcp].
THUMB_ACT = (0, 1)
FINGER_ACT = (2, 3, 4, 5)


@dataclass(frozen=True)
class RetargetNet:
    four_finger: nets.MlpParams   # keypoints -> 4 non-thumb MCP angles (raw)
    thumb: nets.MlpParams         # keypoints -> 2 thumb angles (raw)
    stage: int = 1                # highest completed training stage


def init_retarget_net(hidden=(64, 64), seed: int = 0) -> RetargetNet:
    rng = np.random.default_rng(seed)
    four = nets.init_mlp((KEYPOINT_DIM, *hidden, 4), "relu", rng)
    thumb = nets.init_mlp((KEYPOINT_DIM, *hidden, 2), "relu", rng)
    return RetargetNet(four, thumb, stage=0)


def _batch_arrays(samples):
    x = np.stack([s.flat() for s in samples])
    r = np.stack([s.root_to_tip for s in samples])
    d = np.stack([s.extents for s in samples])
    tips = np.stack([s.tips for s in samples])
    return x, r, d, tips


def _actuated_from_nets(tf_four, tf_thumb, x: torch.Tensor, hand: TorchHand, model: HandModel):
    """Bounded actuated vector (B, 6) from the two stage networks."""
    lo = model.actuated_lower
    hi = model.actuated_upper
    four = bounded_angles(tf_four(x), lo[list(FINGER_ACT)], hi[list(FINGER_ACT)])
    thumb = bounded_angles(tf_thumb(x), lo[list(THUMB_ACT)], hi[list(THUMB_ACT)])
    return torch.cat([thumb, four], dim=1)


def _stage1_loss_torch(tf_four, batch, cfg: Stage1LossConfig, hand: TorchHand, model: HandModel):
    x_np, r_h, d, _ = batch
    x = INPUT_SCALE * torch.tensor(x_np)
    b = x.shape[0]
    lo, hi = model.actuated_lower, model.actuated_upper
    four = bounded_angles(tf_four(x), lo[list(FINGER_ACT)], hi[list(FINGER_ACT)])
    act = torch.cat([torch.zeros(b, 2), four], dim=1)
    q = hand.expand(act)
    tips = hand.fingertips(q)
    bases = hand.bases.expand(b, 5, 3)
    r_robot = tips[:, 1:, :] - bases[:, 1:, :]
    d_t = torch.tensor(d[:, 1:])
    s = 1.0 + cfg.weight_beta * torch.exp(-d_t / cfg.weight_d0)
    unit = torch.tensor(r_h[:, 1:, :]) / (d_t[:, :, None] + cfg.eps)
    target = cfg.kappa * d_t[:, :, None] * unit
    resid = ((r_robot - target) ** 2).sum(dim=2)
    per_sample = 0.5 * (s * resid).sum(dim=1) + cfg.gamma * (q**2).sum(dim=1)
    return per_sample.mean()


def stage1_loss(net: RetargetNet, samples, cfg: Stage1LossConfig | None = None, model: HandModel | None = None) -> float:
    """Mean intra-finger vector loss of the four-finger net over a batch."""
    if not samples:
        raise ValueError("batch must be non-empty")
    cfg = cfg or Stage1LossConfig()
    model = model or desk_hand_model()
    hand = TorchHand(model)
    tf = nets.TorchMlp(net.four_finger, requires_grad=False)
    with torch.no_grad():
        return float(_stage1_loss_torch(tf, _batch_arrays(samples), cfg, hand, model))


def _run_adam(params: nets.MlpParams, loss_closure, steps, batch_iter, lr):
    """Generic training loop; loss_closure(torch_mlp, batch) -> scalar tensor."""
    adam = nets.AdamState(lr=lr)
    history = []
    for _ in range(steps):
        batch = next(batch_iter)
        loss, g = nets.grad(loss_closure, params, batch)
        if not np.isfinite(loss):
            raise TrainingError("training diverged")
        history.append(loss)
        params = adam.step(params, g)
    return params, history


def _minibatches(arrays, batch_size, rng):
    n = arrays[0].shape[0]
    while True:
        idx = rng.integers(0, n, size=min(batch_size, n))
        yield tuple(a[idx] for a in arrays)


def train_stage1(dataset, cfg: Stage1LossConfig | None = None, hyper: TrainConfig | None = None,
                 model: HandModel | None = None, net: RetargetNet | None = None):
    """Train the four-finger net on the intra-finger vector loss.

    Returns (net with trained four_finger part, per-step loss history).
    """
    cfg = cfg or Stage1LossConfig()
    hyper = hyper or TrainConfig()
    model = model or desk_hand_model()
    if len(dataset) < 2:
        # single-pose memorization is allowed for tests; normal runs use >=500
        dataset = list(dataset) * 2
    hand = TorchHand(model)
    net = net or init_retarget_net(hyper.hidden, hyper.seed)
    rng = np.random.default_rng(hyper.seed)
    arrays = _batch_arrays(dataset)

    def closure(tf, batch):
        return _stage1_loss_torch(tf, batch, cfg, hand, model)

    trained, history = _run_adam(
        net.four_finger, closure, hyper.steps, _minibatches(arrays, hyper.batch_size, rng), hyper.lr
    )
    return replace(net, four_finger=trained, stage=1), history


def stage1_vector_rmse(net: RetargetNet, samples, cfg: Stage1LossConfig | None = None,
                       model: HandModel | None = None) -> float:
    """RMS norm of the non-thumb fingertip-vector residual, meters."""
    cfg = cfg or Stage1LossConfig()
    model = model or desk_hand_model()
    x, r_h, d, _ = _batch_arrays(samples)
    act = retarget_batch(net, x, model)
    bases = geo.finger_bases(model)
    errs = []
    for k in range(x.shape[0]):
        q = geo.expand_coupling(model, act[k])
        tips = geo.fk_fingertips(model, q)
        r_robot = tips[1:] - bases[1:]
        target = cfg.f(d[k, 1:])[:, None] * (r_h[k, 1:] / (d[k, 1:][:, None] + cfg.eps))
        errs.append(np.sum((r_robot - target) ** 2, axis=1))
    return float(np.sqrt(np.mean(np.concatenate(errs))))


# ---------------------------------------------------------------------------
# Stage 2: thumb objective
# ---------------------------------------------------------------------------


def _stage2_terms(tf_four, tf_thumb, batch, cfg: Stage2LossConfig, hand: TorchHand,
                  model: HandModel, cover_targets: torch.Tensor | None):
    x_np, r_h, d, h_tips_np = batch
    x = INPUT_SCALE * torch.tensor(x_np)
    b = x.shape[0]
    s1 = cfg.stage1
    act = _actuated_from_nets(tf_four, tf_thumb, x, hand, model)
    q = hand.expand(act)
    tips = hand.fingertips(q)
    h_tips = torch.tensor(h_tips_np)

    # Direction preservation over consecutive sample pairs (thumb tip motion).
    dh = h_tips[1:, 0, :] - h_tips[:-1, 0, :]
    dr = tips[1:, 0, :] - tips[:-1, 0, :]
    nh = torch.linalg.norm(dh, dim=1) + s1.eps
    nr = torch.linalg.norm(dr, dim=1) + s1.eps
    cos = (dh * dr).sum(dim=1) / (nh * nr)
    l_dir = (1.0 - cos).mean()

    # Workspace coverage: scaled human thumb workspace -> nearest robot thumb tip.
    if cover_targets is None:
        cover_targets = s1.kappa * h_tips[:, 0, :]
    dists = torch.cdist(cover_targets, tips[:, 0, :])
    l_cover = dists.min(dim=1).values.mean()

    # Flatness: second difference of the thumb mapping along keypoint paths.
    x_mid = (x[1:] + x[:-1]) / 2.0
    lo = model.actuated_lower[list(THUMB_ACT)]
    hi = model.actuated_upper[list(THUMB_ACT)]
    y0 = bounded_angles(tf_thumb(x[:-1]), lo, hi)
    y1 = bounded_angles(tf_thumb(x_mid), lo, hi)
    y2 = bounded_angles(tf_thumb(x[1:]), lo, hi)
    l_flat = ((y0 - 2.0 * y1 + y2) ** 2).sum(dim=1).mean()

    # Pinch preservation on near-contact thumb-finger pairs.
    pinch_terms = []
    for (_, fb) in [p for p in cfg.pairs if p[0] == 0]:
        d_pair = torch.linalg.norm(h_tips[:, 0, :] - h_tips[:, fb, :], dim=1)
        mask = d_pair < cfg.pinch_distance
        if mask.any():
            r_pair = torch.linalg.norm(tips[:, 0, :] - tips[:, fb, :], dim=1)
            sw = 1.0 + s1.weight_beta * torch.exp(-d_pair[mask] / s1.weight_d0)
            pinch_terms.append((sw * (r_pair[mask] - s1.kappa * d_pair[mask]) ** 2).sum())
    l_pinch = (
        torch.stack(pinch_terms).sum() / b if pinch_terms else torch.zeros(())
    )

    # Inter-fingertip pair vectors, same form as the stage-1 vector loss.
    kin = torch.zeros(b)
    for (fa, fb) in cfg.pairs:
        v_h = h_tips[:, fb, :] - h_tips[:, fa, :]
        d_pair = torch.linalg.norm(v_h, dim=1)
        unit = v_h / (d_pair[:, None] + s1.eps)
        target = s1.kappa * d_pair[:, None] * unit
        v_r = tips[:, fb, :] - tips[:, fa, :]
        sw = 1.0 + s1.weight_beta * torch.exp(-d_pair / s1.weight_d0)
        kin = kin + 0.5 * sw * ((v_r - target) ** 2).sum(dim=1)
    l_kin = (kin + s1.gamma * (q**2).sum(dim=1)).mean()

    return {"dir": l_dir, "cover": l_cover, "flat": l_flat, "pinch": l_pinch, "kin": l_kin}


def _stage2_total(terms, cfg: Stage2LossConfig):
    return (
        cfg.lambda_dir * terms["dir"]
        + cfg.lambda_cover * terms["cover"]
        + cfg.lambda_flat * terms["flat"]
        + cfg.lambda_pinch * terms["pinch"]
        + cfg.lambda_kin * terms["kin"]
    )


def stage2_loss(net: RetargetNet, samples, cfg: Stage2LossConfig | None = None,
                model: HandModel | None = None):
    """Combined thumb objective; returns (total, per-term breakdown)."""
    cfg = cfg or Stage2LossConfig()
    model = model or desk_hand_model()
    hand = TorchHand(model)
    tf_four = nets.TorchMlp(net.four_finger, requires_grad=False)
    tf_thumb = nets.TorchMlp(net.thumb, requires_grad=False)
    with torch.no_grad():
        terms = _stage2_terms(tf_four, tf_thumb, _batch_arrays(samples), cfg, hand, model, None)
        total = _stage2_total(terms, cfg)
    return float(total), {k: float(v) for k, v in terms.items()}


def _cover_reference(kappa: float) -> torch.Tensor:
    """Fixed grid of scaled human thumb-tip positions used by the coverage term."""
    pts = []
    for curl in np.linspace(0.0, 1.0, 8):
        for abd in np.linspace(-0.3, 0.3, 5):
            kp = human_hand_keypoints([curl, 0, 0, 0, 0], [abd, 0, 0, 0, 0])
            pts.append(kp[_FINGER_TIP_IDX["thumb"]])
    return torch.tensor(kappa * np.stack(pts))


def train_stage2(dataset, cfg: Stage2LossConfig | None = None, hyper: TrainConfig | None = None,
                 model: HandModel | None = None, net: RetargetNet | None = None):
    """Train the thumb net with the combined objective; stage-1 weights stay frozen.

    Returns (complete net, per-step loss history).
    """
    cfg = cfg or Stage2LossConfig()
    hyper = hyper or TrainConfig()
    model = model or desk_hand_model()
    if net is None or net.stage < 1:
        raise ValueError("stage 1 must be trained (and frozen) before stage 2")
    hand = TorchHand(model)
    tf_four = nets.TorchMlp(net.four_finger, requires_grad=False)
    cover = _cover_reference(cfg.stage1.kappa)
    rng = np.random.default_rng(hyper.seed + 1)
    arrays = _batch_arrays(dataset)

    def closure(tf_thumb, batch):
        return _stage2_total(_stage2_terms(tf_four, tf_thumb, batch, cfg, hand, model, cover), cfg)

    trained, history = _run_adam(
        net.thumb, closure, hyper.steps, _minibatches(arrays, hyper.batch_size, rng), hyper.lr
    )
    return replace(net, thumb=trained, stage=2), history


def train_joint_ablation(dataset, cfg: Stage2LossConfig | None = None,
                         hyper: TrainConfig | None = None, model: HandModel | None = None):
    """Single five-finger net trained on both objectives at once from scratch.

    Serves as the collapse baseline: with the thumb objective active from
    step 0, its pinch and coverage gradients flow into the non-thumb outputs
    and drag them toward pinch-like closure instead of letting the
    intra-finger vector loss converge first.
    """
    cfg = cfg or Stage2LossConfig()
    hyper = hyper or TrainConfig()
    model = model or desk_hand_model()
    hand = TorchHand(model)
    joint = nets.init_mlp((KEYPOINT_DIM, *hyper.hidden, 6), "relu", np.random.default_rng(hyper.seed + 2))
    cover = _cover_reference(cfg.stage1.kappa)
    rng = np.random.default_rng(hyper.seed + 3)
    arrays = _batch_arrays(dataset)

    def closure(tf, batch):
        def thumb_fn(x):
            return tf(x)[:, :2]

        def four_fn(x):
            return tf(x)[:, 2:]

        tracking = _stage1_loss_torch(four_fn, batch, cfg.stage1, hand, model)
        return tracking + _stage2_total(
            _stage2_terms(four_fn, thumb_fn, batch, cfg, hand, model, cover), cfg)

    trained, history = _run_adam(
        joint, closure, hyper.steps, _minibatches(arrays, hyper.batch_size, rng), hyper.lr
    )
    return trained, history


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def retarget_batch(net: RetargetNet, keypoints_flat: np.ndarray, model: HandModel | None = None) -> np.ndarray:
    """(B, 63) keypoints -> (B, 6) clamped actuated angles."""
    model = model or desk_hand_model()
    lo, hi = model.actuated_lower, model.actuated_upper
    x = INPUT_SCALE * np.atleast_2d(np.asarray(keypoints_flat, dtype=float))
    four = bounded_angles_np(nets.forward(net.four_finger, x), lo[list(FINGER_ACT)], hi[list(FINGER_ACT)])
    thumb = bounded_angles_np(nets.forward(net.thumb, x), lo[list(THUMB_ACT)], hi[list(THUMB_ACT)])
    act = np.concatenate([thumb, four], axis=1)
    return np.clip(act, lo, hi)


def oracle_retarget(sample: HumanHandSample, model: HandModel | None = None) -> np.ndarray:
    """Exact curl-to-joint mapping (the generator's inverse), clamped.

    The robot hand is a scaled copy of the synthetic human hand, so this
    mapping reproduces the scaled fingertip targets without any training. It
    serves as the training-free oracle route wherever a retargeter is needed
    but retargeting quality is not under test.
    """
    model = model or desk_hand_model()
    act = np.concatenate([
        [sample.abductions[0], THUMB_CURL_TO_FLEX * sample.curls[0]],
        CURL_TO_MCP * np.asarray(sample.curls[1:], dtype=float),
    ])
    return model.clamp_actuated(act)


def ablation_retarget_batch(params: nets.MlpParams, keypoints_flat: np.ndarray,
                            model: HandModel | None = None) -> np.ndarray:
    """(B, 63) keypoints -> (B, 6) actuated angles from the single-net ablation."""
    model = model or desk_hand_model()
    lo, hi = model.actuated_lower, model.actuated_upper
    x = INPUT_SCALE * np.atleast_2d(np.asarray(keypoints_flat, dtype=float))
    raw = nets.forward(params, x)
    thumb = bounded_angles_np(raw[:, :2], lo[list(THUMB_ACT)], hi[list(THUMB_ACT)])
    four = bounded_angles_np(raw[:, 2:], lo[list(FINGER_ACT)], hi[list(FINGER_ACT)])
    return np.clip(np.concatenate([thumb, four], axis=1), lo, hi)


def retarget(net: RetargetNet, sample: HumanHandSample, model: HandModel | None = None) -> np.ndarray:
    """Map one human hand sample to the robot's actuated joint vector."""
    return retarget_batch(net, sample.flat()[None, :], model)[0]


def save_retarget_net(path, net: RetargetNet):
    nets.save_checkpoint(
        path,
        {"four_finger": net.four_finger, "thumb": net.thumb},
        meta={"kind": "retarget", "stage": net.stage},
    )


def load_retarget_net(path) -> RetargetNet:
    params, meta = nets.load_checkpoint(path)
    return RetargetNet(params["four_finger"], params["thumb"], stage=int(meta.get("stage", 2)))


class HandRetargeter(BaseEstimator, TransformerMixin):
    """Estimator wrapper: fit() runs both training stages on human hand samples,
    transform() maps samples (or flattened keypoint arrays) to actuated angles."""

    def __init__(self, stage1_cfg=None, stage2_cfg=None, hyper=None, stage2_hyper=None):
        self.stage1_cfg = stage1_cfg
        self.stage2_cfg = stage2_cfg
        self.hyper = hyper
        self.stage2_hyper = stage2_hyper

    def fit(self, samples, y=None):
        hyper = self.hyper or TrainConfig()
        net, self.stage1_history_ = train_stage1(samples, self.stage1_cfg, hyper)
        net, self.stage2_history_ = train_stage2(
            samples, self.stage2_cfg, self.stage2_hyper or hyper, net=net
        )
        self.net_ = net
        return self

    def transform(self, samples):
        if not hasattr(self, "net_"):
            raise RuntimeError("HandRetargeter is not fitted")
        if isinstance(samples, np.ndarray):
            return retarget_batch(self.net_, samples.reshape(len(samples), -1))
        return retarget_batch(self.net_, np.stack([s.flat() for s in samples]))
