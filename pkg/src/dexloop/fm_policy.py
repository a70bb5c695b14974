"""Conditional flow-matching action head.

A small observation encoder feeds a velocity-field MLP that is trained to
match the straight-line probability path between Gaussian noise and expert
action chunks. Sampling integrates the learned field with a fixed-step
Euler scheme. Everything is float64 and seeded for bit-determinism.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
from sklearn.base import BaseEstimator

from . import nets

__all__ = [
    "Observation",
    "ActionChunk",
    "PolicyParams",
    "PolicyConfig",
    "init_policy",
    "fm_loss",
    "fm_loss_given",
    "sample_action",
    "train_policy",
    "save_policy",
    "load_policy",
    "FlowMatchingPolicy",
    "HORIZON",
]

HORIZON = 8


@dataclass(frozen=True)
class Observation:
    """State-feature observation: proprioception, object features, task id.

    Layout of flat(): [proprioception..., objects..., float(task_id)].
    The per-task layout is fixed by the dataset schema that produced it.
    """

    proprioception: np.ndarray
    objects: np.ndarray
    task_id: int = 0

    def __post_init__(self):
        p = np.asarray(self.proprioception, dtype=float)
        o = np.asarray(self.objects, dtype=float)
        if p.ndim != 1 or o.ndim != 1:
            raise ValueError("observation fields must be 1-D")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(o))):
            raise ValueError("observation must be finite")
        object.__setattr__(self, "proprioception", p)
        object.__setattr__(self, "objects", o)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.proprioception, self.objects, [float(self.task_id)]])


@dataclass(frozen=True)
class ActionChunk:
    """H x A matrix of absolute joint targets (radians)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("action chunk must be H x A")
        if not np.all(np.isfinite(v)):
            raise ValueError("action chunk must be finite")
        object.__setattr__(self, "values", v)

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    @property
    def action_dim(self) -> int:
        return self.values.shape[1]

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


@dataclass(frozen=True)
class PolicyParams:
    """Encoder + velocity field with the dimensions they were built for."""

    encoder: nets.MlpParams
    velocity: nets.MlpParams
    obs_dim: int
    action_dim: int
    horizon: int

    @property
    def chunk_dim(self) -> int:
        return self.horizon * self.action_dim

    @property
    def context_dim(self) -> int:
        return self.encoder.sizes[-1]


@dataclass
class PolicyConfig:
    """Architecture and training defaults for the action head."""

    obs_dim: int = 13
    action_dim: int = 12
    horizon: int = HORIZON
    context_dim: int = 32
    encoder_hidden: tuple = (64,)
    velocity_hidden: tuple = (128, 128)
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"  # or "sgd"
    lr_warmup_steps: int = 0  # linear lr ramp; softens warm-start shocks
    finetune: str = "full"  # or "head": freeze the encoder
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None


def init_policy(cfg: PolicyConfig) -> PolicyParams:
    rng = np.random.default_rng(cfg.seed)
    enc = nets.init_mlp((cfg.obs_dim, *cfg.encoder_hidden, cfg.context_dim), "relu", rng)
    chunk = cfg.horizon * cfg.action_dim
    vel = nets.init_mlp((chunk + 1 + cfg.context_dim, *cfg.velocity_hidden, chunk), "relu", rng)
    return PolicyParams(enc, vel, cfg.obs_dim, cfg.action_dim, cfg.horizon)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def _velocity_torch(tms, x_t: torch.Tensor, t: torch.Tensor, obs: torch.Tensor) -> torch.Tensor:
    ctx = tms["encoder"](obs)
    return tms["velocity"](torch.cat([x_t, t, ctx], dim=1))


def _fm_loss_torch(tms, batch):
    obs, act, t, x0, w = batch
    x_t = (1.0 - t) * x0 + t * act
    target = act - x0
    v = _velocity_torch(tms, x_t, t, obs)
    per = ((v - target) ** 2).sum(dim=1)
    return (w * per).mean()


def _as_batch(params: PolicyParams, obs, actions):
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    actions = np.asarray(actions, dtype=float)
    if actions.ndim == 3:
        actions = actions.reshape(actions.shape[0], -1)
    actions = np.atleast_2d(actions)
    if obs.shape[1] != params.obs_dim or actions.shape[1] != params.chunk_dim:
        raise ValueError("observation/action width does not match policy dims")
    return obs, actions


def fm_loss_given(params: PolicyParams, obs, actions, t: np.ndarray, x0: np.ndarray,
                  weights: np.ndarray | None = None) -> float:
    """Flow-matching loss at fixed path samples (deterministic; oracle-friendly)."""
    obs, actions = _as_batch(params, obs, actions)
    w = np.ones(len(obs)) if weights is None else np.asarray(weights, dtype=float)
    tms = {
        "encoder": nets.TorchMlp(params.encoder, requires_grad=False),
        "velocity": nets.TorchMlp(params.velocity, requires_grad=False),
    }
    batch = tuple(torch.tensor(np.asarray(a, dtype=float)) for a in
                  (obs, actions, np.reshape(t, (-1, 1)), x0, w))
    with torch.no_grad():
        return float(_fm_loss_torch(tms, (*batch[:4], batch[4])))


def fm_loss(params: PolicyParams, obs, actions, rng, weights: np.ndarray | None = None) -> float:
    """Monte-Carlo flow-matching loss: t ~ U(0,1), x0 ~ N(0, I)."""
    obs, actions = _as_batch(params, obs, actions)
    t = rng.uniform(size=(len(obs), 1))
    x0 = rng.standard_normal(actions.shape)
    return fm_loss_given(params, obs, actions, t, x0, weights)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_action(params: PolicyParams, observation, steps: int = 10, rng=None,
                  lower: np.ndarray | None = None,
                  upper: np.ndarray | None = None) -> np.ndarray:
    """Euler-integrate the learned field from noise; returns an (H, A) array."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = rng or np.random.default_rng(0)
    if isinstance(observation, Observation):
        observation = observation.flat()
    o = np.asarray(observation, dtype=float).reshape(1, -1)
    if o.shape[1] != params.obs_dim:
        raise ValueError("observation width does not match policy dims")
    tms = {
        "encoder": nets.TorchMlp(params.encoder, requires_grad=False),
        "velocity": nets.TorchMlp(params.velocity, requires_grad=False),
    }
    x = torch.tensor(rng.standard_normal((1, params.chunk_dim)))
    obs_t = torch.tensor(o)
    dt = 1.0 / steps
    with torch.no_grad():
        for k in range(steps):
            t = torch.full((1, 1), k * dt, dtype=torch.float64)
            x = x + dt * _velocity_torch(tms, x, t, obs_t)
    chunk = x.numpy().reshape(params.horizon, params.action_dim)
    if lower is not None or upper is not None:
        chunk = np.clip(chunk, lower, upper)
    return chunk


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_policy(params: PolicyParams, obs, actions, cfg: PolicyConfig,
                 weights: np.ndarray | None = None):
    """Train on (obs, action-chunk) pairs; returns (params, loss history).

    `weights` are per-sample multipliers on the squared error (all ones by
    default). `cfg.finetune="head"` freezes the encoder.
    """
    obs, actions = _as_batch(params, obs, actions)
    n = len(obs)
    w_all = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if len(w_all) != n or np.any(w_all < 0):
        raise ValueError("weights must be non-negative, one per sample")
    rng = np.random.default_rng(cfg.seed)
    train_encoder = cfg.finetune != "head"
    enc, vel = params.encoder, params.velocity
    opt_e = nets.AdamState(lr=cfg.lr)
    opt_v = nets.AdamState(lr=cfg.lr)
    history = []
    for step in range(cfg.steps):
        lr = cfg.lr
        if cfg.lr_warmup_steps > 0:
            lr *= min(1.0, (step + 1) / cfg.lr_warmup_steps)
        opt_e.lr = opt_v.lr = lr
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        t = rng.uniform(size=(len(idx), 1))
        x0 = rng.standard_normal((len(idx), params.chunk_dim))
        named = {
            "encoder": nets.TorchMlp(enc, requires_grad=train_encoder),
            "velocity": vel,
        }
        batch = tuple(torch.tensor(a) for a in (obs[idx], actions[idx], t, x0, w_all[idx]))
        loss, grads = nets.grad_multi(_fm_loss_torch, named, batch)
        if cfg.optimizer == "sgd":
            vel = nets.sgd_step(vel, grads["velocity"], lr)
            if train_encoder:
                enc = nets.sgd_step(enc, grads["encoder"], lr)
        else:
            vel = opt_v.step(vel, grads["velocity"])
            if train_encoder:
                enc = opt_e.step(enc, grads["encoder"])
        history.append(loss)
    return replace(params, encoder=enc, velocity=vel), history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_policy(path, params: PolicyParams, meta: dict | None = None) -> None:
    doc = dict(meta or {})
    doc.update(
        obs_dim=params.obs_dim, action_dim=params.action_dim, horizon=params.horizon
    )
    nets.save_checkpoint(path, {"encoder": params.encoder, "velocity": params.velocity}, doc)


def load_policy(path) -> PolicyParams:
    named, meta = nets.load_checkpoint(path)
    return PolicyParams(
        named["encoder"], named["velocity"],
        int(meta["obs_dim"]), int(meta["action_dim"]), int(meta["horizon"]),
    )


class FlowMatchingPolicy(BaseEstimator):
    """Estimator wrapper: fit(obs, chunks) trains, predict(obs) samples."""

    def __init__(self, obs_dim=13, action_dim=12, horizon=HORIZON, context_dim=32,
                 steps=2000, batch_size=64, lr=1e-3, seed=0, sample_steps=10):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.horizon = horizon
        self.context_dim = context_dim
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.sample_steps = sample_steps

    def _config(self) -> PolicyConfig:
        return PolicyConfig(
            obs_dim=self.obs_dim, action_dim=self.action_dim, horizon=self.horizon,
            context_dim=self.context_dim, steps=self.steps,
            batch_size=self.batch_size, lr=self.lr, seed=self.seed,
        )

    def fit(self, X, y, sample_weight=None):
        cfg = self._config()
        params = init_policy(cfg)
        self.params_, self.history_ = train_policy(params, X, y, cfg, sample_weight)
        return self

    def predict(self, X, rng=None):
        rng = rng or np.random.default_rng(self.seed)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.stack([
            sample_action(self.params_, x, self.sample_steps, rng) for x in X
        ])
