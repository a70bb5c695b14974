"""Human-in-the-loop post-training pipeline.

Intervention-flagged trajectory datasets, importance weighting that boosts
human-correction samples to a target share, terminal-segment filtering,
warm-up behaviour cloning, and the iterative collect/aggregate/update round
loop. Episodes persist as line-delimited JSON plus a hashed manifest under
``runs/<name>/round_<i>/``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fm_policy, teleop
from .env import DeskEnv, ScriptedExpert, TaskSpec

__all__ = [
    "CATEGORIES",
    "TrajectoryRecord",
    "WeightingConfig",
    "WeightingError",
    "RoundState",
    "target_distribution",
    "compute_weights",
    "filter_terminal_segment",
    "records_from_episode",
    "offline_records",
    "save_episode",
    "load_episode",
    "write_manifest",
    "load_manifest",
    "training_arrays",
    "action_bounds",
    "make_policy_fn",
    "Normalizer",
    "PolicyBundle",
    "NullSource",
    "warmup_train",
    "weighted_update",
    "collect_demos",
    "collect_online_episodes",
    "evaluate",
    "run_round",
]

CATEGORIES = ("offline", "autonomous", "intervention")
EPISODE_SECONDS = 8.0


class WeightingError(ValueError):
    """A category with positive target probability has no samples."""


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryRecord:
    """One logged control tick: observation, executed command, authority flag."""

    episode_id: str
    t: int
    observation: np.ndarray
    q_arm: np.ndarray
    q_hand: np.ndarray
    i_t: int
    category: str
    round_tag: str

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.category == "offline" and self.i_t != 0:
            raise ValueError("offline records always carry i_t = 0")
        if self.category != "offline" and self.i_t != (self.category == "intervention"):
            raise ValueError("online category must mirror the i_t flag")

    @property
    def action(self) -> np.ndarray:
        return np.concatenate([self.q_arm, self.q_hand])

    def to_json(self) -> str:
        return json.dumps({
            "episode_id": self.episode_id,
            "t": self.t,
            "o": np.asarray(self.observation, dtype=float).tolist(),
            "q_arm": np.asarray(self.q_arm, dtype=float).tolist(),
            "q_hand": np.asarray(self.q_hand, dtype=float).tolist(),
            "i_t": int(self.i_t),
            "category": self.category,
            "round_tag": self.round_tag,
        })

    @staticmethod
    def from_json(line: str) -> "TrajectoryRecord":
        d = json.loads(line)
        return TrajectoryRecord(
            episode_id=d["episode_id"], t=int(d["t"]),
            observation=np.asarray(d["o"], dtype=float),
            q_arm=np.asarray(d["q_arm"], dtype=float),
            q_hand=np.asarray(d["q_hand"], dtype=float),
            i_t=int(d["i_t"]), category=d["category"],
            round_tag=d["round_tag"],
        )


@dataclass(frozen=True)
class WeightingConfig:
    """Target category distribution; corrections get half the effective mass."""

    p_intervention: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.p_intervention < 1.0:
            raise ValueError("p_intervention must lie in (0, 1)")


def category_counts(records) -> dict:
    counts: dict = {}
    for r in records:
        counts[r.category] = counts.get(r.category, 0) + 1
    return counts


def target_distribution(counts: dict, cfg: WeightingConfig) -> dict:
    """Target P*: fixed intervention share, remainder split by empirical mass.

    When no intervention samples exist the target collapses to the empirical
    distribution (identity reweighting), so clean autonomous rounds still run.
    """
    n_int = counts.get("intervention", 0)
    total = sum(counts.values())
    if total == 0:
        raise WeightingError("empty dataset")
    others = {c: n for c, n in counts.items() if c != "intervention" and n > 0}
    if n_int == 0 or not others:
        return {c: n / total for c, n in counts.items()}
    rest = sum(others.values())
    share = 1.0 - cfg.p_intervention
    target = {c: share * n / rest for c, n in others.items()}
    target["intervention"] = cfg.p_intervention
    return target


def compute_weights(records, cfg: WeightingConfig) -> dict:
    """Importance weight per category: w(c) = P*(c) / (n_c / N)."""
    counts = category_counts(records)
    target = target_distribution(counts, cfg)
    total = sum(counts.values())
    for c, p in target.items():
        if p > 0.0 and counts.get(c, 0) == 0:
            raise WeightingError(f"category {c!r} has target mass but no samples")
    return {c: target[c] / (counts[c] / total) for c in counts}


# ---------------------------------------------------------------------------
# Episode -> records
# ---------------------------------------------------------------------------


def _tick_to_record(rec: teleop.TickRecord, episode_id: str, category: str,
                    round_tag: str, arm_dof: int) -> TrajectoryRecord:
    action = np.asarray(rec.arm_command, dtype=float)
    return TrajectoryRecord(
        episode_id=episode_id, t=rec.tick,
        observation=np.asarray(rec.observation, dtype=float),
        q_arm=action[:arm_dof],
        q_hand=np.asarray(rec.hand_command, dtype=float),
        i_t=rec.i_t if category != "offline" else 0,
        category=category, round_tag=round_tag,
    )


def records_from_episode(log: teleop.EpisodeLog, episode_id: str, round_tag: str,
                         arm_dof: int) -> list:
    """Label online ticks by authority: human ticks are interventions."""
    out = []
    for rec in log.records:
        if rec.hand_command.size == 0:
            continue  # no hand command issued yet on this tick
        category = "intervention" if rec.i_t else "autonomous"
        out.append(_tick_to_record(rec, episode_id, category, round_tag, arm_dof))
    return out


def offline_records(log: teleop.EpisodeLog, episode_id: str, round_tag: str,
                    arm_dof: int) -> list:
    """Demonstration ticks: every record is offline with the flag cleared."""
    return [
        _tick_to_record(rec, episode_id, "offline", round_tag, arm_dof)
        for rec in log.records if rec.hand_command.size
    ]


def filter_terminal_segment(log: teleop.EpisodeLog, episode_id: str,
                            round_tag: str, arm_dof: int) -> list:
    """Keep the span from the last intervention start to episode end.

    Failed episodes contribute nothing; episodes without interventions pass
    through unchanged.
    """
    if log.outcome != "success":
        return []
    records = records_from_episode(log, episode_id, round_tag, arm_dof)
    windows = log.intervention_windows()
    if not windows:
        return records
    start = windows[-1][0]
    return [r for r in records if r.t >= start]


# ---------------------------------------------------------------------------
# Persistence: LDJSON episodes + hashed manifest
# ---------------------------------------------------------------------------


def save_episode(path, records) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = "".join(r.to_json() + "\n" for r in records)
    path.write_text(body)
    return hashlib.sha256(body.encode()).hexdigest()


def load_episode(path) -> list:
    with open(path) as fh:
        return [TrajectoryRecord.from_json(line) for line in fh if line.strip()]


def write_manifest(directory, episode_files: dict) -> Path:
    """episode_files: {filename: records}; writes episodes + category counts."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    episodes, counts = [], {}
    for name, records in sorted(episode_files.items()):
        digest = save_episode(directory / name, records)
        for c, n in category_counts(records).items():
            counts[c] = counts.get(c, 0) + n
        episodes.append({
            "file": name,
            "episode_id": records[0].episode_id if records else None,
            "records": len(records),
            "sha256": digest,
        })
    manifest = {
        "episodes": episodes,
        "counts": counts,
        "total": sum(counts.values()),
    }
    out = directory / "manifest.json"
    out.write_text(json.dumps(manifest, indent=2))
    return out


def load_manifest(directory, verify: bool = False) -> dict:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    if verify:
        for entry in manifest["episodes"]:
            body = (directory / entry["file"]).read_text()
            digest = hashlib.sha256(body.encode()).hexdigest()
            if digest != entry["sha256"]:
                raise ValueError(f"episode file {entry['file']} does not match "
                                 "its recorded checksum")
    return manifest


# ---------------------------------------------------------------------------
# Training arrays
# ---------------------------------------------------------------------------


def training_arrays(records, horizon: int, weight_map: dict | None = None):
    """(obs, action-chunk, per-sample weight) triplets from tick records.

    Chunks stack the next `horizon` executed actions within the episode,
    padding with the final action; the sample's weight follows the category
    of its head record.
    """
    by_episode: dict = {}
    for r in records:
        by_episode.setdefault(r.episode_id, []).append(r)
    obs_rows, act_rows, w_rows = [], [], []
    for recs in by_episode.values():
        recs = sorted(recs, key=lambda r: r.t)
        actions = np.stack([r.action for r in recs])
        for i, r in enumerate(recs):
            chunk = actions[i:i + horizon]
            if len(chunk) < horizon:
                pad = np.repeat(chunk[-1:], horizon - len(chunk), axis=0)
                chunk = np.concatenate([chunk, pad])
            obs_rows.append(np.asarray(r.observation, dtype=float))
            act_rows.append(chunk)
            w_rows.append(1.0 if weight_map is None else weight_map[r.category])
    return np.stack(obs_rows), np.stack(act_rows), np.asarray(w_rows)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Normalizer:
    """Per-dimension standardization fit once on the warm-up set and frozen,
    so later warm-started updates stay in the same coordinates."""

    obs_mean: np.ndarray
    obs_std: np.ndarray
    act_mean: np.ndarray
    act_std: np.ndarray

    @classmethod
    def fit(cls, obs: np.ndarray, actions: np.ndarray) -> "Normalizer":
        flat = actions.reshape(len(actions), -1)
        return cls(
            obs_mean=obs.mean(axis=0), obs_std=obs.std(axis=0) + 1e-8,
            act_mean=flat.mean(axis=0), act_std=flat.std(axis=0) + 1e-8,
        )

    def norm_obs(self, obs):
        return (np.asarray(obs, dtype=float) - self.obs_mean) / self.obs_std

    def norm_actions(self, actions: np.ndarray) -> np.ndarray:
        flat = actions.reshape(len(actions), -1)
        return ((flat - self.act_mean) / self.act_std).reshape(actions.shape)

    def denorm_chunk(self, chunk: np.ndarray) -> np.ndarray:
        shape = chunk.shape
        return (chunk.reshape(-1) * self.act_std + self.act_mean).reshape(shape)

    def to_meta(self) -> dict:
        return {
            "obs_mean": self.obs_mean.tolist(), "obs_std": self.obs_std.tolist(),
            "act_mean": self.act_mean.tolist(), "act_std": self.act_std.tolist(),
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "Normalizer":
        return cls(*(np.asarray(meta[k], dtype=float)
                     for k in ("obs_mean", "obs_std", "act_mean", "act_std")))


@dataclass(frozen=True)
class PolicyBundle:
    """Trained flow-matching parameters plus their input/output coordinates."""

    params: fm_policy.PolicyParams
    norm: Normalizer

    def save(self, path, meta: dict | None = None) -> None:
        doc = dict(meta or {})
        doc["normalizer"] = self.norm.to_meta()
        fm_policy.save_policy(path, self.params, doc)

    @classmethod
    def load(cls, path) -> "PolicyBundle":
        from . import nets
        named, meta = nets.load_checkpoint(path)
        params = fm_policy.PolicyParams(
            named["encoder"], named["velocity"],
            int(meta["obs_dim"]), int(meta["action_dim"]), int(meta["horizon"]),
        )
        return cls(params, Normalizer.from_meta(meta["normalizer"]))


# ---------------------------------------------------------------------------
# Rollout plumbing
# ---------------------------------------------------------------------------


class NullSource:
    """Teleop source that never intervenes (pure policy evaluation)."""

    def wants_intervention(self, t, plant) -> bool:
        return False

    def marker(self, t, anchor):
        return None

    def hand_command(self, t):
        return None


def action_bounds(env: DeskEnv):
    lower = np.concatenate([env.arm.lower, env.hand.actuated_lower])
    upper = np.concatenate([env.arm.upper, env.hand.actuated_upper])
    return lower, upper


def make_policy_fn(bundle: PolicyBundle, env: DeskEnv, seed: int = 0,
                   mean_samples: int = 1):
    """Seeded chunk sampler clipped to the plant's joint limits.

    `mean_samples > 1` averages several flow samples into the conditional
    mean action; useful for policies trained on clean demonstrations, harmful
    under heavy label noise where the sampled modes carry the signal.
    """
    rng = np.random.default_rng(seed)
    lower, upper = action_bounds(env)
    params, norm = bundle.params, bundle.norm

    def policy_fn(obs):
        nobs = norm.norm_obs(obs)
        chunk = np.mean([fm_policy.sample_action(params, nobs, rng=rng)
                         for _ in range(mean_samples)], axis=0)
        return np.clip(norm.denorm_chunk(chunk), lower, upper)

    return policy_fn


# ---------------------------------------------------------------------------
# Training entry points
# ---------------------------------------------------------------------------


def warmup_train(records, cfg: fm_policy.PolicyConfig):
    """Full behaviour-cloning pass over offline demonstrations."""
    if not records:
        raise ValueError("warm-up requires a non-empty demonstration set")
    if any(r.category != "offline" for r in records):
        raise ValueError("warm-up data must be offline demonstrations")
    obs, actions, _ = training_arrays(records, cfg.horizon)
    norm = Normalizer.fit(obs, actions)
    params = fm_policy.init_policy(cfg)
    params, history = fm_policy.train_policy(
        params, norm.norm_obs(obs), norm.norm_actions(actions), cfg)
    if not np.isfinite(history[-1]):
        raise RuntimeError("warm-up training diverged")
    return PolicyBundle(params, norm), history


def weighted_update(bundle: PolicyBundle, records,
                    wcfg: WeightingConfig, cfg: fm_policy.PolicyConfig,
                    weight_map: dict | None = None):
    """Warm-started update with per-sample category weights."""
    weight_map = compute_weights(records, wcfg) if weight_map is None else weight_map
    obs, actions, weights = training_arrays(records, cfg.horizon, weight_map)
    norm = bundle.norm
    params, history = fm_policy.train_policy(
        bundle.params, norm.norm_obs(obs), norm.norm_actions(actions), cfg, weights)
    if not np.isfinite(history[-1]):
        raise RuntimeError("weighted update diverged")
    return PolicyBundle(params, norm), history, weight_map


# ---------------------------------------------------------------------------
# Collection and evaluation
# ---------------------------------------------------------------------------


def collect_demos(task: TaskSpec, retarget_fn, count: int, round_tag: str = "warmup",
                  noise: float = 0.0, seed: int = 0, keep_failures: bool = False):
    """Scripted-expert demonstrations; returns {episode_id: records}."""
    episodes: dict = {}
    attempt = 0
    zero = _zero_policy_fn()
    while len(episodes) < count and attempt < 4 * count:
        env = DeskEnv(task, seed=seed + attempt)
        expert = ScriptedExpert(env, retarget_fn, mode="drive",
                                noise=noise, seed=seed + attempt)
        log = teleop.run_scheduler(zero, expert, env, duration_s=EPISODE_SECONDS)
        attempt += 1
        if log.outcome != "success" and not keep_failures:
            continue
        eid = f"{task.task_id}-demo-{seed + attempt - 1:04d}"
        episodes[eid] = offline_records(log, eid, round_tag, env.arm_dof)
    if len(episodes) < count:
        raise RuntimeError("demonstration budget exhausted before target count")
    return episodes


def _zero_policy_fn():
    def fn(obs):
        return np.zeros((fm_policy.HORIZON, 12))
    return fn


def collect_online_episodes(bundle: PolicyBundle, task: TaskSpec,
                            retarget_fn, round_tag: str, count: int = 10,
                            budget: int = 30, seed: int = 0,
                            noise: float = 0.0):
    """Policy rollouts watched by the monitor expert; terminal-filtered.

    Returns ({episode_id: records}, stats). `stats["partial"]` flags budget
    exhaustion before `count` retained episodes.
    """
    episodes: dict = {}
    interventions = 0
    intervention_ticks = 0
    attempt = 0
    while len(episodes) < count and attempt < budget:
        ep_seed = seed + attempt
        env = DeskEnv(task, seed=ep_seed)
        expert = ScriptedExpert(env, retarget_fn, mode="monitor",
                                noise=noise, seed=ep_seed)
        policy_fn = make_policy_fn(bundle, env, seed=ep_seed)
        log = teleop.run_scheduler(policy_fn, expert, env, duration_s=EPISODE_SECONDS)
        attempt += 1
        eid = f"{task.task_id}-{round_tag}-{ep_seed:04d}"
        records = filter_terminal_segment(log, eid, round_tag, env.arm_dof)
        if not records:
            continue
        episodes[eid] = records
        windows = log.intervention_windows()
        interventions += len(windows)
        intervention_ticks += sum(b - a for a, b in windows)
    stats = {
        "attempts": attempt,
        "retained": len(episodes),
        "interventions": interventions,
        "intervention_ticks": intervention_ticks,
        "partial": len(episodes) < count,
    }
    return episodes, stats


def evaluate(bundle: PolicyBundle, task: TaskSpec,
             episodes: int = 20, seed: int = 10_000) -> int:
    """Deterministic-seeded autonomous rollouts; returns success count."""
    successes = 0
    source = NullSource()
    for k in range(episodes):
        env = DeskEnv(task, seed=seed + k)
        policy_fn = make_policy_fn(bundle, env, seed=seed + k)
        log = teleop.run_scheduler(policy_fn, source, env, duration_s=EPISODE_SECONDS)
        successes += log.outcome == "success"
    return successes


# ---------------------------------------------------------------------------
# Round loop
# ---------------------------------------------------------------------------


@dataclass
class RoundState:
    """Artifacts and metrics of one online round."""

    index: int
    dataset: list
    new_records: int
    bundle: PolicyBundle
    success_before: int
    eval_episodes: int
    loss_history: list
    weights: dict
    collection: dict
    partial: bool = False
    metrics: dict = field(default_factory=dict)


def run_round(index: int, bundle: PolicyBundle, dataset: list,
              task: TaskSpec, retarget_fn, cfg: fm_policy.PolicyConfig,
              wcfg: WeightingConfig = WeightingConfig(),
              episodes_per_round: int = 10, eval_episodes: int = 20,
              seed: int = 0, run_dir=None, weighted: bool = True,
              operator_noise: float = 0.0) -> RoundState:
    """One collect/aggregate/update cycle starting from policy `params`.

    Evaluates the incoming policy, gathers monitor-supervised rollouts,
    aggregates them onto `dataset` (append-only), and fine-tunes with
    intervention-aware weights (or uniform weights when `weighted=False`,
    the ablation variant).
    """
    round_tag = f"round_{index}"
    # one fixed evaluation seed set across rounds, so rate changes measure the
    # policy rather than episode-draw variance
    success_before = evaluate(bundle, task, episodes=eval_episodes)
    episodes, stats = collect_online_episodes(
        bundle, task, retarget_fn, round_tag,
        count=episodes_per_round, seed=seed + 1_000 * index,
        noise=operator_noise,
    )
    new_records = [r for recs in episodes.values() for r in recs]
    merged = list(dataset) + new_records
    weight_map = None if weighted else {c: 1.0 for c in category_counts(merged)}
    bundle, history, weight_map = weighted_update(bundle, merged, wcfg, cfg,
                                                  weight_map=weight_map)
    state = RoundState(
        index=index, dataset=merged, new_records=len(new_records),
        bundle=bundle, success_before=success_before,
        eval_episodes=eval_episodes, loss_history=history,
        weights=weight_map, collection=stats, partial=stats["partial"],
    )
    state.metrics = {
        "round": index,
        "success_before": success_before,
        "eval_episodes": eval_episodes,
        "new_records": len(new_records),
        "dataset_size": len(merged),
        "weights": weight_map,
        "loss_first10_mean": float(np.mean(history[:10])),
        "loss_final_plateau": float(np.mean(history[-50:])),
        "collection": stats,
    }
    if run_dir is not None:
        rd = Path(run_dir) / round_tag
        write_manifest(rd, {f"{eid}.ldjson": recs for eid, recs in episodes.items()})
        bundle.save(rd / "policy.json", {"round": index})
        (rd / "metrics.json").write_text(json.dumps(state.metrics, indent=2))
    return state
