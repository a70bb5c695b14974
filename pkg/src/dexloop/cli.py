"""Command-line entry points: demo collection, retargeting training, warm-up,
online rounds, evaluation, replay, and the operator bridge server.

All artifacts live under ``runs/<name>/`` with manifests; every command
validates the declarative run config against a JSON schema and refuses to run
when its prerequisites are missing.
"""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path

import click
import jsonschema
import numpy as np

from . import bridge, fm_policy, hil, nets, retargeting
from .env import plush_task, tissue_task

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["name", "task"],
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "task": {"enum": ["tissue", "plush"]},
        "seed": {"type": "integer", "minimum": 0},
        "mode": {"enum": ["oracle", "human"]},
        "warmup_demos": {"type": "integer", "minimum": 1},
        "demo_noise": {"type": "number", "minimum": 0.0},
        "episodes_per_round": {"type": "integer", "minimum": 1},
        "rounds": {"type": "integer", "minimum": 1},
        "eval_episodes": {"type": "integer", "minimum": 1},
        "weighting": {
            "type": "object",
            "properties": {
                "p_intervention": {"type": "number",
                                   "exclusiveMinimum": 0.0,
                                   "exclusiveMaximum": 1.0},
            },
        },
        "policy": {
            "type": "object",
            "properties": {
                "warmup_steps": {"type": "integer", "minimum": 1},
                "round_steps": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0.0},
                "batch_size": {"type": "integer", "minimum": 1},
                "optimizer": {"enum": ["adam", "sgd"]},
                "finetune": {"enum": ["full", "head"]},
            },
        },
    },
}

DEFAULTS = {
    "seed": 0,
    "mode": "oracle",
    "warmup_demos": 60,
    "demo_noise": 0.0,
    "episodes_per_round": 10,
    "rounds": 3,
    "eval_episodes": 20,
    "weighting": {"p_intervention": 0.5},
    "policy": {"warmup_steps": 2000, "round_steps": 1500, "lr": 1e-3,
               "batch_size": 64, "optimizer": "adam", "finetune": "full"},
}


class CliError(click.ClickException):
    exit_code = 2


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(f"config is not valid JSON: {exc}")
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise CliError(f"config schema violation: {exc.message}")
    cfg = json.loads(json.dumps(DEFAULTS))
    for key, value in raw.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    cfg["_hash"] = hashlib.sha256(
        json.dumps(raw, sort_keys=True).encode()).hexdigest()
    return cfg


def _task(cfg):
    return tissue_task() if cfg["task"] == "tissue" else plush_task()


def _run_dir(cfg, root) -> Path:
    d = Path(root) / cfg["name"]
    d.mkdir(parents=True, exist_ok=True)
    stamp = {k: v for k, v in cfg.items() if not k.startswith("_")}
    stamp["config_hash"] = cfg["_hash"]
    (d / "config.json").write_text(json.dumps(stamp, indent=2))
    return d


def _policy_cfg(cfg, steps_key: str, seed_offset: int = 0) -> fm_policy.PolicyConfig:
    from .env import OBS_DIM
    p = cfg["policy"]
    return fm_policy.PolicyConfig(
        obs_dim=OBS_DIM, steps=p[steps_key], lr=p["lr"],
        batch_size=p["batch_size"], optimizer=p["optimizer"],
        finetune=p["finetune"], seed=cfg["seed"] + seed_offset,
    )


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise CliError(f"missing prerequisite {path}: run `{hint}` first")
    return path


def _load_dataset_through(run_dir: Path, upto_round: int) -> list:
    records = []
    dirs = [run_dir / "warmup"]
    dirs += [run_dir / f"round_{i}" for i in range(1, upto_round + 1)]
    for d in dirs:
        manifest = hil.load_manifest(d)
        for ep in manifest["episodes"]:
            records.extend(hil.load_episode(d / ep["file"]))
    return records


@click.group()
@click.option("--config", "config_path", required=True,
              type=click.Path(), help="Run configuration JSON file.")
@click.option("--runs-root", default="runs", show_default=True,
              help="Directory holding run artifacts.")
@click.pass_context
def main(ctx, config_path, runs_root):
    """Human-in-the-loop post-training pipeline for the desk arm-hand stack."""
    cfg = load_config(config_path)
    ctx.obj = {"cfg": cfg, "run_dir": _run_dir(cfg, runs_root)}


@main.command("collect-demos")
@click.option("--count", type=int, default=None, help="Override demo count.")
@click.pass_obj
def collect_demos_cmd(obj, count):
    """Collect scripted-expert demonstrations into the warm-up dataset."""
    cfg, run_dir = obj["cfg"], obj["run_dir"]
    n = count or cfg["warmup_demos"]
    episodes = hil.collect_demos(
        _task(cfg), retargeting.oracle_retarget, count=n,
        noise=cfg["demo_noise"], seed=cfg["seed"], keep_failures=cfg["demo_noise"] > 0,
    )
    manifest = hil.write_manifest(
        run_dir / "warmup", {f"{eid}.ldjson": recs for eid, recs in episodes.items()})
    click.echo(f"collected {len(episodes)} demos -> {manifest}")


@main.command("train-retarget")
@click.option("--stage", type=click.Choice(["1", "2"]), required=True)
@click.option("--steps", type=int, default=None)
@click.pass_obj
def train_retarget_cmd(obj, stage, steps):
    """Train the hand retargeting network (stage 1 fingers, stage 2 thumb)."""
    cfg, run_dir = obj["cfg"], obj["run_dir"]
    out = run_dir / "retarget"
    out.mkdir(exist_ok=True)
    hyper = retargeting.TrainConfig(seed=cfg["seed"])
    if steps:
        from dataclasses import replace as _replace
        hyper = _replace(hyper, steps=steps)
    data = retargeting.synth_human_dataset(cfg["seed"], 1000)
    if stage == "1":
        net, history = retargeting.train_stage1(data, hyper=hyper)
        nets.save_checkpoint(out / "stage1.json",
                             {"four_finger": net.four_finger, "thumb": net.thumb},
                             {"stage": net.stage, "loss_final": history[-1]})
        click.echo(f"stage-1 loss {history[0]:.4f} -> {history[-1]:.4f}")
    else:
        ckpt = _require(out / "stage1.json", "dexloop train-retarget --stage 1")
        named, meta = nets.load_checkpoint(ckpt)
        net = retargeting.RetargetNet(named["four_finger"], named["thumb"],
                                      stage=int(meta["stage"]))
        net, history = retargeting.train_stage2(data, hyper=hyper, net=net)
        nets.save_checkpoint(out / "stage2.json",
                             {"four_finger": net.four_finger, "thumb": net.thumb},
                             {"stage": net.stage, "loss_final": history[-1]})
        click.echo(f"stage-2 loss {history[0]:.4f} -> {history[-1]:.4f}")


@main.command("warmup")
@click.pass_obj
def warmup_cmd(obj):
    """Behaviour-clone the initial policy from collected demonstrations."""
    cfg, run_dir = obj["cfg"], obj["run_dir"]
    _require(run_dir / "warmup" / "manifest.json", "dexloop collect-demos")
    records = _load_dataset_through(run_dir, 0)
    bundle, history = hil.warmup_train(records, _policy_cfg(cfg, "warmup_steps"))
    bundle.save(run_dir / "warmup" / "policy.json", {"round": 0})
    metrics = {
        "records": len(records),
        "loss_first10_mean": float(np.mean(history[:10])),
        "loss_final_plateau": float(np.mean(history[-50:])),
    }
    (run_dir / "warmup" / "metrics.json").write_text(json.dumps(metrics, indent=2))
    click.echo(f"warm-up trained on {len(records)} records; "
               f"plateau {metrics['loss_final_plateau']:.3f}")


@main.command("round")
@click.option("--i", "index", type=int, required=True, help="Round number (1-based).")
@click.option("--unweighted", is_flag=True,
              help="Ablation: aggregate without intervention weighting.")
@click.pass_obj
def round_cmd(obj, index, unweighted):
    """Run one online collect/aggregate/update round."""
    cfg, run_dir = obj["cfg"], obj["run_dir"]
    if index < 1:
        raise CliError("round index is 1-based")
    prev = (run_dir / "warmup" / "policy.json" if index == 1
            else run_dir / f"round_{index - 1}" / "policy.json")
    hint = "dexloop warmup" if index == 1 else f"dexloop round --i {index - 1}"
    _require(prev, hint)
    bundle = hil.PolicyBundle.load(prev)
    dataset = _load_dataset_through(run_dir, index - 1)
    state = hil.run_round(
        index, bundle, dataset, _task(cfg), retargeting.oracle_retarget,
        _policy_cfg(cfg, "round_steps", seed_offset=index),
        wcfg=hil.WeightingConfig(**cfg["weighting"]),
        episodes_per_round=cfg["episodes_per_round"],
        eval_episodes=cfg["eval_episodes"], seed=cfg["seed"],
        run_dir=run_dir, weighted=not unweighted,
        operator_noise=cfg["demo_noise"],
    )
    click.echo(f"round {index}: incoming policy "
               f"{state.success_before}/{state.eval_episodes}, "
               f"{state.new_records} new records"
               + (" [partial]" if state.partial else ""))


@main.command("eval")
@click.option("--policy", "which", default="warmup", show_default=True,
              help="`warmup` or `round_<i>`.")
@click.option("--episodes", type=int, default=None)
@click.pass_obj
def eval_cmd(obj, which, episodes):
    """Evaluate a stored policy over deterministic-seeded episodes."""
    cfg, run_dir = obj["cfg"], obj["run_dir"]
    path = _require(run_dir / which / "policy.json",
                    "dexloop warmup" if which == "warmup" else "dexloop round")
    bundle = hil.PolicyBundle.load(path)
    n = episodes or cfg["eval_episodes"]
    k = hil.evaluate(bundle, _task(cfg), episodes=n)
    click.echo(f"{which}: {k}/{n}")


@main.command("replay")
@click.argument("episode_file", type=click.Path(exists=True))
def replay_cmd(episode_file):
    """Summarize a stored episode (ticks, authority segments, categories)."""
    records = hil.load_episode(episode_file)
    if not records:
        click.echo("empty episode")
        return
    counts = hil.category_counts(records)
    flips = sum(1 for a, b in zip(records, records[1:]) if a.i_t != b.i_t)
    click.echo(json.dumps({
        "episode_id": records[0].episode_id,
        "round_tag": records[0].round_tag,
        "ticks": len(records),
        "authority_changes": flips,
        "categories": counts,
    }, indent=2))


@main.command("serve-ui")
@click.option("--port", type=int, default=8731, show_default=True)
@click.option("--duration", type=float, default=30.0, show_default=True)
@click.option("--scripted", is_flag=True,
              help="Drive with the scripted expert (deterministic loopback).")
@click.option("--no-realtime", is_flag=True, help="Run as fast as possible.")
@click.pass_obj
def serve_ui_cmd(obj, port, duration, scripted, no_realtime):
    """Serve live sim state to the operator console and accept its commands."""
    cfg = obj["cfg"]

    def announce(server):
        click.echo(f"bridge listening on 127.0.0.1:{server.address[1]}", err=True)
        sys.stderr.flush()

    log = bridge.serve_ui(
        _task(cfg), port=port, duration_s=duration, seed=cfg["seed"],
        realtime=not no_realtime, scripted=scripted, ready_cb=announce,
    )
    click.echo(f"episode outcome: {log.outcome}")


if __name__ == "__main__":
    main()
