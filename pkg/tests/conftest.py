"""Shared heavyweight fixtures: trained retargeting nets across seeds and the
multi-seed golden pipeline runs. Built once per session and reused by both the
module tests and the acceptance suite."""

import time

import numpy as np
import pytest

from dexloop import env as denv
from dexloop import fm_policy, hil, retargeting


SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def retarget_runs():
    """Stage-wise and joint-ablation retargeting nets, one per seed."""
    runs = {}
    for seed in SEEDS:
        hyper = retargeting.TrainConfig(seed=seed)
        train = retargeting.synth_human_dataset(seed, 900)
        holdout = retargeting.synth_human_dataset(seed + 500, 200)
        net1, hist1 = retargeting.train_stage1(train, hyper=hyper)
        from dataclasses import replace
        hyper2 = replace(hyper, steps=2500)
        net2, hist2 = retargeting.train_stage2(train, hyper=hyper2, net=net1)
        joint, _ = retargeting.train_joint_ablation(train, hyper=hyper2)
        runs[seed] = {
            "net1": net1,
            "net2": net2,
            "joint": joint,
            "holdout": holdout,
            "rmse": retargeting.stage1_vector_rmse(net2, holdout),
        }
    return runs


# Operator command jitter, identical in demos and rescues. Matching the two
# keeps the label-noise floor constant across rounds, so the loss spike at
# each warm-start reflects distribution shift rather than a noise-floor jump.
GOLDEN_NOISE = 0.03

# The seed whose run is the stored canonical ("golden") run for loss-curve
# shape assertions; chosen once and frozen.
GOLDEN_SEED = 0


def golden_run(seed: int, weighted: bool):
    """Weak warm-up + 3 online rounds on the pinch task; returns metrics.

    Round training deliberately fine-tunes gently (small lr, few steps, large
    batch): aggressive per-round refits memorize operator noise and destabilize
    late-round evaluations, while the large batch keeps the first-10-step and
    plateau loss estimates tight.
    """
    start = time.perf_counter()
    task = denv.tissue_task()
    demos = hil.collect_demos(task, retargeting.oracle_retarget, count=10,
                              noise=GOLDEN_NOISE, seed=seed, keep_failures=True)
    records = [r for recs in demos.values() for r in recs]
    warm_cfg = fm_policy.PolicyConfig(obs_dim=denv.OBS_DIM, steps=2000,
                                      batch_size=256, seed=seed)
    bundle, warm_hist = hil.warmup_train(records, warm_cfg)
    round_cfg = fm_policy.PolicyConfig(obs_dim=denv.OBS_DIM, steps=1500, lr=2e-4,
                                       batch_size=256, seed=seed + 1)
    rates, spikes, first10s, plateaus = [], [], [], []
    prev_plateau = float(np.mean(warm_hist[-50:]))
    plateaus.append(prev_plateau)
    dataset = records
    for i in (1, 2, 3):
        state = hil.run_round(i, bundle, dataset, task, retargeting.oracle_retarget,
                              round_cfg, seed=seed, weighted=weighted,
                              episodes_per_round=30, operator_noise=GOLDEN_NOISE)
        bundle, dataset = state.bundle, state.dataset
        rates.append(state.success_before)
        spikes.append(bool(state.metrics["loss_first10_mean"] > prev_plateau))
        first10s.append(state.metrics["loss_first10_mean"])
        prev_plateau = state.metrics["loss_final_plateau"]
        plateaus.append(prev_plateau)
    final = hil.evaluate(bundle, task, episodes=20)
    return {"rates": rates, "final": final, "spikes": spikes,
            "first10": first10s, "plateaus": plateaus,
            "elapsed": time.perf_counter() - start}


@pytest.fixture(scope="session")
def golden_weighted():
    return {seed: golden_run(seed, weighted=True) for seed in SEEDS}


@pytest.fixture(scope="session")
def golden_unweighted():
    return {seed: golden_run(seed, weighted=False) for seed in SEEDS}


def rounds_to_threshold(run: dict, threshold: int = 10) -> int:
    """Rounds of training needed before an evaluated policy reaches threshold.

    run["rates"][i] evaluates the policy entering round i+1 (i.e. trained for
    i rounds); run["final"] evaluates the policy after all 3 rounds.
    """
    evals = list(run["rates"]) + [run["final"]]
    for trained_rounds, rate in enumerate(evals):
        if rate >= threshold:
            return trained_rounds
    return len(evals)  # never reached: worst rank
