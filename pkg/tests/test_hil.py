"""Data pipeline: records, weighting, filtering, persistence, updates."""

import json

import numpy as np
import pytest

from dexloop import fm_policy, hil, teleop
from dexloop import env as denv

ARM_DOF = 6


def make_record(t=0, category="offline", i_t=0, eid="ep0", rng=None):
    rng = rng or np.random.default_rng(t)
    return hil.TrajectoryRecord(
        episode_id=eid, t=t,
        observation=rng.normal(size=denv.OBS_DIM),
        q_arm=rng.normal(size=ARM_DOF),
        q_hand=rng.normal(size=6),
        i_t=i_t, category=category, round_tag="test",
    )


def make_log(flags, outcome="success"):
    """EpisodeLog whose tick t has i_t = flags[t]."""
    log = teleop.EpisodeLog(outcome=outcome)
    rng = np.random.default_rng(0)
    for t, flag in enumerate(flags):
        log.records.append(teleop.TickRecord(
            tick=t, time=t / 30.0, i_t=int(flag),
            source="human" if flag else "policy",
            arm_command=rng.normal(size=ARM_DOF),
            hand_command=rng.normal(size=6),
            observation=rng.normal(size=denv.OBS_DIM),
        ))
    return log


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


def test_record_invariants():
    with pytest.raises(ValueError):
        make_record(category="offline", i_t=1)
    with pytest.raises(ValueError):
        make_record(category="intervention", i_t=0)
    with pytest.raises(ValueError):
        make_record(category="autonomous", i_t=1)
    with pytest.raises(ValueError):
        make_record(category="bogus")


def test_record_json_round_trip():
    rec = make_record(t=7, category="intervention", i_t=1)
    back = hil.TrajectoryRecord.from_json(rec.to_json())
    assert back.episode_id == rec.episode_id and back.t == rec.t
    assert back.category == rec.category and back.i_t == rec.i_t
    np.testing.assert_array_equal(back.observation, rec.observation)
    np.testing.assert_array_equal(back.action, rec.action)


def test_action_concatenates_arm_then_hand():
    rec = make_record()
    np.testing.assert_array_equal(rec.action[:ARM_DOF], rec.q_arm)
    np.testing.assert_array_equal(rec.action[ARM_DOF:], rec.q_hand)


# ---------------------------------------------------------------------------
# Weighting
# ---------------------------------------------------------------------------


def test_weight_is_five_for_ten_percent_interventions():
    records = ([make_record(t=i, category="intervention", i_t=1) for i in range(10)]
               + [make_record(t=i, category="offline") for i in range(90)])
    weights = hil.compute_weights(records, hil.WeightingConfig())
    assert weights["intervention"] == 5.0


def test_balanced_counts_give_unit_weights():
    records = ([make_record(t=i, category="intervention", i_t=1) for i in range(50)]
               + [make_record(t=i, category="autonomous") for i in range(50)])
    weights = hil.compute_weights(records, hil.WeightingConfig())
    assert weights["intervention"] == pytest.approx(1.0)
    assert weights["autonomous"] == pytest.approx(1.0)


def test_no_interventions_identity_weights():
    records = ([make_record(t=i, category="offline") for i in range(30)]
               + [make_record(t=i, category="autonomous") for i in range(70)])
    weights = hil.compute_weights(records, hil.WeightingConfig())
    assert all(w == 1.0 for w in weights.values())


def test_weighted_expectation_matches_target_exactly():
    """Summed weighted mass per category reproduces the target distribution."""
    counts = {"intervention": 13, "autonomous": 240, "offline": 747}
    records = []
    t = 0
    for c, n in counts.items():
        for _ in range(n):
            records.append(make_record(t=t, category=c,
                                       i_t=int(c == "intervention")))
            t += 1
    cfg = hil.WeightingConfig()
    weights = hil.compute_weights(records, cfg)
    total = sum(counts.values())
    target = hil.target_distribution(counts, cfg)
    for c, n in counts.items():
        assert weights[c] * n / total == pytest.approx(target[c], rel=1e-12)


def test_monte_carlo_intervention_loss_share():
    """Under uniform batch sampling the weighted intervention share of the
    loss converges to the target probability."""
    counts = {"intervention": 100, "autonomous": 400, "offline": 500}
    cats = (["intervention"] * counts["intervention"]
            + ["autonomous"] * counts["autonomous"]
            + ["offline"] * counts["offline"])
    records = [make_record(t=i, category=c, i_t=int(c == "intervention"))
               for i, c in enumerate(cats)]
    weights = hil.compute_weights(records, hil.WeightingConfig())
    w = np.array([weights[c] for c in cats])
    is_int = np.array([c == "intervention" for c in cats])
    rng = np.random.default_rng(0)
    shares = np.empty(10_000)
    for b in range(10_000):
        idx = rng.integers(0, len(cats), size=256)
        shares[b] = w[idx][is_int[idx]].sum() / w[idx].sum()
    assert abs(shares.mean() - 0.5) <= 0.02


def test_empty_positive_category_raises():
    counts = {"intervention": 5, "autonomous": 0}
    with pytest.raises(hil.WeightingError):
        hil.compute_weights([], hil.WeightingConfig())
    # interventions alone: all target mass stays on the only populated category
    target = hil.target_distribution(counts, hil.WeightingConfig())
    assert target["intervention"] == 1.0
    assert target.get("autonomous", 0.0) == 0.0


def test_weighting_config_bounds():
    with pytest.raises(ValueError):
        hil.WeightingConfig(p_intervention=0.0)
    with pytest.raises(ValueError):
        hil.WeightingConfig(p_intervention=1.0)


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


def brute_force_filter(flags, outcome):
    """Independent window-scan oracle: indices kept by the terminal-segment
    rule, computed directly from the flag string."""
    if outcome != "success":
        return []
    starts = [t for t in range(len(flags))
              if flags[t] and (t == 0 or not flags[t - 1])]
    if not starts:
        return list(range(len(flags)))
    return list(range(starts[-1], len(flags)))


@pytest.mark.parametrize("flags", [
    [0] * 20,
    [0] * 5 + [1] * 5 + [0] * 10,
    [0] * 3 + [1] * 4 + [0] * 6 + [1] * 3 + [0] * 4,
    [1] * 8 + [0] * 2,
    [0] * 9 + [1],
    [1, 0] * 10,
])
def test_filter_matches_window_scan_oracle(flags):
    log = make_log(flags)
    kept = hil.filter_terminal_segment(log, "ep", "r1", ARM_DOF)
    assert [r.t for r in kept] == brute_force_filter(flags, "success")


def test_filter_drops_failed_episodes():
    log = make_log([0] * 5 + [1] * 5, outcome="failure")
    assert hil.filter_terminal_segment(log, "ep", "r1", ARM_DOF) == []


def test_zero_intervention_passthrough():
    flags = [0] * 15
    log = make_log(flags)
    kept = hil.filter_terminal_segment(log, "ep", "r1", ARM_DOF)
    full = hil.records_from_episode(log, "ep", "r1", ARM_DOF)
    assert [r.t for r in kept] == [r.t for r in full] == list(range(15))


def test_categories_mirror_flags():
    log = make_log([0, 0, 1, 1, 0])
    recs = hil.records_from_episode(log, "ep", "r1", ARM_DOF)
    assert [r.category for r in recs] == [
        "autonomous", "autonomous", "intervention", "intervention", "autonomous"]
    off = hil.offline_records(log, "ep", "warmup", ARM_DOF)
    assert all(r.category == "offline" and r.i_t == 0 for r in off)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def test_episode_save_load_round_trip(tmp_path):
    recs = [make_record(t=i, category="autonomous") for i in range(12)]
    digest = hil.save_episode(tmp_path / "ep0.ldjson", recs)
    back = hil.load_episode(tmp_path / "ep0.ldjson")
    assert len(back) == 12
    for a, b in zip(recs, back):
        np.testing.assert_array_equal(a.observation, b.observation)
        np.testing.assert_array_equal(a.action, b.action)
    assert len(digest) == 64


def test_manifest_counts_and_hashes(tmp_path):
    eps = {
        "ep0.ldjson": [make_record(t=i, category="offline", eid="ep0")
                       for i in range(4)],
        "ep1.ldjson": [make_record(t=i, category="intervention", i_t=1, eid="ep1")
                       for i in range(3)],
    }
    hil.write_manifest(tmp_path, eps)
    manifest = hil.load_manifest(tmp_path, verify=True)
    assert manifest["total"] == 7
    assert manifest["counts"]["offline"] == 4
    assert manifest["counts"]["intervention"] == 3
    for entry in manifest["episodes"]:
        body = (tmp_path / entry["file"]).read_text()
        import hashlib
        assert entry["sha256"] == hashlib.sha256(body.encode()).hexdigest()


def test_manifest_detects_tamper(tmp_path):
    recs = [make_record(t=i, category="offline", eid="ep0") for i in range(4)]
    hil.write_manifest(tmp_path, {"ep0.ldjson": recs})
    (tmp_path / "ep0.ldjson").write_text("corrupted\n")
    with pytest.raises(ValueError):
        hil.load_manifest(tmp_path, verify=True)


# ---------------------------------------------------------------------------
# Training plumbing
# ---------------------------------------------------------------------------


def test_training_arrays_chunking_and_padding():
    recs = [make_record(t=i, category="offline", eid="ep") for i in range(5)]
    obs, actions, weights = hil.training_arrays(recs, horizon=4)
    assert obs.shape == (5, denv.OBS_DIM)
    assert actions.shape == (5, 4, ARM_DOF + 6)
    # chunk k starts at record k; the tail repeats the final action
    np.testing.assert_array_equal(actions[0, 3], recs[3].action)
    np.testing.assert_array_equal(actions[3, 2], recs[4].action)
    np.testing.assert_array_equal(actions[4, 0], recs[4].action)
    assert np.all(weights == 1.0)


def test_training_arrays_weights_follow_head_category():
    recs = ([make_record(t=0, category="intervention", i_t=1, eid="a")]
            + [make_record(t=i, category="autonomous", eid="a") for i in (1, 2)])
    wmap = {"intervention": 3.0, "autonomous": 0.5}
    _, _, weights = hil.training_arrays(recs, horizon=2, weight_map=wmap)
    assert list(weights) == [3.0, 0.5, 0.5]


def test_normalizer_round_trip():
    rng = np.random.default_rng(0)
    obs = rng.normal(3.0, 2.5, size=(200, denv.OBS_DIM))
    actions = rng.normal(-1.0, 0.7, size=(200, 4, ARM_DOF + 6))
    norm = hil.Normalizer.fit(obs, actions)
    z = norm.norm_obs(obs)
    assert np.allclose(z.mean(axis=0), 0.0, atol=1e-9)
    assert np.allclose(z.std(axis=0), 1.0, atol=1e-6)
    chunk = actions[0]
    np.testing.assert_allclose(norm.denorm_chunk(norm.norm_actions(actions)[0]),
                               chunk, atol=1e-9)
    again = hil.Normalizer.from_meta(norm.to_meta())
    np.testing.assert_allclose(again.norm_obs(obs), z, atol=0)


def test_uniform_weighted_update_matches_unweighted_training():
    """All-ones weights must reproduce plain training bit-for-bit."""
    rng = np.random.default_rng(1)
    recs = [make_record(t=i, category="offline", eid="e", rng=rng)
            for i in range(40)]
    cfg = fm_policy.PolicyConfig(obs_dim=denv.OBS_DIM, action_dim=ARM_DOF + 6,
                                 horizon=4, steps=30, seed=0)
    bundle, _ = hil.warmup_train(recs, cfg)
    ones = {"offline": 1.0}
    b1, h1, _ = hil.weighted_update(bundle, recs, hil.WeightingConfig(), cfg,
                                    weight_map=ones)
    obs, actions, _ = hil.training_arrays(recs, cfg.horizon)
    params2, h2 = fm_policy.train_policy(
        bundle.params, bundle.norm.norm_obs(obs),
        bundle.norm.norm_actions(actions), cfg)
    assert h1 == h2
    np.testing.assert_array_equal(b1.params.velocity.weights[0], params2.velocity.weights[0])


def test_weight_scaling_is_linear_in_loss():
    """Doubling every weight doubles the per-batch loss exactly."""
    rng = np.random.default_rng(2)
    obs = rng.normal(size=(16, 5))
    actions = rng.normal(size=(16, 2, 3))
    cfg = fm_policy.PolicyConfig(obs_dim=5, action_dim=3, horizon=2,
                                 steps=5, seed=0)
    params = fm_policy.init_policy(cfg)
    _, h1 = fm_policy.train_policy(params, obs, actions, cfg,
                                   weights=np.ones(16))
    _, h2 = fm_policy.train_policy(params, obs, actions, cfg,
                                   weights=2.0 * np.ones(16))
    np.testing.assert_allclose(np.asarray(h2), 2.0 * np.asarray(h1), rtol=1e-7)


def test_policy_bundle_save_load(tmp_path):
    rng = np.random.default_rng(3)
    recs = [make_record(t=i, category="offline", rng=rng) for i in range(20)]
    cfg = fm_policy.PolicyConfig(obs_dim=denv.OBS_DIM, action_dim=ARM_DOF + 6,
                                 horizon=4, steps=10, seed=0)
    bundle, _ = hil.warmup_train(recs, cfg)
    bundle.save(tmp_path / "policy.json")
    back = hil.PolicyBundle.load(tmp_path / "policy.json")
    np.testing.assert_array_equal(back.params.velocity.weights[0],
                                  bundle.params.velocity.weights[0])
    np.testing.assert_allclose(back.norm.obs_mean, bundle.norm.obs_mean)


def test_aggregation_is_append_only():
    """run_round extends the dataset; earlier records are never rewritten."""
    recs = [make_record(t=i, category="offline") for i in range(10)]
    dataset = list(recs)
    new = [make_record(t=i, category="autonomous", eid="on") for i in range(5)]
    merged = dataset + new
    assert merged[:10] == recs
    assert len(merged) == 15
