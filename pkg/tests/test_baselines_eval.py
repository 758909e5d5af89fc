import math

import numpy as np
import pytest

from patrolplan.agent_oracle import TrainConfig
from patrolplan.baselines_eval import (
    RESULT_COLUMNS,
    ExperimentConfig,
    format_summary,
    make_instance,
    middle_baseline,
    random_baseline,
    rarl_maximin,
    rarl_regret,
    read_results_csv,
    summarize,
    write_results_csv,
    evaluate_max_regret,
)
from patrolplan.mirror_loop import Evaluator, StrategySets
from patrolplan.nature_oracle import NatureConfig, NatureTrainer
from patrolplan.park_env import Mixture, ParkInstance, UncertaintySet
from patrolplan.policies import FixedPolicy, RandomPolicy, ZeroPolicy


def hand_final(w0, effort, attacked, horizon=3, psi=1.05, alpha=1.0):
    w = w0
    for _ in range(horizon):
        w = max(0.0, w**psi - (alpha * (1.0 - effort) if attacked else 0.0))
    return w


def toy_table():
    # theta = +-100 makes every attack certain or impossible, so returns are exact
    park = ParkInstance(4, 3, 1.0, np.array([2.0, 2.0, 1.0, 1.0]))
    theta_a = np.array([100.0, -100.0, -100.0, -100.0])
    theta_b = np.array([-100.0, 100.0, -100.0, -100.0])
    pols = [FixedPolicy([1, 0, 0, 0], 1.0), FixedPolicy([0, 1, 0, 0], 1.0), FixedPolicy([0.5, 0.5, 0, 0], 1.0)]
    efforts = [(1.0, 0.0), (0.0, 1.0), (0.5, 0.5)]
    quiet = 2 * hand_final(1.0, 0.0, False)
    table = np.array([
        [hand_final(2.0, e0, True) + hand_final(2.0, e1, False) + quiet,
         hand_final(2.0, e0, False) + hand_final(2.0, e1, True) + quiet]
        for e0, e1 in efforts
    ])
    return park, [theta_a, theta_b], pols, table


def test_hand_table_matches_evaluator():
    park, thetas, pols, table = toy_table()
    ev = Evaluator(park, 10, seed=0)
    assert np.allclose(ev.table(pols, thetas), table, rtol=1e-13)


def test_hand_computed_max_regret():
    park, thetas, pols, table = toy_table()
    sets = StrategySets()
    for p in pols:
        sets.add_policy(p)
    for th in thetas:
        sets.add_theta(th)
    ev = Evaluator(park, 10, seed=0)
    methods = {"p0": [pols[0]], "p2": [pols[2]], "mix": [Mixture(pols[:2], [0.5, 0.5])], "best_of": [pols[0], pols[2]]}
    scores = evaluate_max_regret(ev, methods, sets)
    best = table.max(axis=0)
    assert scores["p0"].max_regret == pytest.approx(best[1] - table[0, 1], rel=1e-12)
    assert scores["p0"].worst_theta == 1
    assert scores["p2"].max_regret == pytest.approx(max(best - table[2]), rel=1e-12)
    mix_row = 0.5 * table[0] + 0.5 * table[1]
    assert scores["mix"].max_regret == pytest.approx(max(best - mix_row), rel=1e-12)
    # the family reports its better variant
    assert scores["best_of"].max_regret == min(scores["p0"].max_regret, scores["p2"].max_regret)
    assert all(s.stderr < 1e-14 for s in scores.values())


def test_method_order_invariance():
    park = ParkInstance(4, 3, 1.0, np.ones(4))
    pols = [ZeroPolicy(4), RandomPolicy(4, 1.0, 1), FixedPolicy([0.25] * 4, 1.0)]
    sets = StrategySets()
    for p in pols:
        sets.add_policy(p)
    for th in (np.zeros(4), np.full(4, -2.0), np.array([1.0, -1.0, 0.0, -3.0])):
        sets.add_theta(th)
    methods = {"a": [pols[0]], "b": [pols[1]], "c": [pols[2]]}
    forward = evaluate_max_regret(Evaluator(park, 60, seed=5), methods, sets)
    backward = evaluate_max_regret(Evaluator(park, 60, seed=5), dict(reversed(list(methods.items()))), sets)
    assert forward == backward
    assert all(s.max_regret >= 0 for s in forward.values())


def test_dominant_policy_has_zero_regret():
    park = ParkInstance(4, 2, 1.0, np.ones(4))
    sets = StrategySets()
    full = FixedPolicy([0.25] * 4, 1.0)
    for p in (ZeroPolicy(4), full):
        sets.add_policy(p)
    sets.add_theta(np.zeros(4))
    sets.add_theta(np.full(4, 1.0))
    scores = evaluate_max_regret(Evaluator(park, 40, seed=0), {"full": [full]}, sets)
    assert scores["full"].max_regret == 0.0


def test_missing_support_is_rejected():
    park = ParkInstance(4, 2, 1.0, np.ones(4))
    sets = StrategySets()
    sets.add_policy(ZeroPolicy(4))
    sets.add_theta(np.zeros(4))
    with pytest.raises(ValueError, match="missing"):
        evaluate_max_regret(Evaluator(park, 10), {"x": [RandomPolicy(4, 1.0)]}, sets)
    with pytest.raises(ValueError, match="nonempty"):
        evaluate_max_regret(Evaluator(park, 10), {}, StrategySets())


# -- baselines -------------------------------------------------------------------

def test_middle_baseline_trains_at_the_midpoint():
    park = ParkInstance(4, 2, 1.0, np.ones(4))
    unc = UncertaintySet(np.full(4, -1.0), np.full(4, 1.0))
    assert np.array_equal(unc.midpoint, np.zeros(4)) and unc.contains(unc.midpoint)
    from patrolplan.agent_oracle import train_agent

    cfg = TrainConfig(episodes=30, eval_every=10)
    assert middle_baseline(park, unc, cfg).policy_id == train_agent(park, np.zeros(4), cfg).policy_id
    point = UncertaintySet(np.full(4, -2.0), np.full(4, -2.0))
    assert middle_baseline(park, point, cfg).policy_id == train_agent(park, np.full(4, -2.0), cfg).policy_id


def test_random_baseline_properties():
    park = ParkInstance(4, 2, 0.0, np.ones(4))
    pol = random_baseline(park, 3)
    assert not pol.act_batch(np.zeros((5, 4)), np.ones((5, 4)), 0, pol.begin(5, np.random.default_rng(0))).any()
    park = ParkInstance(4, 2, 3.5, np.ones(4))
    pol = random_baseline(park, 3)
    ctx = pol.begin(200, np.random.default_rng(0))
    a0 = pol.act_batch(np.zeros((200, 4)), np.ones((200, 4)), 0, ctx)
    a1 = pol.act_batch(np.zeros((200, 4)), np.ones((200, 4)), 1, ctx)
    assert np.array_equal(a0, a1)  # state independent within an episode
    assert np.all(a0 <= 1) and np.all(a0 >= 0) and np.all(a0.sum(axis=1) <= 3.5 + 1e-12)


def test_rarl_zero_width_reduces_to_plain_training():
    park = ParkInstance(4, 2, 1.0, np.ones(4))
    point = UncertaintySet(np.full(4, -1.0), np.full(4, -1.0))
    cfg = TrainConfig(episodes=20, seed=1)
    a = rarl_maximin(park, point, cfg)
    b = rarl_regret(park, point, cfg)
    assert a.policy_id == b.policy_id


def test_maximin_adversary_moves_toward_high_attractiveness():
    park = ParkInstance(1, 1, 0.5, np.array([2.0]))
    unc = UncertaintySet(np.array([-4.0]), np.array([4.0]))
    adv = NatureTrainer(park, FixedPolicy([0.3], 0.5), unc, NatureConfig(), theta0=np.array([0.0]), with_alt=False, n_starts=1)
    for _ in range(100):
        adv.theta_step()
    # the return falls as attacks become likelier, so the adversary climbs to the upper end
    assert adv.theta[0] > 3.0


def test_rarl_variants_differ_and_are_feasible():
    park = ParkInstance(2, 2, 1.0, np.array([2.0, 1.0]), layout="strip")
    unc = UncertaintySet(np.array([-4.0, -1.0]), np.array([1.0, 2.0]))
    cfg = TrainConfig(episodes=60, seed=2)
    a = rarl_maximin(park, unc, cfg)
    b = rarl_regret(park, unc, cfg)
    assert a.policy_id != b.policy_id
    rng = np.random.default_rng(0)
    for pol in (a, b):
        act = pol.act_batch(rng.random((50, 2)) / 2, rng.random((50, 2)) * 2, 1)
        assert np.all(act >= 0) and np.all(act.sum(axis=1) <= 1 + 1e-12)


# -- experiments and CSV -----------------------------------------------------------

def test_experiment_defaults_and_labels():
    exp = ExperimentConfig()
    assert (exp.horizon, exp.n_targets, exp.budget, exp.interval, exp.beta, exp.wildlife) == (5, 25, 5.0, 3.0, -5.0, "random")
    assert exp.setting == "H5-N25-B5-I3-D5-random"
    assert ExperimentConfig(discrete_points=2).setting.endswith("-P2")
    with pytest.raises(ValueError, match="mirror"):
        ExperimentConfig(methods=("middle",))


def test_make_instance_deterministic_and_valid():
    exp = ExperimentConfig(interval=5.0)
    a, ua = make_instance(exp, 1)
    b, ub = make_instance(exp, 1)
    assert np.array_equal(a.initial_wildlife, b.initial_wildlife) and np.array_equal(ua.lower, ub.lower)
    assert np.allclose(ua.width, 5.0)
    c, _ = make_instance(exp, 2)
    assert not np.array_equal(a.initial_wildlife, c.initial_wildlife)
    _, disc = make_instance(ExperimentConfig(discrete_points=2, n_targets=4, budget=1.0), 0)
    assert disc.is_discrete and disc.points.shape == (2, 4)


def test_results_csv_and_summary(tmp_path):
    rows = [
        ["mirror", "S", 0, "0.1", "0.01", ""], ["mirror", "S", 1, "0.3", "0.01", ""],
        ["random", "S", 0, "0.5", "0.02", ""], ["random", "S", 1, "0.7", "0.02", ""],
    ]
    path = tmp_path / "r.csv"
    write_results_csv(path, rows)
    assert path.read_text().splitlines()[0] == ",".join(RESULT_COLUMNS)
    back = read_results_csv(path)
    summary = summarize(back)
    assert [(d["method"], d["rank"]) for d in summary] == [("mirror", 1), ("random", 2)]
    assert summary[0]["mean"] == pytest.approx(0.2)
    assert summary[0]["stderr"] == pytest.approx(np.std([0.1, 0.3], ddof=1) / math.sqrt(2))
    assert "mirror" in format_summary(summary)
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="header"):
        read_results_csv(tmp_path / "bad.csv")
