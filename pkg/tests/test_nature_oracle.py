import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from patrolplan.agent_oracle import TrainConfig
from patrolplan.nature_oracle import (
    BoxParam,
    LiveThetaPolicy,
    NatureConfig,
    NatureTrainer,
    WakeSleepSchedule,
    objective_theta_grad,
    regret_estimate,
    regret_estimate_with_error,
    train_nature,
    wake_sleep_mode,
)
from patrolplan.nn import MLP
from patrolplan.park_env import (
    Mixture,
    ParkInstance,
    UncertaintySet,
    attack_uniforms,
    estimate_return,
    expected_return_exact,
    logistic,
)
from patrolplan.policies import FixedPolicy, RandomPolicy, ZeroPolicy


def small_config(episodes=60, seed=0, **kw):
    return NatureConfig(train=TrainConfig(episodes=episodes, eval_every=20, seed=seed, updates_per_step=2), **kw)


# -- schedule ---------------------------------------------------------------

def test_schedule_small_kappa():
    assert WakeSleepSchedule(kappa=2, episodes=8).modes() == [
        "policy_only", "theta_only", "policy_only", "both",
        "policy_only", "theta_only", "policy_only", "both",
    ]


@given(st.integers(1, 30), st.integers(1, 400))
def test_schedule_matches_definition(kappa, j):
    mode = wake_sleep_mode(j, kappa)
    if j % (2 * kappa) == 0:
        assert mode == "both"
    elif j % kappa == 0:
        assert mode == "theta_only"
    else:
        assert mode == "policy_only"


def test_schedule_counts():
    modes = WakeSleepSchedule(10, 2000).modes()
    assert modes.count("both") == 100 and modes.count("theta_only") == 100
    with pytest.raises(ValueError):
        WakeSleepSchedule(kappa=0)


# -- theta parameterization -------------------------------------------------

@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.integers(0, 2**31))
def test_box_param_stays_inside_box(grads, seed):
    unc = UncertaintySet(np.array([-3.0, 0.0, -1.0]), np.array([1.0, 0.0, 4.0]))
    param = BoxParam(unc, unc.sample(np.random.default_rng(seed)), lr=0.5)
    for _ in range(20):
        param.ascend(np.array(grads))
        th = param.theta
        assert np.all(th >= unc.lower) and np.all(th <= unc.upper)
        assert th[1] == 0.0


def test_box_param_ascends_toward_the_gradient():
    unc = UncertaintySet(np.array([-5.0]), np.array([5.0]))
    param = BoxParam(unc, np.array([0.0]), lr=0.05)
    for _ in range(300):
        param.ascend(np.array([1.0]))
    assert param.theta[0] > 4.5


def test_theta_features_map_box_to_unit_interval():
    unc = UncertaintySet(np.array([-4.0, 1.0]), np.array([0.0, 1.0]))
    assert np.array_equal(unc.theta_features([-4.0, 1.0]), [-1.0, 0.0])
    assert np.array_equal(unc.theta_features([0.0, 1.0]), [1.0, 0.0])


# -- regret estimates ---------------------------------------------------------

def test_identical_policies_give_zero_regret():
    park = ParkInstance(4, 3, 1.0, np.ones(4))
    pol = FixedPolicy([0.5, 0.5, 0, 0], 1.0)
    value, se = regret_estimate_with_error(park, np.zeros(4), pol, pol, 200, np.random.default_rng(0))
    assert value == 0.0 and se == 0.0


def test_one_point_mixture_matches_two_estimates():
    park = ParkInstance(4, 3, 1.0, np.ones(4))
    a, b = FixedPolicy([1, 0, 0, 0], 1.0), FixedPolicy([0, 0, 0.5, 0.5], 1.0)
    theta = np.array([-0.5, 0.0, -1.0, 0.5])
    u = attack_uniforms(park, 300, np.random.default_rng(3))
    from patrolplan.park_env import rollout

    direct = rollout(park, theta, a, u).mean() - rollout(park, theta, b, u).mean()
    got = regret_estimate(park, theta, a, b, 300, np.random.default_rng(3))
    assert got == pytest.approx(direct, rel=1e-12)


def test_mixture_regret_is_probability_weighted():
    park = ParkInstance(4, 2, 1.0, np.ones(4))
    a, b, alt = ZeroPolicy(4), FixedPolicy([1, 0, 0, 0], 1.0), FixedPolicy([0, 1, 0, 0], 1.0)
    theta = np.zeros(4)
    mix = Mixture([a, b], [0.25, 0.75])
    r = regret_estimate(park, theta, alt, mix, 500, np.random.default_rng(1))
    ra = regret_estimate(park, theta, alt, a, 500, np.random.default_rng(1))
    rb = regret_estimate(park, theta, alt, b, 500, np.random.default_rng(1))
    assert r == pytest.approx(0.25 * ra + 0.75 * rb, rel=1e-12)


def test_common_random_numbers_reduce_variance():
    park = ParkInstance(4, 3, 1.0, np.full(4, 1.5))
    alt, agent = FixedPolicy([0.25] * 4, 1.0), FixedPolicy([0.5, 0.5, 0, 0], 1.0)
    theta = np.full(4, -0.5)
    paired, independent = [], []
    for k in range(20):
        paired.append(regret_estimate(park, theta, alt, agent, 100, np.random.default_rng(k)))
        m1, _ = estimate_return(park, theta, alt, 100, np.random.default_rng(1000 + k))
        m2, _ = estimate_return(park, theta, agent, 100, np.random.default_rng(2000 + k))
        independent.append(m1 - m2)
    assert np.var(paired) <= np.var(independent)


def test_regret_rejects_zero_episodes():
    park = ParkInstance(1, 1, 1.0, np.ones(1))
    with pytest.raises(ValueError):
        regret_estimate(park, np.zeros(1), ZeroPolicy(1), ZeroPolicy(1), 0)


# -- theta gradient ------------------------------------------------------------

def test_theta_gradient_single_target_matches_analytic():
    park = ParkInstance(1, 1, 1.0, np.array([2.0]))
    alt, agent = FixedPolicy([0.8], 1.0), FixedPolicy([0.1], 1.0)
    u = attack_uniforms(park, 8, np.random.default_rng(0))
    for th in (-2.0, 0.0, 1.5):
        value, grad = objective_theta_grad(park, np.array([th]), alt, Mixture([agent]), u, relaxation="expected")
        p = float(logistic(th))
        # regret = alpha p [(1 - a_agent) - (1 - a_alt)]
        assert value == pytest.approx(park.alpha * p * (0.8 - 0.1), rel=1e-12)
        analytic = park.alpha * p * (1 - p) * (0.8 - 0.1)
        assert abs(grad[0] - analytic) / abs(analytic) < 1e-3
        assert np.sign(grad[0]) == np.sign(analytic)


def test_maximin_objective_is_negative_return():
    park = ParkInstance(1, 1, 1.0, np.array([2.0]))
    agent = FixedPolicy([0.1], 1.0)
    u = attack_uniforms(park, 8, np.random.default_rng(0))
    value, grad = objective_theta_grad(park, np.array([0.0]), None, Mixture([agent]), u, relaxation="expected")
    assert value == pytest.approx(-(2.0**1.05 - 0.5 * 0.9))
    assert grad[0] > 0  # the adversary raises attractiveness


def test_live_policy_theta_gradient_includes_network_path():
    from helpers import theta_path_check

    assert theta_path_check(1, live=True) < 1e-4


# -- freezing ---------------------------------------------------------------------

def trainer_fixture(with_alt=True):
    park = ParkInstance(2, 2, 1.0, np.array([2.0, 1.0]), layout="strip")
    unc = UncertaintySet(np.array([-3.0, -3.0]), np.array([1.0, 1.0]))
    cfg = NatureConfig(train=TrainConfig(episodes=50, batch_size=4, seed=1))
    return NatureTrainer(park, FixedPolicy([1.0, 0.0], 1.0), unc, cfg, with_alt=with_alt)


def test_frozen_policy_is_bit_identical_during_theta_only_episode():
    tr = trainer_fixture()
    for j in range(6):
        tr.policy_episode(j)
    before = tr.learner.actor.flat().copy(), tr.learner.critic.flat().copy()
    tr.policy_episode(6, learn=False)
    tr.theta_step()
    assert np.array_equal(tr.learner.actor.flat(), before[0])
    assert np.array_equal(tr.learner.critic.flat(), before[1])


def test_frozen_theta_is_bit_identical_during_policy_only_episode():
    tr = trainer_fixture()
    before = [t.copy() for t in tr.thetas]
    for j in range(8):
        tr.policy_episode(j)
    assert all(np.array_equal(a, b) for a, b in zip(before, tr.thetas))
    tr.theta_step(0)
    assert not np.array_equal(before[0], tr.thetas[0])
    assert np.array_equal(before[1], tr.thetas[1])


def test_live_policy_freeze_bakes_in_theta():
    park = ParkInstance(2, 1, 1.0, np.ones(2), layout="strip")
    unc = UncertaintySet(np.array([-2.0, -2.0]), np.array([2.0, 2.0]))
    live = LiveThetaPolicy(MLP((7, 8, 2), np.random.default_rng(0)), park, unc, np.array([1.0, -1.0]))
    frozen = live.frozen()
    past, wild = np.zeros((3, 2)), np.ones((3, 2))
    assert np.array_equal(frozen.act_batch(past, wild, 0), live.act_batch(past, wild, 0))
    live.set_theta(np.array([-2.0, 2.0]))
    assert not np.array_equal(frozen.act_batch(past, wild, 0), live.act_batch(past, wild, 0))
    assert np.array_equal(frozen.theta, [1.0, -1.0])


# -- full oracle ------------------------------------------------------------------

def test_zero_width_box_returns_the_point():
    park = ParkInstance(2, 1, 1.0, np.array([2.0, 2.0]), layout="strip")
    point = np.array([0.5, -1.0])
    unc = UncertaintySet(point, point)
    theta, alt = train_nature(park, FixedPolicy([0.0, 1.0], 1.0), unc, WakeSleepSchedule(10, 60), small_config())
    assert np.array_equal(theta, point)
    assert alt.act_batch(np.zeros((1, 2)), np.full((1, 2), 2.0), 0).sum() <= 1.0 + 1e-12


def test_oracle_regret_is_nonnegative_and_theta_in_box():
    park = ParkInstance(4, 2, 1.0, np.ones(4))
    unc = UncertaintySet(np.full(4, -4.0), np.full(4, 0.0))
    agent = Mixture([RandomPolicy(4, 1.0, 3), FixedPolicy([1, 0, 0, 0], 1.0)], [0.5, 0.5])
    theta, alt = train_nature(park, agent, unc, WakeSleepSchedule(10, 80), small_config(80))
    assert unc.contains(theta)
    r, se = regret_estimate_with_error(park, theta, alt, agent, 400, np.random.default_rng(0))
    assert r >= -3 * se - 1e-12


def test_discrete_set_returns_one_of_its_points():
    park = ParkInstance(2, 1, 1.0, np.array([2.0, 2.0]), layout="strip")
    unc = UncertaintySet.from_points([[2.0, -6.0], [-6.0, 2.0]])
    theta, _ = train_nature(park, FixedPolicy([1.0, 0.0], 1.0), unc, WakeSleepSchedule(10, 300), small_config(300))
    # protecting target 0 leaves target 1 exposed: its attractive point is worst
    assert np.array_equal(theta, [-6.0, 2.0])


def test_oracle_is_deterministic():
    park = ParkInstance(2, 1, 1.0, np.array([2.0, 2.0]), layout="strip")
    unc = UncertaintySet(np.array([-5.0, -5.0]), np.array([5.0, 5.0]))
    a = train_nature(park, FixedPolicy([1.0, 0.0], 1.0), unc, WakeSleepSchedule(10, 40), small_config(40, seed=2))
    b = train_nature(park, FixedPolicy([1.0, 0.0], 1.0), unc, WakeSleepSchedule(10, 40), small_config(40, seed=2))
    assert np.array_equal(a[0], b[0]) and a[1].policy_id == b[1].policy_id


def test_wide_box_drives_theta_toward_unprotected_target():
    park = ParkInstance(2, 1, 1.0, np.array([2.0, 2.0]), layout="strip")
    unc = UncertaintySet(np.array([-5.0, -5.0]), np.array([5.0, 5.0]))
    agent = FixedPolicy([1.0, 0.0], 1.0)
    theta, alt = train_nature(park, agent, unc, WakeSleepSchedule(10, 2000), NatureConfig(train=TrainConfig(seed=0, updates_per_step=2)))
    assert theta[1] > theta[0]
    assert expected_return_exact(park, theta, alt) - expected_return_exact(park, theta, agent) > 0.5


def test_config_validation():
    with pytest.raises(ValueError, match="relaxation"):
        NatureConfig(relaxation="gumbel")
    with pytest.raises(ValueError, match="n_starts"):
        NatureConfig(n_starts=0)
