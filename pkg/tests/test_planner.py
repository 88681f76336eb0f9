import numpy as np
import pytest

from trajdiff.autodiff import Tensor
from trajdiff.data import collect_demonstrations
from trajdiff.diffusion import DiffusionModel, cosine_schedule
from trajdiff.envs import make_env
from trajdiff.errors import StepRangeError
from trajdiff.guidance import goal_inpaint_guide, reward_guide_from_value
from trajdiff.planner import (PlannerConfig, deadline_guide, plan, random_policy_episodes, run_episode, run_episodes,
                              shift_plan, warm_start_plan)
from trajdiff.training import TrainConfig, ValueConfig, train_diffusion, train_value
from trajdiff.unet import DenoiserNet, ValueNet

SMALL = dict(channels=(8, 16, 16), embed_dim=8, groups=4)


class GaussianOracle:
    def __init__(self, schedule):
        self.schedule = schedule

    def __call__(self, x, steps):
        ab = self.schedule.alpha_bar[np.asarray(steps)][:, None, None]
        return Tensor(np.sqrt(1 - ab) * x.data)


def net_model(sdim=2, adim=1, horizon=16, n=5, seed=0):
    net = DenoiserNet(sdim + adim, **SMALL, seed=seed)
    return DiffusionModel(net, cosine_schedule(n), horizon, sdim, adim, clip_denoised=1.0)


def oracle_model(n=10, horizon=8):
    s = cosine_schedule(n)
    return DiffusionModel(GaussianOracle(s), s, horizon, 2, 1)


# -- plan ----------------------------------------------------------------------

def test_plan_pins_current_state():
    model = net_model()
    state = np.array([0.123456789, -0.98765])
    out = plan(model, None, state, PlannerConfig(horizon=16), np.random.default_rng(0))
    assert out.shape == (16, 3)
    assert np.array_equal(out[0, :2], state)


def test_plan_with_goal_pins_both_ends():
    model = net_model()
    goal = np.array([0.5, -0.5])
    out = plan(model, goal_inpaint_guide(None, goal), np.zeros((3, 2)), PlannerConfig(horizon=16),
               np.random.default_rng(1))
    assert np.array_equal(out[:, -1, :2], np.tile(goal, (3, 1)))
    assert np.array_equal(out[:, 0, :2], np.zeros((3, 2)))


def test_plan_is_seeded():
    model = net_model()
    cfg = PlannerConfig(horizon=16)
    a = plan(model, None, np.zeros(2), cfg, np.random.default_rng(2))
    b = plan(model, None, np.zeros(2), cfg, np.random.default_rng(2))
    assert np.array_equal(a, b)


def test_plan_rejects_wrong_state_dim():
    with pytest.raises(ValueError):
        plan(net_model(), None, np.zeros(3), PlannerConfig(horizon=16), np.random.default_rng(0))


# -- warm start ----------------------------------------------------------------

def test_shift_plan():
    p = np.arange(12.0).reshape(4, 3)
    np.testing.assert_array_equal(shift_plan(p), [[3, 4, 5], [6, 7, 8], [9, 10, 11], [9, 10, 11]])


def test_warm_start_zero_budget_only_conditions():
    model = net_model()
    prev = np.random.default_rng(3).standard_normal((16, 3))
    state = np.array([0.25, -0.75])
    rng = np.random.default_rng(4)
    before = rng.bit_generator.state
    out = warm_start_plan(model, None, prev, state, 0, rng)
    expected = shift_plan(prev)
    expected[0, :2] = state
    assert np.array_equal(out, expected)
    assert rng.bit_generator.state == before


@pytest.mark.parametrize("k", [-1, 6])
def test_warm_start_budget_range(k):
    with pytest.raises(StepRangeError):
        warm_start_plan(net_model(), None, np.zeros((16, 3)), np.zeros(2), k, np.random.default_rng(0))


def test_warm_start_shapes_match_cold_start():
    model = net_model()
    cold = plan(model, None, np.zeros((2, 2)), PlannerConfig(horizon=16), np.random.default_rng(5))
    for k in (1, 3, 5):
        warm = warm_start_plan(model, None, cold, np.zeros((2, 2)), k, np.random.default_rng(6))
        assert warm.shape == cold.shape
        assert np.array_equal(warm[:, 0, :2], np.zeros((2, 2)))


def _correlation(a, b):
    a = a[:, 1:].reshape(len(a), -1)
    b = b[:, 1:].reshape(len(b), -1)
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    return np.sum(a * b, axis=1) / np.sqrt(np.sum(a * a, axis=1) * np.sum(b * b, axis=1))


def test_full_budget_warm_start_forgets_previous_plan():
    model = oracle_model()
    n = model.schedule.n_steps
    trials = 1000
    prev = np.random.default_rng(7).standard_normal((trials, 8, 3))
    state = np.zeros((trials, 2))
    warm = warm_start_plan(model, None, prev, state, n, np.random.default_rng(8))
    cold = plan(model, None, state, PlannerConfig(horizon=8), np.random.default_rng(9))
    cw, cc = _correlation(shift_plan(prev), warm), _correlation(shift_plan(prev), cold)
    se = np.sqrt(cw.var() / trials + cc.var() / trials)
    assert abs(cw.mean() - cc.mean()) < 3 * se
    # a small budget, by contrast, keeps the previous plan
    kept = _correlation(shift_plan(prev), warm_start_plan(model, None, prev, state, 2, np.random.default_rng(10)))
    assert kept.mean() > 0.5


# -- episodes --------------------------------------------------------------------

def test_zero_length_episode():
    env = make_env("integrator-1d")
    res = run_episode(net_model(), None, env, PlannerConfig(horizon=16, max_episode_steps=0), np.random.default_rng(0), 0)
    assert res.total_return == 0.0 and res.steps == 0
    assert res.actions.shape == (0, 1) and res.rewards.shape == (0,)
    assert res.states.shape == (1, 2)


def test_no_seeds_gives_no_results():
    assert run_episodes(net_model(), None, make_env("integrator-1d"), PlannerConfig(horizon=16), []) == []


@pytest.mark.parametrize("open_loop,k", [(False, 0), (False, 2), (True, 0)])
def test_episode_logs_replay(open_loop, k):
    env = make_env("integrator-1d")
    cfg = PlannerConfig(horizon=16, open_loop=open_loop, warm_start_steps=k, max_episode_steps=12)
    for res in run_episodes(net_model(), None, env, cfg, [0, 1]):
        s = res.states[0]
        for t, a in enumerate(res.actions):
            s, r = env.step(s, a)
            assert np.array_equal(s, res.states[t + 1])
            assert r == res.rewards[t]
        assert res.total_return == res.rewards.sum()


def test_every_closed_loop_plan_is_conditioned():
    env = make_env("integrator-1d")
    cfg = PlannerConfig(horizon=16, warm_start_steps=2, max_episode_steps=10)
    res = run_episodes(net_model(), None, env, cfg, [3])[0]
    assert len(res.first_state_errors) == 10
    assert all(e == 0.0 for e in res.first_state_errors)


def test_batched_episodes_match_single_runs():
    env = make_env("integrator-1d")
    model = net_model()
    cfg = PlannerConfig(horizon=16, warm_start_steps=2, max_episode_steps=6)
    batch = run_episodes(model, None, env, cfg, [4, 5, 6])
    for res in batch:
        alone = run_episode(model, None, env, cfg, np.random.default_rng(res.seed), res.seed)
        np.testing.assert_allclose(alone.states, res.states, rtol=0, atol=1e-12)
        np.testing.assert_allclose(alone.actions, res.actions, rtol=0, atol=1e-12)


def test_episodes_are_seeded():
    env = make_env("integrator-1d")
    cfg = PlannerConfig(horizon=16, max_episode_steps=5)
    a = run_episodes(net_model(), None, env, cfg, [7, 8])
    b = run_episodes(net_model(), None, env, cfg, [7, 8])
    for x, y in zip(a, b):
        assert np.array_equal(x.states, y.states) and x.total_return == y.total_return


def test_record_fields():
    env = make_env("integrator-1d")
    res = run_episodes(net_model(), None, env, PlannerConfig(horizon=16, max_episode_steps=3), [9])[0]
    rec = res.record()
    assert set(rec) == {"seed", "return", "success", "steps", "wall_ms"}
    assert rec["seed"] == 9 and rec["steps"] == 3 and rec["return"] == res.total_return
    assert "wall_ms" not in res.record(timing=False)


def test_planner_config_checks():
    model = net_model()
    env = make_env("integrator-1d")
    with pytest.raises(StepRangeError):
        run_episodes(model, None, env, PlannerConfig(horizon=16, warm_start_steps=6), [0])
    with pytest.raises(Exception):
        run_episodes(model, None, env, PlannerConfig(horizon=18), [0])


def test_random_policy_scored_like_planner():
    env = make_env("pointmass-umaze")
    res = random_policy_episodes(env, range(3), 20, 0.1)
    assert all(r.states.shape == (21, 4) and r.actions.shape == (20, 2) for r in res)
    again = random_policy_episodes(env, range(3), 20, 0.1)
    assert all(np.array_equal(a.states, b.states) for a, b in zip(res, again))


def test_deadline_guide_counts_down():
    goal = np.array([0.5, 0.5])
    g = goal_inpaint_guide(np.zeros(2), goal)
    for t, expected in [(0, 15), (3, 12), (14, 1), (40, 1)]:
        moved = deadline_guide(g, 16, t)
        ends = sorted(c.resolve_t(16) for c in moved.constraints)
        assert ends == [0, expected]
    assert deadline_guide(None, 16, 3) is None


def test_deadline_plan_pins_goal_early():
    goal = np.array([0.5, 0.5])
    g = deadline_guide(goal_inpaint_guide(None, goal), 16, 5)
    out = plan(net_model(), g, np.zeros(2), PlannerConfig(horizon=16), np.random.default_rng(11))
    assert np.array_equal(out[10, :2], goal)


@pytest.mark.slow
def test_reward_guidance_beats_unguided_on_integrator():
    env = make_env("integrator-1d")
    ds = collect_demonstrations(env, "waypoint-pd", 100, np.random.default_rng(0))
    arch = dict(channels=(16, 32, 32), embed_dim=16, groups=8)
    schedule = cosine_schedule(10)
    model = DiffusionModel(DenoiserNet(3, **arch, seed=0), schedule, 16, 2, 1, normalizer=ds.stats)
    train_diffusion(model, ds, TrainConfig(learning_rate=1e-3, steps=2000, pin=(0,)))
    value = ValueNet(3, **arch, seed=1)
    train_value(value, ds, schedule, ValueConfig(learning_rate=1e-3, steps=1000, seed=1), horizon=16)
    cfg = PlannerConfig(horizon=16, max_episode_steps=30)
    plain = np.mean([r.total_return for r in run_episodes(model, None, env, cfg, range(50))])
    guided = np.mean([r.total_return for r in
                      run_episodes(model, reward_guide_from_value(value, 3.0), env, cfg, range(50))])
    # returns are negative, so "20% better" means 20% closer to zero
    assert guided >= plain + 0.2 * abs(plain)
