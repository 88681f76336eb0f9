"""Receding-horizon control with a trajectory diffusion model.

Plans live in normalized coordinates; the environment sees raw states and
actions. Every plan is conditioned on the observed current state by pinning
``s_0`` after each reverse step.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .diffusion import DiffusionModel, RngBatch, forward_noise, sample
from .envs import track_action
from .errors import StepRangeError
from .guidance import ConstraintSet, Guide, apply_constraints, state_constraint


@dataclass
class PlannerConfig:
    horizon: int = 64
    warm_start_steps: int = 0
    open_loop: bool = False
    max_episode_steps: int = 200
    goal_tolerance: float = 0.1
    track_plan: bool = True
    goal_deadline: bool = False  # closed loop: the end-of-plan constraint moves one step earlier per replan

    def validate(self, model: DiffusionModel) -> None:
        if not 0 <= self.warm_start_steps <= model.schedule.n_steps:
            raise StepRangeError(
                f"warm_start_steps must lie in 0..{model.schedule.n_steps}", k=self.warm_start_steps
            )
        model.check_horizon(self.horizon)


@dataclass
class EpisodeResult:
    seed: int | None
    total_return: float
    success: bool
    steps: int
    wall_ms: float
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    first_state_errors: list[float] = field(default_factory=list)

    def record(self, timing: bool = True) -> dict:
        out = {
            "seed": self.seed,
            "return": float(self.total_return),
            "success": bool(self.success),
            "steps": int(self.steps),
        }
        if timing:
            out["wall_ms"] = round(float(self.wall_ms), 3)
        return out


def _start_guide(guide: Guide | None, state: np.ndarray) -> Guide:
    base = guide if guide is not None else Guide(None, 0.0)
    return base.with_constraints(ConstraintSet.of(state_constraint(0, state)))


def _shape(model: DiffusionModel, state: np.ndarray, horizon: int) -> tuple[int, ...]:
    if state.ndim == 1:
        return (horizon, model.transition_dim)
    return (state.shape[0], horizon, model.transition_dim)


def plan(model: DiffusionModel, guide: Guide | None, current_state: np.ndarray,
         config: PlannerConfig, rng) -> np.ndarray:
    """Sample a ``T``-step normalized plan whose first state is ``current_state``.

    ``current_state`` is normalized, ``[S]`` or ``[B, S]``.
    """
    state = np.asarray(current_state, dtype=np.float64)
    if state.shape[-1] != model.state_dim:
        raise ValueError(f"state has {state.shape[-1]} dims, model expects {model.state_dim}")
    return sample(model, _shape(model, state, config.horizon), rng, _start_guide(guide, state))


def shift_plan(previous_plan: np.ndarray) -> np.ndarray:
    """Drop the consumed first step and repeat the final one."""
    return np.concatenate([previous_plan[..., 1:, :], previous_plan[..., -1:, :]], axis=-2)


def warm_start_plan(model: DiffusionModel, guide: Guide | None, previous_plan: np.ndarray,
                    current_state: np.ndarray, k: int, rng) -> np.ndarray:
    """Re-noise the shifted previous plan to level ``k`` and denoise ``k`` steps."""
    n = model.schedule.n_steps
    if not 0 <= k <= n:
        raise StepRangeError(f"warm-start budget {k} outside 0..{n}", k=k)
    state = np.asarray(current_state, dtype=np.float64)
    g = _start_guide(guide, state)
    shifted = shift_plan(np.asarray(previous_plan, dtype=np.float64))
    if k == 0:
        return apply_constraints(shifted, g.constraints)
    noised = forward_noise(shifted, k, rng.standard_normal(shifted.shape), model.schedule)
    return sample(model, shifted.shape, rng, g, start=noised, start_step=k)


def _normalizer(model: DiffusionModel):
    return model.normalizer


def _norm_states(model, states):
    stats = _normalizer(model)
    return states if stats is None else stats.normalize(states, slice(0, model.state_dim))


def _denorm_plan(model, plans):
    stats = _normalizer(model)
    return plans if stats is None else stats.denormalize(plans)


def _success_distance(model, env, states):
    goal = getattr(env, "goal", None)
    if goal is None:
        return None
    pos = env.position(states)
    goal = np.asarray(goal, dtype=np.float64)
    stats = _normalizer(model)
    if stats is not None:
        dims = slice(0, len(goal))
        pos, goal = stats.normalize(pos, dims), stats.normalize(goal, dims)
    return np.linalg.norm(pos - goal, axis=-1)


def deadline_guide(guide: Guide | None, horizon: int, t: int) -> Guide | None:
    """Move constraints on the last plan step to index ``max(T - 1 - t, 1)``.

    A closed-loop planner that always pins the goal at the end of a fresh
    plan keeps it ``T - 1`` steps away forever; counting the deadline down
    keeps the arrival time the open-loop plan had.
    """
    if guide is None or not guide.constraints:
        return guide
    at = max(horizon - 1 - t, 1)
    items = tuple(replace(c, t=at) if c.resolve_t(horizon) == horizon - 1 else c for c in guide.constraints)
    return Guide(guide.gradient_fn, guide.scale, ConstraintSet(items))


def run_episodes(model: DiffusionModel, guide: Guide | None, env, config: PlannerConfig,
                 seeds, rngs=None) -> list[EpisodeResult]:
    """Run one episode per seed in lockstep, batching the planner calls.

    Each episode draws its reset and all of its sampling noise from its own
    generator, so its outcome does not depend on which episodes share a batch.
    """
    seeds = list(seeds)
    if rngs is None:
        rngs = [np.random.default_rng(s) for s in seeds]
    if not rngs:
        return []
    config.validate(model)
    started = time.perf_counter()
    batch_rng = RngBatch(rngs)
    states = np.stack([env.reset(r) for r in rngs])
    n_ep, sdim = len(rngs), model.state_dim
    log_states, log_actions, log_rewards = [states.copy()], [], []
    first_errors: list[list[float]] = [[] for _ in range(n_ep)]
    k = config.warm_start_steps
    warm = 0 < k < model.schedule.n_steps
    plans = None
    raw_plan = None
    for t in range(config.max_episode_steps):
        obs = _norm_states(model, states)
        if config.open_loop:
            if plans is None:
                plans = plan(model, guide, obs, config, batch_rng)
                raw_plan = _denorm_plan(model, plans)
                _record_first(first_errors, plans, obs, sdim)
            idx = min(t, config.horizon - 1)
            target = raw_plan[:, idx, :sdim]
            planned = raw_plan[:, idx, sdim:] if t < config.horizon - 1 else np.zeros((n_ep, model.action_dim))
            if config.track_plan:
                actions = np.stack([track_action(env, s, g, a) for s, g, a in zip(states, target, planned)])
            else:
                actions = planned
        else:
            g = deadline_guide(guide, config.horizon, t) if config.goal_deadline else guide
            if plans is None or not warm:
                plans = plan(model, g, obs, config, batch_rng)
            else:
                plans = warm_start_plan(model, g, plans, obs, k, batch_rng)
            _record_first(first_errors, plans, obs, sdim)
            raw_plan = _denorm_plan(model, plans)
            actions = raw_plan[:, 0, sdim:]
            if config.track_plan:
                # a_0 plus a correction toward the planned s_1, which absorbs model error in a_0
                actions = np.stack([track_action(env, s, g, a)
                                    for s, g, a in zip(states, raw_plan[:, 1, :sdim], actions)])
        stepped = [env.step(s, a) for s, a in zip(states, actions)]
        states = np.stack([s for s, _ in stepped])
        log_actions.append(np.asarray(actions, dtype=np.float64).copy())
        log_rewards.append(np.array([r for _, r in stepped]))
        log_states.append(states.copy())
    wall_ms = (time.perf_counter() - started) * 1000.0 / n_ep
    all_states = np.stack(log_states, axis=1)
    all_actions = (np.stack(log_actions, axis=1) if log_actions
                   else np.zeros((n_ep, 0, model.action_dim)))
    all_rewards = np.stack(log_rewards, axis=1) if log_rewards else np.zeros((n_ep, 0))
    dist = _success_distance(model, env, all_states)
    results = []
    for e in range(n_ep):
        success = bool(dist is not None and config.max_episode_steps > 0
                       and np.any(dist[e] <= config.goal_tolerance))
        results.append(EpisodeResult(
            seed=seeds[e] if e < len(seeds) else None,
            total_return=float(all_rewards[e].sum()),
            success=success,
            steps=config.max_episode_steps,
            wall_ms=wall_ms,
            states=all_states[e],
            actions=all_actions[e],
            rewards=all_rewards[e],
            first_state_errors=first_errors[e],
        ))
    return results


def _record_first(errors, plans, obs, sdim):
    diff = np.abs(plans[:, 0, :sdim] - obs).max(axis=1)
    for e, d in enumerate(diff):
        errors[e].append(float(d))


def run_episode(model: DiffusionModel, guide: Guide | None, env, config: PlannerConfig,
                rng: np.random.Generator, seed: int | None = None) -> EpisodeResult:
    return run_episodes(model, guide, env, config, [seed], rngs=[rng])[0]


def random_policy_episodes(env, seeds, max_steps: int, goal_tolerance: float, normalizer=None) -> list[EpisodeResult]:
    """Baseline: uniformly random actions, scored exactly as the planner is."""
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        s = env.reset(rng)
        states, actions, rewards = [s], [], []
        for _ in range(max_steps):
            a = rng.uniform(-env.max_accel, env.max_accel, size=env.action_dim)
            s, r = env.step(s, a)
            states.append(s)
            actions.append(a)
            rewards.append(r)
        states = np.array(states)
        pos = env.position(states)
        goal = np.asarray(env.goal)
        if normalizer is not None:
            dims = slice(0, len(goal))
            pos, goal = normalizer.normalize(pos, dims), normalizer.normalize(goal, dims)
        success = bool(np.any(np.linalg.norm(pos - goal, axis=-1) <= goal_tolerance))
        results.append(EpisodeResult(seed, float(np.sum(rewards)), success, max_steps, 0.0,
                                     states, np.array(actions), np.array(rewards)))
    return results
