"""Command-line pipeline: data, training, planning, evaluation, sweeps, plots.

Every command reads the same TOML run config and writes into ``--out``.
Exit codes: 0 success, 2 bad configuration or arguments, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import RunConfig, load_config
from .data import collect_demonstrations, load_dataset, occupancy_coverage, save_dataset
from .diffusion import DiffusionModel, cosine_schedule, sample
from .envs import make_env
from .errors import CheckpointError, ConfigError, PlotError, TrajDiffError
from .guidance import (Guide, goal_inpaint_guide, quadratic_guide, reward_guide_from_value,
                       state_constraint, ConstraintSet)
from .planner import PlannerConfig, run_episodes
from .plotting import denoising_svg, maze_overlay_svg, sweep_svg, write_svg
from .training import TrainConfig, ValueConfig, new_state, train_diffusion, train_value
from .unet import DenoiserNet, ValueNet

log = logging.getLogger("trajdiff")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SWEEP_KS = (2, 5, 10, 20)


# -- setup ---------------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "episodes", None) is not None:
        cfg.planner.episodes = args.episodes
        if args.command == "generate-data":
            cfg.env.episodes = args.episodes
    if getattr(args, "warm_start", None) is not None:
        cfg.planner.warm_start_steps = args.warm_start
    return cfg.validate()


def build_env(cfg: RunConfig):
    return make_env(cfg.env.name)


def _dataset_path(args) -> Path:
    return Path(args.dataset) if getattr(args, "dataset", None) else Path(args.out) / "dataset.tpds"


def _load_data(args, env):
    dataset = load_dataset(_dataset_path(args))
    if (dataset.state_dim, dataset.action_dim) != (env.state_dim, env.action_dim):
        raise TrajDiffError(
            f"dataset has state/action dims {dataset.state_dim}/{dataset.action_dim}, "
            f"environment {env.name} expects {env.state_dim}/{env.action_dim}")
    return dataset


def _load_model(args, cfg: RunConfig, env) -> DiffusionModel:
    path = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "model.tpck"
    ck = ckpt_io.load_checkpoint(path)
    if (ck.state_dim, ck.action_dim) != (env.state_dim, env.action_dim):
        raise CheckpointError(
            f"checkpoint has state/action dims {ck.state_dim}/{ck.action_dim}, "
            f"environment {env.name} expects {env.state_dim}/{env.action_dim}")
    return ck.model()


def build_guide(cfg: RunConfig, env, model: DiffusionModel, out: Path) -> Guide | None:
    g = cfg.guide
    stats = model.normalizer
    if g.type == "none":
        return None
    if g.type == "goal-inpaint":
        goal = env.goal_state() if hasattr(env, "goal_state") else np.array([env.target, 0.0])
        if stats is not None:
            goal = stats.normalize(goal, slice(0, model.state_dim))
        return goal_inpaint_guide(None, goal)
    if g.type == "analytic-quadratic":
        width = len(g.target)
        target = np.asarray(g.target, dtype=np.float64)
        if width > model.transition_dim:
            raise ConfigError(f"guide.target has {width} entries, transitions have {model.transition_dim}")
        if stats is not None:
            target = stats.normalize(target, slice(0, width))
        full_t = np.zeros(model.transition_dim)
        full_t[:width] = target
        mask = np.zeros(model.transition_dim)
        mask[:width] = g.mask if g.mask else 1.0
        return quadratic_guide(full_t, g.scale, mask)
    ck = ckpt_io.load_checkpoint(out / "value.tpck")
    if ck.kind != "value":
        raise CheckpointError("value.tpck does not hold a value net")
    return reward_guide_from_value(ck.net, g.scale)


def planner_config(cfg: RunConfig, warm_start: int | None = None, open_loop: bool | None = None) -> PlannerConfig:
    p = cfg.planner
    return PlannerConfig(
        horizon=cfg.model.horizon,
        warm_start_steps=p.warm_start_steps if warm_start is None else warm_start,
        open_loop=p.open_loop if open_loop is None else open_loop,
        max_episode_steps=p.max_episode_steps,
        goal_tolerance=p.goal_tolerance,
        goal_deadline=p.goal_deadline,
    )


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v))


# -- commands ------------------------------------------------------------------

def cmd_generate_data(args, cfg: RunConfig) -> int:
    env = build_env(cfg)
    rng = np.random.default_rng(cfg.seed)
    dataset = collect_demonstrations(env, cfg.env.controller, cfg.env.episodes, rng,
                                     episode_length=cfg.env.episode_length or None)
    path = _dataset_path(args)
    save_dataset(dataset, path)
    lo, hi = env.state_bounds()
    cover = occupancy_coverage(dataset, (lo[:2], hi[:2]))
    steps = sum(len(ep) for ep in dataset.episodes)
    print(f"wrote {path}: {len(dataset.episodes)} episodes, {steps} transitions, "
          f"occupancy coverage {cover:.0%}")
    return EXIT_OK


def pinned_steps(cfg: RunConfig) -> tuple[int, ...]:
    """Time indices the planner will pin, so training can show them clean too."""
    return (0, -1) if cfg.guide.type == "goal-inpaint" else (0,)


def _train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(t.learning_rate, t.batch_size, t.steps, cfg.seed, t.log_every, pinned_steps(cfg))


def cmd_train(args, cfg: RunConfig) -> int:
    env = build_env(cfg)
    dataset = _load_data(args, env)
    out = Path(args.out)
    m = cfg.model
    tcfg = _train_config(cfg)
    if args.checkpoint:
        ck = ckpt_io.load_checkpoint(args.checkpoint)
        if ck.config_hash and ck.config_hash != cfg.hash():
            log.warning("resuming from a checkpoint written under a different config")
        model = ck.model()
        state = ck.train_state(tcfg.learning_rate)
    else:
        net = DenoiserNet(dataset.transition_dim, m.channels, m.embed_dim, m.kernel_size, m.groups, seed=cfg.seed)
        model = DiffusionModel(net, cosine_schedule(m.n_steps), m.horizon, dataset.state_dim,
                               dataset.action_dim, normalizer=dataset.stats,
                               clip_denoised=m.clip_denoised or None)
        state = new_state(net.parameters(), tcfg.learning_rate, cfg.seed)
    model.check_horizon(m.horizon)
    path = out / "model.tpck"
    while state.step < tcfg.steps:
        nxt = min(tcfg.steps, (state.step // cfg.train.checkpoint_every + 1) * cfg.train.checkpoint_every)
        state = train_diffusion(model, dataset, tcfg, state, until=nxt,
                                on_log=lambda s, l: print(f"step {s} loss {l:.6f}", flush=True))
        _save(path, "diffusion", model.denoiser, model.schedule, model, state, cfg)
    if not path.exists() or state.step == 0:
        _save(path, "diffusion", model.denoiser, model.schedule, model, state, cfg)
    _write_csv(out / "train_loss.csv", ["step", "loss"], [(s, _fmt(l)) for s, l in state.history])
    print(f"wrote {path} at step {state.step}")
    return EXIT_OK


def _save(path, kind, net, schedule, dataset_like, state, cfg):
    ck = ckpt_io.from_training(kind, net, schedule, cfg.model.horizon, dataset_like.state_dim,
                               dataset_like.action_dim, state=state, normalizer=dataset_like.normalizer,
                               env_name=cfg.env.name, config_hash=cfg.hash(),
                               clip_denoised=getattr(dataset_like, "clip_denoised", None))
    ckpt_io.save_checkpoint(ck, path)


def cmd_train_value(args, cfg: RunConfig) -> int:
    env = build_env(cfg)
    dataset = _load_data(args, env)
    out = Path(args.out)
    m, v = cfg.model, cfg.value
    net = ValueNet(dataset.transition_dim, m.channels, m.embed_dim, m.kernel_size, m.groups, seed=cfg.seed)
    schedule = cosine_schedule(m.n_steps)
    vcfg = ValueConfig(v.learning_rate, v.batch_size, v.steps, cfg.seed, v.discount, v.log_every)
    state = train_value(net, dataset, schedule, vcfg, m.horizon,
                        on_log=lambda s, l: print(f"step {s} loss {l:.6f}", flush=True))
    layout = DiffusionModel(None, schedule, m.horizon, dataset.state_dim, dataset.action_dim,
                            normalizer=dataset.stats)
    _save(out / "value.tpck", "value", net, schedule, layout, state, cfg)
    _write_csv(out / "value_loss.csv", ["step", "loss"], [(s, _fmt(l)) for s, l in state.history])
    print(f"wrote {out / 'value.tpck'} at step {state.step}")
    return EXIT_OK


def snapshot_steps(n: int) -> list[int]:
    return sorted({n, (3 * n) // 4, n // 2, n // 4, 0}, reverse=True)


def cmd_plan(args, cfg: RunConfig) -> int:
    env = build_env(cfg)
    model = _load_model(args, cfg, env)
    out = Path(args.out)
    guide = build_guide(cfg, env, model, out)
    rng = np.random.default_rng(cfg.seed)
    state = env.reset(rng)
    obs = state if model.normalizer is None else model.normalizer.normalize(state, slice(0, model.state_dim))
    base = guide if guide is not None else Guide(None, 0.0)
    g = base.with_constraints(ConstraintSet.of(state_constraint(0, obs)))
    steps = snapshot_steps(model.schedule.n_steps)
    plan, chain = sample(model, (model.horizon, model.transition_dim), rng, g, snapshots=steps)
    raw = lambda x: x if model.normalizer is None else model.normalizer.denormalize(x)
    names = [f"s{j}" for j in range(model.state_dim)] + [f"a{j}" for j in range(model.action_dim)]
    _write_csv(out / "plan.csv", ["t", *names], [(t, *map(_fmt, row)) for t, row in enumerate(raw(plan))])
    _write_csv(out / "snapshots.csv", ["i", "t", *names],
               [(i, t, *map(_fmt, row)) for i in steps for t, row in enumerate(raw(chain[i]))])
    err = float(np.abs(plan[0, :model.state_dim] - obs).max())
    print(f"wrote {out / 'plan.csv'} (T={model.horizon}); first-state error {err:.3g}")
    return EXIT_OK


def summarize(records: list[dict]) -> dict:
    if not records:
        return {"episodes": 0, "note": "no episodes"}
    returns = np.array([r["return"] for r in records])
    success = np.array([float(r["success"]) for r in records])
    n = len(records)
    se = lambda x: float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return {
        "episodes": n,
        "mean_return": float(math.fsum(returns) / n),
        "stderr_return": se(returns),
        "success_rate": float(success.mean()),
        "stderr_success": se(success),
    }


def evaluate(cfg: RunConfig, env, model, guide, warm_start=None, open_loop=None):
    seeds = [cfg.seed + k for k in range(cfg.planner.episodes)]
    results = run_episodes(model, guide, env, planner_config(cfg, warm_start, open_loop), seeds)
    return sorted(results, key=lambda r: r.seed)


def _print_summary(summary: dict) -> None:
    if summary["episodes"] == 0:
        print("no episodes")
        return
    print(f"{'episodes':>10} {'mean return':>12} {'stderr':>8} {'success':>8} {'stderr':>8}")
    print(f"{summary['episodes']:>10} {summary['mean_return']:>12.4f} {summary['stderr_return']:>8.4f} "
          f"{summary['success_rate']:>8.2%} {summary['stderr_success']:>8.4f}")


def cmd_evaluate(args, cfg: RunConfig) -> int:
    env = build_env(cfg)
    model = _load_model(args, cfg, env)
    out = Path(args.out)
    results = evaluate(cfg, env, model, build_guide(cfg, env, model, out))
    records = [r.record(timing=False) for r in results]
    with open(out / "episodes.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    summary = summarize(records)
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    (out / "timing.json").write_text(json.dumps(
        {"wall_ms_per_episode": results[0].wall_ms if results else 0.0}) + "\n")
    names = [f"s{j}" for j in range(model.state_dim)]
    _write_csv(out / "trajectories.csv", ["seed", "t", *names],
               [(r.seed, t, *map(_fmt, s)) for r in results for t, s in enumerate(r.states)])
    _print_summary(summary)
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    env = build_env(cfg)
    model = _load_model(args, cfg, env)
    out = Path(args.out)
    guide = build_guide(cfg, env, model, out)
    n = model.schedule.n_steps
    ks = [args.warm_start] if args.warm_start is not None else sorted({k for k in SWEEP_KS if k <= n} | {n})
    rows = []
    for k in ks:
        results = evaluate(cfg, env, model, guide, warm_start=k, open_loop=False)
        s = summarize([r.record(timing=False) for r in results])
        rows.append({"k": k, **s})
        print(f"k={k:>3} success {s.get('success_rate', float('nan')):.2%} "
              f"return {s.get('mean_return', float('nan')):.3f}", flush=True)
    header = ["k", "episodes", "success_rate", "stderr_success", "mean_return", "stderr_return"]
    _write_csv(out / "sweep.csv", header, [[r.get(h, "") for h in header] for r in rows])
    return EXIT_OK


def _read_csv(path: Path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except (OSError, csv.Error) as exc:
        raise PlotError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise PlotError(f"{path} has no rows")
    return rows


def _numeric(rows: list[dict], path: Path, cols) -> np.ndarray:
    try:
        return np.array([[float(r[c]) for c in cols] for r in rows])
    except (KeyError, TypeError, ValueError) as exc:
        raise PlotError(f"malformed row in {path}: {exc}") from exc


def cmd_plot(args, cfg: RunConfig) -> int:
    env = build_env(cfg)
    out = Path(args.out)
    inputs = [Path(p) for p in args.inputs] or [
        p for p in (out / "snapshots.csv", out / "trajectories.csv", out / "sweep.csv") if p.exists()]
    if not inputs:
        raise PlotError(f"nothing to plot in {out}")
    rendered = []
    for path in inputs:
        rows = _read_csv(path)
        cols = list(rows[0])
        if path.name.startswith("snapshots"):
            data = _numeric(rows, path, ["i", "s0", "s1"] if "s1" in cols else ["i", "t", "s0"])
            snaps = {int(i): data[data[:, 0] == i, 1:] for i in sorted(set(data[:, 0]))}
            rendered.append((out / "denoising.svg", denoising_svg(snaps, env=env if "s1" in cols else None)))
        elif path.name.startswith("trajectories"):
            data = _numeric(rows, path, ["seed", "s0", "s1"] if "s1" in cols else ["seed", "t", "s0"])
            trajs = [data[data[:, 0] == s, 1:] for s in sorted(set(data[:, 0]))]
            rendered.append((out / "maze.svg", maze_overlay_svg(env, trajs)))
        elif path.name.startswith("sweep"):
            data = _numeric(rows, path, ["k", "success_rate", "mean_return"])
            recs = [{"k": int(k), "success_rate": s, "mean_return": m} for k, s, m in data]
            rendered.append((out / "sweep.svg", sweep_svg(recs)))
        else:
            raise PlotError(f"do not know how to plot {path.name}")
    # only write once every input rendered, so a bad input leaves no partial output
    for dest, svg in rendered:
        write_svg(svg, dest)
        print(f"wrote {dest}")
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "train-value": cmd_train_value,
    "plan": cmd_plan,
    "evaluate": cmd_evaluate,
    "sweep-warmstart": cmd_sweep,
    "plot": cmd_plot,
}


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _nonneg(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajdiff", description="Trajectory diffusion planning on toy tasks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML run config (defaults used when omitted)")
        p.add_argument("--seed", type=_u64, help="override the config seed")
        p.add_argument("--out", default=".", help="directory for all outputs (default: .)")
        p.add_argument("--checkpoint", help="checkpoint to load (train: resume from it)")
        p.add_argument("--episodes", type=_nonneg, help="number of episodes")
        p.add_argument("--warm-start", type=_nonneg, dest="warm_start", help="warm-start budget k")
        p.add_argument("--verbose", action="store_true")
        if name in ("train", "train-value", "generate-data"):
            p.add_argument("--dataset", help="dataset file (default: OUT/dataset.tpds)")
        if name == "plot":
            p.add_argument("inputs", nargs="*", help="snapshots/trajectories/sweep CSV files")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrajDiffError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
