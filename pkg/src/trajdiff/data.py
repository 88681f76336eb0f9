"""Episode datasets: collection, min/max normalization, windowing, TPDS files."""
from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envs import make_controller
from .errors import DatasetError

log = logging.getLogger(__name__)

MAGIC = b"TPDS"
VERSION = 1


@dataclass
class Episode:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    def transitions(self) -> np.ndarray:
        return np.concatenate([self.states, self.actions], axis=1)


@dataclass(frozen=True)
class Normalizer:
    """Per-dimension affine map of ``[min, max]`` onto ``[-1, 1]``.

    Dimensions with ``max == min`` map to 0 and back to the constant.
    """

    mins: np.ndarray
    maxs: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Normalizer":
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            raise DatasetError("cannot fit normalization on an empty dataset")
        flat = values.reshape(-1, values.shape[-1])
        return cls(flat.min(axis=0), flat.max(axis=0))

    @property
    def _span(self) -> np.ndarray:
        return self.maxs - self.mins

    def normalize(self, x: np.ndarray, dims: slice = slice(None)) -> np.ndarray:
        lo, span = self.mins[dims], self._span[dims]
        safe = np.where(span > 0, span, 1.0)
        out = 2.0 * (np.asarray(x, dtype=np.float64) - lo) / safe - 1.0
        return np.where(span > 0, out, 0.0)

    def denormalize(self, y: np.ndarray, dims: slice = slice(None)) -> np.ndarray:
        lo, span = self.mins[dims], self._span[dims]
        return (np.asarray(y, dtype=np.float64) + 1.0) * 0.5 * span + lo


def normalize(dataset: "EpisodeDataset") -> list[np.ndarray]:
    """Normalized ``[L, S+A]`` arrays, one per episode."""
    return [dataset.stats.normalize(ep.transitions()) for ep in dataset.episodes]


def denormalize(values: np.ndarray, stats: Normalizer) -> np.ndarray:
    return stats.denormalize(values)


class EpisodeDataset:
    def __init__(self, episodes: list[Episode], state_dim: int, action_dim: int,
                 stats: Normalizer | None = None, env_name: str | None = None):
        if not episodes:
            raise DatasetError("dataset has no episodes")
        self.episodes = episodes
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.env_name = env_name
        if stats is None:
            stats = Normalizer.fit(np.concatenate([ep.transitions() for ep in episodes]))
        self.stats = stats
        self._rows: list[np.ndarray] | None = None

    def rows(self, k: int) -> np.ndarray:
        """Raw ``[L, S+A]`` array of episode ``k`` (cached)."""
        if self._rows is None:
            self._rows = [ep.transitions() for ep in self.episodes]
        return self._rows[k]

    @property
    def transition_dim(self) -> int:
        return self.state_dim + self.action_dim

    @property
    def has_rewards(self) -> bool:
        return all(ep.rewards is not None and len(ep.rewards) == len(ep) for ep in self.episodes)

    def window_index(self, horizon: int) -> tuple[np.ndarray, np.ndarray]:
        """``(episode_ids, starts)`` of every length-``horizon`` window."""
        ids, starts = [], []
        short = 0
        for k, ep in enumerate(self.episodes):
            n = len(ep) - horizon + 1
            if n <= 0:
                short += 1
                continue
            ids.append(np.full(n, k))
            starts.append(np.arange(n))
        if short:
            log.warning("discarding %d episode(s) shorter than horizon %d", short, horizon)
        if not ids:
            raise DatasetError(f"no episode is at least {horizon} steps long", horizon=horizon)
        return np.concatenate(ids), np.concatenate(starts)

    def segment_sampler(self, horizon: int, batch: int, rng: np.random.Generator,
                        normalized: bool = True, with_rewards: bool = False):
        return segment_sampler(self, horizon, batch, rng, normalized=normalized, with_rewards=with_rewards)


def segment_sampler(dataset: EpisodeDataset, horizon: int, batch: int, rng: np.random.Generator,
                    normalized: bool = True, with_rewards: bool = False, index=None):
    """Uniformly drawn contiguous windows, ``[batch, horizon, S+A]``.

    Every window lies inside one episode. ``with_rewards`` also returns the
    raw rewards ``[batch, horizon]``.
    """
    ids, starts = index if index is not None else dataset.window_index(horizon)
    picks = rng.integers(len(ids), size=batch)
    out = np.empty((batch, horizon, dataset.transition_dim))
    rewards = np.empty((batch, horizon))
    for row, p in enumerate(picks):
        s = starts[p]
        out[row] = dataset.rows(ids[p])[s:s + horizon]
        if with_rewards:
            rewards[row] = dataset.episodes[ids[p]].rewards[s:s + horizon]
    if normalized:
        out = dataset.stats.normalize(out)
    return (out, rewards) if with_rewards else out


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """``sum_t gamma^t r_t`` along the last axis."""
    weights = gamma ** np.arange(rewards.shape[-1])
    return rewards @ weights


def collect_demonstrations(env, controller: str, n_episodes: int, rng: np.random.Generator,
                           episode_length: int | None = None) -> EpisodeDataset:
    if n_episodes < 1:
        raise DatasetError("n_episodes must be at least 1", n_episodes=n_episodes)
    length = episode_length or env.episode_length
    episodes = []
    for _ in range(n_episodes):
        policy = make_controller(controller, env, rng)
        s = env.reset(rng)
        states, actions, rewards = [], [], []
        for _ in range(length):
            a = policy(s)
            nxt, r = env.step(s, a)
            states.append(s)
            actions.append(a)
            rewards.append(r)
            s = nxt
        episodes.append(Episode(np.array(states), np.array(actions), np.array(rewards)))
    return EpisodeDataset(episodes, env.state_dim, env.action_dim, env_name=env.name)


def occupancy_coverage(dataset: EpisodeDataset, bounds: tuple[float, float], bins: int = 10) -> float:
    """Fraction of a ``bins x bins`` grid over the first two state dims that is visited."""
    pts = np.concatenate([ep.states[:, :2] for ep in dataset.episodes])
    lo, hi = bounds
    idx = np.clip(((pts - lo) / (hi - lo) * bins).astype(int), 0, bins - 1)
    return len({(int(a), int(b)) for a, b in idx}) / bins ** 2


# -- TPDS container ------------------------------------------------------------

def to_bytes(dataset: EpisodeDataset) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIII", VERSION, len(dataset.episodes), dataset.state_dim, dataset.action_dim))
    for ep in dataset.episodes:
        buf.write(struct.pack("<I", len(ep)))
        buf.write(np.ascontiguousarray(ep.states, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(ep.actions, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(ep.rewards, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(dataset.stats.mins, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(dataset.stats.maxs, dtype="<f8").tobytes())
    return buf.getvalue()


def from_bytes(raw: bytes) -> EpisodeDataset:
    if raw[:4] != MAGIC:
        raise DatasetError("not a TPDS file (bad magic)")
    try:
        version, n_eps, sdim, adim = struct.unpack_from("<IIII", raw, 4)
        if version != VERSION:
            raise DatasetError(f"unsupported TPDS version {version}")
        off = 20
        episodes = []

        def take(count):
            nonlocal off
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64)
            off += 8 * count
            return arr

        for _ in range(n_eps):
            (length,) = struct.unpack_from("<I", raw, off)
            off += 4
            states = take(length * sdim).reshape(length, sdim)
            actions = take(length * adim).reshape(length, adim)
            rewards = take(length)
            episodes.append(Episode(states, actions, rewards))
        dim = sdim + adim
        stats = Normalizer(take(dim), take(dim))
    except (struct.error, ValueError) as exc:
        raise DatasetError(f"truncated or malformed TPDS file: {exc}") from exc
    if off != len(raw):
        raise DatasetError("trailing bytes after TPDS payload", extra=len(raw) - off)
    return EpisodeDataset(episodes, sdim, adim, stats)


def save_dataset(dataset: EpisodeDataset, path) -> None:
    Path(path).write_bytes(to_bytes(dataset))


def load_dataset(path) -> EpisodeDataset:
    return from_bytes(Path(path).read_bytes())


def export_csv(dataset: EpisodeDataset, path) -> None:
    header = (["episode", "t"] + [f"s{k}" for k in range(dataset.state_dim)]
              + [f"a{k}" for k in range(dataset.action_dim)] + ["reward"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for e, ep in enumerate(dataset.episodes):
            for t in range(len(ep)):
                w.writerow([e, t, *map(repr, ep.states[t].tolist()), *map(repr, ep.actions[t].tolist()),
                            repr(float(ep.rewards[t]))])
