"""Training loops for the noise predictor and the return predictor."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import EpisodeDataset, discounted_returns, segment_sampler
from .diffusion import DiffusionModel, NoiseSchedule, forward_noise, training_loss
from .errors import DatasetError, TrainingError
from .nn import Adam

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 4e-5
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    log_every: int = 100
    pin: tuple[int, ...] = ()  # time indices shown clean during training, e.g. (0, -1) for start/goal tasks


@dataclass
class ValueConfig:
    learning_rate: float = 2e-4
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    discount: float = 0.997
    log_every: int = 100


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    step: int
    optimizer: Adam
    rng: np.random.Generator
    history: list[tuple[int, float]] = field(default_factory=list)


def new_state(params, lr: float, seed: int) -> TrainState:
    return TrainState(0, Adam(params, lr=lr), np.random.default_rng(seed))


def _check(loss: Tensor, step: int) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"loss became {value} at step {step}; lower the learning rate or check the data", step=step)
    return value


def train_diffusion(
    model: DiffusionModel,
    dataset: EpisodeDataset | np.ndarray,
    config: TrainConfig,
    state: TrainState | None = None,
    until: int | None = None,
    on_log: Callable[[int, float], None] | None = None,
) -> TrainState:
    """Minimize the ε-prediction loss with Adam on random dataset windows.

    ``dataset`` may also be a fixed array of normalized trajectories
    ``[n, T, D]`` from which batches are drawn. Training stops at ``until``
    (default ``config.steps``) and can be resumed from the returned state.
    """
    params = model.denoiser.parameters()
    if state is None:
        state = new_state(params, config.learning_rate, config.seed)
    stop = config.steps if until is None else until
    index = None if isinstance(dataset, np.ndarray) else dataset.window_index(model.horizon)
    window = []
    while state.step < stop:
        batch = _draw(dataset, model.horizon, config.batch_size, state.rng, index)
        loss = training_loss(model, batch, state.rng, config.pin)
        value = _check(loss, state.step)
        state.optimizer.zero_grad()
        ad.backward(loss)
        state.optimizer.step()
        state.step += 1
        window.append(value)
        if state.step % config.log_every == 0:
            mean = float(np.mean(window))
            state.history.append((state.step, mean))
            window = []
            log.info("step %d loss %.5f", state.step, mean)
            if on_log is not None:
                on_log(state.step, mean)
    return state


def _draw(dataset, horizon, batch, rng, index):
    if isinstance(dataset, np.ndarray):
        return dataset[rng.integers(len(dataset), size=batch)]
    return segment_sampler(dataset, horizon, batch, rng, index=index)


def value_targets(rewards: np.ndarray, discount: float) -> np.ndarray:
    return discounted_returns(rewards, discount)


def value_loss(valuenet, tau: np.ndarray, targets: np.ndarray, steps: np.ndarray) -> Tensor:
    x = Tensor(np.ascontiguousarray(np.swapaxes(tau, 1, 2)))
    return ad.mse(valuenet(x, steps), Tensor(targets))


def train_value(
    valuenet,
    dataset: EpisodeDataset,
    schedule: NoiseSchedule,
    config: ValueConfig,
    horizon: int,
    state: TrainState | None = None,
    on_log: Callable[[int, float], None] | None = None,
) -> TrainState:
    """Regress the discounted return of a clean window from its noised version ``τ^i``."""
    if not dataset.has_rewards:
        raise DatasetError("value training needs per-step rewards in the dataset")
    if state is None:
        state = new_state(valuenet.parameters(), config.learning_rate, config.seed)
    index = dataset.window_index(horizon)
    window = []
    while state.step < config.steps:
        tau0, rewards = segment_sampler(dataset, horizon, config.batch_size, state.rng,
                                        with_rewards=True, index=index)
        targets = value_targets(rewards, config.discount)
        steps = state.rng.integers(1, schedule.n_steps + 1, size=len(tau0))
        noised = forward_noise(tau0, steps, state.rng.standard_normal(tau0.shape), schedule)
        loss = value_loss(valuenet, noised, targets, steps)
        value = _check(loss, state.step)
        state.optimizer.zero_grad()
        ad.backward(loss)
        state.optimizer.step()
        state.step += 1
        window.append(value)
        if state.step % config.log_every == 0:
            mean = float(np.mean(window))
            state.history.append((state.step, mean))
            window = []
            if on_log is not None:
                on_log(state.step, mean)
    return state
