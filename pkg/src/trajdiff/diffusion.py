"""Forward corruption, cosine schedule, ε-prediction loss and ancestral sampling.

Trajectories are numpy arrays laid out ``[batch, T, state_dim + action_dim]``
(one row per planning timestep). The denoiser sees them channel-first.
Diffusion steps are 1-based: ``i = 1..N``; index 0 of every schedule array is
the clean-data sentinel (``alpha_bar[0] == 1``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ScheduleError, ShapeError, StepRangeError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    offset: float = 0.0

    @property
    def n_steps(self) -> int:
        return len(self.betas) - 1

    @classmethod
    def from_betas(cls, betas: Sequence[float], offset: float = 0.0) -> "NoiseSchedule":
        b = np.asarray(betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise ScheduleError("betas must be a non-empty vector in (0, 1)")
        betas_full = np.concatenate([[0.0], b])
        alphas = 1.0 - betas_full
        alpha_bar = np.cumprod(alphas)
        posterior_var = np.zeros_like(betas_full)
        posterior_var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * b
        return cls(betas_full, alphas, alpha_bar, posterior_var, float(offset))

    def check_step(self, i: int) -> None:
        if not 1 <= i <= self.n_steps:
            raise StepRangeError(f"diffusion step {i} outside 1..{self.n_steps}", step=i, n_steps=self.n_steps)


def cosine_schedule(n_steps: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Cosine schedule: ᾱ follows cos² of the normalized step, betas clipped at ``max_beta``."""
    if n_steps < 2:
        raise ScheduleError("cosine schedule needs N >= 2", n_steps=n_steps)
    t = np.arange(n_steps + 1, dtype=np.float64)
    f = np.cos(((t / n_steps + s) / (1.0 + s)) * np.pi / 2.0) ** 2
    ratio = f[1:] / f[:-1]
    betas = np.minimum(1.0 - ratio, max_beta)
    return NoiseSchedule.from_betas(betas, offset=s)


def forward_noise(tau0: np.ndarray, i, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Sample ``q(τ^i | τ^0)`` as ``sqrt(ᾱ_i) τ^0 + sqrt(1 - ᾱ_i) ε``.

    ``i`` may be a scalar or one step per leading-axis sample.
    """
    tau0 = np.asarray(tau0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != tau0.shape:
        raise ShapeError("noise shape must equal trajectory shape", tau=tau0.shape, eps=eps.shape)
    steps = np.asarray(i)
    if np.any(steps < 1) or np.any(steps > schedule.n_steps):
        raise StepRangeError(f"diffusion step outside 1..{schedule.n_steps}", step=steps.tolist())
    ab = schedule.alpha_bar[steps]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (tau0.ndim - ab.ndim))
    return np.sqrt(ab) * tau0 + np.sqrt(1.0 - ab) * eps


class RngBatch:
    """One generator per batch row, so each row's noise is its own stream.

    Quacks like ``np.random.Generator`` for ``standard_normal`` with a leading
    batch axis equal to ``len(generators)``.
    """

    def __init__(self, generators: Sequence[np.random.Generator]):
        self.generators = list(generators)

    def __len__(self) -> int:
        return len(self.generators)

    def standard_normal(self, shape) -> np.ndarray:
        shape = tuple(shape)
        if shape[0] != len(self.generators):
            raise ShapeError("batch size does not match number of generators", shape=shape, n=len(self))
        return np.stack([g.standard_normal(shape[1:]) for g in self.generators])


@dataclass
class DiffusionModel:
    """A denoiser plus the schedule and data layout it was trained for.

    ``denoiser`` is any callable ``(Tensor[B, D, T], steps[B]) -> Tensor[B, D, T]``.
    """

    denoiser: Callable
    schedule: NoiseSchedule
    horizon: int
    state_dim: int
    action_dim: int
    normalizer: object | None = None
    prediction: str = "epsilon"
    clip_denoised: float | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.prediction != "epsilon":
            raise NotImplementedError("only epsilon prediction is implemented")
        width = getattr(self.denoiser, "transition_dim", None)
        if width is not None and width != self.transition_dim:
            raise ShapeError(
                "denoiser width differs from state_dim + action_dim",
                denoiser=width,
                transition_dim=self.transition_dim,
            )

    @property
    def transition_dim(self) -> int:
        return self.state_dim + self.action_dim

    def check_horizon(self, horizon: int) -> None:
        check = getattr(self.denoiser, "check_horizon", None)
        if check is not None:
            check(horizon)

    def predict_noise(self, tau: np.ndarray, steps, *, track: bool = False) -> Tensor:
        x = Tensor(np.ascontiguousarray(np.swapaxes(tau, 1, 2)))
        if track:
            return self.denoiser(x, steps)
        with ad.no_grad():
            return self.denoiser(x, steps)


def _batched(tau: np.ndarray) -> tuple[np.ndarray, bool]:
    tau = np.asarray(tau, dtype=np.float64)
    if tau.ndim == 2:
        return tau[None], True
    if tau.ndim != 3:
        raise ShapeError("trajectory must be [T, D] or [B, T, D]", shape=tau.shape)
    return tau, False


def training_loss(model: DiffusionModel, batch: np.ndarray, rng: np.random.Generator,
                  pin: tuple[int, ...] = ()) -> Tensor:
    """``E ||ε - ε_θ(τ^i, i)||²`` with ``i ~ U{1..N}``: per-trajectory squared norm, batch-averaged.

    ``pin`` lists time indices whose state entries are reset to their clean
    values after noising, as the planner does with its constraints. Those
    entries are then known and drop out of the loss.
    """
    batch, _ = _batched(batch)
    if batch.shape[0] == 0:
        raise ShapeError("empty batch")
    if batch.shape[2] != model.transition_dim:
        raise ShapeError("batch width differs from model", shape=batch.shape, transition_dim=model.transition_dim)
    n = model.schedule.n_steps
    steps = rng.integers(1, n + 1, size=batch.shape[0])
    eps = rng.standard_normal(batch.shape)
    noised = forward_noise(batch, steps, eps, model.schedule)
    sdim = model.state_dim
    for t in pin:
        noised[:, t, :sdim] = batch[:, t, :sdim]
    pred = model.predict_noise(noised, steps, track=True)
    target = np.ascontiguousarray(np.swapaxes(eps, 1, 2))
    for t in pin:
        # a target equal to the prediction gives zero residual and zero gradient
        target[:, :sdim, t] = pred.data[:, :sdim, t]
    return ad.sum_squares_per_sample(pred, Tensor(target))


def reverse_mean(model: DiffusionModel, tau_i: np.ndarray, i: int) -> np.ndarray:
    """Mean of ``p_θ(τ^{i-1} | τ^i)`` solved from the predicted noise."""
    model.schedule.check_step(i)
    tau, single = _batched(tau_i)
    s = model.schedule
    eps = np.swapaxes(model.predict_noise(tau, np.full(tau.shape[0], i)).data, 1, 2)
    if model.clip_denoised is None:
        mu = (tau - (s.betas[i] / np.sqrt(1.0 - s.alpha_bar[i])) * eps) / np.sqrt(s.alphas[i])
    else:
        # same mean written through the clean estimate, which is clamped to the data range first;
        # otherwise a small noise bias at high i is amplified by 1/sqrt(alpha_bar)
        ab, ab_prev = s.alpha_bar[i], s.alpha_bar[i - 1]
        x0 = np.clip((tau - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab), -model.clip_denoised, model.clip_denoised)
        mu = (np.sqrt(ab_prev) * s.betas[i] * x0 + np.sqrt(s.alphas[i]) * (1.0 - ab_prev) * tau) / (1.0 - ab)
    return mu[0] if single else mu


def reverse_step(model: DiffusionModel, tau_i: np.ndarray, i: int, rng) -> np.ndarray:
    """Draw ``τ^{i-1} ~ N(μ_θ, Σ^i)``; the last step (``i == 1``) is the mean itself."""
    mu = reverse_mean(model, tau_i, i)
    if i == 1:
        return mu
    return mu + np.sqrt(model.schedule.posterior_var[i]) * rng.standard_normal(mu.shape)


def sample(
    model: DiffusionModel,
    shape,
    rng,
    guide=None,
    *,
    start: np.ndarray | None = None,
    start_step: int | None = None,
    snapshots: Sequence[int] = (),
) -> np.ndarray | tuple[np.ndarray, dict[int, np.ndarray]]:
    """Run the reverse chain from ``τ^N ~ N(0, I)`` down to ``τ^0``.

    ``shape`` is ``(T, D)`` or ``(B, T, D)``. With ``start``/``start_step`` the
    chain begins from a given ``τ^k`` instead (used by warm starts). With
    ``snapshots`` the intermediate ``τ^i`` for the listed ``i`` (0 = final)
    are returned alongside.
    """
    from .guidance import apply_constraints, guided_reverse_step

    shape = tuple(int(d) for d in shape)
    single = len(shape) == 2
    full = (1, *shape) if single else shape
    if len(full) != 3 or full[2] != model.transition_dim:
        raise ShapeError("sample shape must be (T, D) or (B, T, D) with D = state+action", shape=shape)
    model.check_horizon(full[1])
    n = model.schedule.n_steps
    if start is None:
        k = n
        tau = rng.standard_normal(full)
    else:
        k = n if start_step is None else int(start_step)
        if not 0 <= k <= n:
            raise StepRangeError(f"start step {k} outside 0..{n}", step=k)
        tau = np.array(start, dtype=np.float64).reshape(full)
    constraints = guide.constraints if guide is not None else None
    if constraints:
        tau = apply_constraints(tau, constraints)
    chain = {}
    if k in snapshots:
        chain[k] = tau.copy()
    for i in range(k, 0, -1):
        if guide is None:
            tau = reverse_step(model, tau, i, rng)
        else:
            tau = guided_reverse_step(model, tau, i, guide, rng)
        if i - 1 in snapshots:
            chain[i - 1] = tau.copy()
    out = tau[0] if single else tau
    if snapshots:
        return out, {i: (v[0] if single else v) for i, v in chain.items()}
    return out
