"""Perturbation functions for sampling: return gradients, inpainting, composition."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import DiffusionModel, reverse_mean
from .errors import ConstraintError, GuidanceError, ShapeError

GradientFn = Callable[[np.ndarray, int], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class Constraint:
    """Pin ``tau[..., t, start:stop]`` to ``values``.

    ``values`` is ``[stop - start]`` (same for every batch row) or
    ``[B, stop - start]``. Negative ``t`` counts from the end of the horizon.
    """

    t: int
    start: int
    stop: int
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.stop <= self.start or self.start < 0:
            raise ConstraintError("empty or negative coordinate slice", start=self.start, stop=self.stop)
        if v.shape[-1:] != (self.stop - self.start,) or v.ndim not in (1, 2):
            raise ConstraintError("constraint values do not match slice width", shape=v.shape)
        if not np.all(np.isfinite(v)):
            raise ConstraintError("constraint values must be finite")

    def resolve_t(self, horizon: int) -> int:
        t = self.t + horizon if self.t < 0 else self.t
        if not 0 <= t < horizon:
            raise ConstraintError(f"constraint timestep {self.t} outside horizon {horizon}", t=self.t)
        return t


@dataclass(frozen=True)
class ConstraintSet:
    items: tuple[Constraint, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.items)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @classmethod
    def of(cls, *constraints: Constraint) -> "ConstraintSet":
        return cls(tuple(constraints))

    def union(self, other: "ConstraintSet") -> "ConstraintSet":
        merged = list(self.items)
        for c in other.items:
            for existing in merged:
                _check_conflict(existing, c)
            merged.append(c)
        return ConstraintSet(tuple(merged))

    def validate(self, shape: tuple[int, ...]) -> None:
        horizon, width = shape[-2], shape[-1]
        batch = shape[0] if len(shape) == 3 else None
        resolved = []
        for c in self.items:
            t = c.resolve_t(horizon)
            for other_t, other in resolved:
                if other_t == t:
                    _check_conflict(other, c, force=True)
            resolved.append((t, c))
            if c.stop > width:
                raise ConstraintError("constraint slice exceeds trajectory width", stop=c.stop, width=width)
            if c.values.ndim == 2 and c.values.shape[0] != batch:
                raise ConstraintError("per-row constraint values need a matching batch", values=c.values.shape)


def _check_conflict(a: Constraint, b: Constraint, force: bool = False) -> None:
    # without a horizon only identically written timesteps are comparable
    if a.t != b.t and not force:
        return
    lo, hi = max(a.start, b.start), min(a.stop, b.stop)
    if lo >= hi:
        return
    va = a.values[..., lo - a.start:hi - a.start]
    vb = b.values[..., lo - b.start:hi - b.start]
    if va.shape != vb.shape or not np.array_equal(va, vb):
        raise ConstraintError(
            "two constraints pin the same coordinates to different values",
            t=a.t,
            coords=(lo, hi),
        )


def state_constraint(t: int, state: np.ndarray, offset: int = 0) -> Constraint:
    state = np.asarray(state, dtype=np.float64)
    return Constraint(t, offset, offset + state.shape[-1], state)


def apply_constraints(tau: np.ndarray, constraints: ConstraintSet | None) -> np.ndarray:
    """Overwrite pinned coordinates with their values; every other entry is untouched."""
    if not constraints:
        return tau
    tau = np.array(tau, dtype=np.float64)
    constraints.validate(tau.shape)
    horizon = tau.shape[-2]
    for c in constraints:
        t = c.resolve_t(horizon)
        tau[..., t, c.start:c.stop] = c.values
    return tau


@dataclass(frozen=True)
class Guide:
    """Differentiable objective ``J`` with scale ``α`` plus hard constraints.

    ``gradient_fn(tau[B, T, D], i)`` returns ``(J[B], dJ/dtau[B, T, D])``.
    """

    gradient_fn: GradientFn | None = None
    scale: float = 0.1
    constraints: ConstraintSet = field(default_factory=ConstraintSet)

    def __post_init__(self):
        if not self.scale >= 0:
            raise GuidanceError("guide scale must be non-negative", scale=self.scale)

    @property
    def active(self) -> bool:
        return self.gradient_fn is not None and self.scale != 0.0

    def gradient(self, tau: np.ndarray, i: int) -> tuple[np.ndarray, np.ndarray]:
        if self.gradient_fn is None:
            return np.zeros(tau.shape[0]), np.zeros_like(tau)
        value, grad = self.gradient_fn(tau, i)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != tau.shape:
            raise ShapeError("guide gradient shape differs from trajectory", grad=grad.shape, tau=tau.shape)
        if not np.all(np.isfinite(grad)):
            raise GuidanceError("guide produced a non-finite gradient", step=i)
        return np.asarray(value, dtype=np.float64), grad

    def with_constraints(self, extra: ConstraintSet) -> "Guide":
        return Guide(self.gradient_fn, self.scale, self.constraints.union(extra))


def constraint_guide(constraints: ConstraintSet) -> Guide:
    return Guide(None, 0.0, constraints)


def reward_guide_from_value(valuenet, alpha: float = 0.1) -> Guide:
    """Guide whose gradient is ``∇_τ J_φ(τ, i)``, computed by backpropagation."""

    def gradient_fn(tau: np.ndarray, i: int):
        x = Tensor(np.ascontiguousarray(np.swapaxes(tau, 1, 2)), requires_grad=True)
        values = valuenet(x, np.full(tau.shape[0], i))
        ad.backward(ad.sum_all(values))
        return values.data.copy(), np.swapaxes(x.grad, 1, 2)

    return Guide(gradient_fn, alpha)


def quadratic_guide(target: np.ndarray, alpha: float = 0.1, mask: np.ndarray | None = None) -> Guide:
    """``J(τ) = -||m ⊙ (τ - c)||²`` for a target array ``c`` broadcastable to ``[T, D]``."""
    target = np.asarray(target, dtype=np.float64)
    weights = None if mask is None else np.asarray(mask, dtype=np.float64)

    def gradient_fn(tau: np.ndarray, i: int):
        diff = tau - target
        if weights is not None:
            diff = diff * weights
        value = -np.sum((diff * diff).reshape(tau.shape[0], -1), axis=1)
        grad = -2.0 * diff * (weights if weights is not None else 1.0)
        return value, grad

    return Guide(gradient_fn, alpha)


def goal_inpaint_guide(start: np.ndarray | None, goal: np.ndarray | None) -> Guide:
    """Pin ``s_0`` and/or ``s_{T-1}`` (state coordinates come first in each row)."""
    items = []
    if start is not None:
        items.append(state_constraint(0, start))
    if goal is not None:
        items.append(state_constraint(-1, goal))
    return constraint_guide(ConstraintSet(tuple(items)))


def compose(guides: Sequence[Guide]) -> Guide:
    """Sum of ``α_k ∇J_k`` with constraints unioned; the result has scale 1."""
    guides = list(guides)
    if not guides:
        return Guide(None, 0.0)
    if len(guides) == 1:
        return guides[0]
    constraints = ConstraintSet()
    for g in guides:
        constraints = constraints.union(g.constraints)
    active = [g for g in guides if g.active]
    if not active:
        return Guide(None, 0.0, constraints)

    def gradient_fn(tau: np.ndarray, i: int):
        total_value = np.zeros(tau.shape[0])
        total_grad = np.zeros_like(tau)
        for g in active:
            value, grad = g.gradient(tau, i)
            total_value = total_value + g.scale * value
            total_grad = total_grad + g.scale * grad
        return total_value, total_grad

    return Guide(gradient_fn, 1.0, constraints)


def guided_reverse_step(model: DiffusionModel, tau_i: np.ndarray, i: int, guide: Guide, rng) -> np.ndarray:
    """Draw ``τ^{i-1} ~ N(μ + α Σ^i ∇J(μ), Σ^i)``, then re-pin constrained values."""
    mu = reverse_mean(model, tau_i, i)
    var = model.schedule.posterior_var[i]
    if guide.active:
        batched = mu if mu.ndim == 3 else mu[None]
        _, grad = guide.gradient(batched, i)
        mu = mu + guide.scale * var * grad.reshape(mu.shape)
    if i > 1:
        mu = mu + np.sqrt(var) * rng.standard_normal(mu.shape)
    return apply_constraints(mu, guide.constraints)

