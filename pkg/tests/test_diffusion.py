import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajdiff.autodiff import Tensor
from trajdiff.diffusion import (DiffusionModel, NoiseSchedule, RngBatch, cosine_schedule, forward_noise,
                                reverse_mean, reverse_step, sample, training_loss)
from trajdiff.errors import ScheduleError, ShapeError, StepRangeError

from oracles import cosine_alpha_bar, posterior_variance, reverse_mean_formula


class ConstantNoise:
    """Denoiser stub that always predicts the same noise value."""

    def __init__(self, value=0.0):
        self.value = value

    def __call__(self, x, steps):
        return Tensor(np.full(x.shape, self.value))


class DiracOracle:
    """Exact noise for a data distribution concentrated on one trajectory ``c``."""

    def __init__(self, schedule, c):
        self.schedule, self.c = schedule, np.asarray(c)

    def __call__(self, x, steps):
        ab = self.schedule.alpha_bar[np.asarray(steps)][:, None, None]
        c = np.swapaxes(self.c, 0, 1)[None]
        return Tensor((x.data - np.sqrt(ab) * c) / np.sqrt(1 - ab))


def model_with(denoiser, n=10, horizon=8, sdim=2, adim=1):
    return DiffusionModel(denoiser, cosine_schedule(n), horizon, sdim, adim)


# -- schedule ------------------------------------------------------------------

@pytest.mark.parametrize("n", [2, 5, 20, 100])
def test_alpha_bar_matches_closed_form(n):
    s = cosine_schedule(n)
    assert s.alpha_bar[0] == 1.0 and s.n_steps == n
    for i in range(1, n):
        assert abs(s.alpha_bar[i] - cosine_alpha_bar(i, n)) < 1e-12


def test_cosine_known_values():
    s = cosine_schedule(20)
    # reference values from a 30-digit evaluation of the closed form
    assert abs(s.alpha_bar[1] - 0.9920072786842188) < 1e-14
    assert abs(s.alpha_bar[10] - 0.4938435904406377) < 1e-14
    assert abs(cosine_schedule(10).alpha_bar[1] - 0.9720927371139692) < 1e-14


def test_last_beta_clipped():
    s = cosine_schedule(2)
    assert s.betas[2] == 0.999
    assert np.all(cosine_schedule(1000).betas <= 0.999)


def test_schedule_rejects_short_chains():
    for n in (0, 1):
        with pytest.raises(ScheduleError):
            cosine_schedule(n)
    with pytest.raises(ScheduleError):
        NoiseSchedule.from_betas([0.1, 1.0])


@given(st.integers(2, 1000))
@settings(max_examples=60, deadline=None)
def test_alpha_bar_strictly_decreasing(n):
    ab = cosine_schedule(n).alpha_bar
    assert np.all(np.diff(ab) < 0)
    assert np.all((ab > 0) & (ab <= 1))


def test_posterior_variance():
    s = cosine_schedule(10)
    assert s.posterior_var[1] == 0.0
    for i in range(2, 11):
        ref = posterior_variance(s.alpha_bar[i - 1], s.alpha_bar[i], s.betas[i])
        assert abs(s.posterior_var[i] - ref) < 1e-15
        assert 0 < s.posterior_var[i] <= s.betas[i]


def test_check_step_bounds():
    s = cosine_schedule(5)
    s.check_step(1)
    s.check_step(5)
    for bad in (0, 6, -1):
        with pytest.raises(StepRangeError):
            s.check_step(bad)


# -- forward process -----------------------------------------------------------

def test_forward_noise_zero_noise():
    s = cosine_schedule(10)
    tau = np.random.default_rng(0).standard_normal((3, 8, 4))
    out = forward_noise(tau, 4, np.zeros_like(tau), s)
    np.testing.assert_allclose(out, math.sqrt(s.alpha_bar[4]) * tau, rtol=0, atol=1e-15)


def test_forward_noise_zero_data():
    s = cosine_schedule(10)
    eps = np.random.default_rng(1).standard_normal((2, 8, 3))
    out = forward_noise(np.zeros_like(eps), 10, eps, s)
    np.testing.assert_allclose(out, math.sqrt(1 - s.alpha_bar[10]) * eps, rtol=0, atol=1e-15)


def test_forward_noise_per_sample_steps():
    s = cosine_schedule(10)
    rng = np.random.default_rng(2)
    tau, eps = rng.standard_normal((3, 4, 2)), rng.standard_normal((3, 4, 2))
    steps = np.array([1, 5, 10])
    out = forward_noise(tau, steps, eps, s)
    for b, i in enumerate(steps):
        np.testing.assert_array_equal(out[b], forward_noise(tau[b], int(i), eps[b], s))


def test_forward_noise_errors():
    s = cosine_schedule(10)
    tau = np.zeros((2, 4, 2))
    for bad in (0, 11):
        with pytest.raises(StepRangeError):
            forward_noise(tau, bad, tau, s)
    with pytest.raises(ShapeError):
        forward_noise(tau, 1, np.zeros((2, 4, 3)), s)


def test_forward_noise_moments_small():
    s = cosine_schedule(20)
    rng = np.random.default_rng(3)
    tau0 = np.full((20000, 1), 0.7)
    out = forward_noise(tau0, 7, rng.standard_normal(tau0.shape), s)
    mean, var = out.mean(), out.var()
    se = math.sqrt((1 - s.alpha_bar[7]) / len(out))
    assert abs(mean - math.sqrt(s.alpha_bar[7]) * 0.7) < 4 * se
    assert abs(var / (1 - s.alpha_bar[7]) - 1) < 0.05


# -- loss ----------------------------------------------------------------------

def test_zero_denoiser_loss_is_dimension():
    model = model_with(ConstantNoise(), horizon=8)
    rng = np.random.default_rng(4)
    batch = rng.standard_normal((512, 8, 3))
    loss = training_loss(model, batch, rng).item()
    # each sample contributes a chi-square with T*D = 24 degrees of freedom
    assert abs(loss - 24) < 4 * math.sqrt(2 * 24 / 512)


def test_loss_rejects_bad_batches():
    model = model_with(ConstantNoise())
    rng = np.random.default_rng(5)
    with pytest.raises(ShapeError):
        training_loss(model, np.zeros((0, 8, 3)), rng)
    with pytest.raises(ShapeError):
        training_loss(model, np.zeros((2, 8, 4)), rng)


def test_loss_steps_cover_range():
    seen = set()
    rng = np.random.default_rng(6)
    for _ in range(50):
        seen.update(rng.integers(1, 11, size=32).tolist())
    assert seen == set(range(1, 11))


# -- reverse process -----------------------------------------------------------

def test_reverse_mean_formula():
    model = model_with(ConstantNoise(0.3))
    s = model.schedule
    tau = np.random.default_rng(7).standard_normal((8, 3))
    for i in (1, 5, 10):
        ref = reverse_mean_formula(tau, 0.3, s.alphas[i], s.alpha_bar[i], s.betas[i])
        np.testing.assert_allclose(reverse_mean(model, tau, i), ref, rtol=1e-14, atol=1e-14)


def test_last_step_is_deterministic():
    model = model_with(ConstantNoise(0.1))
    tau = np.random.default_rng(8).standard_normal((8, 3))
    rng = np.random.default_rng(9)
    before = rng.bit_generator.state
    out = reverse_step(model, tau, 1, rng)
    assert rng.bit_generator.state == before
    np.testing.assert_array_equal(out, reverse_mean(model, tau, 1))


def test_reverse_step_range():
    model = model_with(ConstantNoise())
    with pytest.raises(StepRangeError):
        reverse_step(model, np.zeros((8, 3)), 0, np.random.default_rng(0))
    with pytest.raises(StepRangeError):
        reverse_step(model, np.zeros((8, 3)), 11, np.random.default_rng(0))


def test_exact_denoiser_recovers_dirac_target():
    s = cosine_schedule(20)
    c = np.random.default_rng(10).uniform(-1, 1, (8, 3))
    model = DiffusionModel(DiracOracle(s, c), s, 8, 2, 1)
    out = sample(model, (4, 8, 3), np.random.default_rng(11))
    np.testing.assert_allclose(out, np.broadcast_to(c, out.shape), atol=1e-8)


def test_sample_shapes_and_snapshots():
    model = model_with(ConstantNoise())
    out = sample(model, (8, 3), np.random.default_rng(12))
    assert out.shape == (8, 3)
    out, chain = sample(model, (2, 8, 3), np.random.default_rng(12), snapshots=[10, 5, 0])
    assert sorted(chain) == [0, 5, 10]
    np.testing.assert_array_equal(chain[0], out)


def test_sample_is_seeded():
    model = model_with(ConstantNoise(0.2))
    a = sample(model, (2, 8, 3), np.random.default_rng(13))
    b = sample(model, (2, 8, 3), np.random.default_rng(13))
    assert np.array_equal(a, b)


def test_sample_rejects_bad_shapes():
    model = model_with(ConstantNoise())
    with pytest.raises(ShapeError):
        sample(model, (8, 4), np.random.default_rng(0))
    with pytest.raises(StepRangeError):
        sample(model, (8, 3), np.random.default_rng(0), start=np.zeros((8, 3)), start_step=11)


def test_rng_batch_rows_are_independent_streams():
    rows = RngBatch([np.random.default_rng(1), np.random.default_rng(2)]).standard_normal((2, 3))
    np.testing.assert_array_equal(rows[0], np.random.default_rng(1).standard_normal(3))
    np.testing.assert_array_equal(rows[1], np.random.default_rng(2).standard_normal(3))
    with pytest.raises(ShapeError):
        RngBatch([np.random.default_rng(1)]).standard_normal((2, 3))


def test_model_guards():
    with pytest.raises(NotImplementedError):
        DiffusionModel(ConstantNoise(), cosine_schedule(5), 8, 2, 1, prediction="x0")

    class Wide(ConstantNoise):
        transition_dim = 7

    with pytest.raises(ShapeError):
        DiffusionModel(Wide(), cosine_schedule(5), 8, 2, 1)
