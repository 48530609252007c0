"""
Unit tests for the rectified-flow corruption process.
"""

import math

import pytest
import torch

from src.core.errors import ConfigError, VelocitySingularityError
from src.core.numerics import make_generator
from src.diffusion.schedule import (DiffusionState, Schedule, corrupt, cosmap, cosmap_cdf,
                                    cosmap_density, input_rescale, sample_timesteps,
                                    velocity)


@pytest.fixture
def clean():
    return torch.randn(2, 3, 8, generator=make_generator(0))


class TestSchedule:
    """Test schedule construction and constants."""

    def test_defaults(self):
        schedule = Schedule()
        assert schedule.sigma == 64.0
        assert schedule.early_stop_time == pytest.approx(1 - 1 / 64)

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_sigma_must_be_positive(self, sigma):
        with pytest.raises(ConfigError) as excinfo:
            Schedule(sigma=sigma)
        assert excinfo.value.field == "sigma"

    def test_early_stop_clamped_for_small_sigma(self):
        assert Schedule(sigma=0.5).early_stop_time == 0.0

    def test_noise_std_endpoints(self):
        schedule = Schedule(sigma=4.0)
        assert schedule.noise_std(0.0) == pytest.approx(4.0)
        assert schedule.noise_std(1.0) == pytest.approx(1.0)
        t = torch.tensor([0.0, 1.0])
        assert torch.allclose(schedule.noise_std(t), torch.tensor([4.0, 1.0]))


class TestCorrupt:
    """Test the corruption map."""

    def test_endpoints(self, clean):
        schedule = Schedule(sigma=3.0)
        noise = torch.randn(clean.shape, generator=make_generator(1)) * 3.0

        assert torch.equal(corrupt(clean, 1.0, schedule, noise=noise).x, clean)
        assert torch.equal(corrupt(clean, 0.0, schedule, noise=noise).x, noise)

    def test_straight_line_mix(self, clean):
        schedule = Schedule(sigma=2.0)
        noise = torch.randn(clean.shape, generator=make_generator(1)) * 2.0
        state = corrupt(clean, 0.25, schedule, noise=noise)

        assert torch.allclose(state.x, 0.25 * clean + 0.75 * noise)
        assert state.t.shape == clean.shape[:-1]

    def test_per_token_timesteps(self, clean):
        t = torch.tensor([[0.0, 0.5, 1.0], [1.0, 1.0, 1.0]])
        state = corrupt(clean, t, Schedule(), generator=make_generator(2))

        assert torch.equal(state.x[1], clean[1])
        assert torch.equal(state.t, t)

    def test_generator_reproducible(self, clean):
        a = corrupt(clean, 0.3, Schedule(), generator=make_generator(5)).x
        b = corrupt(clean, 0.3, Schedule(), generator=make_generator(5)).x
        assert torch.equal(a, b)

    def test_noise_scale(self):
        x1 = torch.zeros(20000, 1)
        state = corrupt(x1, 0.0, Schedule(sigma=8.0), generator=make_generator(3))
        assert state.x.std().item() == pytest.approx(8.0, rel=0.05)

    @pytest.mark.parametrize("t", [-0.1, 1.5, float("nan")])
    def test_time_outside_unit_interval(self, clean, t):
        with pytest.raises(ValueError):
            corrupt(clean, t, Schedule(), generator=make_generator(0))


class TestVelocity:
    """Test the velocity field and its guard."""

    def test_velocity_formula(self):
        state = DiffusionState(torch.tensor([[1.0, 2.0]]), torch.tensor([0.5]))
        x_hat = torch.tensor([[3.0, 2.0]])
        assert torch.allclose(velocity(x_hat, state, Schedule()), torch.tensor([[4.0, 0.0]]))

    def test_velocity_points_at_clean(self, clean):
        """One Euler step of size 1 - t from x_t lands on x_hat."""
        schedule = Schedule(sigma=5.0)
        state = corrupt(clean, 0.4, schedule, generator=make_generator(0))
        v = velocity(clean, state, schedule)
        assert torch.allclose(state.x + 0.6 * v, clean, atol=1e-5)

    def test_singularity_near_one(self):
        state = DiffusionState(torch.zeros(1, 2), torch.tensor([1.0]))
        with pytest.raises(VelocitySingularityError):
            velocity(torch.zeros(1, 2), state, Schedule())

    def test_input_rescale(self):
        schedule = Schedule(sigma=4.0)
        state = DiffusionState(torch.full((1, 2), 8.0), torch.tensor([0.0]))
        assert torch.allclose(input_rescale(state, schedule), torch.full((1, 2), 2.0))

    def test_state_rejects_bad_time(self):
        with pytest.raises(ValueError):
            DiffusionState(torch.zeros(2), torch.tensor(2.0))


class TestCosmap:
    """Test the cosmap timestep density."""

    def test_inverse_of_cdf(self):
        u = torch.linspace(0.05, 0.95, 19, dtype=torch.float64)
        assert torch.allclose(cosmap_cdf(cosmap(u)), u, atol=1e-10)

    def test_endpoints_and_symmetry(self):
        u = torch.tensor([0.0, 0.5, 1.0], dtype=torch.float64)
        assert torch.allclose(cosmap(u), torch.tensor([0.0, 0.5, 1.0], dtype=torch.float64),
                              atol=1e-12)

    def test_density_integrates_to_one(self):
        t = torch.linspace(0.0, 1.0, 2001, dtype=torch.float64)
        integral = torch.trapezoid(cosmap_density(t), t).item()
        assert integral == pytest.approx(1.0, abs=1e-6)

    def test_density_peaks_mid_interval(self):
        values = cosmap_density(torch.tensor([0.0, 0.5, 1.0]))
        assert values[0] == pytest.approx(2 / math.pi)
        assert values[1] == pytest.approx(4 / math.pi)
        assert values[0] < values[1]


class TestSampleTimesteps:
    """Test training timestep sampling."""

    @pytest.mark.parametrize("kind", ["uniform", "cosmap"])
    def test_range_and_reproducibility(self, kind):
        a = sample_timesteps(500, kind, make_generator(0))
        b = sample_timesteps(500, kind, make_generator(0))

        assert torch.equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0
        assert a.dtype == torch.get_default_dtype()

    def test_cosmap_concentrates_mid_interval(self):
        t = sample_timesteps(20000, "cosmap", make_generator(1), dtype=torch.float64)
        middle = ((t > 0.25) & (t < 0.75)).double().mean().item()
        expected = (cosmap_cdf(torch.tensor(0.75)) - cosmap_cdf(torch.tensor(0.25))).item()
        assert middle == pytest.approx(expected, abs=0.02)
        assert middle > 0.5

    def test_cosmap_fits_its_cdf(self):
        """Kolmogorov-Smirnov distance to the cosmap CDF is below the 1% critical value."""
        n = 20000
        t, _ = torch.sort(sample_timesteps(n, "cosmap", make_generator(21), dtype=torch.float64))
        cdf = cosmap_cdf(t)
        ranks = torch.arange(1, n + 1, dtype=torch.float64)

        distance = torch.maximum(ranks / n - cdf, cdf - (ranks - 1) / n).max().item()
        assert distance < 1.63 / math.sqrt(n)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            sample_timesteps(3, "logit_normal")

    def test_count_must_be_positive(self):
        with pytest.raises(ValueError):
            sample_timesteps(0)
