"""Generator and baseline tests against constructed expectations."""

import numpy as np
import pytest

from fptn import synthetic
from fptn.errors import ConfigurationError


class TestGenerator:
    def test_single_peak_at_phase_zero(self):
        spec = synthetic.SyntheticSpec(n_sensors=1, total_steps=288 * 3,
                                       phases=(0,), peaks_per_day=(1,))
        series = synthetic.generate(spec)
        day = series.values[:288, 0, 0]
        assert int(np.argmax(day)) == 0
        # every day peaks at the same slot
        for d in range(3):
            window = series.values[288 * d: 288 * (d + 1), 0, 0]
            assert int(np.argmax(window)) == 0

    def test_phase_shift_moves_argmax(self):
        spec = synthetic.SyntheticSpec(n_sensors=2, total_steps=288 * 2,
                                       phases=(0, 144), peaks_per_day=(1, 1))
        series = synthetic.generate(spec)
        a = int(np.argmax(series.values[:288, 0, 0]))
        b = int(np.argmax(series.values[:288, 1, 0]))
        assert (b - a) % 288 == 144

    def test_double_peak_profile_has_two_maxima(self):
        spec = synthetic.SyntheticSpec(n_sensors=1, total_steps=288,
                                       peaks_per_day=(2,), bump_width_steps=8.0)
        day = synthetic.generate(spec).values[:, 0, 0]
        # peaks half a day apart
        assert day[0] == pytest.approx(day.max(), rel=1e-6)
        assert day[144] == pytest.approx(day.max(), rel=1e-6)
        assert day[72] < 0.5 * day.max()

    def test_same_seed_identical(self):
        spec = synthetic.SyntheticSpec(n_sensors=3, total_steps=300, noise_std=0.2, seed=7)
        a = synthetic.generate(spec).values
        b = synthetic.generate(spec).values
        assert np.array_equal(a, b)

    def test_different_seed_differs(self):
        base = dict(n_sensors=3, total_steps=300, noise_std=0.2)
        a = synthetic.generate(synthetic.SyntheticSpec(seed=1, **base)).values
        b = synthetic.generate(synthetic.SyntheticSpec(seed=2, **base)).values
        assert not np.array_equal(a, b)

    def test_nonnegative_even_with_noise(self):
        spec = synthetic.SyntheticSpec(n_sensors=2, total_steps=2000, noise_std=1.5, seed=3)
        assert synthetic.generate(spec).values.min() >= 0.0

    def test_daily_periodicity_dominates(self):
        series = synthetic.generate(synthetic.two_phase_spec(total_steps=288 * 5))
        x = series.values[:, 0, 0]
        x = x - x.mean()

        def autocorr(lag):
            return float(np.dot(x[:-lag], x[lag:]) / np.dot(x, x))

        assert autocorr(288) > autocorr(100)

    def test_weekday_factors_modulate_amplitude(self):
        spec = synthetic.weekly_pattern_spec(noise_std=0.0)
        values = synthetic.generate(spec).values[:, 0, 0]
        weekday_peak = values[:288].max()          # Monday
        weekend_peak = values[288 * 5: 288 * 6].max()  # Saturday
        assert weekend_peak == pytest.approx(0.45 * weekday_peak, rel=1e-9)

    def test_spec_validation(self):
        with pytest.raises(ConfigurationError):
            synthetic.SyntheticSpec(n_sensors=1, total_steps=10)
        with pytest.raises(ConfigurationError):
            synthetic.SyntheticSpec(n_sensors=2, total_steps=100, amplitudes=(1.0,))
        with pytest.raises(ConfigurationError):
            synthetic.SyntheticSpec(n_sensors=1, total_steps=100, noise_std=-1.0)


class TestLastValueBaseline:
    def test_repeats_last_column(self):
        x = np.array([[1.0, 5.0], [2.0, 7.0]])
        out = synthetic.baseline_last_value(x, 3)
        assert np.array_equal(out, [[5.0, 5.0, 5.0], [7.0, 7.0, 7.0]])

    def test_constant_series_zero_error(self):
        x = np.full((4, 12), 3.3)
        y = np.full((4, 6), 3.3)
        assert np.array_equal(synthetic.baseline_last_value(x, 6), y)

    def test_ramp_mae_matches_arithmetic_series(self):
        # slope-1 ramp: errors over 12 future steps are 1..12, mean 6.5
        x = np.arange(12, dtype=float)[None, :]
        y = np.arange(12, 24, dtype=float)[None, :]
        pred = synthetic.baseline_last_value(x, 12)
        mae = float(np.mean(np.abs(pred - y)))
        expected = sum(range(1, 13)) / 12
        assert mae == expected == 6.5


class TestHistoricalAverageBaseline:
    def test_periodic_series_recovered_exactly(self):
        day = 288
        profile = np.sin(np.arange(day) / day * 2 * np.pi)[:, None] + 2.0
        values = np.tile(profile, (4, 1))
        targets = np.arange(3 * day, 4 * day)
        pred = synthetic.baseline_historical_average(values, day, 3 * day, targets)
        np.testing.assert_allclose(pred, values[targets], atol=1e-12)

    def test_single_day_history_replays_that_day(self):
        rng = np.random.default_rng(5)
        values = rng.random((288 * 2, 2))
        pred = synthetic.baseline_historical_average(values, 288, 288, np.arange(288, 576))
        np.testing.assert_array_equal(pred, values[:288])

    def test_two_day_history_averages(self):
        values = np.zeros((288 * 2, 1))
        values[10, 0] = 4.0
        values[288 + 10, 0] = 6.0
        pred = synthetic.baseline_historical_average(values, 288, 576, np.array([576 + 10]))
        assert pred[0, 0] == 5.0

    def test_insufficient_history(self):
        with pytest.raises(ConfigurationError):
            synthetic.baseline_historical_average(np.zeros((100, 1)), 288, 100, np.array([0]))
