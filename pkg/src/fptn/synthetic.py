"""Deterministic synthetic multi-sensor series and naive forecasting baselines.

Each sensor follows a daily profile made of Gaussian bumps on the 288-step
(5-minute) cycle: one bump gives a single rush-hour peak, two bumps a
morning/evening pattern, and a per-sensor phase shifts the whole profile.
An optional day-of-week amplitude factor makes weekdays and weekends
differ, which gives the calendar features something to explain. All
randomness flows from one root seed. Functions here are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .data import RawSeries
from .errors import ConfigurationError, DimensionError

# 2018-01-01 is a Monday, which puts the day-of-week feature at its origin.
DEFAULT_START = datetime(2018, 1, 1)


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings: per-sensor amplitude, phase (in steps), and
    daily peak count, plus noise level and seed."""

    n_sensors: int
    total_steps: int
    amplitudes: tuple = ()
    phases: tuple = ()            # steps by which each sensor's profile is shifted
    peaks_per_day: tuple = ()
    noise_std: float = 0.0
    seed: int = 0
    step_minutes: int = 5
    start_timestamp: datetime = DEFAULT_START
    bump_width_steps: float = 18.0
    weekday_factors: tuple = (1.0,) * 7   # Monday..Sunday amplitude scaling

    def __post_init__(self):
        if self.total_steps < 48:
            raise ConfigurationError(f"total_steps must be >= 48, got {self.total_steps}")
        if self.noise_std < 0:
            raise ConfigurationError(f"noise_std must be >= 0, got {self.noise_std}")
        for name in ("amplitudes", "phases", "peaks_per_day"):
            values = getattr(self, name)
            if values and len(values) != self.n_sensors:
                raise ConfigurationError(
                    f"{name} has {len(values)} entries for {self.n_sensors} sensors")
        if len(self.weekday_factors) != 7:
            raise ConfigurationError("weekday_factors needs exactly 7 entries")

    @property
    def steps_per_day(self) -> int:
        return 24 * 60 // self.step_minutes

    def sensor_amplitude(self, n: int) -> float:
        return self.amplitudes[n] if self.amplitudes else 1.0

    def sensor_phase(self, n: int) -> int:
        return self.phases[n] if self.phases else 0

    def sensor_peaks(self, n: int) -> int:
        return self.peaks_per_day[n] if self.peaks_per_day else 1


def _circular_distance(t: np.ndarray, center: float, period: int) -> np.ndarray:
    d = np.abs((t - center) % period)
    return np.minimum(d, period - d)


def generate(spec: SyntheticSpec) -> RawSeries:
    """Render the spec to a (T_total, N, 1) series with 5-minute metadata.

    value(n, t) = amplitude_n * daily_profile_n(t) * weekday_factor(t) + noise,
    clipped at zero so values stay valid traffic volumes even with noise.
    """
    day = spec.steps_per_day
    t = np.arange(spec.total_steps)
    slot = t % day
    dow = (t // day) % 7  # start date is a Monday
    weekday_scale = np.asarray(spec.weekday_factors)[dow]

    values = np.empty((spec.total_steps, spec.n_sensors))
    for n in range(spec.n_sensors):
        peaks = spec.sensor_peaks(n)
        profile = np.zeros(spec.total_steps)
        for j in range(peaks):
            center = (spec.sensor_phase(n) + j * day / peaks) % day
            dist = _circular_distance(slot, center, day)
            profile += np.exp(-0.5 * (dist / spec.bump_width_steps) ** 2)
        values[:, n] = spec.sensor_amplitude(n) * np.maximum(0.0, profile) * weekday_scale

    if spec.noise_std > 0:
        rng = np.random.default_rng(spec.seed)
        values = values + rng.normal(0.0, spec.noise_std, size=values.shape)
    values = np.maximum(values, 0.0)
    return RawSeries(values=values, start_timestamp=spec.start_timestamp,
                     step_minutes=spec.step_minutes, name=f"synthetic-{spec.seed}")


# ---------------------------------------------------------------------------
# canonical desk-scale suites
# ---------------------------------------------------------------------------

def two_phase_spec(total_steps: int = 1440, noise_std: float = 0.0,
                   seed: int = 0) -> SyntheticSpec:
    """Four sensors whose daily peaks sit at two phases half a day apart,
    with both single- and double-peak profiles."""
    return SyntheticSpec(
        n_sensors=4, total_steps=total_steps,
        amplitudes=(1.0, 0.7, 1.3, 0.9),
        phases=(0, 144, 0, 144),
        peaks_per_day=(1, 1, 2, 2),
        noise_std=noise_std, seed=seed)


def memorization_spec(seed: int = 0) -> SyntheticSpec:
    """Tiny noiseless set (4 sensors, 200 steps) for overfitting checks."""
    return SyntheticSpec(
        n_sensors=4, total_steps=200,
        amplitudes=(1.0, 0.8, 1.2, 0.6),
        phases=(0, 72, 144, 36),
        peaks_per_day=(1, 2, 1, 2),
        noise_std=0.0, seed=seed)


def weekly_pattern_spec(total_steps: int = 4032, noise_std: float = 0.05,
                        seed: int = 0) -> SyntheticSpec:
    """Two weeks of data whose amplitude depends on the day of week, so the
    calendar features carry real signal (used by the embedding ablations)."""
    return SyntheticSpec(
        n_sensors=4, total_steps=total_steps,
        amplitudes=(1.0, 0.8, 1.2, 0.9),
        phases=(0, 96, 192, 48),
        peaks_per_day=(1, 2, 1, 2),
        weekday_factors=(1.0, 1.0, 1.0, 1.0, 1.0, 0.45, 0.45),
        noise_std=noise_std, seed=seed)


# ---------------------------------------------------------------------------
# naive baselines
# ---------------------------------------------------------------------------

def baseline_last_value(x: np.ndarray, horizon: int) -> np.ndarray:
    """Repeat the most recent observation for every forecast step."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 1:
        raise DimensionError("baseline_last_value needs at least one input step")
    return np.repeat(x[..., -1:], horizon, axis=-1)


def baseline_historical_average(values: np.ndarray, steps_per_day: int,
                                history_end: int, target_steps) -> np.ndarray:
    """Forecast each target step with the mean of the same time-of-day slot
    over the first ``history_end`` steps.

    ``values`` is (T_total, N); returns (len(target_steps), N).
    """
    values = np.asarray(values, dtype=np.float64)
    if history_end < steps_per_day:
        raise ConfigurationError(
            f"historical average needs >= 1 full day of history "
            f"({steps_per_day} steps), got {history_end}")
    history = values[:history_end]
    slot_sums = np.zeros((steps_per_day, values.shape[1]))
    slot_counts = np.zeros(steps_per_day, dtype=np.int64)
    slots = np.arange(history_end) % steps_per_day
    np.add.at(slot_sums, slots, history)
    np.add.at(slot_counts, slots, 1)
    slot_means = slot_sums / slot_counts[:, None]
    target_steps = np.asarray(target_steps, dtype=np.int64)
    return slot_means[target_steps % steps_per_day]
