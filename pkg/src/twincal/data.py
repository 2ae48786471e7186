"""Observation series: synthetic generation, noise injection and CSV IO.

RH is stored in percent everywhere outside this module's noise helper;
noise levels are given as 2-sigma fractions of saturation (0.01 = 1 %RH).
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import psychrometrics as psy
from .errors import ConfigError, DataError
from .farm import FarmConfig, Scenario, simulate_batch

OBS_COLUMNS = ("timestamp", "rh_percent", "light_state", "ext_moisture_kgm3")
NOISE_LEVELS = (0.01, 0.03, 0.05, 0.10)

TOY_START = dt.datetime(2019, 8, 1)
LIGHTS_ON_HOUR = 17
LIGHTS_OFF_HOUR = 5
# sampled one hour before each switch: end of the lit and unlit periods
SAMPLE_HOURS = (4, 16)


@dataclass
class ObservationSeries:
    """Time-ordered RH observations with the scenario covariates x."""

    timestamps: list
    rh: np.ndarray  # percent
    light_state: np.ndarray
    ext_moisture: np.ndarray
    provenance: str = "synthetic"
    noise_two_sigma: float | None = None
    theta: np.ndarray | None = field(default=None, repr=False)  # ground truth, synthetic only

    def __post_init__(self):
        self.rh = np.asarray(self.rh, dtype=float)
        self.light_state = np.asarray(self.light_state, dtype=int)
        self.ext_moisture = np.asarray(self.ext_moisture, dtype=float)
        n = len(self.timestamps)
        for name in ("rh", "light_state", "ext_moisture"):
            if getattr(self, name).shape != (n,):
                raise DataError(f"observation column {name} has length != {n}")
        for i in range(1, n):
            if not self.timestamps[i] > self.timestamps[i - 1]:
                raise DataError(
                    f"timestamps not strictly increasing at row {i + 1} "
                    f"({self.timestamps[i].isoformat()})",
                    row=i + 1,
                )
        bad = np.flatnonzero(~((self.rh >= 0) & (self.rh <= 100)))
        if bad.size:
            raise DataError(f"RH out of [0, 100] at row {bad[0] + 1}", row=int(bad[0]) + 1)
        bad = np.flatnonzero(~np.isin(self.light_state, (0, 1)))
        if bad.size:
            raise DataError(f"light_state not 0/1 at row {bad[0] + 1}", row=int(bad[0]) + 1)
        bad = np.flatnonzero(~(self.ext_moisture >= 0))
        if bad.size:
            raise DataError(f"negative external moisture at row {bad[0] + 1}", row=int(bad[0]) + 1)

    def __len__(self):
        return len(self.timestamps)

    @property
    def x(self) -> np.ndarray:
        """Scenario covariates, shape (n, 2): light state, external moisture."""
        return np.column_stack([self.light_state.astype(float), self.ext_moisture])

    def subset(self, start, stop) -> "ObservationSeries":
        theta = None if self.theta is None else self.theta[start:stop]
        return ObservationSeries(
            self.timestamps[start:stop], self.rh[start:stop], self.light_state[start:stop],
            self.ext_moisture[start:stop], self.provenance, self.noise_two_sigma, theta,
        )


def toy_scenario(days: int = 20, seed: int = 0, start: dt.datetime = TOY_START,
                 vent_ach: float = 4.0, ias: float = 0.3, mean_temp: float = 15.0,
                 temp_amplitude: float = 4.0, mean_rh: float = 72.0, rh_amplitude: float = 14.0) -> Scenario:
    """Hourly drivers: lights 17:00-05:00 and seeded late-summer weather.

    External temperature is a diurnal cycle (peak 15:00) around a daily
    mean following an AR(1) process; external RH follows the opposite
    cycle, and moisture content is RH times saturation density.
    """
    if days < 1:
        raise ConfigError("days must be >= 1")
    rng = np.random.default_rng(seed)
    hours = np.arange(24 * days)
    hod = (start.hour + hours) % 24
    daily = np.empty(days + 1)
    daily[0] = rng.normal(0.0, 1.5)
    for d in range(1, days + 1):
        daily[d] = 0.7 * daily[d - 1] + rng.normal(0.0, 1.1)
    day_idx = hours // 24
    frac = (hours % 24) / 24.0
    anomaly = (1 - frac) * daily[day_idx] + frac * daily[day_idx + 1]
    cycle = np.cos(2 * np.pi * (hod - 15) / 24.0)
    ext_temp = mean_temp + temp_amplitude * cycle + anomaly
    ext_rh = np.clip(mean_rh - rh_amplitude * cycle + rng.normal(0.0, 3.0, hours.size), 30.0, 98.0)
    ext_moist = psy.moisture_from_rh(ext_temp, ext_rh)
    light = ((hod >= LIGHTS_ON_HOUR) | (hod < LIGHTS_OFF_HOUR)).astype(int)
    stamps = [start + dt.timedelta(hours=int(h)) for h in hours]
    n = hours.size
    return Scenario(stamps, light, ext_temp, ext_moist, np.full(n, vent_ach), np.full(n, ias))


def sample_indices(timestamps: Sequence[dt.datetime], hours=SAMPLE_HOURS) -> np.ndarray:
    """Indices of output instants falling on the given hours of day."""
    return np.array([i for i, t in enumerate(timestamps) if t.minute == 0 and t.hour in hours], dtype=int)


def output_times(scenario: Scenario) -> list:
    """Instants at which simulation outputs are reported (end of each hour)."""
    return [t + dt.timedelta(hours=1) for t in scenario.timestamps]


def step_schedule(change_after: dt.datetime, before=(4.0, 0.3), after=(2.0, 0.3)) -> Callable:
    """Piecewise-constant (N, IAS) schedule switching after ``change_after``."""

    def schedule(t: dt.datetime):
        return before if t <= change_after else after

    return schedule


def apply_schedule(scenario: Scenario, schedule: Callable) -> Scenario:
    """Fill the scenario's N/IAS columns from ``schedule``.

    Scenario row ``i`` drives the hour ending at ``output_times[i]``, so
    it takes the value the schedule gives for that end instant.
    """
    ends = output_times(scenario)
    values = []
    for t in ends:
        v = schedule(t)
        if v is None:
            raise ConfigError(f"schedule has no value at {t.isoformat()}")
        values.append(v)
    values = np.asarray(values, dtype=float)
    return scenario.with_theta(vent_ach=values[:, 0], ias=values[:, 1])


def make_toy_observations(cfg: FarmConfig, schedule: Callable | None = None, days: int = 20,
                          seed: int = 0, scenario: Scenario | None = None) -> ObservationSeries:
    """Noise-free semi-daily observations from one simulator run.

    The default schedule holds N = 4 ACH for the first half of the points
    (the 20th point included) and N = 2 ACH afterwards, IAS = 0.3 m/s.
    """
    if scenario is None:
        scenario = toy_scenario(days=days, seed=seed)
    ends = output_times(scenario)
    idx = sample_indices(ends)
    if idx.size < 2:
        raise ConfigError("horizon too short for two observations")
    if schedule is None:
        schedule = step_schedule(ends[idx[idx.size // 2 - 1]])
    driven = apply_schedule(scenario, schedule)
    res = simulate_batch(cfg, driven)
    light = driven.light_state[idx]
    theta = np.column_stack([driven.vent_ach[idx], driven.ias[idx]])
    return ObservationSeries(
        [ends[i] for i in idx], res.rh[0, idx], light, driven.ext_moisture[idx],
        "synthetic", 0.0, theta,
    )


def add_noise(series: ObservationSeries, two_sigma: float, seed: int) -> ObservationSeries:
    """Gaussian noise with sigma = two_sigma / 2 in fractional RH, clamped."""
    if not two_sigma >= 0:
        raise ConfigError(f"noise level must be >= 0, got {two_sigma}")
    rng = np.random.default_rng(seed)
    frac = series.rh / 100.0
    noisy = np.clip(frac + rng.normal(0.0, two_sigma / 2.0, frac.shape), 0.0, 1.0) * 100.0
    if two_sigma == 0:
        noisy = series.rh.copy()
    return replace(series, rh=noisy, noise_two_sigma=float(two_sigma),
                   timestamps=list(series.timestamps))


def save_observations(series: ObservationSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(OBS_COLUMNS)
        for i, t in enumerate(series.timestamps):
            w.writerow([t.isoformat(), repr(float(series.rh[i])), int(series.light_state[i]),
                        repr(float(series.ext_moisture[i]))])


def load_observations(path) -> ObservationSeries:
    """Read and validate an observation CSV; errors name the file row."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in OBS_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}", row=1)
        stamps, rh, light, moist = [], [], [], []
        for row_no, row in enumerate(reader, start=2):
            try:
                t = dt.datetime.fromisoformat(row["timestamp"])
                v = float(row["rh_percent"])
                ls = int(row["light_state"])
                m = float(row["ext_moisture_kgm3"])
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}: row {row_no}: {exc}", row=row_no) from exc
            if stamps and not t > stamps[-1]:
                raise DataError(
                    f"{path}: row {row_no}: timestamp {t.isoformat()} not after previous row",
                    row=row_no,
                )
            if not 0 <= v <= 100:
                raise DataError(f"{path}: row {row_no}: rh_percent {v} outside [0, 100]", row=row_no)
            if ls not in (0, 1):
                raise DataError(f"{path}: row {row_no}: light_state must be 0 or 1", row=row_no)
            stamps.append(t)
            rh.append(v)
            light.append(ls)
            moist.append(m)
    return ObservationSeries(stamps, rh, light, moist, provenance="file")
