"""Toy-problem orchestration: setup, error metrics and the run-time benchmark."""

from __future__ import annotations

import csv
import datetime as dt
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import ObservationSeries, add_noise, make_toy_observations, output_times, toy_scenario
from .errors import ConfigError
from .farm import FarmConfig, Scenario, simulate_batch
from .gp import DesignSet, build_design, default_param_grid
from .koh import KohHyperPriors, koh_mcmc, koh_sequential
from .pf import PFConfig, PosteriorTrace, pf_run

BENCH_METHODS = ("pf-1000", "pf-10000", "koh-seq-2", "koh-seq-4", "koh-seq-8", "koh-static-20", "koh-static-40")
BENCH_COLUMNS = ("method", "repetition", "steps", "data_points", "seconds_per_step", "total_seconds")


@dataclass
class ToyProblem:
    """Noise-free observations and the matching 42-run design."""

    cfg: FarmConfig
    scenario: Scenario
    observations: ObservationSeries
    design: DesignSet

    def noisy(self, two_sigma: float, seed: int) -> ObservationSeries:
        return add_noise(self.observations, two_sigma, seed) if two_sigma > 0 else self.observations


def toy_problem(cfg: FarmConfig | None = None, days: int = 20, weather_seed: int = 0) -> ToyProblem:
    cfg = cfg or FarmConfig()
    scenario = toy_scenario(days=days, seed=weather_seed)
    obs = make_toy_observations(cfg, scenario=scenario)
    design = build_design(default_param_grid(), scenario, cfg, obs.timestamps)
    return ToyProblem(cfg, scenario, obs, design)


def point_estimates(trace: PosteriorTrace, n_points: int, window: int = 1) -> np.ndarray:
    """Posterior-mean (N, IAS) attached to every observation point.

    Step ``k`` of a ``window``-point calibration ends at point
    ``k + window - 1``; points before the first window end take the first
    step's estimate.  The PF is the ``window = 1`` case.
    """
    if trace.steps != n_points - window + 1:
        raise ConfigError(f"trace has {trace.steps} steps, expected {n_points - window + 1}")
    est = np.column_stack([trace.mean("N"), trace.mean("IAS")])
    head = np.repeat(est[:1], window - 1, axis=0)
    return np.vstack([head, est])


def schedule_scenario(scenario: Scenario, times: Sequence[dt.datetime], theta: np.ndarray) -> Scenario:
    """Piecewise-constant N/IAS: ``theta[i]`` drives the hours ending in
    ``(times[i - 1], times[i]]``; hours after the last point keep the last value."""
    ends = output_times(scenario)
    theta = np.asarray(theta, dtype=float)
    pos = np.searchsorted(np.array(times, dtype="datetime64[us]"), np.array(ends, dtype="datetime64[us]"))
    pos = np.minimum(pos, len(times) - 1)
    return scenario.with_theta(vent_ach=theta[pos, 0], ias=theta[pos, 1])


def posterior_rmse(problem: ToyProblem, estimates: np.ndarray) -> float:
    """RMSE (%RH) of a re-simulation with per-point estimates vs the noise-free data."""
    obs = problem.observations
    sc = schedule_scenario(problem.scenario, obs.timestamps, estimates)
    res = simulate_batch(problem.cfg, sc)
    ends = output_times(problem.scenario)
    idx = [ends.index(t) for t in obs.timestamps]
    err = res.rh[0, idx] - obs.rh
    return float(np.sqrt(np.mean(err**2)))


def transition_width(mean_n: np.ndarray, before: float = 4.0, after: float = 2.0, tol: float = 0.5) -> float:
    """Steps between the last estimate within ``tol`` of ``before`` and the
    first later estimate within ``tol`` of ``after``; ``inf`` if either never happens."""
    mean_n = np.asarray(mean_n, dtype=float)
    near_before = np.flatnonzero(np.abs(mean_n - before) <= tol)
    if near_before.size == 0:
        return float("inf")
    last = near_before[-1]
    near_after = np.flatnonzero(np.abs(mean_n[last + 1:] - after) <= tol)
    if near_after.size == 0:
        return float("inf")
    return float(near_after[0] + 1)


@dataclass
class BenchRow:
    method: str
    repetition: int
    steps: int
    data_points: int
    seconds_per_step: float
    total_seconds: float


def run_method(problem: ToyProblem, method: str, seed: int = 0, chains: int = 3, iterations: int = 1000,
               threads: int = 1, progress: Callable[[str], None] | None = None):
    """Run one benchmark method; returns (result object, steps, data points, total seconds)."""
    obs = problem.observations
    t0 = time.perf_counter()
    if method.startswith("pf-"):
        res = pf_run(problem.design, obs, PFConfig(particles=int(method[3:]), seed=seed, threads=threads))
        steps, points = res.steps, len(obs)
    elif method.startswith("koh-seq-"):
        w = int(method[8:])
        res = koh_sequential(KohHyperPriors(), problem.design, obs, w, seed, chains, iterations, threads)
        steps, points = res.steps, w
    elif method.startswith("koh-static-"):
        n = int(method[11:])
        res = koh_mcmc(KohHyperPriors(), problem.design, obs.subset(0, n), chains, iterations, seed, threads)
        steps, points = 1, n
    else:
        raise ConfigError(f"unknown benchmark method {method!r}; choose from {', '.join(BENCH_METHODS)}")
    total = time.perf_counter() - t0
    if progress is not None:
        progress(f"{method}: {total:.1f} s")
    return res, steps, points, total


def run_benchmark(problem: ToyProblem, methods: Sequence[str] = BENCH_METHODS, repetitions: int = 1,
                  seed: int = 0, chains: int = 3, iterations: int = 1000, threads: int = 1,
                  progress: Callable[[str], None] | None = None) -> list:
    rows = []
    for rep in range(repetitions):
        for m in methods:
            _, steps, points, total = run_method(problem, m, seed + rep, chains, iterations, threads, progress)
            rows.append(BenchRow(m, rep, steps, points, total / steps, total))
    return rows


def write_benchmark(rows: Sequence[BenchRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow([r.method, r.repetition, r.steps, r.data_points,
                        f"{r.seconds_per_step:.6f}", f"{r.total_seconds:.6f}"])
