"""Morris elementary-effects screening of the uncertain farm parameters."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, NumericalError
from .farm import PARAMETER_BOUNDS, FarmConfig, Scenario, simulate_batch

METRICS = ("temperature", "rh")


@dataclass(frozen=True)
class MorrisDesign:
    """``r`` one-at-a-time trajectories through a ``p``-level grid.

    ``unit`` holds the points in [0, 1]^k with shape (r, k + 1, k);
    ``points`` the same in physical units; ``order[t, m]`` is the factor
    moved on step ``m`` of trajectory ``t`` and ``sign`` its direction.
    """

    names: tuple
    lower: np.ndarray
    upper: np.ndarray
    levels: int
    delta: float
    unit: np.ndarray
    order: np.ndarray
    sign: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return self.lower + self.unit * (self.upper - self.lower)

    @property
    def n_trajectories(self) -> int:
        return self.unit.shape[0]

    @property
    def n_moves(self) -> int:
        return self.order.size


def morris_trajectories(bounds: Mapping[str, tuple] = PARAMETER_BOUNDS, r: int = 10, p: int = 4,
                        seed: int = 0, delta: float | None = None) -> MorrisDesign:
    """Classic Morris (1991) randomised orientation of the sampling matrix.

    Each trajectory starts from a random grid point ``x*`` whose levels
    leave room for a move of ``delta``, then visits the factors in a random
    order, each moving once by +delta or -delta.
    """
    if r < 1 or p < 2:
        raise ConfigError("need r >= 1 and p >= 2")
    names = tuple(bounds)
    lower = np.array([bounds[n][0] for n in names], dtype=float)
    upper = np.array([bounds[n][1] for n in names], dtype=float)
    if np.any(upper <= lower):
        bad = names[int(np.argmax(upper <= lower))]
        raise ConfigError(f"degenerate bounds for {bad}")
    k = len(names)
    if delta is None:
        delta = p / (2.0 * (p - 1))
    grid = np.arange(p) / (p - 1)
    base_levels = grid[grid <= 1.0 - delta + 1e-12]
    if base_levels.size == 0:
        raise ConfigError("delta too large for the level count")
    rng = np.random.default_rng(seed)
    b = np.tril(np.ones((k + 1, k)), -1)
    unit = np.empty((r, k + 1, k))
    order = np.empty((r, k), dtype=int)
    sign = np.empty((r, k))
    for t in range(r):
        x_star = rng.choice(base_levels, size=k)
        d_star = rng.choice([-1.0, 1.0], size=k)
        perm = rng.permutation(k)
        b_star = x_star + (delta / 2.0) * ((2.0 * b - 1.0) * d_star + 1.0)
        unit[t] = b_star[:, perm]
        # factor moved at each step
        diff = np.diff(unit[t], axis=0)
        order[t] = np.argmax(np.abs(diff), axis=1)
        sign[t] = np.sign(diff[np.arange(k), order[t]])
    unit = np.clip(unit, 0.0, 1.0)
    return MorrisDesign(names, lower, upper, p, float(delta), unit, order, sign)


@dataclass
class EeSummary:
    """Per-parameter statistics of the elementary effects of one metric."""

    metric: str
    names: tuple
    effects: np.ndarray  # (r, k), indexed by parameter
    abs_median: np.ndarray
    std: np.ndarray

    def ranking(self) -> list:
        """Parameter names ordered by decreasing EE standard deviation.

        Values equal to 12 significant digits of the largest count as ties
        and keep parameter order, so a rescaled metric ranks identically.
        """
        top = float(np.max(self.std)) if self.std.size else 0.0
        key = np.round(self.std / top, 12) if top > 0 else self.std
        return [self.names[i] for i in np.argsort(-key, kind="stable")]


def elementary_effects(design: MorrisDesign, outputs: np.ndarray, metric: str = "output") -> EeSummary:
    """EEs from model outputs at every design point, shape (r, k + 1).

    ``EE = (f(x + s delta e_i) - f(x)) / (s delta)`` with delta in
    normalised [0, 1] units.
    """
    outputs = np.asarray(outputs, dtype=float)
    r, kp1, k = design.unit.shape
    if outputs.shape != (r, kp1):
        raise ConfigError(f"expected outputs of shape {(r, kp1)}, got {outputs.shape}")
    if not np.all(np.isfinite(outputs)):
        t, m = np.argwhere(~np.isfinite(outputs))[0]
        raise NumericalError(f"non-finite model output at trajectory {t}, point {m}")
    effects = np.empty((r, k))
    for t in range(r):
        df = np.diff(outputs[t])
        effects[t, design.order[t]] = df / (design.sign[t] * design.delta)
    return EeSummary(metric, design.names, effects, np.abs(np.median(effects, axis=0)),
                     np.std(effects, axis=0, ddof=1) if r > 1 else np.zeros(k))


def evaluate(design: MorrisDesign, model: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Apply a vectorised ``model`` (points (n, k) -> (n,) or (n, m)) per trajectory."""
    r, kp1, k = design.unit.shape
    flat = design.points.reshape(-1, k)
    try:
        out = np.asarray(model(flat), dtype=float)
    except Exception as exc:
        raise NumericalError(f"model evaluation failed: {exc}") from exc
    return out.reshape((r, kp1) + out.shape[1:])


def discrepancy_metrics(cfg: FarmConfig, scenario: Scenario, points: np.ndarray, names: Sequence[str],
                        reference: Mapping[str, float] | None = None) -> np.ndarray:
    """Summed absolute hourly discrepancy to a nominal run, shape (n, 2).

    Columns are the temperature (K h) and RH (%RH h) metrics.  The
    reference run uses ``reference`` values, by default the config's
    nominal values and the scenario's first-hour N and IAS.
    """
    reference = dict(reference or nominal_parameters(cfg, scenario))
    params = {n: points[:, j] for j, n in enumerate(names)}
    for n, v in reference.items():
        params[n] = np.append(params.get(n, np.full(points.shape[0], v)), v)
    res = simulate_batch(cfg, scenario, params)
    dt_ = np.abs(res.air_temp[:-1] - res.air_temp[-1]).sum(axis=1)
    drh = np.abs(res.rh[:-1] - res.rh[-1]).sum(axis=1)
    return np.column_stack([dt_, drh])


def nominal_parameters(cfg: FarmConfig, scenario: Scenario) -> dict:
    ref = {n: getattr(cfg, n) for n in PARAMETER_BOUNDS if n not in ("N", "IAS")}
    ref["N"] = float(scenario.vent_ach[0])
    ref["IAS"] = float(scenario.ias[0])
    return ref


def run_morris(cfg: FarmConfig, scenario: Scenario, r: int = 10, p: int = 4, seed: int = 0):
    """Screen all parameters; returns the design and one summary per metric."""
    design = morris_trajectories(PARAMETER_BOUNDS, r=r, p=p, seed=seed)
    out = evaluate(design, lambda pts: discrepancy_metrics(cfg, scenario, pts, design.names))
    return design, {m: elementary_effects(design, out[..., j], m) for j, m in enumerate(METRICS)}


def write_summary(summaries: Mapping[str, EeSummary], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["param", "metric", "abs_median_ee", "std_ee"])
        for metric, s in summaries.items():
            for i, name in enumerate(s.names):
                w.writerow([name, metric, repr(float(s.abs_median[i])), repr(float(s.std[i]))])


def write_plot_data(summaries: Mapping[str, EeSummary], path) -> None:
    """Scatter data: one (abs-median, std) point per parameter and metric, with rank."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "param", "x_abs_median", "y_std", "rank_by_std"])
        for metric, s in summaries.items():
            ranks = {n: i + 1 for i, n in enumerate(s.ranking())}
            for i, name in enumerate(s.names):
                w.writerow([metric, name, repr(float(s.abs_median[i])), repr(float(s.std[i])), ranks[name]])
