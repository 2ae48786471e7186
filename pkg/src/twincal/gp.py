"""Gaussian-process emulation of the simulator's RH output.

Inputs ``u = (x, t)`` are scenario covariates (light state, external
moisture content) followed by calibration parameters (N, IAS), all mapped
to [0, 1].  Outputs are standardised to zero mean and unit variance over
the design.  Two parameterisations of the squared-exponential kernel are
used:

* particle filter: ``exp(-|u - u'|^2 / (2 l^2)) / lambda`` with one shared
  lengthscale ``l``;
* KOH: ``exp(-sum_k beta_k (u_k - u'_k)^2) / lambda`` with one ``beta``
  per input dimension.

Both reduce to :func:`se_kernel`, which takes per-dimension weights
``beta_k = 1 / (2 l_k^2)``.
"""

from __future__ import annotations

import csv
import datetime as dt
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from .errors import ConfigError, DataError, IllConditionedKernelError, NumericalError
from .farm import PARAMETER_BOUNDS, FarmConfig, Scenario, simulate_batch

JITTER_START = 1e-10
JITTER_MAX = 1e-4
LOG_2PI = math.log(2.0 * math.pi)
#: Returned instead of -inf when a log density overflows.
LOGLIK_FLOOR = -1e300

X_NAMES = ("light_state", "ext_moisture")
THETA_NAMES = ("N", "IAS")
DESIGN_COLUMNS = ("x1", "x2", "t1", "t2", "output")


def jitter_schedule():
    """0, then 1e-10, 1e-9, ... 1e-4."""
    yield 0.0
    j = JITTER_START
    while j <= JITTER_MAX * (1 + 1e-9):
        yield j
        j *= 10.0


def cholesky_jitter(k: np.ndarray):
    """Lower Cholesky factor of ``k + jitter I`` with the smallest working jitter.

    Returns ``(L, jitter)``.  Raises IllConditionedKernelError past 1e-4.
    """
    n = k.shape[-1]
    eye = np.eye(n)
    for jit in jitter_schedule():
        try:
            return np.linalg.cholesky(k + jit * eye if jit else k), jit
        except np.linalg.LinAlgError:
            continue
    raise IllConditionedKernelError(
        f"Cholesky failed for a {n}x{n} covariance even with jitter {JITTER_MAX:g}"
    )


def se_kernel(a: np.ndarray, b: np.ndarray, beta, precision: float = 1.0) -> np.ndarray:
    """``exp(-sum_k beta_k (a_k - b_k)^2) / precision`` for row sets a, b."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    beta = np.broadcast_to(np.asarray(beta, dtype=float), (a.shape[1],))
    diff = a[:, None, :] - b[None, :, :]
    return np.exp(-np.einsum("ijk,k->ij", diff * diff, beta)) / precision


@dataclass(frozen=True)
class KernelSpec:
    """Squared-exponential kernel: lengthscales, signal precision, nugget."""

    lengthscales: tuple | float
    precision: float = 1.0
    nugget: float = 1e-10
    family: str = "squared_exponential"

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if not np.all(ls > 0) or not np.all(np.isfinite(ls)):
            raise ConfigError("lengthscales must be positive and finite")
        if self.nugget < 1e-10:
            raise ConfigError("nugget must be >= 1e-10")
        if not self.precision > 0:
            raise ConfigError("precision must be > 0")
        if self.family != "squared_exponential":
            raise ConfigError(f"unsupported kernel family {self.family!r}")

    @property
    def beta(self) -> np.ndarray:
        return 0.5 / np.atleast_1d(np.asarray(self.lengthscales, dtype=float)) ** 2

    @classmethod
    def from_beta(cls, beta, precision=1.0, nugget=1e-10):
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        return cls(tuple(np.sqrt(0.5 / beta)), precision, nugget)

    def __call__(self, a, b):
        return se_kernel(a, b, self.beta, self.precision)


@dataclass
class Normalizer:
    """Affine maps of inputs to [0, 1] and outputs to zero mean, unit std."""

    x_lo: np.ndarray
    x_hi: np.ndarray
    t_lo: np.ndarray
    t_hi: np.ndarray
    out_mean: float
    out_std: float

    def x(self, raw):
        return (np.asarray(raw, dtype=float) - self.x_lo) / (self.x_hi - self.x_lo)

    def x_inv(self, unit):
        return self.x_lo + np.asarray(unit, dtype=float) * (self.x_hi - self.x_lo)

    def t(self, raw):
        return (np.asarray(raw, dtype=float) - self.t_lo) / (self.t_hi - self.t_lo)

    def t_inv(self, unit):
        return self.t_lo + np.asarray(unit, dtype=float) * (self.t_hi - self.t_lo)

    def y(self, rh):
        return (np.asarray(rh, dtype=float) - self.out_mean) / self.out_std

    def y_inv(self, z):
        return self.out_mean + np.asarray(z, dtype=float) * self.out_std

    def to_json(self):
        return {
            "x_lo": list(map(float, self.x_lo)), "x_hi": list(map(float, self.x_hi)),
            "t_lo": list(map(float, self.t_lo)), "t_hi": list(map(float, self.t_hi)),
            "out_mean": float(self.out_mean), "out_std": float(self.out_std),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(np.array(obj["x_lo"], float), np.array(obj["x_hi"], float),
                   np.array(obj["t_lo"], float), np.array(obj["t_hi"], float),
                   float(obj["out_mean"]), float(obj["out_std"]))


@dataclass
class DesignSet:
    """Simulator runs at design parameters, sampled at observation instants.

    ``x``, ``t`` are normalised to [0, 1] and ``d`` standardised.  Row ``r``
    was sampled at ``sample_times[time_index[r]]``.
    """

    x: np.ndarray  # (n, 2)
    t: np.ndarray  # (n, 2)
    d: np.ndarray  # (n,)
    norm: Normalizer
    sample_times: list = field(default_factory=list)
    time_index: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.t = np.atleast_2d(np.asarray(self.t, dtype=float))
        self.d = np.asarray(self.d, dtype=float).ravel()
        n = self.d.size
        if self.x.shape[0] != n or self.t.shape[0] != n:
            raise DataError("design arrays have inconsistent row counts")
        if self.time_index is None:
            self.time_index = np.zeros(n, dtype=int)
        self.time_index = np.asarray(self.time_index, dtype=int)
        rows = np.round(np.hstack([self.x, self.t]), 12)
        if np.unique(rows, axis=0).shape[0] != n:
            raise DataError("design contains duplicate (x, t) rows")

    def __len__(self):
        return self.d.size

    @property
    def inputs(self) -> np.ndarray:
        return np.hstack([self.x, self.t])

    @property
    def outputs_rh(self) -> np.ndarray:
        return self.norm.y_inv(self.d)

    @property
    def theta_raw(self) -> np.ndarray:
        return self.norm.t_inv(self.t)

    def rows_at(self, time_indices) -> np.ndarray:
        """Design row indices sampled at any of ``time_indices``."""
        return np.flatnonzero(np.isin(self.time_index, np.atleast_1d(time_indices)))

    def subset(self, rows) -> "DesignSet":
        rows = np.asarray(rows, dtype=int)
        return DesignSet(self.x[rows], self.t[rows], self.d[rows], self.norm,
                         self.sample_times, self.time_index[rows])

    def time_index_of(self, timestamps: Sequence[dt.datetime]) -> np.ndarray:
        lookup = {t: i for i, t in enumerate(self.sample_times)}
        try:
            return np.array([lookup[t] for t in timestamps], dtype=int)
        except KeyError as exc:
            raise DataError(f"no design output sampled at {exc.args[0]}") from exc


def theta_grid(param_grid: Mapping[str, Sequence[float]]) -> np.ndarray:
    """Cartesian product of the per-parameter values, N varying slowest."""
    values = [np.asarray(param_grid[n], dtype=float) for n in THETA_NAMES]
    if any(v.size == 0 for v in values):
        raise ConfigError("parameter grids must be non-empty")
    for n, v in zip(THETA_NAMES, values):
        lo, hi = PARAMETER_BOUNDS[n]
        if np.any(v < lo - 1e-12) or np.any(v > hi + 1e-12):
            raise ConfigError(f"{n} grid leaves [{lo}, {hi}]")
    return np.array(list(itertools.product(*values)))


def default_param_grid():
    """7 x 6 grid: N 1..10 step 1.5, IAS 0.1..0.85 step 0.15."""
    return {"N": np.round(np.arange(1.0, 10.0 + 1e-9, 1.5), 10),
            "IAS": np.round(np.arange(0.1, 0.85 + 1e-9, 0.15), 10)}


def build_design(param_grid: Mapping[str, Sequence[float]], scenario: Scenario, cfg: FarmConfig,
                 sample_times: Sequence[dt.datetime], x_range=None) -> DesignSet:
    """Run the simulator over the grid and keep outputs at ``sample_times``.

    ``sample_times`` are end-of-hour instants (see ``data.output_times``).
    ``x_range`` optionally fixes the (lo, hi) normalisation of the scenario
    covariates; by default it spans the sampled values.
    """
    thetas = theta_grid(param_grid)
    ends = [t + dt.timedelta(hours=1) for t in scenario.timestamps]
    pos = {t: i for i, t in enumerate(ends)}
    sample_times = list(sample_times)
    if not sample_times:
        raise ConfigError("no sample times")
    missing = [t for t in sample_times if t not in pos]
    if missing:
        raise ConfigError(f"sample time {missing[0].isoformat()} outside the simulated horizon")
    idx = np.array([pos[t] for t in sample_times])
    try:
        res = simulate_batch(cfg, scenario, {"N": thetas[:, 0], "IAS": thetas[:, 1]})
    except NumericalError as exc:
        raise type(exc)(f"design simulation failed for theta grid {thetas.tolist()}: {exc}") from exc
    out = res.rh[:, idx]  # (runs, times)
    bad = np.argwhere(~np.isfinite(out))
    if bad.size:
        r = bad[0][0]
        raise NumericalError(f"non-finite design output at N={thetas[r, 0]}, IAS={thetas[r, 1]}")
    x_raw = np.column_stack([scenario.light_state[idx].astype(float), scenario.ext_moisture[idx]])
    if x_range is None:
        x_lo = np.array([0.0, x_raw[:, 1].min()])
        x_hi = np.array([1.0, x_raw[:, 1].max()])
        if x_hi[1] <= x_lo[1]:
            x_hi[1] = x_lo[1] + 1e-6
    else:
        x_lo, x_hi = (np.asarray(v, dtype=float) for v in x_range)
    t_lo = np.array([PARAMETER_BOUNDS[n][0] for n in THETA_NAMES])
    t_hi = np.array([PARAMETER_BOUNDS[n][1] for n in THETA_NAMES])
    flat = out.ravel()
    std = float(flat.std()) if flat.size > 1 and flat.std() > 0 else 1.0
    norm = Normalizer(x_lo, x_hi, t_lo, t_hi, float(flat.mean()), std)
    n_runs, n_times = out.shape
    rows_t = np.repeat(thetas, n_times, axis=0)
    rows_x = np.tile(x_raw, (n_runs, 1))
    time_index = np.tile(np.arange(n_times), n_runs)
    return DesignSet(norm.x(rows_x), norm.t(rows_t), norm.y(flat), norm, sample_times, time_index)


def write_design(design: DesignSet, path) -> Path:
    """CSV of physical values plus ``<path>.json`` with normalisation and times."""
    path = Path(path)
    xr = design.norm.x_inv(design.x)
    tr = design.norm.t_inv(design.t)
    yr = design.outputs_rh
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(DESIGN_COLUMNS)
        for i in range(len(design)):
            w.writerow([repr(float(xr[i, 0])), repr(float(xr[i, 1])), repr(float(tr[i, 0])),
                        repr(float(tr[i, 1])), repr(float(yr[i]))])
    side = path.with_name(path.name + ".json")
    side.write_text(json.dumps({
        "normalization": design.norm.to_json(),
        "x_names": X_NAMES, "theta_names": THETA_NAMES,
        "sample_times": [t.isoformat() for t in design.sample_times],
        "time_index": design.time_index.tolist(),
    }, indent=1), encoding="utf-8")
    return side


def read_design(path) -> DesignSet:
    path = Path(path)
    side = path.with_name(path.name + ".json")
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{side}: invalid JSON: {exc}") from exc
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != DESIGN_COLUMNS:
            raise DataError(f"{path}: expected columns {','.join(DESIGN_COLUMNS)}")
        try:
            rows = np.array([[float(r[c]) for c in DESIGN_COLUMNS] for r in reader])
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc
    norm = Normalizer.from_json(meta["normalization"])
    times = [dt.datetime.fromisoformat(s) for s in meta["sample_times"]]
    return DesignSet(norm.x(rows[:, :2]), norm.t(rows[:, 2:4]), norm.y(rows[:, 4]), norm,
                     times, np.array(meta["time_index"], dtype=int))


def joint_covariance(design_inputs: np.ndarray, obs_x: np.ndarray, theta, l: float, rho: float = 1.0,
                     sigma2: float = 0.0, eta_precision: float = 1.0, bias_precision: float = np.inf,
                     design_nugget: float = 0.0, return_cholesky: bool = False):
    """Joint covariance of stacked [d, Y] for one particle.

    ``design_inputs`` are rows (x, t) of the design, ``obs_x`` the
    observation covariates, ``theta`` the candidate parameters (normalised).
    Blocks::

        [ k_eta(D, D) + nugget I         rho k_eta(D, Y)                        ]
        [ rho k_eta(Y, D)                 rho^2 k_eta(Y, Y) + k_Y(Y, Y) + s2 I  ]

    with ``k_eta`` the shared-lengthscale SE kernel over (x, t) and ``k_Y``
    the SE kernel over x only, precision ``bias_precision`` (inf drops it).
    Jitter is added to the whole matrix only if Cholesky fails.
    """
    if not l > 0:
        raise ConfigError("lengthscale must be > 0")
    if sigma2 < 0:
        raise ConfigError("sigma2 must be >= 0")
    design_inputs = np.atleast_2d(np.asarray(design_inputs, dtype=float))
    obs_x = np.atleast_2d(np.asarray(obs_x, dtype=float))
    theta = np.asarray(theta, dtype=float).ravel()
    obs_inputs = np.hstack([obs_x, np.tile(theta, (obs_x.shape[0], 1))])
    beta = 0.5 / l**2
    n_d, n_y = design_inputs.shape[0], obs_x.shape[0]
    k = np.empty((n_d + n_y, n_d + n_y))
    k[:n_d, :n_d] = se_kernel(design_inputs, design_inputs, beta, eta_precision)
    k[:n_d, :n_d][np.diag_indices(n_d)] += design_nugget
    cross = rho * se_kernel(design_inputs, obs_inputs, beta, eta_precision)
    k[:n_d, n_d:] = cross
    k[n_d:, :n_d] = cross.T
    yy = rho**2 * se_kernel(obs_inputs, obs_inputs, beta, eta_precision)
    if np.isfinite(bias_precision):
        yy = yy + se_kernel(obs_x, obs_x, beta, bias_precision)
    yy[np.diag_indices(n_y)] += sigma2
    k[n_d:, n_d:] = yy
    chol, jit = cholesky_jitter(k)
    if jit:
        k = k + jit * np.eye(k.shape[0])
    return (k, chol) if return_cholesky else k


def gp_marginal_loglik(k: np.ndarray, values: np.ndarray, chol: np.ndarray | None = None) -> float:
    """``log N(values | 0, K)`` via Cholesky (``chol`` may be supplied)."""
    values = np.asarray(values, dtype=float).ravel()
    k = np.asarray(k, dtype=float)
    if k.shape != (values.size, values.size):
        raise ConfigError(f"covariance {k.shape} does not match {values.size} values")
    if chol is None:
        chol, _ = cholesky_jitter(k)
    alpha = linalg.solve_triangular(chol, values, lower=True)
    val = -0.5 * float(alpha @ alpha) - float(np.log(np.diag(chol)).sum()) - 0.5 * values.size * LOG_2PI
    if not math.isfinite(val):
        return LOGLIK_FLOOR
    return val


class GPEmulator:
    """Zero-mean GP fitted to a design; predictions in %RH."""

    def __init__(self, design: DesignSet, kernel: KernelSpec):
        self.design = design
        self.kernel = kernel
        u = design.inputs
        k = kernel(u, u) + kernel.nugget * np.eye(len(design))
        self._chol, self.jitter = cholesky_jitter(k)
        self._alpha = linalg.cho_solve((self._chol, True), design.d)

    def predict(self, x, t, normalized: bool = True):
        """Predictive mean and variance at query rows (x, t), in %RH units.

        With ``normalized=False`` the query is given in physical units.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.atleast_2d(np.asarray(t, dtype=float))
        if not normalized:
            x, t = self.design.norm.x(x), self.design.norm.t(t)
        if t.shape[0] == 1 and x.shape[0] > 1:
            t = np.repeat(t, x.shape[0], axis=0)
        q = np.hstack([x, t])
        ks = self.kernel(q, self.design.inputs)
        mean = ks @ self._alpha
        v = linalg.solve_triangular(self._chol, ks.T, lower=True)
        var = np.maximum(1.0 / self.kernel.precision - np.sum(v * v, axis=0), 0.0)
        s = self.design.norm.out_std
        return self.design.norm.y_inv(mean), var * s * s


def gp_predict(design: DesignSet, kernel: KernelSpec, x, t):
    """Convenience wrapper: fit and predict once (normalised query)."""
    return GPEmulator(design, kernel).predict(x, t)
