"""Particle filter over calibration parameters and the GP lengthscale.

Each particle carries normalised parameters ``theta`` in [0, 1]^2 and a
lengthscale ``l``.  At step ``i`` its weight is the zero-mean GP marginal
likelihood of the stacked vector ``[d_i, Y_i]``: design outputs sampled at
the observation instants in the window and the observations themselves.
The emulator amplitude, discrepancy amplitude, noise variance and design
nugget are fixed at the means of their KOH priors (see ``PFConfig``).
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .data import ObservationSeries
from .errors import ConfigError, DataError, DegenerateLikelihoodError, IllConditionedKernelError
from .gp import LOG_2PI, LOGLIK_FLOOR, DesignSet, cholesky_jitter, gp_marginal_loglik, joint_covariance

TRACE_COLUMNS = ("step", "param", "mean", "std", "q05", "q50", "q95", "ess", "step_seconds")
TRACE_PARAMS = ("N", "IAS", "l")

# Means of the Gamma(shape, rate) priors on the KOH precisions: shape / rate.
ETA_PRECISION = 10.0 / 10.0
BIAS_PRECISION = 10.0 / 0.3
NOISE_VARIANCE = 1.0 / (10.0 / 0.03)  # 0.003 in standardised output units
DESIGN_NUGGET = 1.0 / (10.0 / 0.001)  # 1e-4

_CHUNK_ELEMENTS = 4_000_000


@dataclass(frozen=True)
class ThetaPrior:
    """Independent priors on normalised parameters.

    ``kind`` is ``"uniform"`` (over [0, 1]) or ``"normal"`` with ``mean`` and
    ``sd`` per dimension, truncated to [0, 1] by rejection.
    """

    kind: str = "uniform"
    mean: tuple = (0.5, 0.5)
    sd: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("uniform", "normal"):
            raise ConfigError(f"unknown prior kind {self.kind!r}")
        if self.kind == "normal" and not all(s > 0 for s in self.sd):
            raise ConfigError("normal prior sd must be > 0")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "uniform":
            return rng.random((n, 2))
        mean = np.asarray(self.mean, dtype=float)
        sd = np.asarray(self.sd, dtype=float)
        out = np.empty((n, 2))
        for k in range(2):
            filled = 0
            tries = 0
            while filled < n:
                draw = rng.normal(mean[k], sd[k], 2 * (n - filled) + 16)
                keep = draw[(draw >= 0.0) & (draw <= 1.0)][: n - filled]
                out[filled:filled + keep.size, k] = keep
                filled += keep.size
                tries += 1
                if tries > 1000:
                    raise ConfigError("normal prior has (numerically) empty support in [0, 1]")
        return out


@dataclass(frozen=True)
class LengthscalePrior:
    """Lognormal prior on ``l``: ``log l ~ N(log median, sigma^2)``."""

    median: float = 0.2
    sigma: float = 0.5

    def __post_init__(self):
        if not (self.median > 0 and self.sigma > 0):
            raise ConfigError("lengthscale prior needs median > 0 and sigma > 0")

    def sample(self, rng, n):
        return np.exp(rng.normal(math.log(self.median), self.sigma, n))


@dataclass(frozen=True)
class PFConfig:
    particles: int = 1000
    seed: int = 0
    theta_prior: ThetaPrior = ThetaPrior()
    l_prior: LengthscalePrior = LengthscalePrior()
    rho: float = 1.0
    sigma2: float = NOISE_VARIANCE
    eta_precision: float = ETA_PRECISION
    bias_precision: float = BIAS_PRECISION
    design_nugget: float = DESIGN_NUGGET
    # std of the Gaussian move applied to normalised theta after resampling
    rejuvenate: float = 0.05
    window: str = "newest"
    resampling: str = "systematic"
    threads: int = 1

    def __post_init__(self):
        if self.particles < 2:
            raise ConfigError("need at least 2 particles")
        if self.window not in ("newest", "cumulative"):
            raise ConfigError(f"unknown window mode {self.window!r}")
        if self.resampling not in ("systematic", "stratified"):
            raise ConfigError(f"unknown resampling scheme {self.resampling!r}")
        if self.rejuvenate < 0:
            raise ConfigError("rejuvenation std must be >= 0")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.sigma2 < 0:
            raise ConfigError("sigma2 must be >= 0")


@dataclass(frozen=True)
class Particle:
    theta: np.ndarray  # normalised
    l: float
    rho: float = 1.0
    sigma2: float = NOISE_VARIANCE


@dataclass
class ParticleSet:
    theta: np.ndarray  # (n, 2) normalised
    l: np.ndarray  # (n,)
    weights: np.ndarray  # (n,)
    step: int = 0
    rng: np.random.Generator | None = field(default=None, repr=False)
    loglik: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return self.l.size

    def __getitem__(self, j) -> Particle:
        return Particle(self.theta[j].copy(), float(self.l[j]))

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))


def init_particles(count: int, theta_prior: ThetaPrior = ThetaPrior(),
                   l_prior: LengthscalePrior = LengthscalePrior(), seed: int = 0) -> ParticleSet:
    """I.i.d. prior draws with uniform weights."""
    if count < 2:
        raise ConfigError("need at least 2 particles")
    rng = np.random.default_rng(seed)
    theta = theta_prior.sample(rng, count)
    l = l_prior.sample(rng, count)
    return ParticleSet(theta, l, np.full(count, 1.0 / count), 0, rng)


def _batched_loglik(d_inputs, d_values, obs_x, obs_values, theta, l, cfg: PFConfig) -> np.ndarray:
    """Log marginal likelihood for a block of particles (dense, batched)."""
    n_d, n_y = d_inputs.shape[0], obs_x.shape[0]
    n = n_d + n_y
    m = theta.shape[0]
    beta = 0.5 / l**2  # (m,)
    s_dd = np.sum((d_inputs[:, None, :] - d_inputs[None, :, :]) ** 2, axis=-1)
    s_yy = np.sum((obs_x[:, None, :] - obs_x[None, :, :]) ** 2, axis=-1)
    dx = np.sum((d_inputs[:, None, :2] - obs_x[None, :, :]) ** 2, axis=-1)  # (n_d, n_y)
    dt = np.sum((d_inputs[None, :, 2:] - theta[:, None, :]) ** 2, axis=-1)  # (m, n_d)
    k = np.empty((m, n, n))
    k[:, :n_d, :n_d] = np.exp(-beta[:, None, None] * s_dd) / cfg.eta_precision
    k[:, np.arange(n_d), np.arange(n_d)] += cfg.design_nugget
    cross = cfg.rho * np.exp(-beta[:, None, None] * (dx[None] + dt[:, :, None])) / cfg.eta_precision
    k[:, :n_d, n_d:] = cross
    k[:, n_d:, :n_d] = np.swapaxes(cross, 1, 2)
    e_yy = np.exp(-beta[:, None, None] * s_yy)
    amp = cfg.rho**2 / cfg.eta_precision
    if math.isfinite(cfg.bias_precision):
        amp = amp + 1.0 / cfg.bias_precision
    k[:, n_d:, n_d:] = amp * e_yy
    k[:, np.arange(n_d, n), np.arange(n_d, n)] += cfg.sigma2
    values = np.concatenate([d_values, obs_values])
    try:
        chol = np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        out = np.empty(m)
        for j in range(m):
            try:
                lj, _ = cholesky_jitter(k[j])
            except IllConditionedKernelError:
                out[j] = LOGLIK_FLOOR
                continue
            out[j] = _loglik_from_chol(lj[None], values)[0]
        return out
    return _loglik_from_chol(chol, values)


def _loglik_from_chol(chol, values):
    m, n, _ = chol.shape
    rhs = np.broadcast_to(values[None, :, None], (m, n, 1))
    alpha = np.linalg.solve(chol, rhs)[..., 0]
    logdet = np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    val = -0.5 * np.sum(alpha * alpha, axis=1) - logdet - 0.5 * n * LOG_2PI
    return np.where(np.isfinite(val), val, LOGLIK_FLOOR)


def particle_logliks(pset: ParticleSet, d_inputs, d_values, obs_x, obs_values, cfg: PFConfig) -> np.ndarray:
    """Log-likelihood of every particle; chunks may run on several threads.

    Chunk boundaries depend only on the problem size, and each chunk writes
    its own slice, so the result does not depend on ``cfg.threads``.
    """
    d_inputs = np.atleast_2d(np.asarray(d_inputs, dtype=float))
    obs_x = np.atleast_2d(np.asarray(obs_x, dtype=float))
    d_values = np.asarray(d_values, dtype=float).ravel()
    obs_values = np.asarray(obs_values, dtype=float).ravel()
    n = d_values.size + obs_values.size
    m = len(pset)
    chunk = max(1, min(m, _CHUNK_ELEMENTS // (n * n)))
    bounds = [(s, min(m, s + chunk)) for s in range(0, m, chunk)]
    out = np.empty(m)

    def work(b):
        s, e = b
        out[s:e] = _batched_loglik(d_inputs, d_values, obs_x, obs_values, pset.theta[s:e], pset.l[s:e], cfg)

    if cfg.threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            list(pool.map(work, bounds))
    else:
        for b in bounds:
            work(b)
    return out


def brute_force_logliks(pset: ParticleSet, d_inputs, d_values, obs_x, obs_values, cfg: PFConfig) -> np.ndarray:
    """Reference: one ``joint_covariance`` + ``gp_marginal_loglik`` per particle."""
    values = np.concatenate([np.ravel(d_values), np.ravel(obs_values)])
    out = np.empty(len(pset))
    for j in range(len(pset)):
        k, chol = joint_covariance(
            d_inputs, obs_x, pset.theta[j], pset.l[j], cfg.rho, cfg.sigma2,
            cfg.eta_precision, cfg.bias_precision, cfg.design_nugget, return_cholesky=True,
        )
        out[j] = gp_marginal_loglik(k, values, chol)
    return out


def normalized_weights(loglik: np.ndarray) -> np.ndarray:
    """``w_j = exp(xi_j - max xi) / sum``; raises if nothing survives."""
    loglik = np.asarray(loglik, dtype=float)
    top = float(np.max(loglik))
    if not math.isfinite(top) or top <= LOGLIK_FLOOR:
        raise DegenerateLikelihoodError(f"all particle likelihoods vanished (max log-likelihood {top})", top)
    w = np.exp(loglik - top)
    total = w.sum()
    if not (total > 0 and math.isfinite(total)):
        raise DegenerateLikelihoodError(f"weights underflowed (max log-likelihood {top})", top)
    w = w / total
    return w / w.sum()


def weight_update(pset: ParticleSet, design: DesignSet, rows, obs_x, obs_values, cfg: PFConfig) -> ParticleSet:
    """Reweight by the marginal likelihood of design rows ``rows`` and the observations."""
    ll = particle_logliks(pset, design.inputs[rows], design.d[rows], obs_x, obs_values, cfg)
    w = normalized_weights(np.log(pset.weights) + ll)
    return replace(pset, weights=w, loglik=ll)


def resample_indices(weights: np.ndarray, rng: np.random.Generator, scheme: str = "systematic") -> np.ndarray:
    """Systematic (one uniform offset) or stratified (one uniform per stratum)."""
    w = np.asarray(weights, dtype=float)
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise DataError("weights must be finite and non-negative")
    n = w.size
    if scheme == "systematic":
        u = (rng.random() + np.arange(n)) / n
    elif scheme == "stratified":
        u = (rng.random(n) + np.arange(n)) / n
    else:
        raise ConfigError(f"unknown resampling scheme {scheme!r}")
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, u, side="right"), n - 1)


def resample(pset: ParticleSet, scheme: str = "systematic", rng: np.random.Generator | None = None) -> ParticleSet:
    rng = rng if rng is not None else pset.rng
    idx = resample_indices(pset.weights, rng, scheme)
    n = len(pset)
    return ParticleSet(pset.theta[idx].copy(), pset.l[idx].copy(), np.full(n, 1.0 / n), pset.step, rng)


def rejuvenate(pset: ParticleSet, std: float) -> ParticleSet:
    """Gaussian move of normalised theta, reflected back into [0, 1]."""
    if std <= 0:
        return pset
    theta = pset.theta + pset.rng.normal(0.0, std, pset.theta.shape)
    theta = np.abs(theta)
    theta = 1.0 - np.abs(1.0 - theta)
    theta = np.clip(theta, 0.0, 1.0)
    return replace(pset, theta=theta)


@dataclass
class PosteriorTrace:
    """Per-step summaries; ``stats[param]`` has columns mean, std, q05, q50, q95."""

    params: tuple
    stats: dict
    ess: np.ndarray
    step_seconds: np.ndarray
    method: str = "pf"

    @property
    def steps(self) -> int:
        return self.ess.size

    def mean(self, param) -> np.ndarray:
        return self.stats[param][:, 0]

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for i in range(self.steps):
                for p in self.params:
                    row = self.stats[p][i]
                    w.writerow([i + 1, p, *(repr(float(v)) for v in row), repr(float(self.ess[i])),
                                f"{self.step_seconds[i]:.6f}"])

    @classmethod
    def read_csv(cls, path) -> "PosteriorTrace":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        params = tuple(dict.fromkeys(r["param"] for r in rows))
        steps = max(int(r["step"]) for r in rows)
        stats = {p: np.zeros((steps, 5)) for p in params}
        ess = np.zeros(steps)
        secs = np.zeros(steps)
        for r in rows:
            i = int(r["step"]) - 1
            stats[r["param"]][i] = [float(r[c]) for c in ("mean", "std", "q05", "q50", "q95")]
            ess[i] = float(r["ess"])
            secs[i] = float(r["step_seconds"])
        return cls(params, stats, ess, secs)


def summarize(values: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """mean, std, q05, q50, q95 of a (possibly weighted) sample."""
    values = np.asarray(values, dtype=float)
    if weights is None:
        q = np.quantile(values, [0.05, 0.5, 0.95])
        return np.array([values.mean(), values.std(), *q])
    order = np.argsort(values, kind="stable")
    v, w = values[order], np.asarray(weights)[order]
    cdf = np.cumsum(w) - 0.5 * w
    q = np.interp([0.05, 0.5, 0.95], cdf / w.sum(), v)
    mean = float(np.sum(w * v) / w.sum())
    std = math.sqrt(max(float(np.sum(w * (v - mean) ** 2) / w.sum()), 0.0))
    return np.array([mean, std, *q])


def window_rows(design: DesignSet, time_indices) -> np.ndarray:
    rows = design.rows_at(time_indices)
    if rows.size == 0:
        raise DataError("no design rows sampled at the observation instants")
    return rows


def pf_run(design: DesignSet, observations: ObservationSeries, config: PFConfig = PFConfig(),
           progress: Callable[[str], None] | None = None) -> PosteriorTrace:
    """Assimilate observations one at a time: reweight, resample, record."""
    norm = design.norm
    obs_x = norm.x(observations.x)
    obs_y = norm.y(observations.rh)
    tidx = design.time_index_of(observations.timestamps)
    pset = init_particles(config.particles, config.theta_prior, config.l_prior, config.seed)
    n_steps = len(observations)
    stats = {p: np.zeros((n_steps, 5)) for p in TRACE_PARAMS}
    ess = np.zeros(n_steps)
    secs = np.zeros(n_steps)
    for i in range(n_steps):
        t0 = time.perf_counter()
        first = 0 if config.window == "cumulative" else i
        rows = window_rows(design, tidx[first:i + 1])
        pset = weight_update(pset, design, rows, obs_x[first:i + 1], obs_y[first:i + 1], config)
        ess[i] = pset.ess
        pset = resample(pset, config.resampling)
        pset.step = i + 1
        theta_raw = norm.t_inv(pset.theta)
        stats["N"][i] = summarize(theta_raw[:, 0])
        stats["IAS"][i] = summarize(theta_raw[:, 1])
        stats["l"][i] = summarize(pset.l)
        pset = rejuvenate(pset, config.rejuvenate)
        secs[i] = time.perf_counter() - t0
        if progress is not None:
            progress(f"pf step {i + 1}/{n_steps}: N={stats['N'][i, 0]:.3f} IAS={stats['IAS'][i, 0]:.3f} "
                     f"ess={ess[i]:.1f}")
    return PosteriorTrace(TRACE_PARAMS, stats, ess, secs, "pf")
