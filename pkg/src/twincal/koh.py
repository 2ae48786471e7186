"""Kennedy-O'Hagan calibration by MCMC, static and over a sliding window.

Observations are modelled as ``y(x) = eta(x, theta) + delta(x) + e`` and
design outputs as ``d = eta(x, t) + e_n``.  Both are stacked into a single
zero-mean Gaussian vector whose covariance is::

    [ K_eta(D, D)/l_eta + I/l_en      K_eta(D, Y)/l_eta                          ]
    [ K_eta(Y, D)/l_eta               K_eta(Y, Y)/l_eta + K_b(Y, Y)/l_b + I/l_e  ]

where ``Y`` rows carry the candidate ``theta``.  Correlations use the
parameterisation ``K(u, u') = prod_k rho_k ** (4 (u_k - u'_k)^2)`` with
``rho_k`` in (0, 1), i.e. ``beta_k = -4 log rho_k``; the Beta priors apply
to ``rho``.  Precisions have Gamma(shape, rate) priors.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import linalg, optimize, special, stats

from .data import ObservationSeries
from .errors import ConfigError, DataError, DomainError, IllConditionedKernelError, NumericalError
from .gp import LOG_2PI, THETA_NAMES, DesignSet, cholesky_jitter
from .mcmc import RHAT_WARN, ChainResult, effective_sample_size, rw_metropolis, split_rhat
from .pf import PosteriorTrace, summarize

PRECISIONS = ("lambda_eta", "lambda_b", "lambda_e", "lambda_en")
RHO_ETA = ("rho_eta_x1", "rho_eta_x2", "rho_eta_t1", "rho_eta_t2")
RHO_B = ("rho_b_x1", "rho_b_x2")
PARAM_NAMES = THETA_NAMES + PRECISIONS + RHO_ETA + RHO_B
SAMPLE_COLUMNS = ("chain", "iter", "param", "value")
BIAS_COLUMNS = ("x_lightstate", "x_moisture", "mean", "q05", "q95")
UNIFORM_SD = 1.0 / math.sqrt(12.0)
MODE_MAX_ITER = 200


@dataclass(frozen=True)
class KohHyperPriors:
    """Gamma(shape, rate) priors on precisions, Beta priors on correlations.

    ``theta_mean``/``theta_sd`` are in normalised units; ``theta_kind`` is
    ``"uniform"`` on [0, 1] or ``"normal"`` truncated to [0, 1].
    """

    lambda_eta: tuple = (10.0, 10.0)
    lambda_b: tuple = (10.0, 0.3)
    lambda_e: tuple = (10.0, 0.03)
    lambda_en: tuple = (10.0, 0.001)
    rho_eta: tuple = (1.0, 0.5)
    rho_b: tuple = (1.0, 0.4)
    theta_kind: str = "uniform"
    theta_mean: tuple = (0.5, 0.5)
    theta_sd: tuple = (UNIFORM_SD, UNIFORM_SD)

    def __post_init__(self):
        for name in PRECISIONS + ("rho_eta", "rho_b"):
            a, b = getattr(self, name)
            if not (a > 0 and b > 0):
                raise ConfigError(f"prior parameters for {name} must be positive")
        if self.theta_kind not in ("uniform", "normal"):
            raise ConfigError(f"unknown theta prior {self.theta_kind!r}")
        if self.theta_kind == "normal" and not all(s > 0 for s in self.theta_sd):
            raise ConfigError("theta prior sd must be positive")

    def centred_at(self, mean) -> "KohHyperPriors":
        """Truncated-normal theta prior at ``mean`` keeping the initial sd."""
        return replace(self, theta_kind="normal", theta_mean=tuple(float(m) for m in mean))

    def log_prior(self, p: dict) -> float:
        th = np.asarray(p["theta"], dtype=float)
        if np.any(th < 0.0) or np.any(th > 1.0):
            return -math.inf
        lp = 0.0
        if self.theta_kind == "normal":
            mu = np.asarray(self.theta_mean, dtype=float)
            sd = np.asarray(self.theta_sd, dtype=float)
            mass = special.ndtr((1.0 - mu) / sd) - special.ndtr(-mu / sd)
            lp += float(np.sum(stats.norm.logpdf(th, mu, sd) - np.log(mass)))
        for name in PRECISIONS:
            v = p[name]
            if not v > 0:
                return -math.inf
            a, b = getattr(self, name)
            lp += stats.gamma.logpdf(v, a, scale=1.0 / b)
        for key, prior in (("rho_eta", self.rho_eta), ("rho_b", self.rho_b)):
            r = np.asarray(p[key], dtype=float)
            if np.any(r <= 0.0) or np.any(r >= 1.0):
                return -math.inf
            lp += float(np.sum(stats.beta.logpdf(r, *prior)))
        return float(lp)

    def sample(self, rng: np.random.Generator) -> dict:
        if self.theta_kind == "uniform":
            theta = rng.random(2)
        else:
            theta = np.empty(2)
            for k in range(2):
                for _ in range(10000):
                    v = rng.normal(self.theta_mean[k], self.theta_sd[k])
                    if 0.0 <= v <= 1.0:
                        break
                else:
                    raise ConfigError("theta prior has (numerically) empty support in [0, 1]")
                theta[k] = v
        p = {"theta": theta}
        for name in PRECISIONS:
            a, b = getattr(self, name)
            p[name] = float(rng.gamma(a, 1.0 / b))
        p["rho_eta"] = np.clip(rng.beta(*self.rho_eta, size=4), 1e-6, 1 - 1e-6)
        p["rho_b"] = np.clip(rng.beta(*self.rho_b, size=2), 1e-6, 1 - 1e-6)
        return p


@dataclass
class KohChainState:
    """Current parameter values of one chain plus its proposal bookkeeping."""

    theta: np.ndarray  # normalised
    lambda_eta: float
    lambda_b: float
    lambda_e: float
    lambda_en: float
    rho_eta: np.ndarray  # (4,)
    rho_b: np.ndarray  # (2,)
    proposal_scales: np.ndarray | None = None
    accepted: int = 0
    proposed: int = 0
    chain_id: int = 0

    def as_dict(self) -> dict:
        return {"theta": self.theta, "lambda_eta": self.lambda_eta, "lambda_b": self.lambda_b,
                "lambda_e": self.lambda_e, "lambda_en": self.lambda_en,
                "rho_eta": self.rho_eta, "rho_b": self.rho_b}

    @classmethod
    def from_dict(cls, p: dict, chain_id: int = 0) -> "KohChainState":
        return cls(np.asarray(p["theta"], float), float(p["lambda_eta"]), float(p["lambda_b"]),
                   float(p["lambda_e"]), float(p["lambda_en"]), np.asarray(p["rho_eta"], float),
                   np.asarray(p["rho_b"], float), chain_id=chain_id)


def to_unconstrained(p: dict) -> np.ndarray:
    th = np.clip(np.asarray(p["theta"], float), 1e-12, 1 - 1e-12)
    return np.concatenate([
        special.logit(th),
        np.log([p[n] for n in PRECISIONS]),
        special.logit(np.asarray(p["rho_eta"], float)),
        special.logit(np.asarray(p["rho_b"], float)),
    ])


def from_unconstrained(z: np.ndarray) -> dict:
    return {
        "theta": special.expit(z[0:2]),
        "lambda_eta": math.exp(z[2]), "lambda_b": math.exp(z[3]),
        "lambda_e": math.exp(z[4]), "lambda_en": math.exp(z[5]),
        "rho_eta": special.expit(z[6:10]), "rho_b": special.expit(z[10:12]),
    }


def _log_jacobian(z: np.ndarray) -> float:
    # d expit(z)/dz = s (1 - s); d exp(z)/dz = exp(z)
    logit_part = np.concatenate([z[0:2], z[6:12]])
    return float(np.sum(-np.logaddexp(0.0, logit_part) - np.logaddexp(0.0, -logit_part)) + np.sum(z[2:6]))


class KohLikelihood:
    """Stacked-Gaussian log likelihood for fixed design rows and observations.

    Squared input differences are precomputed once, so each evaluation
    costs one kernel assembly and one Cholesky factorisation.
    """

    def __init__(self, design: DesignSet, obs_x: np.ndarray, obs_y: np.ndarray, rows=None):
        rows = np.arange(len(design)) if rows is None else np.asarray(rows, dtype=int)
        self.d_inputs = design.inputs[rows]
        self.obs_x = np.atleast_2d(np.asarray(obs_x, dtype=float))
        self.values = np.concatenate([design.d[rows], np.ravel(obs_y)])
        self.n_d = rows.size
        self.n_y = self.obs_x.shape[0]
        if self.values.size != self.n_d + self.n_y:
            raise DataError("observation covariates and values differ in length")
        di = self.d_inputs
        self._sq_dd = np.stack([(di[:, None, k] - di[None, :, k]) ** 2 for k in range(4)])
        self._sq_dx = np.stack([(di[:, None, k] - self.obs_x[None, :, k]) ** 2 for k in range(2)])
        self._sq_yy = np.stack([(self.obs_x[:, None, k] - self.obs_x[None, :, k]) ** 2 for k in range(2)])

    def covariance(self, p: dict) -> np.ndarray:
        beta_eta = -4.0 * np.log(np.asarray(p["rho_eta"], float))
        beta_b = -4.0 * np.log(np.asarray(p["rho_b"], float))
        theta = np.asarray(p["theta"], float)
        n_d, n_y = self.n_d, self.n_y
        k = np.empty((n_d + n_y, n_d + n_y))
        dd = np.dot(-beta_eta, self._sq_dd.reshape(4, -1)).reshape(n_d, n_d)
        np.exp(dd, out=dd)
        dd *= 1.0 / p["lambda_eta"]
        dd[np.diag_indices(n_d)] += 1.0 / p["lambda_en"]
        k[:n_d, :n_d] = dd
        sq_dt = (self.d_inputs[:, 2:] - theta) ** 2  # (n_d, 2)
        expo = np.tensordot(beta_eta[:2], self._sq_dx, axes=1) + (sq_dt @ beta_eta[2:])[:, None]
        cross = np.exp(-expo) / p["lambda_eta"]
        k[:n_d, n_d:] = cross
        k[n_d:, :n_d] = cross.T
        yy_x = np.tensordot(beta_eta[:2], self._sq_yy, axes=1)
        yy_b = np.tensordot(beta_b, self._sq_yy, axes=1)
        yy = np.exp(-yy_x) / p["lambda_eta"] + np.exp(-yy_b) / p["lambda_b"]
        yy[np.diag_indices(n_y)] += 1.0 / p["lambda_e"]
        k[n_d:, n_d:] = yy
        return k

    def factor(self, p: dict) -> np.ndarray:
        k = self.covariance(p)
        try:
            return linalg.cholesky(k, lower=True, overwrite_a=True, check_finite=False)
        except linalg.LinAlgError:
            return cholesky_jitter(self.covariance(p))[0]

    def __call__(self, p: dict) -> float:
        try:
            chol = self.factor(p)
        except IllConditionedKernelError:
            return -math.inf
        alpha = linalg.solve_triangular(chol, self.values, lower=True, check_finite=False)
        val = -0.5 * float(alpha @ alpha) - float(np.sum(np.log(np.diag(chol)))) - 0.5 * self.values.size * LOG_2PI
        return val if math.isfinite(val) else -math.inf


def koh_log_posterior(state: KohChainState | dict, likelihood: KohLikelihood, priors: KohHyperPriors) -> float:
    """Log prior plus stacked log likelihood; ``-inf`` outside the support
    or when the covariance cannot be factorised."""
    p = state.as_dict() if isinstance(state, KohChainState) else state
    lp = priors.log_prior(p)
    if not math.isfinite(lp):
        return -math.inf
    return lp + likelihood(p)


@dataclass
class KohPosterior:
    """Retained draws per chain; theta columns are in physical units."""

    names: tuple
    samples: np.ndarray  # (chains, kept, params)
    acceptance: np.ndarray  # per chain, after adaptation
    rhat: dict
    seconds: float
    norm: object = field(repr=False, default=None)
    chains_z: list = field(repr=False, default_factory=list)
    mode: np.ndarray | None = field(repr=False, default=None)  # unconstrained

    @property
    def pooled(self) -> np.ndarray:
        return self.samples.reshape(-1, self.samples.shape[-1])

    def column(self, name) -> np.ndarray:
        return self.pooled[:, self.names.index(name)]

    def mean(self, name) -> float:
        return float(self.column(name).mean())

    def theta_normalized(self) -> np.ndarray:
        raw = self.pooled[:, :2]
        return self.norm.t(raw) if self.norm is not None else raw

    def param_dicts(self, max_draws: int | None = None):
        """Per-draw parameter dicts (theta normalised), evenly thinned."""
        z = np.concatenate(self.chains_z, axis=0)
        idx = np.arange(z.shape[0])
        if max_draws is not None and idx.size > max_draws:
            idx = np.unique(np.linspace(0, idx.size - 1, max_draws).round().astype(int))
        return [from_unconstrained(z[i]) for i in idx]

    def write_samples(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(SAMPLE_COLUMNS)
            for c in range(self.samples.shape[0]):
                for i in range(self.samples.shape[1]):
                    for j, name in enumerate(self.names):
                        w.writerow([c, i, name, repr(float(self.samples[c, i, j]))])


def _physical(z: np.ndarray, norm) -> np.ndarray:
    """Rows of z mapped to natural parameters, theta de-normalised."""
    out = np.empty_like(z)
    out[:, 0:2] = norm.t_inv(special.expit(z[:, 0:2])) if norm is not None else special.expit(z[:, 0:2])
    out[:, 2:6] = np.exp(z[:, 2:6])
    out[:, 6:12] = special.expit(z[:, 6:12])
    return out


def _seed_sequence(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def prior_mean_start(priors: KohHyperPriors) -> np.ndarray:
    """Unconstrained vector at the prior means."""
    p = {"theta": np.asarray(priors.theta_mean, float)}
    for name in PRECISIONS:
        a, b = getattr(priors, name)
        p[name] = a / b
    a, b = priors.rho_eta
    p["rho_eta"] = np.full(4, a / (a + b))
    a, b = priors.rho_b
    p["rho_b"] = np.full(2, a / (a + b))
    return to_unconstrained(p)


def find_mode(target: Callable[[np.ndarray], float], z_start: np.ndarray, max_iter: int = MODE_MAX_ITER):
    """Posterior mode by L-BFGS-B and a dense inverse-Hessian estimate."""

    def neg(z):
        v = target(z)
        return -v if math.isfinite(v) else 1e300

    res = optimize.minimize(neg, np.asarray(z_start, float), method="L-BFGS-B",
                            options={"maxiter": max_iter})
    if not math.isfinite(target(res.x)):
        raise NumericalError("mode search ended at a point with non-finite density")
    cov = np.asarray(res.hess_inv.todense())
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    cov = (v * np.clip(w, 1e-8, 4.0)) @ v.T
    return res.x, cov


def koh_mcmc(priors: KohHyperPriors, design: DesignSet, obs: ObservationSeries, chains: int = 3,
             iterations: int = 5000, seed=0, threads: int = 1, burn_in: float = 0.5,
             start: np.ndarray | None = None,
             progress: Callable[[str], None] | None = None) -> KohPosterior:
    """Adaptive Metropolis chains on the stacked design + observation vector.

    Only design rows sampled at the observation instants enter the
    likelihood.  A mode search from ``start`` (default: prior means) sets
    the proposal shape; each chain starts from its own draw around the
    mode, using an independent stream spawned from ``seed``.  Results do
    not depend on ``threads``.
    """
    if len(obs) < 2:
        raise ConfigError("KOH calibration needs at least 2 observations")
    if chains < 1:
        raise ConfigError("need at least one chain")
    t0 = time.perf_counter()
    norm = design.norm
    rows = design.rows_at(design.time_index_of(obs.timestamps))
    lik = KohLikelihood(design, norm.x(obs.x), norm.y(obs.rh), rows)

    def target(z):
        p = from_unconstrained(z)
        lp = koh_log_posterior(p, lik, priors)
        return lp + _log_jacobian(z) if math.isfinite(lp) else -math.inf

    z_start = prior_mean_start(priors) if start is None else np.asarray(start, float)
    if not math.isfinite(target(z_start)):
        raise NumericalError("non-finite posterior density at the starting point; retry from a prior draw")
    mode, cov = find_mode(target, z_start)
    spread = np.linalg.cholesky(cov)
    streams = _seed_sequence(seed).spawn(chains)
    n_burn = int(iterations * burn_in)

    def run_chain(c):
        rng = np.random.default_rng(streams[c])
        z0 = mode
        for _ in range(20):
            cand = mode + spread @ rng.standard_normal(mode.size)
            if math.isfinite(target(cand)):
                z0 = cand
                break
        res = rw_metropolis(target, z0, iterations, rng, n_burn, cov)
        if progress is not None:
            progress(f"koh chain {c}: acceptance {res.acceptance_rate:.2f}")
        return res

    if threads > 1 and chains > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results: list[ChainResult] = list(pool.map(run_chain, range(chains)))
    else:
        results = [run_chain(c) for c in range(chains)]
    kept_z = [r.kept for r in results]
    samples = np.stack([_physical(z, norm) for z in kept_z])
    rhat = {n: split_rhat(samples[:, :, j]) for j, n in enumerate(PARAM_NAMES)}
    if progress is not None:
        worst = max(rhat, key=lambda n: rhat[n] if math.isfinite(rhat[n]) else 0.0)
        if rhat[worst] > RHAT_WARN:
            progress(f"warning: split R-hat {rhat[worst]:.2f} for {worst} exceeds {RHAT_WARN}")
    acc = np.array([r.acceptance_rate for r in results])
    return KohPosterior(PARAM_NAMES, samples, acc, rhat, time.perf_counter() - t0, norm, kept_z, mode)


@dataclass
class BiasEstimate:
    query: np.ndarray  # (q, 2) physical x
    mean: np.ndarray  # %RH
    q05: np.ndarray
    q95: np.ndarray

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(BIAS_COLUMNS)
            for i in range(self.query.shape[0]):
                w.writerow([int(round(self.query[i, 0])), repr(float(self.query[i, 1])),
                            repr(float(self.mean[i])), repr(float(self.q05[i])), repr(float(self.q95[i]))])


def bias_query_grid(points: int = 21) -> np.ndarray:
    """Both light states crossed with an even grid over normalised moisture."""
    m = np.linspace(0.0, 1.0, points)
    return np.vstack([np.column_stack([np.full(points, s), m]) for s in (0.0, 1.0)])


def extract_bias(posterior: KohPosterior, design: DesignSet, obs: ObservationSeries,
                 query=None, max_draws: int = 200) -> BiasEstimate:
    """Posterior of the discrepancy ``delta(x)`` at normalised ``query`` rows.

    For each retained draw the conditional mean of ``delta`` given the
    stacked data is computed; the mean and 5/95 % quantiles over draws are
    returned in %RH.
    """
    query = bias_query_grid() if query is None else np.atleast_2d(np.asarray(query, dtype=float))
    if np.any(query < 0.0) or np.any(query > 1.0):
        raise DomainError("bias query points must lie in the normalised range [0, 1]")
    norm = design.norm
    rows = design.rows_at(design.time_index_of(obs.timestamps))
    lik = KohLikelihood(design, norm.x(obs.x), norm.y(obs.rh), rows)
    sq_qy = np.stack([(query[:, None, k] - lik.obs_x[None, :, k]) ** 2 for k in range(2)])
    draws = []
    for p in posterior.param_dicts(max_draws):
        try:
            chol = lik.factor(p)
        except IllConditionedKernelError:
            continue
        alpha = linalg.cho_solve((chol, True), lik.values, check_finite=False)
        beta_b = -4.0 * np.log(p["rho_b"])
        kq = np.exp(-np.tensordot(beta_b, sq_qy, axes=1)) / p["lambda_b"]  # (q, n_y)
        draws.append(kq @ alpha[lik.n_d:])
    if not draws:
        raise NumericalError("no posterior draw gave a usable covariance")
    draws = np.array(draws) * norm.out_std
    lo, hi = np.quantile(draws, [0.05, 0.95], axis=0)
    mean = draws.mean(axis=0)
    phys = np.column_stack([query[:, 0], norm.x_inv(query)[:, 1]])
    return BiasEstimate(phys, mean, np.minimum(lo, mean), np.maximum(hi, mean))


@dataclass
class SequentialResult:
    window: int
    trace: PosteriorTrace
    posteriors: list = field(repr=False, default_factory=list)

    @property
    def steps(self) -> int:
        return self.trace.steps


def koh_sequential(priors: KohHyperPriors, design: DesignSet, obs: ObservationSeries, window: int = 4,
                   seed=0, chains: int = 3, iterations: int = 5000, threads: int = 1,
                   keep_posteriors: bool = False,
                   progress: Callable[[str], None] | None = None) -> SequentialResult:
    """Slide a ``window``-point calibration along the series.

    Step ``k`` calibrates on points ``k .. k + window - 1``.  From the
    second step on, the theta prior is a truncated normal centred on the
    previous posterior mean with the initial prior's standard deviation;
    hyperpriors are reset every step.  Each step's mode search starts
    from the previous step's mode.
    """
    if window < 2:
        raise ConfigError("window must be >= 2")
    n_steps = len(obs) - window + 1
    if n_steps < 1:
        raise ConfigError(f"{len(obs)} observations are fewer than the window {window}")
    seeds = _seed_sequence(seed).spawn(n_steps)
    params = ("N", "IAS")
    stats_ = {p: np.zeros((n_steps, 5)) for p in params}
    ess = np.zeros(n_steps)
    secs = np.zeros(n_steps)
    kept = []
    current = priors
    start = None
    for k in range(n_steps):
        post = koh_mcmc(current, design, obs.subset(k, k + window), chains, iterations, seeds[k], threads,
                        start=start)
        start = post.mode
        for j, p in enumerate(params):
            stats_[p][k] = summarize(post.samples[:, :, j].ravel())
        ess[k] = min(effective_sample_size(post.samples[:, :, j]) for j in range(2))
        secs[k] = post.seconds
        current = priors.centred_at(post.theta_normalized().mean(axis=0))
        if keep_posteriors:
            kept.append(post)
        if progress is not None:
            progress(f"koh window {window} step {k + 1}/{n_steps}: N={stats_['N'][k, 0]:.3f} "
                     f"IAS={stats_['IAS'][k, 0]:.3f}")
    trace = PosteriorTrace(params, stats_, ess, secs, f"koh-seq-w{window}")
    return SequentialResult(window, trace, kept)
