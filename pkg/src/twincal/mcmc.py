"""Adaptive random-walk Metropolis and chain diagnostics.

The sampler works on an unconstrained vector ``z``; callers map bounded
parameters through log/logit transforms and include the Jacobian in the
target.  During burn-in the proposal covariance is re-estimated from the
chain so far and a global scale is tuned towards a target acceptance
rate; both are frozen once burn-in ends, so the retained half of the
chain is a plain Metropolis chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericalError

TARGET_ACCEPTANCE = 0.25
ADAPT_EVERY = 25
RHAT_WARN = 1.1


@dataclass
class ChainResult:
    """One chain: every state visited (including burn-in) and its bookkeeping."""

    z: np.ndarray  # (iterations, dim)
    logp: np.ndarray  # (iterations,)
    burn_in: int
    accepted_post: int
    proposal_scales: np.ndarray  # per-parameter proposal std after adaptation

    @property
    def kept(self) -> np.ndarray:
        return self.z[self.burn_in:]

    @property
    def acceptance_rate(self) -> float:
        n = self.z.shape[0] - self.burn_in
        return self.accepted_post / n if n else float("nan")


def rw_metropolis(logpdf: Callable[[np.ndarray], float], z0: np.ndarray, iterations: int,
                  rng: np.random.Generator, burn_in: int | None = None,
                  initial_cov: np.ndarray | None = None) -> ChainResult:
    """Block random-walk Metropolis with burn-in-only adaptation.

    ``logpdf`` may return ``-inf`` to reject a proposal outright.
    ``burn_in`` defaults to half of ``iterations``.  ``initial_cov`` is the
    starting proposal shape (default ``0.01 I``), rescaled by
    ``2.38^2 / dim``.
    """
    z = np.array(z0, dtype=float)
    dim = z.size
    if iterations < 2:
        raise ConfigError("need at least 2 iterations")
    if burn_in is None:
        burn_in = iterations // 2
    if not 0 <= burn_in < iterations:
        raise ConfigError("burn-in must lie in [0, iterations)")
    lp = float(logpdf(z))
    if not math.isfinite(lp):
        raise NumericalError("non-finite log density at the initial state; retry with another prior draw")
    chol = 0.1 * np.eye(dim)
    if initial_cov is not None:
        try:
            chol = np.linalg.cholesky(np.asarray(initial_cov, dtype=float) + 1e-10 * np.eye(dim))
        except np.linalg.LinAlgError:
            raise ConfigError("initial proposal covariance is not positive definite") from None
    log_s = math.log(2.38 / math.sqrt(dim))
    out = np.empty((iterations, dim))
    out_lp = np.empty(iterations)
    acc_window = 0
    accepted_post = 0
    for it in range(iterations):
        prop = z + math.exp(log_s) * (chol @ rng.standard_normal(dim))
        lp_prop = float(logpdf(prop))
        accept = math.isfinite(lp_prop) and math.log(rng.random()) < lp_prop - lp
        if accept:
            z, lp = prop, lp_prop
            if it >= burn_in:
                accepted_post += 1
            else:
                acc_window += 1
        out[it] = z
        out_lp[it] = lp
        if it < burn_in and (it + 1) % ADAPT_EVERY == 0:
            rate = acc_window / ADAPT_EVERY
            acc_window = 0
            step = 1.0 / math.sqrt((it + 1) / ADAPT_EVERY)
            log_s += step * (rate - TARGET_ACCEPTANCE) * 2.0
            if it + 1 >= 4 * ADAPT_EVERY:
                hist = out[(it + 1) // 2:it + 1]
                cov = np.cov(hist, rowvar=False).reshape(dim, dim) + 1e-8 * np.eye(dim)
                try:
                    chol = np.linalg.cholesky(cov)
                except np.linalg.LinAlgError:
                    pass
    scales_out = math.exp(log_s) * np.sqrt(np.sum(chol * chol, axis=1))
    return ChainResult(out, out_lp, burn_in, accepted_post, scales_out)


def split_rhat(chains: np.ndarray) -> float:
    """Split-chain potential scale reduction for draws of shape (chains, n)."""
    chains = np.asarray(chains, dtype=float)
    m, n = chains.shape
    half = n // 2
    if half < 2:
        return float("nan")
    parts = np.concatenate([chains[:, :half], chains[:, n - half:]], axis=0)
    w = parts.var(axis=1, ddof=1).mean()
    b = half * parts.mean(axis=1).var(ddof=1)
    if w <= 0:
        return 1.0 if b <= 0 else float("inf")
    var_plus = (half - 1) / half * w + b / half
    return float(math.sqrt(var_plus / w))


def effective_sample_size(chains: np.ndarray) -> float:
    """Pooled ESS from autocorrelations, truncated at the first negative pair sum."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    m, n = chains.shape
    if n < 4:
        return float(m * n)
    centred = chains - chains.mean(axis=1, keepdims=True)
    var = centred.var(axis=1).mean()
    if var <= 0:
        return float(m * n)
    acf = np.zeros(n)
    for c in centred:
        f = np.fft.rfft(c, 2 * n)
        acf += np.fft.irfft(f * np.conj(f))[:n] / n
    acf /= m * var
    tau = 1.0
    for k in range(1, n - 1, 2):
        pair = acf[k] + acf[k + 1]
        if pair < 0:
            break
        tau += 2.0 * pair
    return float(m * n / tau)
