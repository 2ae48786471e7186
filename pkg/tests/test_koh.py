"""Tests for Kennedy-O'Hagan calibration."""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from oracles import dense_loglik, koh_covariance
from twincal.errors import ConfigError, DomainError
from twincal.experiments import ToyProblem
from twincal.koh import (
    BIAS_COLUMNS,
    PARAM_NAMES,
    SAMPLE_COLUMNS,
    UNIFORM_SD,
    KohChainState,
    KohHyperPriors,
    KohLikelihood,
    KohPosterior,
    extract_bias,
    from_unconstrained,
    koh_log_posterior,
    koh_mcmc,
    koh_sequential,
    to_unconstrained,
)


def _params(theta=(0.4, 0.6)) -> dict:
    return {"theta": np.array(theta), "lambda_eta": 1.3, "lambda_b": 25.0, "lambda_e": 300.0,
            "lambda_en": 5000.0, "rho_eta": np.array([0.8, 0.6, 0.7, 0.9]), "rho_b": np.array([0.5, 0.7])}


def _tiny_likelihood(toy: ToyProblem, n_design: int = 2, n_obs: int = 1) -> KohLikelihood:
    design = toy.design
    rows = design.rows_at([0])[:n_design]
    obs = toy.observations
    return KohLikelihood(design, design.norm.x(obs.x[:n_obs]), design.norm.y(obs.rh[:n_obs]), rows)


@pytest.fixture(scope="module")
def short_posterior(toy: ToyProblem) -> KohPosterior:
    return koh_mcmc(KohHyperPriors(), toy.design, toy.observations.subset(0, 4), chains=2, iterations=300,
                    seed=5)


class TestPriors:
    """Hyperparameter priors."""

    def test_defaults(self) -> None:
        """Default priors carry the documented Gamma and Beta parameters."""
        p = KohHyperPriors()
        assert p.lambda_b == (10.0, 0.3)
        assert p.lambda_en == (10.0, 0.001)
        assert p.rho_eta == (1.0, 0.5) and p.rho_b == (1.0, 0.4)

    def test_matches_scipy(self) -> None:
        """The log prior equals an independent sum of scipy densities."""
        pr = KohHyperPriors()
        p = _params()
        want = sum(stats.gamma.logpdf(p[n], 10.0, scale=1.0 / r)
                   for n, r in (("lambda_eta", 10.0), ("lambda_b", 0.3), ("lambda_e", 0.03), ("lambda_en", 0.001)))
        want += stats.beta.logpdf(p["rho_eta"], 1.0, 0.5).sum() + stats.beta.logpdf(p["rho_b"], 1.0, 0.4).sum()
        assert pr.log_prior(p) == pytest.approx(want, rel=1e-12)

    def test_truncated_normal_theta(self) -> None:
        """The centred theta prior is a normal truncated to [0, 1] with the initial sd."""
        pr = KohHyperPriors().centred_at([0.3, 0.8])
        assert pr.theta_sd == (UNIFORM_SD, UNIFORM_SD)
        p = _params((0.25, 0.9))
        base = KohHyperPriors().log_prior(p)
        want = 0.0
        for x, m in zip((0.25, 0.9), (0.3, 0.8)):
            a, b = (0.0 - m) / UNIFORM_SD, (1.0 - m) / UNIFORM_SD
            want += stats.truncnorm.logpdf(x, a, b, loc=m, scale=UNIFORM_SD)
        assert pr.log_prior(p) - base == pytest.approx(want, rel=1e-10)

    def test_support(self) -> None:
        """Out-of-support values have zero prior density."""
        pr = KohHyperPriors()
        assert pr.log_prior(_params((1.2, 0.5))) == -math.inf
        bad = _params()
        bad["rho_b"] = np.array([0.5, 1.0])
        assert pr.log_prior(bad) == -math.inf

    def test_invalid(self) -> None:
        """Non-positive prior parameters are rejected."""
        with pytest.raises(ConfigError):
            KohHyperPriors(lambda_e=(10.0, 0.0))

    def test_transform_round_trip(self) -> None:
        """Unconstrained coordinates map back to the same parameters."""
        p = _params()
        back = from_unconstrained(to_unconstrained(p))
        for k, v in p.items():
            np.testing.assert_allclose(back[k], v, rtol=1e-12)

    def test_chain_state_round_trip(self) -> None:
        """Chain states convert to and from parameter dicts."""
        st = KohChainState.from_dict(_params(), chain_id=2)
        assert st.chain_id == 2
        np.testing.assert_array_equal(st.as_dict()["rho_eta"], _params()["rho_eta"])


class TestLikelihood:
    """Stacked covariance and log density."""

    def test_covariance_oracle(self, toy: ToyProblem) -> None:
        """Two design points and one observation match the loop oracle to 1e-10."""
        lik = _tiny_likelihood(toy)
        p = _params()
        ref = koh_covariance(lik.d_inputs, lik.obs_x, p)
        assert np.max(np.abs(lik.covariance(p) - ref)) <= 1e-10
        assert abs(lik(p) - dense_loglik(ref, lik.values)) <= 1e-10

    def test_larger_oracle(self, toy: ToyProblem) -> None:
        """Six design rows and three observations also match."""
        design = toy.design
        rows = design.rows_at([0, 1, 2])[::21]
        obs = toy.observations
        lik = KohLikelihood(design, design.norm.x(obs.x[:3]), design.norm.y(obs.rh[:3]), rows)
        p = _params((0.1, 0.95))
        ref = koh_covariance(lik.d_inputs, lik.obs_x, p)
        assert np.max(np.abs(lik.covariance(p) - ref)) <= 1e-12
        assert abs(lik(p) - dense_loglik(ref, lik.values)) <= 1e-10

    def test_additive_prior_shift(self, toy: ToyProblem) -> None:
        """A constant added to the prior log density shifts the posterior by exactly that."""
        lik = _tiny_likelihood(toy)
        pr = KohHyperPriors()

        class Shifted:
            def log_prior(self, p):
                return pr.log_prior(p) + 3.25

        p = _params()
        assert koh_log_posterior(p, lik, Shifted()) - koh_log_posterior(p, lik, pr) == 3.25

    def test_outside_support_sentinel(self, toy: ToyProblem) -> None:
        """theta outside [0, 1] gives the -inf sentinel."""
        lik = _tiny_likelihood(toy)
        assert koh_log_posterior(_params((-0.1, 0.5)), lik, KohHyperPriors()) == -math.inf

    def test_unusable_covariance_is_rejected(self, toy: ToyProblem) -> None:
        """A covariance that cannot be factorised yields -inf rather than an exception."""
        lik = _tiny_likelihood(toy)
        p = _params()
        p["rho_eta"] = np.array([np.nan, 0.5, 0.5, 0.5])
        assert lik(p) == -math.inf

    def test_accepts_chain_state(self, toy: ToyProblem) -> None:
        """Chain states and dicts give the same log posterior."""
        lik = _tiny_likelihood(toy)
        p = _params()
        pr = KohHyperPriors()
        assert koh_log_posterior(KohChainState.from_dict(p), lik, pr) == koh_log_posterior(p, lik, pr)


class TestMcmc:
    """Short static calibrations."""

    def test_shapes_and_support(self, short_posterior: KohPosterior) -> None:
        """Samples have chains x kept x params shape and respect the support."""
        s = short_posterior.samples
        assert s.shape == (2, 150, len(PARAM_NAMES))
        assert np.all((s[:, :, 0] >= 1.0) & (s[:, :, 0] <= 10.0))
        assert np.all((s[:, :, 1] >= 0.1) & (s[:, :, 1] <= 0.85))
        assert np.all(s[:, :, 2:6] > 0)
        assert np.all((s[:, :, 6:] > 0) & (s[:, :, 6:] < 1))
        assert set(short_posterior.rhat) == set(PARAM_NAMES)

    def test_chain_permutation(self, short_posterior: KohPosterior) -> None:
        """Pooled summaries do not depend on chain order."""
        s = short_posterior.samples
        a = np.sort(s.reshape(-1, s.shape[-1]), axis=0)
        b = np.sort(s[::-1].reshape(-1, s.shape[-1]), axis=0)
        np.testing.assert_array_equal(a, b)

    def test_thread_invariance(self, toy: ToyProblem, short_posterior: KohPosterior) -> None:
        """Running chains on two threads gives bit-identical draws."""
        again = koh_mcmc(KohHyperPriors(), toy.design, toy.observations.subset(0, 4), chains=2,
                         iterations=300, seed=5, threads=2)
        np.testing.assert_array_equal(again.samples, short_posterior.samples)

    def test_needs_two_points(self, toy: ToyProblem) -> None:
        """A single observation cannot be calibrated."""
        with pytest.raises(ConfigError, match="at least 2"):
            koh_mcmc(KohHyperPriors(), toy.design, toy.observations.subset(0, 1), iterations=10)

    def test_samples_csv(self, tmp_path, short_posterior: KohPosterior) -> None:
        """The samples CSV is long-format with one row per draw and parameter."""
        path = tmp_path / "s.csv"
        short_posterior.write_samples(path)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(SAMPLE_COLUMNS)
        assert len(lines) == 1 + 2 * 150 * len(PARAM_NAMES)


class TestBias:
    """Discrepancy extraction."""

    def test_bands_contain_mean(self, toy: ToyProblem, short_posterior: KohPosterior) -> None:
        """Quantile bands bracket the mean at every query point."""
        b = extract_bias(short_posterior, toy.design, toy.observations.subset(0, 4), max_draws=40)
        assert np.all(b.q05 <= b.mean) and np.all(b.mean <= b.q95)
        assert set(np.unique(b.query[:, 0])) == {0.0, 1.0}

    def test_large_precision_suppresses_bias(self, toy: ToyProblem, short_posterior: KohPosterior) -> None:
        """A huge lambda_b forces the bias mean towards zero."""
        z = [c.copy() for c in short_posterior.chains_z]
        for c in z:
            c[:, 3] = math.log(1e12)
        stiff = KohPosterior(short_posterior.names, short_posterior.samples, short_posterior.acceptance,
                             short_posterior.rhat, 0.0, short_posterior.norm, z)
        b = extract_bias(stiff, toy.design, toy.observations.subset(0, 4), max_draws=20)
        assert np.max(np.abs(b.mean)) < 1e-6

    def test_query_domain(self, toy: ToyProblem, short_posterior: KohPosterior) -> None:
        """Queries outside the normalised range are rejected."""
        with pytest.raises(DomainError):
            extract_bias(short_posterior, toy.design, toy.observations.subset(0, 4), [[0.0, 1.5]])

    def test_csv(self, tmp_path, toy: ToyProblem, short_posterior: KohPosterior) -> None:
        """The bias CSV has the documented header."""
        b = extract_bias(short_posterior, toy.design, toy.observations.subset(0, 4), max_draws=10)
        b.write_csv(tmp_path / "b.csv")
        assert (tmp_path / "b.csv").read_text().splitlines()[0] == ",".join(BIAS_COLUMNS)


class TestSequential:
    """Sliding-window calibration."""

    @pytest.mark.parametrize("window, steps", [(2, 5), (4, 3)])
    def test_step_count(self, toy: ToyProblem, window: int, steps: int) -> None:
        """n points with window w give n - w + 1 steps."""
        res = koh_sequential(KohHyperPriors(), toy.design, toy.observations.subset(0, 6), window, seed=1,
                             chains=1, iterations=20, keep_posteriors=True)
        assert res.steps == steps
        assert len(res.posteriors) == steps
        assert res.trace.method == f"koh-seq-w{window}"
        assert np.all(res.trace.step_seconds > 0)

    def test_window_too_small(self, toy: ToyProblem) -> None:
        """Windows below two points are rejected."""
        with pytest.raises(ConfigError):
            koh_sequential(KohHyperPriors(), toy.design, toy.observations, window=1)
