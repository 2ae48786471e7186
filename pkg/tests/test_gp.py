"""Tests for the Gaussian-process emulator, design sets and likelihoods."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import dense_loglik, pf_joint_covariance, two_point_gp
from twincal.data import output_times, sample_indices, toy_scenario
from twincal.errors import ConfigError, DataError, IllConditionedKernelError
from twincal.farm import FarmConfig, simulate
from twincal.gp import (
    DesignSet,
    GPEmulator,
    KernelSpec,
    Normalizer,
    build_design,
    cholesky_jitter,
    default_param_grid,
    gp_marginal_loglik,
    gp_predict,
    joint_covariance,
    read_design,
    theta_grid,
    write_design,
)


def _identity_norm() -> Normalizer:
    z, o = np.zeros(2), np.ones(2)
    return Normalizer(z, o, z, o, 0.0, 1.0)


@pytest.fixture(scope="module")
def small_design() -> DesignSet:
    sc = toy_scenario(days=2)
    ends = output_times(sc)
    times = [ends[i] for i in sample_indices(ends)]
    return build_design(default_param_grid(), sc, FarmConfig(), times)


class TestDesign:
    """Design grid construction and serialisation."""

    def test_default_grid_size(self) -> None:
        """N 1..10 step 1.5 crossed with IAS 0.1..0.85 step 0.15 gives 42 runs."""
        grid = theta_grid(default_param_grid())
        assert grid.shape == (42, 2)
        assert grid[0].tolist() == [1.0, 0.1]
        assert grid[-1].tolist() == [10.0, 0.85]

    def test_single_point(self) -> None:
        """One parameter value and one time give a design of size 1."""
        sc = toy_scenario(days=1)
        t = output_times(sc)[4]
        d = build_design({"N": [4.0], "IAS": [0.3]}, sc, FarmConfig(), [t])
        assert len(d) == 1

    def test_grid_point_reproduces_simulator(self, small_design: DesignSet) -> None:
        """A design row equals the simulator's output at that theta and time."""
        sc = toy_scenario(days=2)
        res = simulate(FarmConfig(), sc, (5.5, 0.4))
        ends = output_times(sc)
        row = np.flatnonzero(np.all(np.isclose(small_design.theta_raw, [5.5, 0.4]), axis=1))
        assert row.size == len(small_design.sample_times)
        for r in row:
            t = small_design.sample_times[small_design.time_index[r]]
            assert small_design.outputs_rh[r] == pytest.approx(res.rh[ends.index(t)], abs=1e-9)

    def test_normalised_and_standardised(self, small_design: DesignSet) -> None:
        """Inputs lie in [0, 1]; outputs have zero mean and unit variance."""
        u = small_design.inputs
        assert u.min() >= 0.0 and u.max() <= 1.0
        assert small_design.d.mean() == pytest.approx(0.0, abs=1e-12)
        assert small_design.d.std() == pytest.approx(1.0, abs=1e-12)

    def test_round_trip(self, tmp_path, small_design: DesignSet) -> None:
        """CSV plus JSON sidecar reproduce the design."""
        path = tmp_path / "design.csv"
        side = write_design(small_design, path)
        assert side.name == "design.csv.json"
        back = read_design(path)
        np.testing.assert_allclose(back.inputs, small_design.inputs, atol=1e-12)
        np.testing.assert_allclose(back.d, small_design.d, atol=1e-12)
        assert back.sample_times == small_design.sample_times
        assert path.read_text().splitlines()[0] == "x1,x2,t1,t2,output"

    def test_duplicate_rows_rejected(self) -> None:
        """Repeated (x, t) rows are invalid."""
        with pytest.raises(DataError, match="duplicate"):
            DesignSet(np.zeros((2, 2)), np.zeros((2, 2)), [0.0, 1.0], _identity_norm())

    def test_grid_out_of_bounds(self) -> None:
        """Grid values outside the parameter ranges are rejected."""
        with pytest.raises(ConfigError):
            theta_grid({"N": [0.5], "IAS": [0.3]})

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(float, (5, 2), elements=st.floats(-1e3, 1e3)))
    def test_normaliser_round_trip(self, raw: np.ndarray) -> None:
        """Normalise then denormalise is the identity to 1e-12 (relative)."""
        norm = Normalizer(np.array([0.0, 0.005]), np.array([1.0, 0.012]), np.array([1.0, 0.1]),
                          np.array([10.0, 0.85]), 75.0, 6.0)
        scale = 1.0 + np.abs(raw)
        assert np.all(np.abs(norm.x_inv(norm.x(raw)) - raw) <= 1e-12 * scale)
        assert np.all(np.abs(norm.t_inv(norm.t(raw)) - raw) <= 1e-12 * scale)
        assert np.all(np.abs(norm.y_inv(norm.y(raw[:, 0])) - raw[:, 0]) <= 1e-12 * scale[:, 0])


class TestKernelSpec:
    """Kernel specification invariants."""

    def test_invalid(self) -> None:
        """Non-positive lengthscales and tiny nuggets are rejected."""
        with pytest.raises(ConfigError):
            KernelSpec(0.0)
        with pytest.raises(ConfigError):
            KernelSpec(0.2, nugget=1e-12)

    def test_beta_round_trip(self) -> None:
        """Lengthscales and correlation weights convert both ways."""
        k = KernelSpec.from_beta([2.0, 0.5])
        np.testing.assert_allclose(k.beta, [2.0, 0.5], rtol=1e-14)


class TestJointCovariance:
    """Stacked design/observation covariance of one particle."""

    def test_oracle(self) -> None:
        """3 design + 2 observation points match the loop oracle to 1e-12."""
        rng = np.random.default_rng(3)
        d = rng.random((3, 4))
        ox = rng.random((2, 2))
        theta = rng.random(2)
        args = dict(rho=0.9, sigma2=0.003, eta_precision=1.3, bias_precision=33.3, design_nugget=1e-4)
        k = joint_covariance(d, ox, theta, 0.35, **args)
        ref = pf_joint_covariance(d, ox, theta, 0.35, **args)
        assert np.max(np.abs(k - ref)) <= 1e-12

    def test_coincident_points(self) -> None:
        """A design point coinciding with the observation gives equal entries."""
        u = np.array([[0.2, 0.4, 0.5, 0.6]])
        k = joint_covariance(u, u[:, :2], u[0, 2:], 0.3, rho=1.0, sigma2=0.0)
        assert k.shape == (2, 2)
        assert k[0, 1] == k[1, 0]
        # a singular 2x2 block picks up the smallest working jitter on the diagonal
        assert k[0, 0] - k[0, 1] <= 1e-4
        assert k[1, 1] - k[0, 0] == pytest.approx(0.0, abs=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.05, 2.0), st.floats(0.0, 0.1))
    def test_symmetric_positive_definite(self, seed: int, l: float, sigma2: float) -> None:
        """Any valid input yields a symmetric matrix with positive eigenvalues."""
        rng = np.random.default_rng(seed)
        k = joint_covariance(rng.random((6, 4)), rng.random((3, 2)), rng.random(2), l, sigma2=sigma2,
                             bias_precision=30.0, design_nugget=1e-4)
        assert np.array_equal(k, k.T)
        assert np.linalg.eigvalsh(k).min() > 0

    def test_invalid_lengthscale(self) -> None:
        """Non-positive lengthscales are a configuration error."""
        with pytest.raises(ConfigError):
            joint_covariance(np.zeros((1, 4)), np.zeros((1, 2)), [0, 0], 0.0)


class TestCholeskyJitter:
    """Bounded jitter escalation."""

    def test_no_jitter_when_pd(self) -> None:
        """A well-conditioned matrix needs no jitter."""
        _, jit = cholesky_jitter(np.eye(3))
        assert jit == 0.0

    def test_singular_gets_jitter(self) -> None:
        """A rank-one matrix is repaired with a small jitter."""
        _, jit = cholesky_jitter(np.ones((4, 4)))
        assert 1e-10 <= jit <= 1e-4

    def test_indefinite_raises(self) -> None:
        """A clearly indefinite matrix fails after the maximum jitter."""
        with pytest.raises(IllConditionedKernelError):
            cholesky_jitter(np.diag([1.0, -1.0]))


class TestMarginalLoglik:
    """Gaussian log density through Cholesky."""

    def test_standard_normal_origin(self) -> None:
        """K = I (n=2) at zero gives -log(2 pi)."""
        assert gp_marginal_loglik(np.eye(2), np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), abs=1e-15)

    def test_univariate_hand_value(self) -> None:
        """K = 4 (n=1), value 2 gives -0.5 (log 2 pi + log 4 + 1)."""
        want = -0.5 * (math.log(2 * math.pi) + math.log(4.0) + 1.0)
        assert gp_marginal_loglik(np.array([[4.0]]), [2.0]) == pytest.approx(want, abs=1e-14)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 100_000))
    def test_dense_oracle(self, n: int, seed: int) -> None:
        """Matches the explicit-inverse oracle to 1e-10 for n <= 8."""
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((n, n))
        k = a @ a.T + n * np.eye(n)
        y = rng.standard_normal(n)
        assert abs(gp_marginal_loglik(k, y) - dense_loglik(k, y)) <= 1e-10

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 100_000))
    def test_permutation_invariance(self, seed: int) -> None:
        """Consistently permuting K and values leaves the density unchanged."""
        rng = np.random.default_rng(seed)
        k = joint_covariance(rng.random((5, 4)), rng.random((2, 2)), rng.random(2), 0.3, sigma2=0.01,
                             design_nugget=1e-4)
        y = rng.standard_normal(7)
        p = rng.permutation(7)
        assert abs(gp_marginal_loglik(k, y) - gp_marginal_loglik(k[np.ix_(p, p)], y[p])) <= 1e-8

    def test_determinant_grows_with_noise(self) -> None:
        """The log-determinant term increases with the observation variance."""
        rng = np.random.default_rng(0)
        d, ox, th = rng.random((4, 4)), rng.random((2, 2)), rng.random(2)
        dets = []
        for s2 in (0.0, 0.001, 0.01, 0.1):
            _, chol = joint_covariance(d, ox, th, 0.3, sigma2=s2, design_nugget=1e-4, return_cholesky=True)
            dets.append(2.0 * np.log(np.diag(chol)).sum())
        assert np.all(np.diff(dets) > 0)

    def test_shape_mismatch(self) -> None:
        """Mismatched sizes are a configuration error."""
        with pytest.raises(ConfigError):
            gp_marginal_loglik(np.eye(3), np.zeros(2))


class TestPrediction:
    """Emulator predictions."""

    def test_two_point_closed_form(self) -> None:
        """A two-point 1-D design matches the closed-form conditional to 1e-10."""
        x = np.zeros((2, 2))
        t = np.array([[0.2, 0.5], [0.7, 0.5]])
        y = np.array([0.8, -0.3])
        design = DesignSet(x, t, y, _identity_norm())
        kernel = KernelSpec(0.4, nugget=1e-3)
        for q in (0.0, 0.35, 0.7, 1.0):
            mean, var = gp_predict(design, kernel, [[0.0, 0.0]], [[q, 0.5]])
            m_ref, v_ref = two_point_gp(0.2, 0.7, 0.8, -0.3, q, 0.4, 1e-3)
            assert abs(mean[0] - m_ref) <= 1e-10
            assert abs(var[0] - v_ref) <= 1e-10

    def test_interpolates_training_points(self, small_design: DesignSet) -> None:
        """With a tiny nugget, predictions at training inputs reproduce the outputs."""
        sub = small_design.subset(np.arange(0, len(small_design), 3))
        em = GPEmulator(sub, KernelSpec(0.3, nugget=1e-10))
        mean, var = em.predict(sub.x, sub.t)
        assert np.max(np.abs(mean - sub.outputs_rh)) <= 1e-6
        s2 = sub.norm.out_std**2
        assert np.all(var >= 0)
        assert np.all(var <= (1e-10 + 1e-6) * s2)

    def test_prior_reversion(self, small_design: DesignSet) -> None:
        """Far from the data the mean and variance revert to the prior."""
        ls = 0.05
        em = GPEmulator(small_design, KernelSpec(ls, nugget=1e-8))
        mean, var = em.predict([[0.5, 0.5 + 10 * ls]], [[0.5 + 10 * ls, 0.5]])
        norm = small_design.norm
        assert mean[0] == pytest.approx(norm.out_mean, abs=1e-6)
        assert var[0] == pytest.approx(norm.out_std**2, rel=0.01)

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(float, (4, 4), elements=st.floats(0.0, 1.0)))
    def test_variance_non_negative(self, q: np.ndarray) -> None:
        """Predictive variance is never negative."""
        design = DesignSet(np.zeros((2, 2)), np.array([[0.2, 0.5], [0.7, 0.5]]), [0.8, -0.3], _identity_norm())
        _, var = gp_predict(design, KernelSpec(0.4), q[:, :2], q[:, 2:])
        assert np.all(var >= 0)
