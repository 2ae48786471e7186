"""Tests for Morris elementary-effects screening."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twincal.errors import ConfigError, NumericalError
from twincal.farm import PARAMETER_BOUNDS
from twincal.sensitivity import (
    elementary_effects,
    evaluate,
    morris_trajectories,
    write_plot_data,
    write_summary,
)


class TestTrajectories:
    """Morris sampling design."""

    def test_eighty_moves(self) -> None:
        """r = 10 over the 8 parameters gives 80 elementary effects."""
        design = morris_trajectories(PARAMETER_BOUNDS, r=10, p=4, seed=0)
        assert design.n_moves == 80
        assert design.unit.shape == (10, 9, 8)
        assert design.delta == pytest.approx(2.0 / 3.0)

    def test_one_coordinate_per_move(self) -> None:
        """Consecutive points differ in exactly one coordinate, by delta."""
        design = morris_trajectories(PARAMETER_BOUNDS, r=10, p=4, seed=5)
        diff = np.diff(design.unit, axis=1)
        moved = np.abs(diff) > 1e-12
        assert np.all(moved.sum(axis=2) == 1)
        np.testing.assert_allclose(np.abs(diff[moved]), design.delta, atol=1e-12)
        # every factor moves once per trajectory
        assert np.all(np.sort(design.order, axis=1) == np.arange(8))

    def test_within_bounds(self) -> None:
        """Every physical design point respects the parameter ranges."""
        design = morris_trajectories(PARAMETER_BOUNDS, r=20, p=4, seed=1)
        pts = design.points
        assert np.all(pts >= design.lower) and np.all(pts <= design.upper)

    def test_seeded(self) -> None:
        """A fixed seed gives an identical design."""
        a = morris_trajectories(seed=9)
        b = morris_trajectories(seed=9)
        np.testing.assert_array_equal(a.unit, b.unit)

    def test_degenerate_bounds(self) -> None:
        """Equal lower and upper bounds are rejected."""
        with pytest.raises(ConfigError, match="degenerate"):
            morris_trajectories({"a": (1.0, 1.0), "b": (0.0, 1.0)})
        with pytest.raises(ConfigError):
            morris_trajectories(r=0)


class TestElementaryEffects:
    """EE computation and summaries."""

    def test_linear_model_exact(self) -> None:
        """f = 2 x_i gives EE 2 for i, 0 elsewhere, std 0, to 1e-12."""
        bounds = {f"p{i}": (0.0, 1.0) for i in range(5)}
        design = morris_trajectories(bounds, r=12, p=4, seed=2)
        out = evaluate(design, lambda pts: 2.0 * pts[:, 3])
        s = elementary_effects(design, out)
        assert np.max(np.abs(s.effects[:, 3] - 2.0)) <= 1e-12
        assert np.max(np.abs(np.delete(s.effects, 3, axis=1))) <= 1e-12
        assert s.std[3] <= 1e-12
        assert s.abs_median[0] == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-5.0, 5.0), min_size=4, max_size=4), st.integers(0, 1000))
    def test_additive_linear_constant(self, coef: list, seed: int) -> None:
        """EEs of an additive-linear model are constant across trajectories."""
        bounds = {f"p{i}": (0.0, 1.0) for i in range(4)}
        design = morris_trajectories(bounds, r=6, p=4, seed=seed)
        out = evaluate(design, lambda pts: pts @ np.array(coef))
        s = elementary_effects(design, out)
        np.testing.assert_allclose(s.effects, np.tile(coef, (6, 1)), atol=1e-12)

    def test_ignored_parameter(self) -> None:
        """A parameter the model ignores has zero median and std."""
        bounds = {"a": (0.0, 2.0), "b": (10.0, 20.0)}
        design = morris_trajectories(bounds, r=8, seed=4)
        s = elementary_effects(design, evaluate(design, lambda pts: np.sin(pts[:, 0])))
        assert s.abs_median[1] == 0.0 and s.std[1] == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.floats(1e-3, 1e3), st.integers(0, 1000))
    def test_ranking_scale_invariant(self, scale: float, seed: int) -> None:
        """A positive rescaling of the metric leaves the ranking unchanged."""
        bounds = {f"p{i}": (0.0, 1.0) for i in range(4)}
        design = morris_trajectories(bounds, r=8, seed=seed)

        def model(pts):
            return pts[:, 0] ** 2 + 3 * pts[:, 1] * pts[:, 2] + np.exp(pts[:, 3])

        out = evaluate(design, model)
        assert elementary_effects(design, out).ranking() == elementary_effects(design, scale * out).ranking()

    def test_non_finite_output_located(self) -> None:
        """A failed evaluation names its trajectory and point."""
        design = morris_trajectories({"a": (0.0, 1.0), "b": (0.0, 1.0)}, r=3, seed=0)
        out = np.ones((3, 3))
        out[1, 2] = np.nan
        with pytest.raises(NumericalError, match="trajectory 1, point 2"):
            elementary_effects(design, out)

    def test_csv_outputs(self, tmp_path) -> None:
        """Summary and plot-data CSVs have the documented columns."""
        design = morris_trajectories({"a": (0.0, 1.0), "b": (0.0, 1.0)}, r=3, seed=0)
        s = elementary_effects(design, evaluate(design, lambda p: p[:, 0]), "rh")
        write_summary({"rh": s}, tmp_path / "s.csv")
        write_plot_data({"rh": s}, tmp_path / "p.csv")
        assert (tmp_path / "s.csv").read_text().splitlines()[0] == "param,metric,abs_median_ee,std_ee"
        assert len((tmp_path / "p.csv").read_text().splitlines()) == 3
