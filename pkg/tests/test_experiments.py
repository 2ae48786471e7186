"""Tests for the toy-problem helpers and the run-time benchmark."""

from __future__ import annotations

import csv

import numpy as np
import pytest

from twincal.errors import ConfigError
from twincal.experiments import (
    BENCH_COLUMNS,
    BenchRow,
    ToyProblem,
    point_estimates,
    posterior_rmse,
    run_benchmark,
    run_method,
    schedule_scenario,
    transition_width,
    write_benchmark,
)
from twincal.pf import PosteriorTrace


def _trace(mean_n) -> PosteriorTrace:
    mean_n = np.asarray(mean_n, dtype=float)
    n = mean_n.size
    stats = {"N": np.column_stack([mean_n] + [np.zeros(n)] * 4),
             "IAS": np.column_stack([np.full(n, 0.3)] + [np.zeros(n)] * 4)}
    return PosteriorTrace(("N", "IAS"), stats, np.ones(n), np.zeros(n))


class TestPointEstimates:
    """Mapping per-step posteriors onto observation points."""

    def test_filter_is_identity(self) -> None:
        """With window 1 every step maps to its own point."""
        est = point_estimates(_trace([4.0, 3.0, 2.0]), 3)
        np.testing.assert_array_equal(est[:, 0], [4.0, 3.0, 2.0])

    def test_window_pads_head(self) -> None:
        """Points before the first window end reuse the first step."""
        est = point_estimates(_trace([4.0, 3.0]), 5, window=4)
        np.testing.assert_array_equal(est[:, 0], [4.0, 4.0, 4.0, 4.0, 3.0])
        np.testing.assert_array_equal(est[:, 1], [0.3] * 5)

    def test_step_mismatch(self) -> None:
        """A trace of the wrong length is rejected."""
        with pytest.raises(ConfigError):
            point_estimates(_trace([4.0, 3.0]), 5, window=2)


class TestTransitionWidth:
    """Steps needed to move from the old to the new value."""

    def test_sharp(self) -> None:
        """An immediate jump has width 1."""
        assert transition_width([4.0, 4.1, 2.0, 2.1]) == 1.0

    def test_gradual(self) -> None:
        """Intermediate values lengthen the transition."""
        assert transition_width([4.0, 3.9, 3.0, 2.7, 2.2, 2.0]) == 3.0

    def test_late_outlier_counts(self) -> None:
        """Returning near the old value restarts the count."""
        assert transition_width([4.0, 2.0, 4.2, 3.0, 2.0]) == 2.0

    def test_never(self) -> None:
        """Missing either regime gives inf."""
        assert transition_width([3.0, 3.0]) == float("inf")
        assert transition_width([4.0, 3.0]) == float("inf")


class TestScheduleScenario:
    """Piecewise-constant parameter schedules."""

    def test_hours_follow_points(self, toy: ToyProblem) -> None:
        """Hours up to a point use its value; later hours use the next one."""
        times = toy.observations.timestamps
        theta = np.column_stack([np.arange(len(times), dtype=float) + 1.0, np.full(len(times), 0.3)])
        sc = schedule_scenario(toy.scenario, times, theta)
        n = sc.vent_ach
        # the first point closes hour index 3 of the horizon (04:00)
        assert n[0] == 1.0 and n[3] == 1.0 and n[4] == 2.0
        assert n[-1] == float(len(times))

    def test_truth_reproduces_data(self, toy: ToyProblem) -> None:
        """Re-simulating the true schedule gives zero RMSE."""
        assert posterior_rmse(toy, toy.observations.theta) == pytest.approx(0.0, abs=1e-9)

    def test_wrong_parameters_give_error(self, toy: ToyProblem) -> None:
        """A constant N of 4 misses the second period."""
        est = np.tile([4.0, 0.3], (len(toy.observations), 1))
        assert posterior_rmse(toy, est) > 0.5


class TestBenchmark:
    """Run-time table and timing behaviour."""

    def test_csv_shape(self, tmp_path) -> None:
        """The benchmark CSV has the fixed header and one row per method run."""
        rows = [BenchRow("pf-1000", 0, 40, 40, 0.01, 0.4), BenchRow("koh-seq-4", 0, 37, 4, 1.0, 37.0)]
        path = tmp_path / "bench.csv"
        write_benchmark(rows, path)
        with open(path, newline="", encoding="utf-8") as fh:
            got = list(csv.reader(fh))
        assert tuple(got[0]) == BENCH_COLUMNS
        assert len(got) == 3 and got[2][0] == "koh-seq-4"

    def test_unknown_method(self, toy: ToyProblem) -> None:
        """Unknown methods are configuration errors."""
        with pytest.raises(ConfigError):
            run_method(toy, "ekf-10")

    def test_run_benchmark_rows(self, toy: ToyProblem) -> None:
        """Each repetition yields one row per method with consistent totals."""
        rows = run_benchmark(toy, ["pf-1000"], repetitions=2)
        assert [r.repetition for r in rows] == [0, 1]
        for r in rows:
            assert r.steps == 40
            assert r.seconds_per_step == pytest.approx(r.total_seconds / 40)

    def test_pf_step_time_flat(self, toy: ToyProblem) -> None:
        """PF per-step time stays within a factor of 3 across steps."""
        res, *_ = run_method(toy, "pf-1000", seed=0)
        secs = res.step_seconds
        assert secs.max() / secs.min() < 3.0

    def test_pf_time_scales_with_particles(self, toy: ToyProblem) -> None:
        """Doubling the particle count multiplies the total time by at least 1.5."""
        run_method(toy, "pf-1000", seed=0)
        t1 = min(run_method(toy, "pf-1000", seed=s)[3] for s in range(2))
        t2 = min(run_method(toy, "pf-2000", seed=s)[3] for s in range(2))
        assert t2 / t1 >= 1.5
