import csv

import numpy as np
import pytest

import swarmplan.refine as refine_mod
from swarmplan.bezier_opt import fallback_trajectory
from swarmplan.corridor import CorridorSet
from swarmplan.discrete_planner import solve_discrete
from swarmplan.opt_engine import QPInfeasibleError
from swarmplan.refine import refine_trajectories, write_report_csv
from swarmplan.scenario import GridSpec, ScenarioSpec

REPORT_FIELDS = ["iteration", "cost", "peak_accel", "peak_omega", "wall_time_s", "fallback_count"]


@pytest.fixture(scope="module")
def small():
    sc = ScenarioSpec(
        grid=GridSpec(dims=(3, 3, 1), cell_size=0.5),
        starts=[(0, 0, 0), (2, 0, 0)],
        goals=[(2, 2, 0), (0, 2, 0)],
    )
    plan = solve_discrete(sc).postprocessed()
    return sc, plan


class TestRefine:
    def test_result_traces_plan_and_validates(self, small):
        sc, plan = small
        result = refine_trajectories(plan, sc, iterations=2)
        assert result.ok
        assert len(result.trajectories) == plan.num_robots
        for i, traj in enumerate(result.trajectories):
            assert len(traj.pieces) == plan.num_segments
            assert np.linalg.norm(traj.evaluate(0.0) - plan.waypoints[i, 0]) <= 1e-5
            assert (
                np.linalg.norm(traj.evaluate(traj.duration) - plan.waypoints[i, -1])
                <= 1e-5
            )
        assert result.validation.min_pair_clearance >= 2.0 - 1e-6

    def test_rows_structure(self, small):
        sc, plan = small
        result = refine_trajectories(plan, sc, iterations=2)
        assert 1 <= len(result.rows) <= 2
        for k, row in enumerate(result.rows):
            assert set(row) == set(REPORT_FIELDS)
            assert row["iteration"] == k
            assert row["cost"] > 0
            assert row["wall_time_s"] > 0

    def test_first_round_no_worse_than_straight_lines(self, small):
        sc, plan = small
        straight_cost = sum(
            fallback_trajectory(
                plan.waypoints[i],
                [plan.dt] * plan.num_segments,
                sc.degree,
                sc.continuity,
                sc.weights,
            ).cost(sc.weights)
            for i in range(plan.num_robots)
        )
        result = refine_trajectories(plan, sc, iterations=1)
        assert result.rows[0]["cost"] <= straight_cost * (1 + 1e-9)

    def test_zero_iterations_returns_baseline(self, small):
        sc, plan = small
        result = refine_trajectories(plan, sc, iterations=0)
        assert result.ok
        assert result.rows == []
        assert result.hard_fallback == set()

    def test_relative_cost_stop(self, small):
        sc, plan = small
        result = refine_trajectories(plan, sc, iterations=10)
        assert len(result.rows) < 10
        if len(result.rows) >= 2:
            a, b = result.rows[-2]["cost"], result.rows[-1]["cost"]
            assert abs(a - b) / max(1.0, abs(a)) < 1e-3

    def test_deterministic_across_runs(self, small):
        sc, plan = small
        r1 = refine_trajectories(plan, sc, iterations=2)
        r2 = refine_trajectories(plan, sc, iterations=2)
        assert len(r1.rows) == len(r2.rows)
        for a, b in zip(r1.rows, r2.rows):
            assert a["cost"] == b["cost"]
            assert a["peak_accel"] == b["peak_accel"]
        ts = np.linspace(0, r1.trajectories[0].duration, 50)
        for t1, t2 in zip(r1.trajectories, r2.trajectories):
            assert np.array_equal(t1.evaluate_many(ts), t2.evaluate_many(ts))

    def test_log_callback_receives_messages(self, small):
        sc, plan = small
        messages = []
        refine_trajectories(plan, sc, iterations=1, log=messages.append)
        assert any("baseline" in m for m in messages)
        assert any("iteration 0" in m for m in messages)


class TestDegradation:
    def test_inseparable_pair_pinned_to_straight_lines(self, small, monkeypatch):
        sc, plan = small
        real = refine_mod.build_corridors

        def flaky(point_sets, scenario, skip_pairs=frozenset()):
            out = real(point_sets, scenario, skip_pairs)
            if (0, 1) not in skip_pairs:
                return CorridorSet(out.polyhedra, {(0, 1)}, out.failed_robots)
            return out

        monkeypatch.setattr(refine_mod, "build_corridors", flaky)
        result = refine_trajectories(plan, sc, iterations=2)
        assert result.ok
        assert result.hard_fallback == {0, 1}
        assert result.skip_pairs == {(0, 1)}
        assert all(row["fallback_count"] == 2 for row in result.rows)
        # pinned robots fly the straight-line construction exactly
        for i in range(2):
            straight = fallback_trajectory(
                plan.waypoints[i],
                [plan.dt] * plan.num_segments,
                sc.degree,
                sc.continuity,
                sc.weights,
            )
            ts = np.linspace(0, straight.duration, 30)
            assert np.allclose(
                result.trajectories[i].evaluate_many(ts),
                straight.evaluate_many(ts),
                atol=1e-12,
            )

    def test_infeasible_robot_keeps_previous_curve(self, small, monkeypatch):
        sc, plan = small

        def always_fails(*args, **kwargs):
            raise QPInfeasibleError("forced failure")

        monkeypatch.setattr(refine_mod, "optimize_trajectory", always_fails)
        messages = []
        result = refine_trajectories(plan, sc, iterations=2, log=messages.append)
        assert result.ok
        assert any("keeps previous curve" in m for m in messages)
        # nothing ever improved on the baseline
        assert all(row["fallback_count"] == plan.num_robots for row in result.rows)


class TestReportCsv:
    def test_round_trip(self, small, tmp_path):
        sc, plan = small
        result = refine_trajectories(plan, sc, iterations=2)
        path = tmp_path / "report.csv"
        write_report_csv(result.rows, path)
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == len(result.rows)
        assert list(rows[0]) == REPORT_FIELDS
        for got, want in zip(rows, result.rows):
            assert int(got["iteration"]) == want["iteration"]
            assert float(got["cost"]) == pytest.approx(want["cost"], rel=1e-12)
