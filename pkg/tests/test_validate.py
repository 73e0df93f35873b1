"""Validation layer tests.

The dynamics oracle is a curve whose speed, acceleration, and body rate
are short closed-form expressions; random curves are cross-checked with
finite-difference derivatives so the expected peaks never come from the
evaluation code under test.
"""

import numpy as np
import pytest

from swarmplan.bezier_opt import (
    BezierPiece,
    PiecewiseBezierTrajectory,
    bernstein_to_monomial,
    fallback_trajectory,
)
from swarmplan.scenario import GridSpec, ScenarioSpec
from swarmplan.validate import (
    ValidationReport,
    dynamics_metrics,
    obstacle_clearance_profile,
    pairwise_clearance_profile,
    sample_positions,
    smoothness_report,
    validate_trajectories,
    workspace_violation,
)

WEIGHTS = (0.0, 1.0, 0.0, 1.0)


def scenario(**overrides):
    kwargs = dict(
        grid=GridSpec(dims=(4, 4, 1), cell_size=0.5),
        starts=[(0, 0, 0), (0, 3, 0)],
        goals=[(3, 0, 0), (3, 3, 0)],
    )
    kwargs.update(overrides)
    return ScenarioSpec(**kwargs)


def monomial_piece(coeffs, duration):
    """Bezier piece matching given per-axis monomial coefficients."""
    coeffs = np.asarray(coeffs, dtype=float)  # (degree + 1, 3)
    degree = coeffs.shape[0] - 1
    basis = bernstein_to_monomial(degree, duration)
    return BezierPiece(duration, np.linalg.solve(basis, coeffs))


def static_trajectory(point, duration=1.0, degree=5):
    pts = np.tile(np.asarray(point, dtype=float), (degree + 1, 1))
    return PiecewiseBezierTrajectory([BezierPiece(duration, pts)])


class TestSampling:
    def test_sample_positions_grid(self):
        trajs = [static_trajectory([0.5, 0.5, 0.0], duration=2.0)]
        ts, pos = sample_positions(trajs, sample_dt=0.5)
        assert np.allclose(ts, [0.0, 0.5, 1.0, 1.5, 2.0])
        assert pos.shape == (1, 5, 3)
        assert np.allclose(pos[0], [0.5, 0.5, 0.0])


class TestClearanceProfiles:
    def test_pairwise_profile_analytic(self):
        trajs = [
            static_trajectory([0.0, 0.0, 0.0]),
            static_trajectory([0.5, 0.0, 0.0]),
        ]
        _, pos = sample_positions(trajs, sample_dt=0.1)
        prof = pairwise_clearance_profile(pos, scenario().robot_ellipsoid)
        assert np.allclose(prof, 0.5 / 0.12)

    def test_single_robot_is_unbounded(self):
        _, pos = sample_positions([static_trajectory([0, 0, 0])], sample_dt=0.1)
        prof = pairwise_clearance_profile(pos, scenario().robot_ellipsoid)
        assert np.all(np.isinf(prof))

    def test_obstacle_profile_analytic(self):
        sc = scenario(obstacles=[(1, 1, 0)])
        # box spans [0.25, 0.75] in x and y; the robot hovers 0.25 past it
        trajs = [static_trajectory([1.0, 0.5, 0.0])]
        _, pos = sample_positions(trajs, sample_dt=0.1)
        prof = obstacle_clearance_profile(pos, sc)
        assert np.allclose(prof, 0.25 / 0.15)

    def test_obstacle_profile_inside_box_is_zero(self):
        sc = scenario(obstacles=[(1, 1, 0)])
        trajs = [static_trajectory([0.5, 0.5, 0.0])]
        _, pos = sample_positions(trajs, sample_dt=0.1)
        assert obstacle_clearance_profile(pos, sc).min() == 0.0

    def test_no_obstacles_unbounded(self):
        _, pos = sample_positions([static_trajectory([0, 0, 0])], sample_dt=0.1)
        assert np.all(np.isinf(obstacle_clearance_profile(pos, scenario())))

    def test_workspace_violation_sign(self):
        sc = scenario()
        inside = np.array([[[0.5, 0.5, 0.0]]])
        assert workspace_violation(inside, sc) < 0
        outside = np.array([[[2.0, 0.5, 0.0]]])
        assert workspace_violation(outside, sc) == pytest.approx(2.0 - 1.75)


class TestDynamicsMetrics:
    def test_hover_under_gravity(self):
        peaks = dynamics_metrics([static_trajectory([0, 0, 0])])
        assert peaks["speed"] == pytest.approx(0.0, abs=1e-12)
        assert peaks["accel"] == pytest.approx(0.0, abs=1e-12)
        assert peaks["thrust"] == pytest.approx(9.81)
        assert peaks["omega"] == pytest.approx(0.0, abs=1e-9)

    def test_polynomial_curve_closed_form(self):
        # p(t) = (A t^2, B t^3, 0): with zero gravity the peak body rate
        # is 3B/A at t = 0 and the peak speed and acceleration sit at t = T
        A, B, T = 0.8, 0.3, 1.0
        coeffs = np.zeros((4, 3))
        coeffs[2, 0] = A
        coeffs[3, 1] = B
        traj = PiecewiseBezierTrajectory([monomial_piece(coeffs, T)])
        peaks = dynamics_metrics([traj], sample_dt=1e-4, gravity=0.0)
        assert peaks["speed"] == pytest.approx(
            np.hypot(2 * A * T, 3 * B * T**2), rel=1e-6
        )
        assert peaks["accel"] == pytest.approx(
            np.hypot(2 * A, 6 * B * T), rel=1e-6
        )
        assert peaks["thrust"] == pytest.approx(peaks["accel"], rel=1e-12)
        assert peaks["omega"] == pytest.approx(3 * B / A, rel=1e-4)

    def test_constant_velocity_line(self):
        v = np.array([0.3, -0.2, 0.1])
        coeffs = np.zeros((2, 3))
        coeffs[1] = v
        traj = PiecewiseBezierTrajectory([monomial_piece(coeffs, 2.0)])
        peaks = dynamics_metrics([traj], gravity=9.81)
        assert peaks["speed"] == pytest.approx(np.linalg.norm(v), rel=1e-12)
        assert peaks["accel"] == pytest.approx(0.0, abs=1e-10)
        assert peaks["thrust"] == pytest.approx(9.81, rel=1e-10)
        assert peaks["omega"] == pytest.approx(0.0, abs=1e-9)

    def test_matches_finite_difference_reimplementation(self):
        rng = np.random.default_rng(5)
        traj = PiecewiseBezierTrajectory([BezierPiece(2.0, rng.normal(size=(10, 3)))])
        peaks = dynamics_metrics([traj], sample_dt=0.01, gravity=0.0)

        ts = np.linspace(0.0, traj.duration, 201)
        h = 1e-5
        # the raw piece extrapolates smoothly, so endpoint stencils are fine
        pos = lambda t: traj.pieces[0].evaluate_many(np.atleast_1d(t))
        speed = accel = omega = 0.0
        for t in ts:
            v = (pos(t + h) - pos(t - h))[0] / (2 * h)
            a = (pos(t + h) - 2 * pos(t) + pos(t - h))[0] / h**2
            j = (pos(t + 2 * h) - 2 * pos(t + h) + 2 * pos(t - h) - pos(t - 2 * h))[
                0
            ] / (2 * h**3)
            f = np.linalg.norm(a)
            if f > 1e-9:
                unit = a / f
                j_perp = j - (j @ unit) * unit
                omega = max(omega, np.linalg.norm(j_perp) / f)
            speed = max(speed, np.linalg.norm(v))
            accel = max(accel, f)
        assert peaks["speed"] == pytest.approx(speed, rel=1e-3)
        assert peaks["accel"] == pytest.approx(accel, rel=1e-3)
        assert peaks["omega"] == pytest.approx(omega, rel=1e-2)

    def test_time_dilation_laws_without_gravity(self):
        rng = np.random.default_rng(6)
        pts = rng.normal(size=(10, 3))
        traj = PiecewiseBezierTrajectory([BezierPiece(1.0, pts)])
        s = 2.0
        slow = traj.scaled(s)
        base = dynamics_metrics([traj], sample_dt=0.01, gravity=0.0)
        scaled = dynamics_metrics([slow], sample_dt=s * 0.01, gravity=0.0)
        assert scaled["speed"] == pytest.approx(base["speed"] / s, rel=1e-6)
        assert scaled["accel"] == pytest.approx(base["accel"] / s**2, rel=1e-6)
        assert scaled["omega"] == pytest.approx(base["omega"] / s, rel=1e-6)

    def test_gravity_breaks_omega_scaling(self):
        rng = np.random.default_rng(7)
        pts = rng.normal(size=(10, 3))
        traj = PiecewiseBezierTrajectory([BezierPiece(1.0, pts)])
        base = dynamics_metrics([traj], sample_dt=0.01)
        scaled = dynamics_metrics([traj.scaled(2.0)], sample_dt=0.02)
        # the hover term does not dilate, so the ratio is not 1/2
        assert scaled["omega"] != pytest.approx(base["omega"] / 2.0, rel=1e-3)


class TestSmoothnessReport:
    def make_smooth(self):
        wp = np.array([[0, 0, 0], [0.5, 0, 0], [0.5, 0.5, 0]], dtype=float)
        return fallback_trajectory(wp, [0.5, 0.5], degree=9, continuity=4, weights=WEIGHTS)

    def test_clean_trajectory_passes(self):
        assert smoothness_report([self.make_smooth()], continuity=4) == []

    def test_knot_jump_detected(self):
        traj = self.make_smooth()
        traj.pieces[1].points[0] += 0.05  # break position continuity
        problems = smoothness_report([traj], continuity=4)
        assert any("order-0 jump" in p and "knot 1" in p for p in problems)

    def test_moving_endpoint_detected(self):
        traj = self.make_smooth()
        traj.pieces[0].points[1] += 0.2  # nonzero start velocity
        problems = smoothness_report([traj], continuity=4)
        assert any("order-1" in p and "start" in p for p in problems)


class TestValidateTrajectories:
    def safe_pair(self):
        return [
            fallback_trajectory(
                np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]]),
                [0.5],
                degree=9,
                continuity=4,
                weights=WEIGHTS,
            ),
            fallback_trajectory(
                np.array([[0.0, 1.5, 0.0], [0.5, 1.5, 0.0]]),
                [0.5],
                degree=9,
                continuity=4,
                weights=WEIGHTS,
            ),
        ]

    def test_safe_set_passes(self):
        sc = scenario()
        report = validate_trajectories(
            self.safe_pair(),
            sc,
            expected_starts=[[0, 0, 0], [0, 1.5, 0]],
            expected_goals=[[0.5, 0, 0], [0.5, 1.5, 0]],
            sample_dt=1e-2,
        )
        assert report.ok
        assert report.min_pair_clearance >= 2.0
        assert np.isinf(report.min_obstacle_clearance)
        assert report.workspace_overrun <= 0.0
        assert report.smoothness_problems == []
        assert report.endpoint_problems == []

    def test_collision_fails(self):
        sc = scenario()
        trajs = [
            fallback_trajectory(
                np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]]),
                [0.5], 9, 4, WEIGHTS,
            ),
            fallback_trajectory(
                np.array([[0.5, 0.0, 0.0], [0.0, 0.0, 0.0]]),
                [0.5], 9, 4, WEIGHTS,
            ),
        ]
        report = validate_trajectories(trajs, sc, sample_dt=1e-2)
        assert not report.ok
        assert report.min_pair_clearance < 2.0 - 1e-6

    def test_obstacle_hit_fails(self):
        sc = scenario(obstacles=[(1, 1, 0)])
        trajs = [
            fallback_trajectory(
                np.array([[0.0, 0.5, 0.0], [1.0, 0.5, 0.0]]),  # straight through
                [0.5], 9, 4, WEIGHTS,
            )
        ]
        report = validate_trajectories(trajs, sc, sample_dt=1e-2)
        assert not report.ok
        assert report.min_obstacle_clearance < 1.0 - 1e-6

    def test_workspace_exit_fails(self):
        sc = scenario()
        trajs = [
            fallback_trajectory(
                np.array([[0.0, 0.0, 0.0], [2.5, 0.0, 0.0]]),  # x max is 1.75
                [0.5], 9, 4, WEIGHTS,
            )
        ]
        report = validate_trajectories(trajs, sc, sample_dt=1e-2)
        assert not report.ok
        assert report.workspace_overrun > 1e-6

    def test_wrong_endpoints_reported(self):
        sc = scenario()
        report = validate_trajectories(
            self.safe_pair(),
            sc,
            expected_starts=[[0, 0, 0], [0, 1.5, 0]],
            expected_goals=[[1.5, 0, 0], [0.5, 1.5, 0]],
            sample_dt=1e-2,
        )
        assert not report.ok
        assert any("ends at" in p for p in report.endpoint_problems)

    def test_report_round_trip(self, tmp_path):
        sc = scenario()
        report = validate_trajectories(self.safe_pair(), sc, sample_dt=1e-2)
        path = tmp_path / "validation.json"
        report.save(path)
        import json

        data = json.loads(path.read_text())
        assert data["ok"] == report.ok
        assert set(data["peaks"]) == {"speed", "accel", "thrust", "omega"}
        assert data["min_pair_clearance"] == report.min_pair_clearance
