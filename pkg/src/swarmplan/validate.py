"""Independent validation of plans and trajectories.

Everything in here re-derives safety from first principles rather than
trusting planner internals: grid plans are compared against a
breadth-first search over joint configurations, and continuous
trajectories are sampled densely and checked against the ellipsoid
metric, the obstacle clearance, the workspace box, and the smoothness
requirements.  Dynamic feasibility comes from differential flatness:
the thrust vector is the acceleration plus gravity, and the body
angular rate is the component of jerk orthogonal to the thrust,
divided by the thrust magnitude.
"""

from __future__ import annotations

import itertools
import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

GRAVITY = 9.81

_MOVES = (
    (0, 0, 0),
    (1, 0, 0),
    (-1, 0, 0),
    (0, 1, 0),
    (0, -1, 0),
    (0, 0, 1),
    (0, 0, -1),
)


class OracleBudgetError(Exception):
    """The joint-configuration search exceeded its state budget."""


def mapf_oracle(scenario, max_states=2_000_000):
    """Optimal number of synchronized steps, by joint-state search.

    Robots are interchangeable, so configurations are canonicalized as
    sorted cell tuples.  A joint move is legal when all targets are free
    and distinct, no pair swaps cells or crosses the same horizontal
    edge in opposite directions at heights closer than the ellipsoid
    height, and the new configuration keeps every vertical column gap.
    Returns (steps, configs) where configs is one optimal sequence of
    canonical configurations, or raises when the scenario is unsolvable
    or the state budget runs out.
    """
    cs = scenario.grid.cell_size
    threshold = 2.0 * scenario.radii[2] - 1e-9

    def column_ok(cells):
        for a, b in itertools.combinations(cells, 2):
            if a[:2] == b[:2] and abs(a[2] - b[2]) * cs < threshold:
                return False
        return True

    def transition_ok(old, new):
        for (a1, b1), (a2, b2) in itertools.combinations(zip(old, new), 2):
            if b1 == b2:
                return False
            if a1 == b2 and a2 == b1 and a1 != a2:
                return False
            if (
                a1[:2] != b1[:2]
                and a1[:2] == b2[:2]
                and b1[:2] == a2[:2]
                and abs(a1[2] - b2[2]) * cs < threshold
                and abs(b1[2] - a2[2]) * cs < threshold
            ):
                return False
        return True

    start = tuple(sorted(scenario.starts))
    goal = tuple(sorted(scenario.goals))
    if not column_ok(start) or not column_ok(goal):
        raise ValueError("start or goal configuration violates the column rule")

    def successors(config):
        per_robot = []
        for c in config:
            options = []
            for dx, dy, dz in _MOVES:
                t = (c[0] + dx, c[1] + dy, c[2] + dz)
                if scenario.is_free(t):
                    options.append(t)
            per_robot.append(options)
        for choice in itertools.product(*per_robot):
            if len(set(choice)) != len(choice):
                continue
            if not transition_ok(config, choice):
                continue
            if not column_ok(choice):
                continue
            yield tuple(sorted(choice))

    parent = {start: None}
    queue = deque([start])
    while queue:
        config = queue.popleft()
        if config == goal:
            path = []
            node = config
            while node is not None:
                path.append(node)
                node = parent[node]
            path.reverse()
            return len(path) - 1, path
        for nxt in successors(config):
            if nxt not in parent:
                if len(parent) >= max_states:
                    raise OracleBudgetError(
                        f"joint search exceeded {max_states} states"
                    )
                parent[nxt] = config
                queue.append(nxt)
    raise ValueError("no synchronized plan exists for this scenario")


def _sample_times(duration, sample_dt):
    count = max(2, int(round(duration / sample_dt)) + 1)
    return np.linspace(0.0, duration, count)


def sample_positions(trajectories, sample_dt=1e-3, order=0):
    """Stacked samples (robots, times, 3) on the common time grid."""
    duration = max(t.duration for t in trajectories)
    ts = _sample_times(duration, sample_dt)
    return ts, np.stack([t.evaluate_many(ts, order) for t in trajectories])


def pairwise_clearance_profile(positions, ellipsoid):
    """Minimum scaled pairwise distance at each sample time."""
    scaled = positions / np.asarray(ellipsoid.radii)
    n = positions.shape[0]
    if n < 2:
        return np.full(positions.shape[1], np.inf)
    mins = np.full(positions.shape[1], np.inf)
    for i in range(n):
        for j in range(i + 1, n):
            d = np.linalg.norm(scaled[i] - scaled[j], axis=1)
            mins = np.minimum(mins, d)
    return mins


def obstacle_clearance_profile(positions, scenario):
    """Minimum scaled box distance at each sample time.

    The scaled distance from a point to an axis-aligned box is the norm
    of the per-axis overshoot beyond the box, divided by the clearance
    radii; at least 1 keeps the robot clear of the obstacle.
    """
    boxes = scenario.obstacle_boxes()
    if not boxes:
        return np.full(positions.shape[1], np.inf)
    radii = np.asarray(scenario.obstacle_ellipsoid.radii)
    mins = np.full(positions.shape[1], np.inf)
    flat = positions.reshape(-1, 3)
    for box in boxes:
        lo, hi = box.world_box(scenario.grid)
        over = np.maximum(np.maximum(lo - flat, flat - hi), 0.0) / radii
        dist = np.linalg.norm(over, axis=1).reshape(positions.shape[:2])
        mins = np.minimum(mins, dist.min(axis=0))
    return mins


def workspace_violation(positions, scenario):
    lo, hi = scenario.grid.workspace_box()
    under = (lo - positions).max()
    over = (positions - hi).max()
    return float(max(under, over))


def dynamics_metrics(trajectories, sample_dt=0.01, gravity=GRAVITY):
    """Peak flat-output dynamics over a common sample grid.

    Returns peak speed, acceleration, thrust (acceleration plus gravity,
    in m/s^2 per unit mass) and body angular rate.  gravity=0 gives the
    kinematic body rate, which obeys the exact 1/s law under temporal
    scaling; with gravity the constant hover term breaks exact scaling.
    """
    duration = max(t.duration for t in trajectories)
    ts = _sample_times(duration, sample_dt)
    peak = {"speed": 0.0, "accel": 0.0, "thrust": 0.0, "omega": 0.0}
    for traj in trajectories:
        vel = traj.evaluate_many(ts, 1)
        acc = traj.evaluate_many(ts, 2)
        jerk = traj.evaluate_many(ts, 3)
        thrust = acc + np.array([0.0, 0.0, gravity])
        tnorm = np.linalg.norm(thrust, axis=1)
        tnorm_safe = np.maximum(tnorm, 1e-12)
        unit = thrust / tnorm_safe[:, None]
        jerk_par = np.sum(jerk * unit, axis=1)[:, None] * unit
        omega = np.linalg.norm(jerk - jerk_par, axis=1) / tnorm_safe
        peak["speed"] = max(peak["speed"], float(np.linalg.norm(vel, axis=1).max()))
        peak["accel"] = max(peak["accel"], float(np.linalg.norm(acc, axis=1).max()))
        peak["thrust"] = max(peak["thrust"], float(tnorm.max()))
        peak["omega"] = max(peak["omega"], float(omega.max()))
    return peak


def smoothness_report(trajectories, continuity, tol=1e-5):
    """Endpoint rest and knot continuity violations, scaled relative to
    the largest derivative magnitude of the same order."""
    problems = []
    for r, traj in enumerate(trajectories):
        for order in range(1, continuity + 1):
            for label, t in (("start", 0.0), ("end", traj.duration)):
                v = np.linalg.norm(traj.evaluate(t, order))
                if v > tol * _derivative_scale(traj, order):
                    problems.append(
                        f"robot {r} order-{order} derivative at {label} is {v:.3e}"
                    )
        for k in range(len(traj.pieces) - 1):
            left = traj.pieces[k]
            right = traj.pieces[k + 1]
            for order in range(continuity + 1):
                a = left.evaluate(left.duration, order)
                b = right.evaluate(0.0, order)
                gap = np.linalg.norm(a - b)
                if gap > tol * _derivative_scale(traj, order):
                    problems.append(
                        f"robot {r} order-{order} jump {gap:.3e} at knot {k + 1}"
                    )
    return problems


def _derivative_scale(traj, order):
    if order == 0:
        return 1.0
    peak = 0.0
    for piece in traj.pieces:
        pts = piece.derivative_points(order)
        peak = max(peak, float(np.abs(pts).max(initial=0.0)))
    return max(1.0, peak)


@dataclass
class ValidationReport:
    ok: bool
    min_pair_clearance: float
    min_obstacle_clearance: float
    workspace_overrun: float
    peaks: dict
    smoothness_problems: list = field(default_factory=list)
    endpoint_problems: list = field(default_factory=list)
    sample_dt: float = 1e-3

    def to_dict(self):
        return {
            "ok": self.ok,
            "min_pair_clearance": self.min_pair_clearance,
            "min_obstacle_clearance": self.min_obstacle_clearance,
            "workspace_overrun": self.workspace_overrun,
            "peaks": dict(self.peaks),
            "smoothness_problems": list(self.smoothness_problems),
            "endpoint_problems": list(self.endpoint_problems),
            "sample_dt": self.sample_dt,
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def validate_trajectories(
    trajectories,
    scenario,
    expected_starts=None,
    expected_goals=None,
    sample_dt=1e-3,
    pair_tol=1e-6,
    obstacle_tol=1e-6,
    workspace_tol=1e-6,
):
    """Full safety and smoothness audit of a trajectory set.

    Clearance thresholds are 2 for the pairwise ellipsoid metric and 1
    for the scaled obstacle distance, each minus the stated tolerance.
    """
    ts, positions = sample_positions(trajectories, sample_dt)
    pair = pairwise_clearance_profile(positions, scenario.robot_ellipsoid)
    obstacle = obstacle_clearance_profile(positions, scenario)
    overrun = workspace_violation(positions, scenario)
    peaks = dynamics_metrics(trajectories, sample_dt=max(sample_dt, 1e-3))
    smooth = smoothness_report(trajectories, scenario.continuity)

    endpoint_problems = []
    if expected_starts is not None:
        for r, want in enumerate(np.asarray(expected_starts, dtype=float)):
            got = trajectories[r].evaluate(0.0)
            if np.linalg.norm(got - want) > 1e-5:
                endpoint_problems.append(
                    f"robot {r} starts at {got} instead of {want}"
                )
    if expected_goals is not None:
        for r, want in enumerate(np.asarray(expected_goals, dtype=float)):
            got = trajectories[r].evaluate(trajectories[r].duration)
            if np.linalg.norm(got - want) > 1e-5:
                endpoint_problems.append(f"robot {r} ends at {got} instead of {want}")

    ok = (
        float(pair.min()) >= 2.0 - pair_tol
        and float(obstacle.min()) >= 1.0 - obstacle_tol
        and overrun <= workspace_tol
        and not smooth
        and not endpoint_problems
    )
    return ValidationReport(
        ok=bool(ok),
        min_pair_clearance=float(pair.min()),
        min_obstacle_clearance=float(obstacle.min()),
        workspace_overrun=overrun,
        peaks=peaks,
        smoothness_problems=smooth,
        endpoint_problems=endpoint_problems,
        sample_dt=sample_dt,
    )
