"""Iterative trajectory refinement around a synchronized waypoint plan.

Round zero gives every robot the straight-line rest-to-rest trajectory
along its plan segments; those share one velocity profile, so the grid
plan's safety margins carry over and the set always exists.  Each later
round rebuilds safe corridors from the current curves (segment endpoints
on the first pass, dense samples afterwards) and re-optimizes every
robot inside its corridor, warm-started from the previous solution.

Failures degrade per robot instead of aborting: a pair whose occupied
sets admit no margin plane is pinned to the straight-line fallback for
good, a robot whose program is infeasible keeps its previous curve, and
a whole round is discarded if the resulting set does not validate.  The
result is usable after any round and only improves with more of them.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import opt_engine
from .bezier_opt import fallback_trajectory, optimize_trajectory
from .corridor import build_corridors, sample_point_sets, segment_point_sets
from .validate import validate_trajectories

_RELATIVE_COST_STOP = 1e-3


@dataclass
class RefinementResult:
    trajectories: list
    validation: object
    rows: list = field(default_factory=list)
    hard_fallback: set = field(default_factory=set)
    skip_pairs: set = field(default_factory=set)

    @property
    def ok(self):
        return self.validation.ok


def write_report_csv(rows, path):
    fields = ["iteration", "cost", "peak_accel", "peak_omega", "wall_time_s", "fallback_count"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})


def _total_cost(trajectories, weights):
    return float(sum(t.cost(weights) for t in trajectories))


def _solve_one(args):
    start, goal, durations, corridors, degree, continuity, weights, x0 = args
    try:
        traj, obj, x = optimize_trajectory(
            start, goal, durations, corridors, degree, continuity, weights, x0=x0
        )
        return "ok", traj, x
    except (
        opt_engine.QPInfeasibleError,
        opt_engine.QPMaxIterationsError,
        opt_engine.SolverError,
    ) as exc:
        return "fail", str(exc), None


def refine_trajectories(plan, scenario, iterations=None, jobs=1, log=None,
                        on_accept=None):
    """Smooth, validated trajectories for a post-processed waypoint plan.

    plan segments and the trajectory pieces correspond one to one.
    Returns a RefinementResult whose trajectories always trace the plan
    endpoints; validation reports on the returned set.

    on_accept(iteration, trajectories) fires for each accepted iterate,
    so anytime consumers can use intermediate sets while later rounds
    keep improving.
    """
    if iterations is None:
        iterations = scenario.refine_iterations
    emit = log or (lambda msg: None)
    n = plan.num_robots
    durations = [plan.dt] * plan.num_segments
    starts = plan.waypoints[:, 0]
    goals = plan.waypoints[:, -1]
    degree = scenario.degree
    continuity = scenario.continuity
    weights = tuple(scenario.weights)

    straight = [
        fallback_trajectory(plan.waypoints[i], durations, degree, continuity, weights)
        for i in range(n)
    ]
    best = list(straight)
    validation = validate_trajectories(
        best, scenario, expected_starts=starts, expected_goals=goals
    )
    rows = []
    emit(f"baseline: straight-line set, cost {_total_cost(best, weights):.6g}, ok={validation.ok}")
    if not validation.ok:
        # The grid plan's own margins should make this impossible; hand
        # back the evidence rather than trying to repair it here.
        return RefinementResult(best, validation, rows, set(), set())

    hard_fallback = set()
    skip_pairs = set()
    warm = {}
    prev_cost = None
    executor = None
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        executor = ProcessPoolExecutor(max_workers=jobs)

    try:
        for it in range(iterations):
            t0 = time.perf_counter()

            # corridors must describe what each robot will actually fly;
            # rebuild whenever a new failure re-pins someone to the lines
            for _ in range(n + 1):
                if it == 0:
                    point_sets = segment_point_sets(plan.waypoints)
                else:
                    flown = [
                        straight[i] if i in hard_fallback else best[i]
                        for i in range(n)
                    ]
                    point_sets = sample_point_sets(flown, scenario.samples_per_piece)
                corridors = build_corridors(point_sets, scenario, skip_pairs)
                new_pairs = corridors.failed_pairs - skip_pairs
                if not new_pairs:
                    break
                skip_pairs |= new_pairs
                for i, j in new_pairs:
                    hard_fallback.update((i, j))
                emit(f"iteration {it}: no margin plane for pairs {sorted(new_pairs)}")

            candidates = list(best)
            for i in hard_fallback:
                candidates[i] = straight[i]

            free = [
                i
                for i in range(n)
                if i not in hard_fallback and i not in corridors.failed_robots
            ]
            args = [
                (
                    starts[i],
                    goals[i],
                    durations,
                    corridors.polyhedra[i],
                    degree,
                    continuity,
                    weights,
                    warm.get(i),
                )
                for i in free
            ]
            results = executor.map(_solve_one, args) if executor else map(_solve_one, args)
            for i, (status, payload, x) in zip(free, results):
                if status == "ok":
                    candidates[i] = payload
                    warm[i] = x
                else:
                    emit(f"iteration {it}: robot {i} keeps previous curve ({payload})")

            candidate_validation = validate_trajectories(
                candidates, scenario, expected_starts=starts, expected_goals=goals
            )
            if not candidate_validation.ok:
                emit(f"iteration {it}: candidate set failed validation, keeping previous")
                break

            cost = _total_cost(candidates, weights)
            best = candidates
            validation = candidate_validation
            if on_accept is not None:
                on_accept(it, list(best))
            rows.append(
                {
                    "iteration": it,
                    "cost": cost,
                    "peak_accel": validation.peaks["accel"],
                    "peak_omega": validation.peaks["omega"],
                    "wall_time_s": time.perf_counter() - t0,
                    "fallback_count": sum(1 for i in range(n) if best[i] is straight[i]),
                }
            )
            emit(f"iteration {it}: cost {cost:.6g}")
            if prev_cost is not None:
                if abs(prev_cost - cost) / max(1.0, abs(prev_cost)) < _RELATIVE_COST_STOP:
                    prev_cost = cost
                    break
            prev_cost = cost
    finally:
        if executor:
            executor.shutdown()

    return RefinementResult(best, validation, rows, hard_fallback, skip_pairs)
