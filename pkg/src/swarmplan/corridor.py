"""Safe corridors: one convex polytope per robot per trajectory piece.

During piece k every robot must stay inside its own polytope, and any
two polytopes of different robots lie on opposite sides of a plane with
an ellipsoid of clearance each, so curves confined to their corridors
are mutually collision free for the entire piece.  The planes come from
ellipsoid-weighted margin separation of the robots' occupied point sets
(segment endpoints on the first pass, curve samples afterwards).
Obstacle boxes contribute one supporting face each, pushed off the box
by the clearance radius, and the workspace box caps every corridor.

Pairs whose point sets are too close for a margin plane are reported
back instead of failing: those robots fall back to the synchronized
straight-line motion whose safety the grid plan already guarantees.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .geometry import ConvexPolyhedron, svm_separate_batch

_FACE_PRUNE_THRESHOLD = 64


@dataclass
class CorridorSet:
    """Corridors indexed [robot][piece] plus the separation failures."""

    polyhedra: list
    failed_pairs: set = field(default_factory=set)
    failed_robots: set = field(default_factory=set)

    @property
    def num_robots(self):
        return len(self.polyhedra)

    @property
    def num_pieces(self):
        return len(self.polyhedra[0]) if self.polyhedra else 0


def segment_point_sets(waypoints):
    """Piece occupancy as segment endpoints: (robots, pieces, 2, 3)."""
    wp = np.asarray(waypoints, dtype=float)
    return np.stack([wp[:, :-1], wp[:, 1:]], axis=2)


def sample_point_sets(trajectories, samples_per_piece):
    """Piece occupancy as dense curve samples: (robots, pieces, S, 3).

    Samples include both knots, so consecutive pieces share their joint
    and the union covers the whole curve.
    """
    sets = []
    for traj in trajectories:
        rows = []
        for piece in traj.pieces:
            ts = np.linspace(0.0, piece.duration, samples_per_piece)
            rows.append(piece.evaluate_many(ts))
        sets.append(rows)
    return np.asarray(sets)


def workspace_faces(scenario):
    lo, hi = scenario.grid.workspace_box()
    a = np.vstack([np.eye(3), -np.eye(3)])
    b = np.concatenate([hi, -lo])
    return a, b


def prune_faces(poly, keep=None):
    """Drop faces implied by the others (tested by one LP per face).

    keep marks faces that must survive regardless, e.g. the workspace
    box that guarantees boundedness.
    """
    m = poly.num_faces
    if m <= _FACE_PRUNE_THRESHOLD:
        return poly
    keep = np.zeros(m, dtype=bool) if keep is None else np.asarray(keep, dtype=bool)
    alive = np.ones(m, dtype=bool)
    for i in range(m):
        if keep[i]:
            continue
        alive[i] = False
        rows = poly.A[alive]
        rhs = poly.b[alive]
        res = linprog(
            -poly.A[i],
            A_ub=rows,
            b_ub=rhs,
            bounds=[(None, None)] * 3,
            method="highs",
        )
        if res.status != 0 or -res.fun > poly.b[i] + 1e-9:
            alive[i] = True  # face is binding, keep it
    return ConvexPolyhedron(poly.A[alive], poly.b[alive])


def build_corridors(point_sets, scenario, skip_pairs=frozenset()):
    """Corridors for every robot and piece from their occupied point sets.

    point_sets has shape (robots, pieces, m, 3).  skip_pairs lists robot
    pairs already known to be inseparable; they get no mutual faces and
    are not retried.
    """
    point_sets = np.asarray(point_sets, dtype=float)
    n, num_pieces, m, _ = point_sets.shape
    ell = scenario.robot_ellipsoid
    obs_ell = scenario.obstacle_ellipsoid
    r_obs = scenario.obstacle_radius
    skip = {tuple(sorted(p)) for p in skip_pairs}

    ws_a, ws_b = workspace_faces(scenario)
    faces_a = [[[ws_a] for _ in range(num_pieces)] for _ in range(n)]
    faces_b = [[[ws_b] for _ in range(num_pieces)] for _ in range(n)]
    failed_pairs = set()
    failed_robots = set()

    boxes = scenario.obstacle_boxes()
    if boxes:
        verts = np.array([box.vertices(scenario.grid) for box in boxes])
        jobs = [
            (robot, k, bi)
            for robot in range(n)
            for k in range(num_pieces)
            for bi in range(len(boxes))
        ]
        a_sets = np.array([point_sets[r, k] for r, k, _ in jobs])
        b_sets = np.array([verts[bi] for _, _, bi in jobs])
        alpha, beta, enorm, ok = svm_separate_batch(a_sets, b_sets, obs_ell)
        for (robot, k, bi), a, e, good in zip(jobs, alpha, enorm, ok):
            # one-sided clearance: the raw slab must fit the clearance
            # radius, i.e. ||E_obs alpha_raw|| <= 2
            if not good or e > 2.0 + 1e-6:
                failed_robots.add(robot)
                continue
            touch = verts[bi] @ a
            offset = float(touch.min()) - obs_ell.norm(a)
            faces_a[robot][k].append(a[None, :])
            faces_b[robot][k].append(np.array([offset]))

    pairs = [
        (i, j)
        for i, j in itertools.combinations(range(n), 2)
        if (i, j) not in skip
    ]
    if pairs:
        jobs = [(i, j, k) for i, j in pairs for k in range(num_pieces)]
        a_sets = np.array([point_sets[i, k] for i, _, k in jobs])
        b_sets = np.array([point_sets[j, k] for _, j, k in jobs])
        alpha, beta, enorm, ok = svm_separate_batch(a_sets, b_sets, ell)
        for (i, j, k), a, b0, e, good in zip(jobs, alpha, beta, enorm, ok):
            if not good or e > 1.0 + 1e-6:
                failed_pairs.add((i, j))
                continue
            shift = ell.norm(a)
            faces_a[i][k].append(a[None, :])
            faces_b[i][k].append(np.array([b0 - shift]))
            faces_a[j][k].append(-a[None, :])
            faces_b[j][k].append(np.array([-(b0 + shift)]))

    polyhedra = []
    for robot in range(n):
        per_piece = []
        for k in range(num_pieces):
            poly = ConvexPolyhedron(
                np.concatenate(faces_a[robot][k], axis=0),
                np.concatenate(faces_b[robot][k], axis=0),
            )
            keep = np.zeros(poly.num_faces, dtype=bool)
            keep[: ws_a.shape[0]] = True
            per_piece.append(prune_faces(poly, keep))
        polyhedra.append(per_piece)
    return CorridorSet(polyhedra, failed_pairs, failed_robots)
