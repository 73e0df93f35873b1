"""Piecewise Bezier trajectories and the per-robot smoothing program.

Each robot's trajectory is one polynomial piece per plan segment, written
in the Bernstein basis.  That basis gives two properties the planner
leans on: the curve stays inside the convex hull of its control points,
so linear constraints on control points confine the whole curve to a
safe corridor, and endpoint derivatives are short difference expressions
of the leading or trailing control points, so smoothness across pieces
is a sparse set of equalities.  Minimizing an integral of squared
derivatives subject to those constraints is a convex QP per robot.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sparse

from . import opt_engine
from .opt_engine import QuadraticProgram


@lru_cache(maxsize=None)
def bernstein_to_monomial(degree, duration):
    """Matrix taking Bernstein control values to monomial coefficients.

    Row m holds the coefficient of t**m contributed by each control
    value, for a piece parameterized over [0, duration].
    """
    d = degree
    tau = float(duration)
    out = np.zeros((d + 1, d + 1))
    for i in range(d + 1):
        for m in range(i, d + 1):
            out[m, i] = (
                math.comb(d, i)
                * math.comb(d - i, m - i)
                * (-1.0) ** (m - i)
                / tau**m
            )
    return out


@lru_cache(maxsize=None)
def monomial_derivative_cost(degree, order, duration):
    """Gram matrix of the squared order-th derivative over one piece.

    Entry (i, j) is the integral of the product of the order-th
    derivatives of t**i and t**j over [0, duration].
    """
    d = degree
    c = order
    tau = float(duration)
    out = np.zeros((d + 1, d + 1))
    for i in range(c, d + 1):
        for j in range(c, d + 1):
            fi = math.perm(i, c)
            fj = math.perm(j, c)
            p = i + j - 2 * c
            out[i, j] = fi * fj * tau ** (p + 1) / (p + 1)
    return out


@lru_cache(maxsize=None)
def bernstein_gram(degree):
    """Matrix of pairwise basis product integrals over [0, 1]."""
    m = degree
    out = np.empty((m + 1, m + 1))
    for i in range(m + 1):
        for j in range(m + 1):
            out[i, j] = (
                math.comb(m, i)
                * math.comb(m, j)
                / ((2 * m + 1) * math.comb(2 * m, i + j))
            )
    return out


@lru_cache(maxsize=None)
def control_point_cost(degree, duration, weights):
    """Weighted sum of squared-derivative costs in control-value form."""
    b = bernstein_to_monomial(degree, duration)
    q = np.zeros((degree + 1, degree + 1))
    for c, w in enumerate(weights, start=1):
        if w > 0:
            q += w * monomial_derivative_cost(degree, c, duration)
    h = b.T @ q @ b
    return 0.5 * (h + h.T)


def endpoint_derivative_row(degree, order, duration, at_start):
    """Coefficients over control values giving an endpoint derivative.

    The order-th derivative at a piece boundary is a scaled finite
    difference of the first (or last) order+1 control values.
    """
    row = np.zeros(degree + 1)
    factor = math.perm(degree, order) / float(duration) ** order
    for r in range(order + 1):
        sign = (-1.0) ** (order - r)
        coeff = factor * sign * math.comb(order, r)
        if at_start:
            row[r] = coeff
        else:
            row[degree - order + r] = coeff
    return row


def _de_casteljau(points, s):
    """Evaluate Bernstein curves at parameters s in [0, 1].

    points has shape (..., degree + 1, dim); s broadcasts against the
    leading axes.  Works for batches of curves and parameters at once.
    """
    pts = np.array(points, dtype=float)
    s = np.asarray(s, dtype=float)[..., None, None]
    while pts.shape[-2] > 1:
        pts = (1.0 - s) * pts[..., :-1, :] + s * pts[..., 1:, :]
    return pts[..., 0, :]


@dataclass
class BezierPiece:
    """One polynomial piece: control points (degree + 1, dim)."""

    duration: float
    points: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.duration = float(self.duration)
        if self.duration <= 0:
            raise ValueError("piece duration must be positive")

    @property
    def degree(self):
        return self.points.shape[0] - 1

    def derivative_points(self, order=1):
        """Control points of the derivative curve (degree drops by order)."""
        pts = self.points
        tau = self.duration
        for k in range(order):
            d = pts.shape[0] - 1
            if d == 0:
                return np.zeros((1, pts.shape[1]))
            pts = (d / tau) * (pts[1:] - pts[:-1])
        return pts

    def evaluate(self, t, order=0):
        return self.evaluate_many(np.atleast_1d(t), order)[0]

    def evaluate_many(self, ts, order=0):
        pts = self.points if order == 0 else self.derivative_points(order)
        s = np.asarray(ts, dtype=float) / self.duration
        return _de_casteljau(pts[None, :, :], s)


@dataclass
class PiecewiseBezierTrajectory:
    """Consecutive Bezier pieces forming one robot trajectory."""

    pieces: list

    def __post_init__(self):
        if not self.pieces:
            raise ValueError("trajectory needs at least one piece")
        self.knots = np.concatenate([[0.0], np.cumsum([p.duration for p in self.pieces])])

    @property
    def duration(self):
        return float(self.knots[-1])

    @property
    def dim(self):
        return self.pieces[0].points.shape[1]

    def _locate(self, ts):
        ts = np.clip(np.asarray(ts, dtype=float), 0.0, self.duration)
        idx = np.searchsorted(self.knots, ts, side="right") - 1
        idx = np.clip(idx, 0, len(self.pieces) - 1)
        return idx, ts - self.knots[idx]

    def evaluate(self, t, order=0):
        return self.evaluate_many(np.atleast_1d(t), order)[0]

    def evaluate_many(self, ts, order=0):
        idx, local = self._locate(ts)
        out = np.empty((len(local), self.dim))
        for k in np.unique(idx):
            mask = idx == k
            out[mask] = self.pieces[k].evaluate_many(local[mask], order)
        return out

    def cost(self, weights):
        # integrate in the Bernstein basis of each derivative curve:
        # differencing first keeps the values near the size of the
        # result, where the monomial quadratic form would cancel away
        # six digits on smooth curves
        total = 0.0
        for p in self.pieces:
            for c, w in enumerate(weights, start=1):
                if w > 0:
                    dp = p.derivative_points(c)
                    g = bernstein_gram(dp.shape[0] - 1)
                    total += w * p.duration * float(np.einsum("id,ij,jd->", dp, g, dp))
        return total

    def scaled(self, factor):
        """Uniform time dilation; the path is unchanged, derivatives of
        order c shrink by factor**-c."""
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        return PiecewiseBezierTrajectory(
            [BezierPiece(p.duration * factor, p.points.copy()) for p in self.pieces]
        )

    def save_csv(self, path):
        """One row per piece: duration, then monomial coefficients of each
        axis on local time (ascending powers), 17 significant digits."""
        degree = self.pieces[0].degree
        header = ["duration"]
        for axis in "xyz":
            header += [f"c{axis}{m}" for m in range(degree + 1)]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for p in self.pieces:
                basis = bernstein_to_monomial(p.degree, p.duration)
                coeffs = basis @ p.points
                row = [f"{p.duration:.17g}"]
                for axis in range(3):
                    row += [f"{v:.17g}" for v in coeffs[:, axis]]
                writer.writerow(row)

    @classmethod
    def load_csv(cls, path):
        pieces = []
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            if (len(header) - 1) % 3:
                raise ValueError(f"malformed trajectory header in {path}")
            degree = (len(header) - 1) // 3 - 1
            for rec in reader:
                tau = float(rec[0])
                vals = np.array([float(v) for v in rec[1:]])
                coeffs = vals.reshape(3, degree + 1).T
                basis = bernstein_to_monomial(degree, tau)
                points = np.linalg.solve(basis, coeffs)
                pieces.append(BezierPiece(tau, points))
        return cls(pieces)


@lru_cache(maxsize=None)
def _rest_to_rest_profile(degree, continuity, duration, weights):
    """Scalar Bernstein control values going 0 to 1 with derivatives
    1..continuity zero at both ends, minimizing the weighted cost.

    The first and last continuity+1 control values are pinned by the
    rest conditions; any middle values are free and found by solving the
    reduced normal equations.
    """
    d, c = degree, continuity
    values = np.zeros(d + 1)
    values[d - c :] = 1.0
    free = list(range(c + 1, d - c))
    if free:
        h = control_point_cost(d, duration, weights)
        fixed = [i for i in range(d + 1) if i not in free]
        hff = h[np.ix_(free, free)]
        hfc = h[np.ix_(free, fixed)]
        rhs = -hfc @ values[fixed]
        values[free] = np.linalg.solve(hff + 1e-12 * np.eye(len(free)), rhs)
    return values


def fallback_trajectory(waypoints, durations, degree, continuity, weights):
    """Straight-line trajectory through the waypoints, at rest at every
    knot.

    Every piece follows the same scalar ramp between its endpoints, so
    all robots using this construction share one velocity profile and
    inherit the waypoint plan's safety margins along the segments.
    """
    waypoints = np.asarray(waypoints, dtype=float)
    pieces = []
    for k in range(waypoints.shape[0] - 1):
        tau = float(durations[k])
        ramp = _rest_to_rest_profile(degree, continuity, tau, tuple(weights))
        a, b = waypoints[k], waypoints[k + 1]
        pieces.append(BezierPiece(tau, a[None, :] + ramp[:, None] * (b - a)[None, :]))
    return PiecewiseBezierTrajectory(pieces)


def optimize_trajectory(
    start,
    goal,
    durations,
    corridors,
    degree,
    continuity,
    weights,
    x0=None,
):
    """Minimum-cost trajectory through a corridor sequence.

    The robot starts at rest at start, ends at rest at goal, keeps
    derivatives continuous through order continuity at the knots, and
    every piece stays inside its corridor because all its control points
    do.  Returns (trajectory, objective, x) with x reusable as a warm
    start for a later solve with the same shape.

    Raises QPInfeasibleError when the corridors admit no such curve.
    """
    durations = [float(t) for t in durations]
    num_pieces = len(durations)
    if len(corridors) != num_pieces:
        raise ValueError("need one corridor per piece")
    d = int(degree)
    c = int(continuity)
    width = (d + 1) * 3
    n = num_pieces * width

    h = np.zeros((n, n))
    for k, tau in enumerate(durations):
        hk = np.kron(control_point_cost(d, tau, tuple(weights)), np.eye(3))
        h[k * width : (k + 1) * width, k * width : (k + 1) * width] = 2.0 * hk

    eq_rows = []
    eq_rhs = []

    # constraint rows touch at most two pieces, so build them sparse;
    # dense rows make the solver's matvecs quadratic in piece count
    def add_row(piece, row, rhs3, other_piece=None, other_row=None):
        block = sparse.lil_matrix((3, n))
        base = piece * width
        for axis in range(3):
            block[axis, base + axis : base + width : 3] = row
            if other_piece is not None:
                ob = other_piece * width
                block[axis, ob + axis : ob + width : 3] = -other_row
        eq_rows.append(block)
        eq_rhs.append(np.asarray(rhs3, dtype=float))

    zero = np.zeros(3)
    add_row(0, endpoint_derivative_row(d, 0, durations[0], True), np.asarray(start, dtype=float))
    for order in range(1, c + 1):
        add_row(0, endpoint_derivative_row(d, order, durations[0], True), zero)
    add_row(
        num_pieces - 1,
        endpoint_derivative_row(d, 0, durations[-1], False),
        np.asarray(goal, dtype=float),
    )
    for order in range(1, c + 1):
        add_row(num_pieces - 1, endpoint_derivative_row(d, order, durations[-1], False), zero)
    for k in range(num_pieces - 1):
        for order in range(c + 1):
            add_row(
                k,
                endpoint_derivative_row(d, order, durations[k], False),
                zero,
                other_piece=k + 1,
                other_row=endpoint_derivative_row(d, order, durations[k + 1], True),
            )

    a_eq = sparse.vstack(eq_rows, format="csr")
    b_eq = np.concatenate(eq_rhs)

    in_rows = []
    in_rhs = []
    for k, poly in enumerate(corridors):
        if poly.num_faces == 0:
            continue
        base = k * width
        # one row per (face, control point): face normal against that
        # point's 3 coordinates
        rows_per_face = d + 1
        total = poly.num_faces * rows_per_face
        data = np.repeat(poly.A, rows_per_face, axis=0).ravel()
        cols = (
            base
            + np.tile(np.arange(width).reshape(rows_per_face, 3), (poly.num_faces, 1))
        ).ravel()
        indptr = np.arange(0, 3 * total + 1, 3)
        in_rows.append(sparse.csr_matrix((data, cols, indptr), shape=(total, n)))
        in_rhs.append(np.repeat(poly.b, rows_per_face))
    a_in = sparse.vstack(in_rows, format="csr") if in_rows else None
    b_in = np.concatenate(in_rhs) if in_rhs else None

    # snap weights at sub-second pieces push |H| to ~1e9; the minimizer is
    # scale-free (g = 0), so normalize and let the solver see O(1) data
    h_scale = float(np.abs(h).max())
    if h_scale > 0:
        h /= h_scale

    qp = QuadraticProgram(H=h, g=np.zeros(n), A_eq=a_eq, b_eq=b_eq, A_in=a_in, b_in=b_in)
    result = opt_engine.solve_qp(qp, x0=x0)
    x = result.x

    # The refinement loop treats an inaccurate answer the same as an
    # infeasible one, so fail loudly rather than return a sloppy curve.
    scale = max(1.0, float(np.abs(b_eq).max()))
    if np.abs(a_eq @ x - b_eq).max() > 1e-6 * scale:
        raise opt_engine.QPInfeasibleError("smoothing QP returned an inaccurate solution")
    if a_in is not None and (a_in @ x - b_in).max() > 1e-6:
        raise opt_engine.QPInfeasibleError("smoothing QP violated a corridor face")

    pieces = []
    for k, tau in enumerate(durations):
        pts = x[k * width : (k + 1) * width].reshape(d + 1, 3)
        pieces.append(BezierPiece(tau, pts))
    traj = PiecewiseBezierTrajectory(pieces)
    # report the cost integral evaluated on the curve itself; the QP's
    # own objective value carries the Hessian's conditioning
    return traj, traj.cost(weights), x
