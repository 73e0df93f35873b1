"""Scenario definitions: grid world, obstacles, robot start/goal cells.

A scenario lives on a regular axis-aligned grid.  Cells are integer index
triples; cell (0, 0, 0) is centered at the grid origin and neighbors are
one cell_size apart.  Obstacles occupy whole cells.  The workspace is the
axis-aligned box covering all cells out to half a cell beyond the boundary
cell centers.

Scenarios serialize to a flat JSON document.  Unknown keys are rejected so
typos in hand-written files fail loudly instead of silently falling back
to defaults.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Ellipsoid, collision_free

DEFAULT_CELL_SIZE = 0.5
DEFAULT_DT = 0.5
DEFAULT_DEGREE = 9
DEFAULT_CONTINUITY = 4
DEFAULT_WEIGHTS = (0.0, 1.0, 0.0, 1.0)
DEFAULT_RADII = (0.12, 0.12, 0.3)
DEFAULT_OBSTACLE_RADIUS = 0.15
DEFAULT_SAMPLES_PER_PIECE = 32
DEFAULT_REFINE_ITERATIONS = 6


def _cell(value):
    c = tuple(int(v) for v in value)
    if len(c) != 3:
        raise ValueError(f"cell must have three indices, got {value!r}")
    if any(int(v) != float(v) for v in value):
        raise ValueError(f"cell indices must be integers, got {value!r}")
    return c


@dataclass(frozen=True)
class GridSpec:
    """Regular grid: dims cells per axis, centers cell_size apart."""

    dims: tuple
    cell_size: float = DEFAULT_CELL_SIZE
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError("dims must be three positive integers")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        origin = tuple(float(v) for v in self.origin)
        if len(origin) != 3:
            raise ValueError("origin must have three coordinates")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "cell_size", float(self.cell_size))
        object.__setattr__(self, "origin", origin)

    def in_bounds(self, cell):
        return all(0 <= c < d for c, d in zip(cell, self.dims))

    def cell_center(self, cell):
        return np.asarray(self.origin) + self.cell_size * np.asarray(cell, dtype=float)

    def cell_centers(self, cells):
        return np.asarray(self.origin) + self.cell_size * np.asarray(cells, dtype=float).reshape(-1, 3)

    def cell_box(self, cell):
        """(lo, hi) world corners of one cell."""
        c = self.cell_center(cell)
        h = 0.5 * self.cell_size
        return c - h, c + h

    def workspace_box(self):
        """(lo, hi) corners of the full workspace."""
        lo = np.asarray(self.origin) - 0.5 * self.cell_size
        hi = (
            np.asarray(self.origin)
            + self.cell_size * (np.asarray(self.dims, dtype=float) - 1.0)
            + 0.5 * self.cell_size
        )
        return lo, hi

    @property
    def manhattan_diameter(self):
        return sum(d - 1 for d in self.dims)

    def all_cells(self):
        return itertools.product(*(range(d) for d in self.dims))


@dataclass(frozen=True)
class ObstacleBox:
    """Inclusive cell-index range [lo, hi] occupied by obstacle cells."""

    lo: tuple
    hi: tuple

    def world_box(self, grid):
        box_lo = grid.cell_center(self.lo) - 0.5 * grid.cell_size
        box_hi = grid.cell_center(self.hi) + 0.5 * grid.cell_size
        return box_lo, box_hi

    def vertices(self, grid):
        lo, hi = self.world_box(grid)
        corners = itertools.product(*zip(lo, hi))
        return np.array(list(corners))


def merge_obstacle_cells(cells):
    """Greedily merge unit obstacle cells into axis-aligned boxes.

    Runs along +x first, then fuses equal runs along +y, then equal
    rectangles along +z.  The result covers exactly the input cells.
    """
    remaining = sorted(set(map(tuple, cells)))
    cell_set = set(remaining)
    runs = []
    used = set()
    for c in remaining:
        if c in used:
            continue
        x, y, z = c
        x_hi = x
        while (x_hi + 1, y, z) in cell_set and (x_hi + 1, y, z) not in used:
            x_hi += 1
        for xi in range(x, x_hi + 1):
            used.add((xi, y, z))
        runs.append((x, x_hi, y, z))

    rects = []
    run_index = {(x0, x1, y, z): False for (x0, x1, y, z) in runs}
    for x0, x1, y, z in runs:
        if run_index[(x0, x1, y, z)]:
            continue
        y_hi = y
        while (x0, x1, y_hi + 1, z) in run_index and not run_index[(x0, x1, y_hi + 1, z)]:
            y_hi += 1
        for yi in range(y, y_hi + 1):
            run_index[(x0, x1, yi, z)] = True
        rects.append((x0, x1, y, y_hi, z))

    boxes = []
    rect_index = {r: False for r in rects}
    for x0, x1, y0, y1, z in rects:
        if rect_index[(x0, x1, y0, y1, z)]:
            continue
        z_hi = z
        while (x0, x1, y0, y1, z_hi + 1) in rect_index and not rect_index[(x0, x1, y0, y1, z_hi + 1)]:
            z_hi += 1
        for zi in range(z, z_hi + 1):
            rect_index[(x0, x1, y0, y1, zi)] = True
        boxes.append(ObstacleBox((x0, y0, z), (x1, y1, z_hi)))
    return boxes


_SCENARIO_KEYS = {
    "grid",
    "obstacles",
    "starts",
    "goals",
    "dt",
    "degree",
    "continuity",
    "weights",
    "radii",
    "obstacle_radius",
    "samples_per_piece",
    "refine_iterations",
}
_GRID_KEYS = {"dims", "cell_size", "origin"}


@dataclass
class ScenarioSpec:
    """Full planning problem: world, robots, and solver parameters."""

    grid: GridSpec
    starts: list
    goals: list
    obstacles: list = field(default_factory=list)
    dt: float = DEFAULT_DT
    degree: int = DEFAULT_DEGREE
    continuity: int = DEFAULT_CONTINUITY
    weights: tuple = DEFAULT_WEIGHTS
    radii: tuple = DEFAULT_RADII
    obstacle_radius: float = DEFAULT_OBSTACLE_RADIUS
    samples_per_piece: int = DEFAULT_SAMPLES_PER_PIECE
    refine_iterations: int = DEFAULT_REFINE_ITERATIONS

    def __post_init__(self):
        self.starts = [_cell(c) for c in self.starts]
        self.goals = [_cell(c) for c in self.goals]
        self.obstacles = sorted({_cell(c) for c in self.obstacles})
        self.weights = tuple(float(w) for w in self.weights)
        self.radii = tuple(float(r) for r in self.radii)
        self.dt = float(self.dt)
        self.degree = int(self.degree)
        self.continuity = int(self.continuity)
        self.obstacle_radius = float(self.obstacle_radius)
        self.samples_per_piece = int(self.samples_per_piece)
        self.refine_iterations = int(self.refine_iterations)
        self.validate()

    @property
    def num_robots(self):
        return len(self.starts)

    @property
    def robot_ellipsoid(self):
        return Ellipsoid(self.radii)

    @property
    def obstacle_ellipsoid(self):
        r = self.obstacle_radius
        return Ellipsoid((r, r, r))

    @property
    def obstacle_set(self):
        return set(self.obstacles)

    def is_free(self, cell):
        return self.grid.in_bounds(cell) and tuple(cell) not in self.obstacle_set

    def free_cells(self):
        occ = self.obstacle_set
        return [c for c in self.grid.all_cells() if c not in occ]

    def obstacle_boxes(self):
        return merge_obstacle_cells(self.obstacles)

    def validate(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.continuity < 1:
            raise ValueError("continuity must be at least 1")
        if self.degree < 2 * self.continuity + 1:
            raise ValueError(
                f"degree {self.degree} too low: the endpoint derivative "
                f"constraints need degree >= 2*continuity + 1 = {2 * self.continuity + 1}"
            )
        if not self.weights or len(self.weights) > self.degree:
            raise ValueError("weights must list costs for derivatives 1..c with c <= degree")
        if any(w < 0 for w in self.weights) or not any(w > 0 for w in self.weights):
            raise ValueError("weights must be nonnegative with at least one positive entry")
        if any(r <= 0 for r in self.radii) or len(self.radii) != 3:
            raise ValueError("radii must be three positive numbers")
        if self.obstacle_radius <= 0:
            raise ValueError("obstacle_radius must be positive")
        if self.samples_per_piece < 2:
            raise ValueError("samples_per_piece must be at least 2")
        if self.refine_iterations < 0:
            raise ValueError("refine_iterations must be nonnegative")
        # Horizontally adjacent robots must already satisfy the ellipsoid
        # separation, otherwise no grid plan is ever collision free.
        if self.grid.cell_size <= 2.0 * max(self.radii[0], self.radii[1]):
            raise ValueError(
                f"cell_size {self.grid.cell_size} must exceed twice the "
                f"horizontal radius {max(self.radii[0], self.radii[1])}"
            )

        if len(self.starts) != len(self.goals):
            raise ValueError("starts and goals must pair up one to one")
        if not self.starts:
            raise ValueError("at least one robot is required")
        if len(set(self.starts)) != len(self.starts):
            raise ValueError("duplicate start cells")
        if len(set(self.goals)) != len(self.goals):
            raise ValueError("duplicate goal cells")

        occ = self.obstacle_set
        for label, cells in (("obstacle", self.obstacles), ("start", self.starts), ("goal", self.goals)):
            for c in cells:
                if not self.grid.in_bounds(c):
                    raise ValueError(f"{label} cell {c} out of bounds for dims {self.grid.dims}")
        for label, cells in (("start", self.starts), ("goal", self.goals)):
            for c in cells:
                if c in occ:
                    raise ValueError(f"{label} cell {c} lies inside an obstacle")

        # Robots sit at starts (and later goals) simultaneously, so those
        # configurations must be pairwise collision free.
        ell = self.robot_ellipsoid
        for label, cells in (("start", self.starts), ("goal", self.goals)):
            pts = self.grid.cell_centers(cells)
            for i in range(len(cells)):
                for j in range(i + 1, len(cells)):
                    if not collision_free(pts[i], pts[j], ell):
                        raise ValueError(
                            f"{label} cells {cells[i]} and {cells[j]} violate the "
                            f"ellipsoid separation"
                        )

    def to_dict(self):
        return {
            "grid": {
                "dims": list(self.grid.dims),
                "cell_size": self.grid.cell_size,
                "origin": list(self.grid.origin),
            },
            "obstacles": [list(c) for c in self.obstacles],
            "starts": [list(c) for c in self.starts],
            "goals": [list(c) for c in self.goals],
            "dt": self.dt,
            "degree": self.degree,
            "continuity": self.continuity,
            "weights": list(self.weights),
            "radii": list(self.radii),
            "obstacle_radius": self.obstacle_radius,
            "samples_per_piece": self.samples_per_piece,
            "refine_iterations": self.refine_iterations,
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - _SCENARIO_KEYS
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        if "grid" not in data:
            raise ValueError("scenario requires a grid")
        grid_data = dict(data["grid"])
        unknown = set(grid_data) - _GRID_KEYS
        if unknown:
            raise ValueError(f"unknown grid keys: {sorted(unknown)}")
        if "dims" not in grid_data:
            raise ValueError("grid requires dims")
        grid = GridSpec(
            dims=grid_data["dims"],
            cell_size=grid_data.get("cell_size", DEFAULT_CELL_SIZE),
            origin=tuple(grid_data.get("origin", (0.0, 0.0, 0.0))),
        )
        for key in ("starts", "goals"):
            if key not in data:
                raise ValueError(f"scenario requires {key}")
        kwargs = {k: data[k] for k in _SCENARIO_KEYS - {"grid"} if k in data}
        return cls(grid=grid, **kwargs)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise ValueError("scenario file must hold a JSON object")
        return cls.from_dict(data)
