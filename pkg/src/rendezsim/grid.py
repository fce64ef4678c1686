"""Grid world primitives: tri-state occupancy maps, visibility and travel times."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

UNKNOWN = 0
FREE = 1
OCCUPIED = 2

NO_CLASS = -1

# Motion neighborhood in fixed N, E, S, W order so searches tie-break reproducibly.
STEPS_4 = ((0, -1), (1, 0), (0, 1), (-1, 0))


class Pose(NamedTuple):
    x: int
    y: int


class BoundsError(ValueError):
    """A pose fell outside the map."""


@dataclass
class GridPath:
    """A 4-connected waypoint sequence; consecutive waypoints are neighbors."""

    waypoints: tuple[Pose, ...]

    def __len__(self) -> int:
        return len(self.waypoints)

    @property
    def length_cells(self) -> int:
        return max(len(self.waypoints) - 1, 0)

    def length_m(self, resolution: float) -> float:
        return self.length_cells * resolution

    @property
    def start(self) -> Pose:
        return self.waypoints[0]

    @property
    def end(self) -> Pose:
        return self.waypoints[-1]


@dataclass
class GridMap:
    """Tri-state occupancy grid with optional per-cell traversability classes.

    ``cells`` is a (height, width) uint8 array of UNKNOWN/FREE/OCCUPIED.
    ``access`` restricts a cell to a single robot class; NO_CLASS means open
    to everyone. ``version`` increments on every mutation and keys the
    distance-field cache.
    """

    width: int
    height: int
    resolution: float
    cells: np.ndarray
    access: np.ndarray | None = None
    version: int = 0
    _fields: dict = field(default_factory=dict, repr=False)
    _masks: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("map dimensions must be positive")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.cells.shape != (self.height, self.width):
            raise ValueError("cells shape does not match dimensions")

    @classmethod
    def filled(cls, width: int, height: int, resolution: float, state: int = FREE) -> "GridMap":
        return cls(width, height, resolution,
                   np.full((height, width), state, dtype=np.uint8))

    def unknown_like(self) -> "GridMap":
        blank = np.full((self.height, self.width), UNKNOWN, dtype=np.uint8)
        access = None if self.access is None else self.access.copy()
        return GridMap(self.width, self.height, self.resolution, blank, access)

    def copy(self) -> "GridMap":
        access = None if self.access is None else self.access.copy()
        return GridMap(self.width, self.height, self.resolution,
                       self.cells.copy(), access)

    def in_bounds(self, p: Pose) -> bool:
        return 0 <= p.x < self.width and 0 <= p.y < self.height

    def require_in_bounds(self, p: Pose) -> None:
        if not self.in_bounds(p):
            raise BoundsError(f"pose {tuple(p)} outside {self.width}x{self.height} map")

    def state(self, p: Pose) -> int:
        return int(self.cells[p.y, p.x])

    def set_state(self, p: Pose, state: int) -> None:
        if self.cells[p.y, p.x] != state:
            self.cells[p.y, p.x] = state
            self.touch()

    def touch(self) -> None:
        self.version += 1
        self._fields.clear()
        self._masks.clear()

    def known_count(self) -> int:
        return int((self.cells != UNKNOWN).sum())

    def passable_mask(self, robot_class: int = NO_CLASS) -> np.ndarray:
        key = ("pass", self.version, robot_class)
        mask = self._masks.get(key)
        if mask is None:
            mask = self.cells == FREE
            if self.access is not None:
                mask = mask & ((self.access == NO_CLASS) | (self.access == robot_class))
            self._masks[key] = mask
        return mask

    def is_passable(self, p: Pose, robot_class: int = NO_CLASS) -> bool:
        return bool(self.passable_mask(robot_class)[p.y, p.x])

    def distance_field(self, source: Pose, robot_class: int = NO_CLASS) -> np.ndarray:
        """BFS cell-step distances from ``source``; -1 marks unreachable cells."""
        key = (source, robot_class, self.version)
        cached = self._fields.get(key)
        if cached is not None:
            return cached
        passable = self.passable_mask(robot_class)
        dist = np.full((self.height, self.width), -1, dtype=np.int32)
        if self.in_bounds(source) and passable[source.y, source.x]:
            dist[source.y, source.x] = 0
            frontier = np.zeros_like(passable)
            frontier[source.y, source.x] = True
            level = 0
            while frontier.any():
                level += 1
                grown = np.zeros_like(frontier)
                grown[1:, :] |= frontier[:-1, :]
                grown[:-1, :] |= frontier[1:, :]
                grown[:, 1:] |= frontier[:, :-1]
                grown[:, :-1] |= frontier[:, 1:]
                grown &= passable & (dist < 0)
                dist[grown] = level
                frontier = grown
        if len(self._fields) > 512:
            self._fields.clear()
        self._fields[key] = dist
        return dist


def supercover_line(a: Pose, b: Pose) -> list[Pose]:
    """Every cell the segment between the centers of ``a`` and ``b`` touches.

    Exact corner crossings include both side cells, which keeps visibility
    conservative and the cell set symmetric under endpoint swap.
    """
    x, y = a.x, a.y
    dx, dy = b.x - a.x, b.y - a.y
    nx, ny = abs(dx), abs(dy)
    sx = 1 if dx > 0 else -1
    sy = 1 if dy > 0 else -1
    cells = [Pose(x, y)]
    ix = iy = 0
    while ix < nx or iy < ny:
        decision = (1 + 2 * ix) * ny - (1 + 2 * iy) * nx
        if decision == 0:
            cells.append(Pose(x + sx, y))
            cells.append(Pose(x, y + sy))
            x += sx
            y += sy
            ix += 1
            iy += 1
        elif decision < 0:
            x += sx
            ix += 1
        else:
            y += sy
            iy += 1
        cells.append(Pose(x, y))
    return cells


def line_of_sight(grid: GridMap, a: Pose, b: Pose) -> bool:
    """True when no cell strictly between ``a`` and ``b`` is occupied.

    Endpoints never block, so a wall cell itself stays visible from an
    adjacent free cell while everything behind it is hidden.
    """
    grid.require_in_bounds(a)
    grid.require_in_bounds(b)
    cells = supercover_line(a, b)
    for p in cells[1:-1]:
        if grid.cells[p.y, p.x] == OCCUPIED:
            return False
    return True


def shortest_path(grid: GridMap, start: Pose, goal: Pose,
                  robot_class: int = NO_CLASS) -> GridPath | None:
    """Minimum-length 4-connected path over passable cells, or None.

    Ties resolve by expanding neighbors in N, E, S, W order so the same
    query always yields the same waypoints.
    """
    grid.require_in_bounds(start)
    grid.require_in_bounds(goal)
    passable = grid.passable_mask(robot_class)
    if not passable[start.y, start.x] or not passable[goal.y, goal.x]:
        return None
    if start == goal:
        return GridPath((start,))
    w, h = grid.width, grid.height
    parent = np.full(h * w, -1, dtype=np.int32)
    start_i = start.y * w + start.x
    goal_i = goal.y * w + goal.x
    parent[start_i] = start_i
    queue = [start_i]
    head = 0
    flat_pass = passable.ravel()
    while head < len(queue):
        cur = queue[head]
        head += 1
        if cur == goal_i:
            break
        cx = cur % w
        cy = cur // w
        for dx, dy in STEPS_4:
            nx_, ny_ = cx + dx, cy + dy
            if 0 <= nx_ < w and 0 <= ny_ < h:
                ni = ny_ * w + nx_
                if flat_pass[ni] and parent[ni] < 0:
                    parent[ni] = cur
                    queue.append(ni)
    if parent[goal_i] < 0:
        return None
    rev = []
    cur = goal_i
    while cur != start_i:
        rev.append(Pose(cur % w, cur // w))
        cur = int(parent[cur])
    rev.append(start)
    rev.reverse()
    return GridPath(tuple(rev))


def travel_time(grid: GridMap, p1: Pose, p2: Pose, speed: float,
                robot_class: int = NO_CLASS) -> float:
    """Shortest-path duration in seconds; math.inf when unreachable."""
    if speed <= 0:
        raise ValueError("speed must be positive")
    grid.require_in_bounds(p1)
    grid.require_in_bounds(p2)
    dist = grid.distance_field(p1, robot_class)
    steps = int(dist[p2.y, p2.x])
    if steps < 0:
        return math.inf
    return steps * grid.resolution / speed


def euclidean_m(grid: GridMap, a: Pose, b: Pose) -> float:
    return math.hypot(a.x - b.x, a.y - b.y) * grid.resolution
