"""Per-robot state: idealized sensing, plan execution and local adaptation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .frontier import Frontier, extract_frontiers, frontier_cell_mask
from .grid import OCCUPIED, UNKNOWN, GridMap, GridPath, Pose, supercover_line, travel_time
from .messages import FleetKnowledge, FrontierClaim, RequestCache
from .plan import OPERATOR, PathSegment, Plan, PlanEvent
from .stamps import TimestampVectors

MODE_EXPLORING = "exploring"
MODE_TRAVELING = "traveling"
MODE_WAITING = "waiting"
MODE_RETURNING = "returning"
MODE_FAILED = "failed"


@dataclass
class RobotState:
    id: int
    pose: Pose
    speed: float
    robot_class: int
    local_map: GridMap
    stamps: TimestampVectors
    know_now: list[float]
    cache: RequestCache
    fleet: FleetKnowledge
    assigned: list[Frontier] = field(default_factory=list)
    claims: dict[str, FrontierClaim] = field(default_factory=dict)
    plan: Plan = field(default_factory=Plan)
    known_dead: set[int] = field(default_factory=set)
    alive: bool = True
    mode: str = MODE_TRAVELING
    # execution cursor into plan.steps
    cursor: int = 0
    wp_index: int = 0
    leftover_m: float = 0.0
    waiting_since: float | None = None
    odometer_m: float = 0.0

    def current_segment(self) -> PathSegment | None:
        if self.cursor < len(self.plan.steps):
            step = self.plan.steps[self.cursor]
            if isinstance(step, PathSegment):
                return step
        return None

    def current_event(self) -> PlanEvent | None:
        if self.cursor < len(self.plan.steps):
            step = self.plan.steps[self.cursor]
            if isinstance(step, PlanEvent):
                return step
        return None

    def pending_events(self) -> list[PlanEvent]:
        return [s for s in self.plan.steps[self.cursor:] if isinstance(s, PlanEvent)]

    def next_event(self) -> PlanEvent | None:
        for s in self.plan.steps[self.cursor:]:
            if isinstance(s, PlanEvent):
                return s
        return None

    def set_plan(self, plan: Plan) -> None:
        self.plan = plan
        self.cursor = 0
        self.wp_index = 0
        self.leftover_m = 0.0
        self.waiting_since = None

    def replace_current_segment(self, segment: PathSegment) -> None:
        """Swap the not-yet-traveled remainder; confirmed events stay put."""
        if self.current_segment() is None:
            raise RuntimeError("robot is not inside a path segment")
        self.plan.steps[self.cursor] = segment
        self.wp_index = 0
        self.leftover_m = 0.0

    def refresh_own_stamp(self, now: float) -> None:
        self.know_now[self.id] = now

    def foreign_frontiers(self) -> list[Frontier]:
        """Frontiers this robot believes other robots currently own.

        Limited to claims still touching a frontier cell of the local map,
        so explored areas fall out of everyone's bookkeeping naturally.
        """
        mask = frontier_cell_mask(self.local_map)
        out = []
        for claim in self.claims.values():
            if claim.owner is None or claim.owner == self.id:
                continue
            if any(mask[p.y, p.x] for p in claim.cells):
                out.append(Frontier(claim.cells, claim.centroid, claim.frontier_id))
        out.sort(key=lambda f: f.anchor)
        return out


@dataclass(frozen=True)
class GoalArrival:
    frontier_id: str
    pose: Pose


@dataclass(frozen=True)
class EventArrival:
    event: PlanEvent


class SensorModel:
    """Precomputed visibility rays for one ground-truth map and sensor range.

    Visibility of a cell from a pose is: center distance within range and a
    supercover ray from the pose crossing no occupied cell strictly between
    the two. Results are cached per pose; the truth map never changes.
    """

    def __init__(self, truth: GridMap, sensor_range_m: float):
        self.truth = truth
        self.range_m = sensor_range_m
        r_cells = sensor_range_m / truth.resolution
        offsets = []
        limit = int(math.floor(r_cells))
        for dy in range(-limit, limit + 1):
            for dx in range(-limit, limit + 1):
                if dx == 0 and dy == 0:
                    continue
                if math.hypot(dx, dy) <= r_cells + 1e-9:
                    offsets.append((dx, dy))
        rays = [supercover_line(Pose(0, 0), Pose(dx, dy)) for dx, dy in offsets]
        inner_len = max((len(r) - 2 for r in rays), default=0)
        d = len(offsets)
        self._target = np.array(offsets, dtype=np.int32).reshape(d, 2) if d else np.zeros((0, 2), np.int32)
        self._inner = np.zeros((d, max(inner_len, 1), 2), dtype=np.int32)
        for k, ray in enumerate(rays):
            for m, cell in enumerate(ray[1:-1]):
                self._inner[k, m] = (cell.x, cell.y)
        self._cache: dict[Pose, np.ndarray] = {}

    def visible_flat(self, pose: Pose) -> np.ndarray:
        """Flat cell indices visible from ``pose`` (own cell included)."""
        cached = self._cache.get(pose)
        if cached is not None:
            return cached
        truth = self.truth
        w, h = truth.width, truth.height
        if self._target.shape[0] == 0:
            idx = np.array([pose.y * w + pose.x], dtype=np.int64)
            self._cache[pose] = idx
            return idx
        tx = self._target[:, 0] + pose.x
        ty = self._target[:, 1] + pose.y
        valid = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
        ix = np.clip(self._inner[:, :, 0] + pose.x, 0, w - 1)
        iy = np.clip(self._inner[:, :, 1] + pose.y, 0, h - 1)
        occ = truth.cells[iy, ix] == OCCUPIED
        # padded entries alias the robot's own free cell and never block
        blocked = occ.any(axis=1)
        vis = valid & ~blocked
        idx = (ty[vis] * w + tx[vis]).astype(np.int64)
        idx = np.append(idx, pose.y * w + pose.x)
        self._cache[pose] = idx
        return idx


def sense(truth: GridMap, robot: RobotState, sensor: SensorModel) -> int:
    """Copy every visible truth cell into the local map; returns new-cell count."""
    idx = sensor.visible_flat(robot.pose)
    local_flat = robot.local_map.cells.ravel()
    fresh = local_flat[idx] == UNKNOWN
    count = int(fresh.sum())
    if count:
        local_flat[idx[fresh]] = truth.cells.ravel()[idx[fresh]]
        robot.local_map.touch()
    return count


def retire_dead_frontiers(robot: RobotState) -> None:
    """Drop own frontiers with any member cell no longer on the boundary."""
    if not robot.assigned:
        return
    mask = frontier_cell_mask(robot.local_map)
    robot.assigned = [f for f in robot.assigned
                      if all(mask[p.y, p.x] for p in f.cells)]


def frontier_priority(robot: RobotState, f: Frontier,
                      weights: tuple[float, float, float],
                      foreign: list[Frontier] | None = None) -> float:
    """Score favoring frontiers near the robot and its own work, far from others'."""
    w1, w2, w3 = weights
    grid = robot.local_map
    if foreign is None:
        foreign = robot.foreign_frontiers()
    away = _mean_time(grid, f.centroid, [g.centroid for g in foreign],
                      robot.speed, robot.robot_class)
    here = travel_time(grid, robot.pose, f.centroid, robot.speed, robot.robot_class)
    near_own = _mean_time(grid, f.centroid, [g.centroid for g in robot.assigned],
                          robot.speed, robot.robot_class)
    return w1 * away - w2 * here - w3 * near_own


def _mean_time(grid: GridMap, src: Pose, targets: list[Pose],
               speed: float, robot_class: int) -> float:
    finite = []
    for t in targets:
        v = travel_time(grid, src, t, speed, robot_class)
        if not math.isinf(v):
            finite.append(v)
    return sum(finite) / len(finite) if finite else 0.0


def adapt_local_plan(robot: RobotState, now: float,
                     weights: tuple[float, float, float],
                     can_make_event: Callable[[Pose, Pose, float], bool] | None = None,
                     ) -> Frontier | None:
    """Pick the next frontier detour, or None to head straight for the event.

    Candidates are the current frontiers of the local map that still allow
    reaching the next confirmed event on time. ``can_make_event`` overrides
    the default feasibility test (the engine passes a tick-quantized one).
    """
    nxt = robot.next_event()
    if nxt is None:
        return None
    grid = robot.local_map

    if can_make_event is None:
        def can_make_event(pose: Pose, via: Pose, deadline: float) -> bool:
            total = (travel_time(grid, pose, via, robot.speed, robot.robot_class)
                     + travel_time(grid, via, nxt.place, robot.speed, robot.robot_class))
            return now + total < deadline

    best: Frontier | None = None
    best_score = -math.inf
    foreign = robot.foreign_frontiers()
    for f in extract_frontiers(grid):
        if f.centroid == robot.pose:
            continue
        if not can_make_event(robot.pose, f.centroid, nxt.time):
            continue
        score = frontier_priority(robot, f, weights, foreign)
        if score > best_score or (score == best_score and best is not None
                                  and f.anchor < best.anchor):
            best, best_score = f, score
    return best


def advance(robot: RobotState, dt: float) -> GoalArrival | EventArrival | None:
    """Move the robot along its current segment by one tick of travel budget.

    Stops at the first frontier goal or at the segment end; the dropped
    remainder of the budget is what the planner's tick-ceiling arithmetic
    already accounts for.
    """
    if not robot.alive:
        return None
    seg = robot.current_segment()
    if seg is None:
        return None
    path = seg.path.waypoints
    if len(path) <= 1:
        return _finish_segment(robot)
    budget = robot.leftover_m + robot.speed * dt
    step_m = robot.local_map.resolution
    while budget >= step_m - 1e-9 and robot.wp_index < len(path) - 1:
        budget -= step_m
        robot.wp_index += 1
        robot.pose = path[robot.wp_index]
        robot.odometer_m += step_m
        fid = seg.goals.get(robot.wp_index)
        if fid is not None and robot.wp_index < len(path) - 1:
            robot.leftover_m = 0.0
            return GoalArrival(fid, robot.pose)
    if robot.wp_index >= len(path) - 1:
        return _finish_segment(robot)
    robot.leftover_m = budget
    return None


def _finish_segment(robot: RobotState) -> EventArrival | None:
    seg = robot.current_segment()
    robot.pose = seg.path.end if len(seg.path) else robot.pose
    robot.leftover_m = 0.0
    robot.wp_index = 0
    robot.cursor += 1
    event = robot.current_event()
    if event is not None:
        robot.mode = MODE_WAITING
        return EventArrival(event)
    return None


def build_segment(grid: GridMap, start: Pose, goals: list[Pose],
                  goal_ids: list[str], end: Pose,
                  robot_class: int) -> PathSegment | None:
    """Concatenate shortest legs start -> goals... -> end into one segment."""
    from .grid import shortest_path

    waypoints: list[Pose] = [start]
    marks: dict[int, str] = {}
    cur = start
    for goal, gid in zip(goals, goal_ids):
        leg = shortest_path(grid, cur, goal, robot_class)
        if leg is None:
            return None
        waypoints.extend(leg.waypoints[1:])
        marks[len(waypoints) - 1] = gid
        cur = goal
    leg = shortest_path(grid, cur, end, robot_class)
    if leg is None:
        return None
    waypoints.extend(leg.waypoints[1:])
    return PathSegment(GridPath(tuple(waypoints)), marks)
