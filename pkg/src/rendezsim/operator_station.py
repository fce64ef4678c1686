"""Operator-side state: received knowledge, requests, and movement limits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .comms import DataPacket, merge_into
from .grid import FREE, NO_CLASS, GridMap, Pose
from .messages import (Q0, Q1, Q2, FailureNotice, PriorityRegion, Request,
                       RequestCache, point_in_polygon)
from .plan import PlanEvent


@dataclass
class ReturnSummary:
    stamp: float
    pose: Pose
    battery: float = 1.0


@dataclass
class OperatorState:
    pose: Pose
    map: GridMap
    stamps: list[float]
    bound: float
    pending: list[Request] = field(default_factory=list)
    move_goal: Pose | None = None
    move_path: list[Pose] = field(default_factory=list)
    move_speed: float = 0.5
    leftover_m: float = 0.0
    summaries: dict[int, ReturnSummary] = field(default_factory=dict)
    known_dead: set[int] = field(default_factory=set)
    regions: dict[str, PriorityRegion] = field(default_factory=dict)
    fulfilled: set[str] = field(default_factory=set)
    last_region: list[Pose] = field(default_factory=list)
    bound_changed_at: float = 0.0

    def active_regions(self) -> list[PriorityRegion]:
        live = [r for rid, r in self.regions.items() if rid not in self.fulfilled]
        live.sort(key=lambda r: (r.issued_at, r.id))
        return live


def receive_return(op: OperatorState, packet: DataPacket, arrival: float,
                   formal: bool) -> int:
    """Fold a delivered packet into the operator's knowledge.

    Returns the number of newly known map cells. ``formal`` marks a planned
    return event rather than an opportunistic in-range contact; summaries
    shown to the console update either way.
    """
    new_cells = merge_into(op.map, packet.map)
    for n, carried in enumerate(packet.know_now):
        if carried > op.stamps[n]:
            op.stamps[n] = carried
    op.stamps[packet.sender] = arrival
    if formal:
        op.summaries[packet.sender] = ReturnSummary(arrival, packet.pose)
        for robot, (stamp, pose) in packet.fleet.poses.items():
            cur = op.summaries.get(robot)
            if robot != packet.sender and (cur is None or stamp > cur.stamp):
                op.summaries[robot] = ReturnSummary(min(stamp, arrival), pose)
    for notice in packet.cache.notices.values():
        op.known_dead.add(notice.failed)
    return new_cells


def outgoing_cache(op: OperatorState, arrival: float) -> RequestCache:
    """Everything the operator hands to a robot at a return event."""
    cache = RequestCache(op.bound, bound_stamp=op.bound_changed_at,
                         operator_pose=_announced_pose(op),
                         operator_pose_stamp=arrival)
    for rid, region in op.regions.items():
        cache.regions[rid] = region
    cache.fulfilled = set(op.fulfilled)
    cache.notices = {n: FailureNotice(n, -1, arrival) for n in op.known_dead}
    return cache


def _announced_pose(op: OperatorState) -> Pose:
    # A committed move is announced before the operator starts walking.
    return op.move_path[-1] if op.move_path else op.pose


def apply_q0(op: OperatorState, new_bound: float, now: float) -> None:
    """New latency bound for future coordinations; confirmed events keep the old one."""
    if new_bound <= 0:
        raise ValueError("latency bound must be positive")
    op.bound = new_bound
    op.bound_changed_at = now


def add_region(op: OperatorState, request: Request) -> PriorityRegion:
    region = PriorityRegion.of(request.polygon, request.issued_at)
    op.regions[region.id] = region
    return region


def region_explored(op: OperatorState, region: PriorityRegion) -> bool:
    """A priority region is done once no unknown cell remains inside it."""
    xs = [p.x for p in region.polygon]
    ys = [p.y for p in region.polygon]
    x0, x1 = max(min(xs), 0), min(max(xs), op.map.width - 1)
    y0, y1 = max(min(ys), 0), min(max(ys), op.map.height - 1)
    for y in range(y0, y1 + 1):
        for x in range(x0, x1 + 1):
            if op.map.cells[y, x] == 0 and point_in_polygon(Pose(x, y), region.polygon):
                return False
    return True


def compute_feasible_region(op: OperatorState,
                            events_by_robot: dict[int, list[PlanEvent]],
                            ) -> set[Pose]:
    """Poses the operator may move to without endangering any confirmed meeting.

    A pose qualifies when, for every pending event of every robot, it is no
    farther from the event in travel steps (within the operator's own map)
    than the current pose. Distances use the operator's known-free space.
    """
    grid = op.map
    reach = grid.distance_field(op.pose, NO_CLASS)
    mask = (reach >= 0)
    for events in events_by_robot.values():
        for ev in events:
            if not grid.in_bounds(ev.place):
                continue
            dist = grid.distance_field(ev.place, NO_CLASS)
            here = int(dist[op.pose.y, op.pose.x])
            if here < 0:
                mask &= dist < 0
            else:
                mask &= (dist >= 0) & (dist <= here)
    mask &= grid.cells == FREE
    ys, xs = np.nonzero(mask)
    region = {Pose(int(x), int(y)) for x, y in zip(xs, ys)}
    region.add(op.pose)
    return region


def decompose_goal(op: OperatorState, goal: Pose, region: set[Pose]) -> Pose:
    """Next waypoint toward a goal that may lie outside the feasible region."""
    if goal in region:
        return goal
    dist = op.map.distance_field(goal, NO_CLASS)
    best = None
    best_key = None
    for p in region:
        d = int(dist[p.y, p.x])
        cost = d if d >= 0 else math.inf
        key = (cost, p.y * op.map.width + p.x)
        if best_key is None or key < best_key:
            best, best_key = p, key
    return best if best is not None else op.pose


def max_reach_bound(n_robots: int, latency_bound: float,
                    v_max: float, comm_range: float) -> float:
    """Farthest explorable distance with a static operator."""
    return (1.0 - 1.0 / (2 ** n_robots)) * latency_bound * v_max \
        + n_robots * comm_range
