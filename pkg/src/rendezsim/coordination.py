"""Pairwise meeting-time planning: partition, routing, and the next event.

Executed whenever two robots hold a planned meeting. The pair fuses maps,
splits the eligible frontiers, packs as many as fit between already
confirmed events, then picks the next meeting point so that whichever robot
would head home afterwards still gets every fleet member's data to the
operator inside the latency bound. When that check cannot be met the robot
whose detour restores the most slack is sent home first; when frontiers are
what break it, the costliest are dropped one by one.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

from .comms import build_packet, dedupe_frontiers, eligible_frontiers, merge_into
from .frontier import Frontier, extract_frontiers
from .grid import NO_CLASS, GridMap, GridPath, Pose, shortest_path, travel_time
from .messages import PriorityRegion, RequestCache
from .plan import (KIND_PLANNED, KIND_RETURN, OPERATOR, PathSegment, Plan,
                   PlanEvent, arrival_after, quantize_up)
from .robot import RobotState, build_segment
from .stamps import (bounded_min, merge_operator_stamps, update_after_return,
                     update_local_stamps)


class CoordinationFault(RuntimeError):
    """The planning loop failed to find a feasible meeting; simulator bug."""


@dataclass(frozen=True)
class Departure:
    time: float
    place: Pose


@dataclass
class CoordinationContext:
    """Shared inputs for one pairwise planning transaction."""

    grid: GridMap                    # merged local map of the pair
    bound: float                     # latency bound the pair believes in
    operator_pose: Pose              # operator location the pair believes in
    operator_est: list[float]        # merged operator-side stamp estimates
    known_dead: set[int] = field(default_factory=set)
    regions: list[PriorityRegion] = field(default_factory=list)
    speeds: dict[int, float] = field(default_factory=dict)
    classes: dict[int, int] = field(default_factory=dict)
    check_speed: float = 0.5         # slowest fleet speed; keeps the bound safe
    min_scope: list[int] | None = None   # stamp entries this pair answers for
    dt: float = 0.5
    now: float = 0.0

    def deadline(self, est: list[float] | None = None) -> float:
        values = self.operator_est if est is None else est
        if self.min_scope is not None:
            values = [values[n] for n in self.min_scope]
            dead = {i for i, n in enumerate(self.min_scope) if n in self.known_dead}
            return self.bound + bounded_min(values, dead)
        return self.bound + bounded_min(values, self.known_dead)

    def region_center(self, region: PriorityRegion) -> Pose:
        sx = sum(p.x for p in region.polygon) / len(region.polygon)
        sy = sum(p.y for p in region.polygon) / len(region.polygon)
        best = None
        best_key = None
        passable = self.grid.passable_mask(NO_CLASS)
        for y in range(self.grid.height):
            for x in range(self.grid.width):
                if passable[y, x]:
                    key = ((x - sx) ** 2 + (y - sy) ** 2, y * self.grid.width + x)
                    if best_key is None or key < best_key:
                        best, best_key = Pose(x, y), key
        return best if best is not None else self.operator_pose


def check_meet_constraint(t: float, place: Pose, ctx: CoordinationContext,
                          est: list[float] | None = None) -> bool:
    """Meeting is safe when a post-meeting trip home still beats the deadline."""
    trip = travel_time(ctx.grid, place, ctx.operator_pose, ctx.check_speed, NO_CLASS)
    return t + trip <= ctx.deadline(est) + 1e-9


def _check_quantized(t: float, place: Pose, ctx: CoordinationContext,
                     est: list[float] | None = None) -> bool:
    trip = travel_time(ctx.grid, place, ctx.operator_pose, ctx.check_speed, NO_CLASS)
    if math.isinf(trip):
        return False
    home = arrival_after(t, trip * ctx.check_speed, ctx.check_speed, ctx.dt)
    return home <= ctx.deadline(est) + 1e-9


def select_comm_point(path: GridPath, dep_i: Departure, dep_j: Departure,
                      speed_i: float, speed_j: float, resolution: float,
                      arrival_i: list[float] | None = None,
                      arrival_j: list[float] | None = None,
                      feasible: list[bool] | None = None,
                      floor: float | None = None,
                      ) -> tuple[Pose, float, int] | None:
    """Cell on ``path`` minimizing when the later robot gets there.

    Robot i walks from the path start, robot j from the end. Ties break
    toward the cell nearest i's end. Callers may pass precomputed arrival
    profiles (e.g. tick-quantized ones), a feasibility mask, and a floor
    that keeps the chosen meeting strictly in the future; the default
    profiles are plain distance/speed along the path.
    """
    n = len(path.waypoints)
    if n == 0:
        return None
    if arrival_i is None:
        arrival_i = [dep_i.time + m * resolution / speed_i for m in range(n)]
    if arrival_j is None:
        arrival_j = [dep_j.time + (n - 1 - m) * resolution / speed_j for m in range(n)]
    best = None
    for m in range(n):
        if feasible is not None and not feasible[m]:
            continue
        t = max(arrival_i[m], arrival_j[m])
        if floor is not None and t < floor:
            t = floor
        if best is None or t < best[1] - 1e-12:
            best = (path.waypoints[m], t, m)
    return best


def arrival_profile(path: GridPath, goals: dict[int, str], dep: Departure,
                    speed: float, resolution: float, dt: float,
                    reverse: bool = False) -> list[float]:
    """Tick-exact arrival time at every path cell, honoring goal stops.

    Matches execution: the robot departs a tick boundary, pauses at each
    frontier goal, and every leg arrival rounds up to the tick grid.
    """
    n = len(path.waypoints)
    order = range(n - 1, -1, -1) if reverse else range(n)
    out = [0.0] * n
    anchor_t = dep.time
    anchor_m = next(iter(order))
    for m in order:
        steps = abs(m - anchor_m)
        out[m] = arrival_after(anchor_t, steps * resolution, speed, dt)
        if m in goals and m != anchor_m:
            anchor_t = out[m]
            anchor_m = m
    return out


def split_path(path: GridPath, meet: Pose, index: int | None = None,
               ) -> tuple[GridPath, GridPath]:
    """Halves of a joint path: start to meet, and end back to meet."""
    if index is None:
        index = path.waypoints.index(meet)
    first = GridPath(tuple(path.waypoints[: index + 1]))
    second = GridPath(tuple(reversed(path.waypoints[index:])))
    return first, second


def frontier_cost(f: Frontier, ctx: CoordinationContext,
                  dep_i: Departure, dep_j: Departure,
                  speed_i: float, speed_j: float) -> float:
    """Time price of keeping ``f``; the costliest frontier is pruned first.

    With a priority region active, distance to the region center is the
    whole cost, so frontiers near the region survive pruning longest.
    """
    if ctx.regions:
        return min(travel_time(ctx.grid, f.centroid, ctx.region_center(r),
                               ctx.check_speed, NO_CLASS)
                   for r in ctx.regions)
    home = travel_time(ctx.grid, f.centroid, ctx.operator_pose, ctx.check_speed, NO_CLASS)
    reach_i = travel_time(ctx.grid, f.centroid, dep_i.place, speed_i, NO_CLASS)
    reach_j = travel_time(ctx.grid, f.centroid, dep_j.place, speed_j, NO_CLASS)
    return home + max(reach_i, reach_j)


def choose_returning_robot(feasible_i: bool, feasible_j: bool,
                           gain_i: float, gain_j: float) -> tuple[str, ...]:
    """Which of the pair heads home; ("i","j") when neither alone suffices."""
    if feasible_i and not feasible_j:
        return ("i",)
    if feasible_j and not feasible_i:
        return ("j",)
    if feasible_i and feasible_j:
        if gain_j > gain_i:
            return ("j",)
        return ("i",)  # ties go to the lower id; callers order i < j
    return ("i", "j")


def partition_frontiers(usable: list[Frontier],
                        events_i: list[PlanEvent], events_j: list[PlanEvent],
                        fallback_i: Pose, fallback_j: Pose,
                        ctx: CoordinationContext, i: int, j: int,
                        ) -> tuple[list[Frontier], list[Frontier]]:
    """Each frontier goes to the robot whose confirmed stops sit closer."""
    anchors_i = [e.place for e in events_i] or [fallback_i]
    anchors_j = [e.place for e in events_j] or [fallback_j]
    mine: list[Frontier] = []
    theirs: list[Frontier] = []
    for f in usable:
        di = min(travel_time(ctx.grid, a, f.centroid, ctx.speeds[i], ctx.classes[i])
                 for a in anchors_i)
        dj = min(travel_time(ctx.grid, a, f.centroid, ctx.speeds[j], ctx.classes[j])
                 for a in anchors_j)
        if dj < di:
            theirs.append(f)
        else:
            mine.append(f)  # ties fall to the lower id (caller passes i < j)
    return mine, theirs


@dataclass
class RoutedLeg:
    """One inter-event stretch after frontier insertion."""

    depart: Departure
    event: PlanEvent
    goals: list[Frontier] = field(default_factory=list)


def route_between_events(robot: RobotState, frontiers: list[Frontier],
                         ctx: CoordinationContext,
                         ) -> tuple[list[RoutedLeg], list[Frontier]]:
    """Greedy cheapest insertion of frontiers into confirmed-event windows.

    A frontier only lands where the tick-exact traversal still reaches the
    window's event on time; whatever fits nowhere is left for the joint
    meeting-path pool.
    """
    speed = ctx.speeds[robot.id]
    cls = ctx.classes[robot.id]
    events = robot.pending_events()
    legs: list[RoutedLeg] = []
    cursor = Departure(ctx.now, robot.pose)
    for ev in events:
        legs.append(RoutedLeg(cursor, ev))
        cursor = Departure(ev.time, ev.place)
    if not legs:
        return [], list(frontiers)

    def leg_arrival(leg: RoutedLeg, goals: list[Frontier]) -> float:
        t = leg.depart.time
        prev = leg.depart.place
        for g in goals:
            d = travel_time(ctx.grid, prev, g.centroid, speed, cls)
            if math.isinf(d):
                return math.inf
            t = arrival_after(t, d * speed, speed, ctx.dt)
            prev = g.centroid
        d = travel_time(ctx.grid, prev, leg.event.place, speed, cls)
        if math.isinf(d):
            return math.inf
        return arrival_after(t, d * speed, speed, ctx.dt)

    def plain_cost(leg: RoutedLeg, goals: list[Frontier]) -> float:
        t = 0.0
        prev = leg.depart.place
        for g in goals:
            t += travel_time(ctx.grid, prev, g.centroid, speed, cls)
            prev = g.centroid
        return t + travel_time(ctx.grid, prev, leg.event.place, speed, cls)

    remaining = list(frontiers)
    while remaining:
        best = None
        for f in remaining:
            for leg_idx, leg in enumerate(legs):
                base = plain_cost(leg, leg.goals)
                for pos in range(len(leg.goals) + 1):
                    trial = leg.goals[:pos] + [f] + leg.goals[pos:]
                    if leg_arrival(leg, trial) > leg.event.time + 1e-9:
                        continue
                    added = plain_cost(leg, trial) - base
                    key = (added, f.anchor, leg_idx, pos)
                    if best is None or key < best[0]:
                        best = (key, f, leg_idx, pos)
        if best is None:
            break
        _, f, leg_idx, pos = best
        legs[leg_idx].goals.insert(pos, f)
        remaining.remove(f)
    return legs, remaining


def solve_open_tsp(start: Pose, frontiers: list[Frontier], end: Pose,
                   time_fn) -> list[Frontier]:
    """Visit order minimizing start -> ... -> end travel time.

    Exact bitmask dynamic programming up to 10 stops, nearest neighbor plus
    2-opt above that.
    """
    n = len(frontiers)
    if n == 0:
        return []
    if n == 1:
        return list(frontiers)
    pts = [f.centroid for f in frontiers]
    c_start = [time_fn(start, p) for p in pts]
    c_end = [time_fn(p, end) for p in pts]
    c = [[0.0 if a == b else time_fn(pts[a], pts[b]) for b in range(n)]
         for a in range(n)]
    if n <= 10:
        order_idx = _held_karp(n, c_start, c_end, c)
    else:
        order_idx = _two_opt(n, c_start, c_end, c)
    return [frontiers[k] for k in order_idx]


def _held_karp(n: int, c_start: list[float], c_end: list[float],
               c: list[list[float]]) -> list[int]:
    size = 1 << n
    dp = [[math.inf] * n for _ in range(size)]
    parent = [[-1] * n for _ in range(size)]
    for k in range(n):
        dp[1 << k][k] = c_start[k]
    for mask in range(size):
        row = dp[mask]
        for last in range(n):
            cur = row[last]
            if math.isinf(cur):
                continue
            for nxt in range(n):
                if mask & (1 << nxt):
                    continue
                nmask = mask | (1 << nxt)
                cand = cur + c[last][nxt]
                if cand < dp[nmask][nxt]:
                    dp[nmask][nxt] = cand
                    parent[nmask][nxt] = last
    full = size - 1
    best_last = min(range(n), key=lambda k: (dp[full][k] + c_end[k], k))
    order = []
    mask, last = full, best_last
    while last >= 0:
        order.append(last)
        mask, last = mask ^ (1 << last), parent[mask][last]
    order.reverse()
    return order


def _two_opt(n: int, c_start: list[float], c_end: list[float],
             c: list[list[float]]) -> list[int]:
    unvisited = list(range(n))
    order = []
    cur = -1
    while unvisited:
        nxt = min(unvisited,
                  key=lambda k: (c_start[k] if cur < 0 else c[cur][k], k))
        order.append(nxt)
        unvisited.remove(nxt)
        cur = nxt

    def total(seq):
        cost = c_start[seq[0]] + c_end[seq[-1]]
        for a, b in zip(seq, seq[1:]):
            cost += c[a][b]
        return cost

    improved = True
    while improved:
        improved = False
        for a in range(len(order) - 1):
            for b in range(a + 1, len(order)):
                cand = order[:a] + order[a:b + 1][::-1] + order[b + 1:]
                if total(cand) < total(order) - 1e-12:
                    order = cand
                    improved = True
    return order


@dataclass
class NextCommResult:
    meeting: PlanEvent
    tail_i: PathSegment
    tail_j: PathSegment
    goals_i: list[Frontier]
    goals_j: list[Frontier]
    returns: dict[int, PlanEvent]
    return_segments: dict[int, PathSegment]
    operator_est: list[float]
    pruned: list[tuple[str, float]]
    iterations: int
    pool_size: int


def optimize_next_comm(ri_id: int, rj_id: int,
                       dep_i: Departure, dep_j: Departure,
                       local_i: list[float], local_j: list[float],
                       pool: list[Frontier], ctx: CoordinationContext,
                       strict: bool = True,
                       forced_returner: int | None = None,
                       ) -> NextCommResult:
    """Insert return events if needed, then place the next meeting.

    The iterative loop drops the costliest frontier whenever no cell of the
    joint traversal admits a meeting that keeps the deadline; it terminates
    within pool size + 1 iterations.
    """
    grid = ctx.grid
    res = grid.resolution
    est = list(ctx.operator_est)
    speed_i, speed_j = ctx.speeds[ri_id], ctx.speeds[rj_id]
    returns: dict[int, PlanEvent] = {}
    return_segments: dict[int, PathSegment] = {}

    def insert_return(robot_id: int, dep: Departure, local: list[float],
                      cur_est: list[float]) -> tuple[Departure, list[float], PlanEvent]:
        speed = ctx.speeds[robot_id]
        cls = ctx.classes[robot_id]
        trip = travel_time(grid, dep.place, ctx.operator_pose, speed, cls)
        arrival = arrival_after(dep.time, trip * speed, speed, ctx.dt)
        new_est = update_after_return(cur_est, local, robot_id, arrival)
        ev = PlanEvent(arrival, ctx.operator_pose, robot_id, OPERATOR, KIND_RETURN)
        return Departure(arrival, ctx.operator_pose), new_est, ev

    def meet_floor() -> float:
        # meetings land at least one tick after both departures and now
        return max(quantize_up(ctx.now + ctx.dt, ctx.dt),
                   dep_i.time + ctx.dt, dep_j.time + ctx.dt)

    floor = meet_floor()

    # Return decision: probe the direct meeting first.
    direct = shortest_path(grid, dep_i.place, dep_j.place, NO_CLASS)
    need_return = True
    if direct is not None:
        arr_i = arrival_profile(direct, {}, dep_i, speed_i, res, ctx.dt)
        arr_j = arrival_profile(direct, {}, dep_j, speed_j, res, ctx.dt, reverse=True)
        probe = select_comm_point(direct, dep_i, dep_j, speed_i, speed_j, res,
                                  arr_i, arr_j, floor=floor)
        need_return = probe is None or not _check_quantized(probe[1], probe[0], ctx, est)

    if need_return:
        cand = {}
        for rid, dep, local in ((ri_id, dep_i, local_i), (rj_id, dep_j, local_j)):
            new_dep, new_est, ev = insert_return(rid, dep, local, est)
            other_dep = dep_j if rid == ri_id else dep_i
            path = shortest_path(grid, new_dep.place, other_dep.place, NO_CLASS)
            feasible = False
            if path is not None and not math.isinf(new_dep.time):
                cand_floor = max(floor, new_dep.time + ctx.dt,
                                 other_dep.time + ctx.dt)
                feasible = _direct_feasible(path, new_dep, other_dep,
                                            ctx.speeds[rid],
                                            ctx.speeds[rj_id if rid == ri_id else ri_id],
                                            ctx, new_est, cand_floor)
            gain = ctx.deadline(new_est)
            cand[rid] = (feasible, gain, new_dep, new_est, ev)
        if forced_returner is not None:
            chosen = (forced_returner,) if forced_returner in (ri_id, rj_id) else ()
        else:
            sides = choose_returning_robot(cand[ri_id][0], cand[rj_id][0],
                                           cand[ri_id][1], cand[rj_id][1])
            chosen = tuple(ri_id if s == "i" else rj_id for s in sides)
        for rid in sorted(chosen):
            dep = dep_i if rid == ri_id else dep_j
            local = local_i if rid == ri_id else local_j
            new_dep, est, ev = insert_return(rid, dep, local, est)
            cls = ctx.classes[rid]
            seg_path = shortest_path(grid, dep.place, ctx.operator_pose, cls)
            if seg_path is None:
                seg_path = GridPath((dep.place,))
            returns[rid] = ev
            return_segments[rid] = PathSegment(seg_path)
            if rid == ri_id:
                dep_i = new_dep
            else:
                dep_j = new_dep
        floor = meet_floor()

    # Frontier pool, mutually reachable only.
    field_i = grid.distance_field(dep_i.place, NO_CLASS)
    field_j = grid.distance_field(dep_j.place, NO_CLASS)
    pool_f = [f for f in pool
              if field_i[f.centroid.y, f.centroid.x] >= 0
              and field_j[f.centroid.y, f.centroid.x] >= 0]
    pool_f.sort(key=lambda f: f.anchor)
    pool_size = len(pool_f)

    def pair_time(a: Pose, b: Pose) -> float:
        return travel_time(grid, a, b, ctx.check_speed, NO_CLASS)

    home_field = grid.distance_field(ctx.operator_pose, NO_CLASS)
    deadline = ctx.deadline(est)
    leg_cache: dict[tuple[Pose, Pose], GridPath] = {}

    def leg(a: Pose, b: Pose) -> GridPath | None:
        cached = leg_cache.get((a, b))
        if cached is None:
            cached = shortest_path(grid, a, b, NO_CLASS)
            if cached is not None:
                leg_cache[(a, b)] = cached
                leg_cache[(b, a)] = GridPath(tuple(reversed(cached.waypoints)))
        return cached

    pruned: list[tuple[str, float]] = []
    iterations = 0
    keep = list(pool_f)
    selection = None
    while True:
        iterations += 1
        if iterations > pool_size + 2:
            raise CoordinationFault("meeting-point pruning failed to terminate")
        order = solve_open_tsp(dep_i.place, keep, dep_j.place, pair_time)
        waypoints: list[Pose] = [dep_i.place]
        goals: dict[int, str] = {}
        goal_of: dict[int, Frontier] = {}
        ok = True
        cur = dep_i.place
        for f in order:
            piece = leg(cur, f.centroid)
            if piece is None:
                ok = False
                break
            waypoints.extend(piece.waypoints[1:])
            goals[len(waypoints) - 1] = f.id
            goal_of[len(waypoints) - 1] = f
            cur = f.centroid
        if ok:
            piece = leg(cur, dep_j.place)
            ok = piece is not None
            if ok:
                waypoints.extend(piece.waypoints[1:])
        if not ok:
            joint = None
        else:
            joint = GridPath(tuple(waypoints))
            arr_i = arrival_profile(joint, goals, dep_i, speed_i, res, ctx.dt)
            arr_j = arrival_profile(joint, goals, dep_j, speed_j, res, ctx.dt,
                                    reverse=True)
            feasible = []
            for m, p in enumerate(joint.waypoints):
                steps = int(home_field[p.y, p.x])
                if steps < 0:
                    feasible.append(False)
                    continue
                t = max(arr_i[m], arr_j[m], floor)
                back = arrival_after(t, steps * res, ctx.check_speed, ctx.dt)
                feasible.append(back <= deadline + 1e-9)
            selection = select_comm_point(joint, dep_i, dep_j, speed_i, speed_j,
                                          res, arr_i, arr_j, feasible, floor=floor)
        if selection is not None:
            break
        if not keep:
            if joint is None:
                raise CoordinationFault("no joint path between the pair")
            if strict:
                raise CoordinationFault("no feasible meeting with empty pool")
            # Best effort for bound-free baselines: accept the unconstrained point.
            selection = select_comm_point(joint, dep_i, dep_j, speed_i, speed_j,
                                          res, arr_i, arr_j, floor=floor)
            break
        worst = max(keep, key=lambda f: (frontier_cost(f, ctx, dep_i, dep_j,
                                                       speed_i, speed_j),
                                         -f.anchor))
        pruned.append((worst.id, frontier_cost(worst, ctx, dep_i, dep_j,
                                               speed_i, speed_j)))
        keep.remove(worst)

    meet_pose, meet_t, meet_idx = selection
    meeting = PlanEvent(meet_t, meet_pose, min(ri_id, rj_id), max(ri_id, rj_id),
                        KIND_PLANNED)
    first, second = split_path(joint, meet_pose, meet_idx)
    goals_i = {m: goals[m] for m in goals if m <= meet_idx}
    goals_j_abs = {m: goals[m] for m in goals if m > meet_idx}
    tail_i = PathSegment(first, dict(goals_i))
    n = len(joint.waypoints)
    tail_j = PathSegment(second, {n - 1 - m: gid for m, gid in goals_j_abs.items()})
    split_i = [goal_of[m] for m in sorted(goals_i)]
    split_j = [goal_of[m] for m in sorted(goals_j_abs)]
    return NextCommResult(meeting, tail_i, tail_j, split_i, split_j,
                          returns, return_segments, est, pruned, iterations,
                          pool_size)


def _direct_feasible(path: GridPath, dep_a: Departure, dep_b: Departure,
                     speed_a: float, speed_b: float,
                     ctx: CoordinationContext, est: list[float],
                     floor: float) -> bool:
    res = ctx.grid.resolution
    arr_a = arrival_profile(path, {}, dep_a, speed_a, res, ctx.dt)
    arr_b = arrival_profile(path, {}, dep_b, speed_b, res, ctx.dt, reverse=True)
    for m, p in enumerate(path.waypoints):
        t = max(arr_a[m], arr_b[m], floor)
        if _check_quantized(t, p, ctx, est):
            return True
    return False


@dataclass
class PairSetup:
    """Engine-level knobs for one coordination transaction."""

    now: float
    dt: float
    check_speed: float
    strict: bool = True
    forced_returner: int | None = None
    min_scope: list[int] | None = None


@dataclass
class CoordinationOutcome:
    meeting: PlanEvent
    returns: dict[int, PlanEvent]
    pruned: list[tuple[str, float]]
    iterations: int
    pool_size: int
    exploration_complete: bool
    confirmed_before: dict[int, tuple[int, ...]]
    confirmed_after: dict[int, tuple[int, ...]]


def pairwise_coordinate(ri: RobotState, rj: RobotState,
                        setup: PairSetup) -> CoordinationOutcome:
    """The full planned-meeting transaction between two co-located robots.

    Fuses knowledge, re-divides the eligible frontiers, repacks the stretches
    between confirmed events, then plans return events and the next meeting.
    Both robots leave with consistent plans, stamps and caches.
    """
    if ri.id > rj.id:
        ri, rj = rj, ri
    now = setup.now
    packet_i = build_packet(ri, now)
    packet_j = build_packet(rj, now)

    merge_into(ri.local_map, packet_j.map)
    merge_into(rj.local_map, packet_i.map)
    grid = ri.local_map.copy()
    rj.local_map = grid.copy()
    ri.local_map = grid

    # Actual knowledge: right now each holds the other's data as of now.
    for r, other in ((ri, packet_j), (rj, packet_i)):
        r.refresh_own_stamp(now)
        r.know_now = [max(a, b) for a, b in zip(r.know_now, other.know_now)]
        r.know_now[ri.id] = now
        r.know_now[rj.id] = now
    cache = ri.cache.copy()
    cache.merge_from(rj.cache)
    ri.cache = cache
    rj.cache = cache.copy()
    fleet = ri.fleet.copy()
    fleet.merge_from(rj.fleet)
    ri.fleet = fleet
    rj.fleet = fleet.copy()
    dead = ri.known_dead | rj.known_dead
    ri.known_dead = set(dead)
    rj.known_dead = set(dead)

    speeds = {ri.id: ri.speed, rj.id: rj.speed}
    classes = {ri.id: ri.robot_class, rj.id: rj.robot_class}
    ctx = CoordinationContext(
        grid=grid,
        bound=cache.bound,
        operator_pose=cache.operator_pose,
        operator_est=merge_operator_stamps(packet_i.stamps.operator_est,
                                           packet_j.stamps.operator_est),
        known_dead=dead,
        regions=cache.active_regions(),
        speeds=speeds,
        classes=classes,
        check_speed=setup.check_speed,
        min_scope=setup.min_scope,
        dt=setup.dt,
        now=now,
    )

    merged_frontiers = extract_frontiers(grid)
    usable, exclusions = eligible_frontiers(
        merged_frontiers, packet_i.foreign, packet_j.assigned,
        packet_j.foreign, packet_i.assigned)

    events_i = ri.pending_events()
    events_j = rj.pending_events()
    mine, theirs = partition_frontiers(usable, events_i, events_j,
                                       ri.pose, rj.pose, ctx, ri.id, rj.id)
    legs_i, left_i = route_between_events(ri, mine, ctx)
    legs_j, left_j = route_between_events(rj, theirs, ctx)
    pool = left_i + left_j

    dep_i = Departure(events_i[-1].time, events_i[-1].place) if events_i \
        else Departure(now, ri.pose)
    dep_j = Departure(events_j[-1].time, events_j[-1].place) if events_j \
        else Departure(now, rj.pose)

    result = optimize_next_comm(ri.id, rj.id, dep_i, dep_j,
                                packet_i.stamps.local, packet_j.stamps.local,
                                pool, ctx, strict=setup.strict,
                                forced_returner=setup.forced_returner)

    confirmed_before = {ri.id: tuple(e.id for e in events_i),
                        rj.id: tuple(e.id for e in events_j)}

    new_assigned = {
        ri.id: [f for leg in legs_i for f in leg.goals] + result.goals_i,
        rj.id: [f for leg in legs_j for f in leg.goals] + result.goals_j,
    }
    for robot, legs, tail in ((ri, legs_i, result.tail_i),
                              (rj, legs_j, result.tail_j)):
        other = rj if robot is ri else ri
        plan = _assemble_plan(robot, legs, tail, result, ctx)
        robot.set_plan(plan)
        robot.assigned = dedupe_frontiers(new_assigned[robot.id])
        robot.foreign = dedupe_frontiers(new_assigned[other.id] + exclusions)
        robot.stamps.local = update_local_stamps(
            packet_i.stamps.local, packet_j.stamps.local,
            ri.id, rj.id, result.meeting.time)
        robot.stamps.operator_est = list(result.operator_est)

    for robot in (ri, rj):
        robot.fleet.note_events(ri.id, now, tuple(ri.pending_events()))
        robot.fleet.note_events(rj.id, now, tuple(rj.pending_events()))
        robot.fleet.note_pose(ri.id, now, ri.pose)
        robot.fleet.note_pose(rj.id, now, rj.pose)

    confirmed_after = {ri.id: tuple(e.id for e in ri.pending_events()),
                       rj.id: tuple(e.id for e in rj.pending_events())}
    return CoordinationOutcome(result.meeting, result.returns, result.pruned,
                               result.iterations, result.pool_size,
                               not merged_frontiers,
                               confirmed_before, confirmed_after)


def _assemble_plan(robot: RobotState, legs: list[RoutedLeg],
                   tail: PathSegment, result: NextCommResult,
                   ctx: CoordinationContext) -> Plan:
    steps: list = []
    cursor_pose = robot.pose
    for leg in legs:
        seg = build_segment(ctx.grid, cursor_pose,
                            [f.centroid for f in leg.goals],
                            [f.id for f in leg.goals],
                            leg.event.place, robot.robot_class)
        if seg is None:
            seg = build_segment(ctx.grid, cursor_pose, [], [],
                                leg.event.place, robot.robot_class)
        if seg is None:
            raise CoordinationFault(
                f"robot {robot.id} cannot reach confirmed event at {leg.event.place}")
        steps.append(seg)
        steps.append(leg.event)
        cursor_pose = leg.event.place
    ret = result.returns.get(robot.id)
    if ret is not None:
        steps.append(result.return_segments[robot.id])
        steps.append(ret)
        cursor_pose = ret.place
    steps.append(tail)
    steps.append(result.meeting)
    plan = Plan(steps)
    plan.validate()
    return plan
