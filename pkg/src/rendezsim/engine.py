"""Deterministic tick-driven simulation loop and scenario configuration.

One Simulation owns the ground truth, the fleet, the operator and the trace.
Each tick runs: command intake, scripted requests, failure injection,
sensing, motion, spontaneous exchanges, operator contacts, planned meeting
transactions, failure detection and repair, request fulfillment, operator
motion, the latency ledger, and termination checks. All event times live on
the tick grid, so identical configs replay byte-for-byte.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import threading
from dataclasses import dataclass, field

import numpy as np

from . import operator_station as ops
from .comms import build_packet, can_communicate, merge_into, spontaneous_exchange
from .coordination import (CoordinationFault, PairSetup, pairwise_coordinate)
from .frontier import extract_frontiers, frontier_cell_mask
from .grid import (FREE, NO_CLASS, UNKNOWN, GridMap, GridPath, Pose,
                   shortest_path, travel_time)
from .messages import (Q0, Q1, Q2, FailureNotice, FleetKnowledge,
                       PriorityRegion, Request, RequestCache)
from .metrics import MetricsLog, compute_metrics
from .operator_station import OperatorState
from .plan import (KIND_PLANNED, KIND_RETURN, OPERATOR, PathSegment, Plan,
                   PlanEvent, arrival_after, quantize_up)
from .robot import (MODE_EXPLORING, MODE_FAILED, MODE_RETURNING,
                    MODE_TRAVELING, MODE_WAITING, EventArrival, GoalArrival,
                    RobotState, SensorModel, adapt_local_plan, advance,
                    build_segment, retire_dead_frontiers, sense)
from .scene import Scene, generate_scene, parse_scene
from .stamps import TimestampVectors
from .trace import SCHEMA, SCHEMA_VERSION, OperatorView, TraceLog, runs_from_indices

STRATEGIES = ("iHERO", "iHERO-S", "HE-NA", "HE-FR", "BA-IND", "BA-SUB")
TOPOLOGIES = ("ring", "line", "tree", "full", "kite")


class ConfigError(ValueError):
    def __init__(self, problems: dict[str, str]):
        self.problems = problems
        super().__init__("; ".join(f"{k}: {v}" for k, v in sorted(problems.items())))


@dataclass
class ScenarioConfig:
    scene: dict
    n_robots: int = 4
    speeds: object = 0.5
    classes: list[int] | None = None
    sensor_range: float = 4.0
    comm_range: float = 3.5
    latency_bound: float = 120.0
    dt: float = 0.5
    topology: object = "ring"
    strategy: str = "iHERO"
    failures: list = field(default_factory=list)
    operator_script: list = field(default_factory=list)
    predecessor_timeout: float = 20.0
    successor_timeout: float = 40.0
    weights: tuple = (1.0, 1.0, 1.0)
    seed: int = 0
    max_duration: float = 1800.0
    decimation: int = 1

    def speed_of(self, rid: int) -> float:
        if isinstance(self.speeds, (int, float)):
            return float(self.speeds)
        return float(self.speeds[rid])

    def class_of(self, rid: int) -> int:
        if self.classes is None:
            return NO_CLASS
        return int(self.classes[rid])

    def validate(self) -> None:
        problems: dict[str, str] = {}
        if not isinstance(self.scene, dict) or not (
                set(self.scene) & {"file", "text", "generate"}):
            problems["scene"] = "needs one of file/text/generate"
        if self.n_robots < 1:
            problems["n_robots"] = "must be at least 1"
        if self.dt <= 0:
            problems["dt"] = "must be positive"
        if self.latency_bound <= 0:
            problems["latency_bound"] = "must be positive"
        if self.comm_range <= 0:
            problems["comm_range"] = "must be positive"
        if self.sensor_range < 0:
            problems["sensor_range"] = "must be non-negative"
        if self.strategy not in STRATEGIES:
            problems["strategy"] = f"unknown strategy {self.strategy!r}"
        if isinstance(self.topology, str):
            if self.topology not in TOPOLOGIES:
                problems["topology"] = f"unknown topology {self.topology!r}"
        elif not all(len(e) == 2 for e in self.topology):
            problems["topology"] = "custom topology must be an edge list"
        if self.successor_timeout <= self.predecessor_timeout:
            problems["successor_timeout"] = \
                "must exceed predecessor_timeout"
        if isinstance(self.speeds, (list, tuple)):
            if len(self.speeds) != self.n_robots:
                problems["speeds"] = "length must equal n_robots"
            elif any(v <= 0 for v in self.speeds):
                problems["speeds"] = "must be positive"
        elif self.speeds <= 0:
            problems["speeds"] = "must be positive"
        if self.classes is not None and len(self.classes) != self.n_robots:
            problems["classes"] = "length must equal n_robots"
        if self.max_duration <= 0:
            problems["max_duration"] = "must be positive"
        if self.decimation < 1:
            problems["decimation"] = "must be at least 1"
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return {
            "scene": self.scene,
            "n_robots": self.n_robots,
            "speeds": self.speeds,
            "classes": self.classes,
            "sensor_range": self.sensor_range,
            "comm_range": self.comm_range,
            "latency_bound": self.latency_bound,
            "dt": self.dt,
            "topology": self.topology,
            "strategy": self.strategy,
            "failures": [list(f) for f in self.failures],
            "operator_script": self.operator_script,
            "predecessor_timeout": self.predecessor_timeout,
            "successor_timeout": self.successor_timeout,
            "weights": list(self.weights),
            "seed": self.seed,
            "max_duration": self.max_duration,
            "decimation": self.decimation,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError({k: "unknown field" for k in unknown})
        kwargs = dict(data)
        if "weights" in kwargs:
            kwargs["weights"] = tuple(kwargs["weights"])
        if "failures" in kwargs:
            kwargs["failures"] = [tuple(f) for f in kwargs["failures"]]
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def config_hash(self) -> str:
        data = self.to_dict()
        data.pop("seed")
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha1(blob.encode()).hexdigest()[:12]


def load_scene(config: ScenarioConfig) -> Scene:
    spec = config.scene
    if "text" in spec:
        return parse_scene(spec["text"])
    if "file" in spec:
        with open(spec["file"], encoding="utf-8") as fh:
            return parse_scene(fh.read())
    return generate_scene(**spec["generate"])


def topology_edges(topology, n: int) -> list[tuple[int, int]]:
    if isinstance(topology, (list, tuple)):
        edges = {tuple(sorted(e)) for e in topology}
        return sorted(edges)
    if n < 2:
        return []
    if topology == "line":
        return [(k, k + 1) for k in range(n - 1)]
    if topology == "full":
        return [(a, b) for a in range(n) for b in range(a + 1, n)]
    if topology == "tree":
        return sorted((k, c) for k in range(n)
                      for c in (2 * k + 1, 2 * k + 2) if c < n)
    if topology == "kite" and n >= 4:
        cycle = [(k, k + 1) for k in range(n - 2)] + [(0, n - 2)]
        return sorted(set(tuple(sorted(e)) for e in cycle) | {(0, n - 1)})
    # ring (and kite fallback for tiny fleets)
    edges = {tuple(sorted((k, (k + 1) % n))) for k in range(n)}
    return sorted(edges)


@dataclass
class RepairState:
    expect: int
    target: Pose
    bail: float
    resume_events: list[PlanEvent]


@dataclass
class RobotExec:
    """Engine-side execution bookkeeping that is not protocol state."""

    last_sensed: Pose | None = None
    repair: RepairState | None = None
    repair_later: tuple[Pose, int] | None = None
    solo_goal: Pose | None = None
    last_contact_changed: float = -1.0


@dataclass
class Ledger:
    """Omniscient record of what actually reached the operator and when."""

    n: int
    return_stamps: list[float] = field(default_factory=list)
    chi: list[tuple[float, float]] = field(default_factory=list)
    violations: list[tuple[float, int, float, float]] = field(default_factory=list)
    in_violation: set[int] = field(default_factory=set)
    max_latency: float = 0.0

    def __post_init__(self):
        if not self.return_stamps:
            self.return_stamps = [0.0] * self.n


class Simulation:
    def __init__(self, config: ScenarioConfig, scene: Scene | None = None,
                 trace_path: str | None = None):
        config.validate()
        self.config = config
        self.scene = scene if scene is not None else load_scene(config)
        self.truth = self.scene.truth
        n = config.n_robots
        if len(self.scene.spawns) < n:
            raise ConfigError({"n_robots": "scene provides too few spawns"})
        self.dt = config.dt
        self.now = 0.0
        self.tick = 0
        self.finished = False
        self.finish_reason = ""
        self.rng = random.Random(config.seed)
        self.sensor = SensorModel(self.truth, config.sensor_range)
        self.check_speed = min(config.speed_of(r) for r in range(n))

        self.operator = OperatorState(
            pose=self.scene.operator,
            map=self.truth.unknown_like(),
            stamps=[0.0] * n,
            bound=config.latency_bound,
            move_speed=self.check_speed,
        )
        self.robots: list[RobotState] = []
        for rid in range(n):
            spawn = self.scene.spawns[rid]
            if not can_communicate(self.truth, spawn, self.scene.operator,
                                   config.comm_range):
                raise ConfigError(
                    {"scene": f"spawn {rid} outside operator communication range"})
            cache = RequestCache(config.latency_bound,
                                 operator_pose=self.scene.operator)
            self.robots.append(RobotState(
                id=rid, pose=spawn, speed=config.speed_of(rid),
                robot_class=config.class_of(rid),
                local_map=self.truth.unknown_like(),
                stamps=TimestampVectors.zeros(n),
                know_now=[0.0] * n, cache=cache,
                fleet=FleetKnowledge(),
            ))
        self.ex = [RobotExec() for _ in range(n)]
        self.solo_last: list[float] = [0.0] * n

        self.strategy = config.strategy
        self.adapt_enabled = self.strategy != "HE-NA"
        self.allow_q2 = self.strategy == "iHERO"
        self.strict = self.strategy in ("iHERO", "iHERO-S")
        self.edges = self._strategy_edges()
        covered = {r for e in self.edges for r in e}
        self.solo_robots = sorted(set(range(n)) - covered)
        self.ring: list[int] = list(range(n))

        self.target_mask = self._target_mask()
        self.target_cells = int(self.target_mask.sum())
        self.union_mask = np.zeros_like(self.target_mask)

        header = {
            "schema": SCHEMA, "version": SCHEMA_VERSION,
            "config": config.to_dict(),
            "run": {"n_robots": n, "target_cells": self.target_cells,
                    "cell_area": self.truth.resolution ** 2,
                    "latency_bound": config.latency_bound, "dt": config.dt},
        }
        self.trace = TraceLog(header, trace_path)
        self.ledger = Ledger(n)
        self._script_fired = [False] * len(config.operator_script)
        self._req_seq = 0
        self._active_requests: dict[str, dict] = {}
        self._q2_goal_req: str | None = None
        self._move_started: float | None = None
        self._move_path: list[Pose] = []
        self._marker: dict | None = None
        self._snapshots: list[dict] = []
        self._commands: list[Request] = []
        self._lock = threading.RLock()
        self._bootstrap()

    # ------------------------------------------------------------- setup

    def _strategy_edges(self) -> list[tuple[int, int]]:
        n = self.config.n_robots
        if self.strategy == "BA-IND" or n < 2:
            return []
        if self.strategy == "BA-SUB":
            return [(k, k + 1) for k in range(0, n - 1, 2)]
        return topology_edges(self.config.topology, n)

    def _target_mask(self) -> np.ndarray:
        classes = {self.config.class_of(r) for r in range(self.config.n_robots)}
        classes.add(NO_CLASS)
        mask = np.zeros((self.truth.height, self.truth.width), dtype=bool)
        for cls in classes:
            dist = self.truth.distance_field(self.scene.operator, cls)
            mask |= dist >= 0
        return mask & (self.truth.cells == FREE)

    def _bootstrap(self) -> None:
        for robot in self.robots:
            self._sense_robot(robot)
        for robot in self.robots:
            if can_communicate(self.truth, robot.pose, self.operator.pose,
                               self.config.comm_range):
                self._deliver(robot, formal=False)
        for a, b in self.edges:
            ra, rb = self.robots[a], self.robots[b]
            self._coordinate(ra, rb)
        for rid in self.solo_robots:
            self._solo_decide(self.robots[rid])

    # ------------------------------------------------------------ helpers

    def _emit(self, record: dict) -> None:
        self.trace.emit(record)

    def _pair_setup(self, a: int, b: int) -> PairSetup:
        forced = None
        scope = None
        strict = self.strict
        if self.strategy == "HE-FR":
            forced = 0 if 0 in (a, b) else -1
            strict = False
        elif self.strategy == "BA-SUB":
            forced = min(a, b)
            scope = sorted({a, b})
            strict = False
        elif self.strategy == "HE-NA":
            strict = False
        return PairSetup(now=self.now, dt=self.dt, check_speed=self.check_speed,
                         strict=strict, forced_returner=forced, min_scope=scope)

    def _sense_robot(self, robot: RobotState) -> None:
        exec_ = self.ex[robot.id]
        if exec_.last_sensed == robot.pose:
            return
        exec_.last_sensed = robot.pose
        new = sense(self.truth, robot, self.sensor)
        if new:
            known = robot.local_map.cells != UNKNOWN
            added = int((known & ~self.union_mask).sum())
            self.union_mask |= known
            retire_dead_frontiers(robot)
            if added:
                self._emit({"kind": "sense", "t": self.now, "robot": robot.id,
                            "new_cells": added})

    def _coordinate(self, ra: RobotState, rb: RobotState):
        setup = self._pair_setup(ra.id, rb.id)
        outcome = pairwise_coordinate(ra, rb, setup)
        for r in (ra, rb):
            retire_dead_frontiers(r)
            r.known_dead |= set(r.cache.notices)
            self._set_mode(r)
        self._mark_exchange(ra.id, rb.id, planned=True)
        ev = outcome.meeting
        self._emit({
            "kind": "comm", "t": self.now, "a": ra.id, "b": rb.id,
            "comm_kind": "planned",
            "meeting": {"t": ev.time, "place": [ev.place.x, ev.place.y],
                        "id": ev.id},
            "returns": [{"robot": rid, "t": e.time,
                         "place": [e.place.x, e.place.y]}
                        for rid, e in sorted(outcome.returns.items())],
            "pruned": len(outcome.pruned),
            "iterations": outcome.iterations,
            "pool": outcome.pool_size,
        })
        return outcome

    def _set_mode(self, robot: RobotState) -> None:
        if not robot.alive:
            robot.mode = MODE_FAILED
            return
        if robot.current_event() is not None:
            robot.mode = MODE_WAITING
            return
        nxt = robot.next_event()
        if nxt is not None and nxt.involves_operator():
            robot.mode = MODE_RETURNING
        elif robot.current_segment() is not None and robot.current_segment().goals:
            robot.mode = MODE_EXPLORING
        else:
            robot.mode = MODE_TRAVELING

    # ------------------------------------------------------- request intake

    def submit_request(self, request: Request) -> dict:
        """Validate and queue an operator request; returns the gateway reply."""
        with self._lock:
            return self._accept_request(request)

    def _accept_request(self, request: Request) -> dict:
        self._req_seq += 1
        req_id = f"r{self._req_seq}"
        record = {"kind": "request", "t": self.now, "q": request.kind,
                  "req_id": req_id, "accepted": True}
        reply = {"accepted": True, "req_id": req_id}
        if request.kind == Q0:
            ops.apply_q0(self.operator, request.bound, self.now)
            record["bound"] = request.bound
            self._finish_request(req_id, record)
            return reply
        if request.kind == Q1:
            region = ops.add_region(self.operator, request)
            record["polygon"] = [[p.x, p.y] for p in request.polygon]
            record["region_id"] = region.id
            self._active_requests[req_id] = record
            self._emit(record)
            self._region_req_ids = getattr(self, "_region_req_ids", {})
            self._region_req_ids[region.id] = req_id
            return reply
        # Q2
        goal = request.goal
        if not self.allow_q2:
            record["accepted"] = False
            record["reason"] = "operator movement disabled for this strategy"
            self._emit(record)
            return {"accepted": False, "reason": record["reason"]}
        if not self.operator.map.in_bounds(goal) \
                or self.operator.map.state(goal) != FREE:
            record["accepted"] = False
            record["reason"] = "goal not in explored free space"
            self._emit(record)
            return {"accepted": False, "reason": record["reason"]}
        region = ops.compute_feasible_region(self.operator, self._true_events())
        waypoint = ops.decompose_goal(self.operator, goal, region)
        if self._q2_goal_req is not None:
            # a fresh goal supersedes the previous one
            self._emit({"kind": "request_done", "t": self.now,
                        "req_id": self._q2_goal_req})
            self._active_requests.pop(self._q2_goal_req, None)
        self.operator.move_goal = goal
        self.operator.last_region = sorted(region)
        self._q2_goal_req = req_id
        record["goal"] = [goal.x, goal.y]
        record["waypoint"] = [waypoint.x, waypoint.y]
        record["region"] = [[p.x, p.y] for p in self.operator.last_region]
        self._active_requests[req_id] = record
        self._emit(record)
        reply["feasible"] = waypoint == goal
        reply["waypoint"] = [waypoint.x, waypoint.y]
        return reply

    def _finish_request(self, req_id: str, record: dict | None = None) -> None:
        if record is not None:
            self._emit(record)
        self._active_requests.pop(req_id, None)

    def _true_events(self) -> dict[int, list[PlanEvent]]:
        out: dict[int, list[PlanEvent]] = {}
        for robot in self.robots:
            if robot.alive:
                out[robot.id] = [e for e in robot.pending_events()
                                 if not e.involves_operator()
                                 and e.kind == KIND_PLANNED]
        return out

    # ------------------------------------------------------------ delivery

    def _deliver(self, robot: RobotState, formal: bool) -> bool:
        packet = build_packet(robot, self.now)
        take = (self.operator.map.cells == UNKNOWN) & (packet.map.cells != UNKNOWN)
        idx = np.flatnonzero(take.ravel())
        new_cells = ops.receive_return(self.operator, packet, self.now, formal)
        self._mark_operator_exchange(robot.id)
        changed = new_cells > 0
        if formal:
            self._complete_return(robot)
            self.operator.known_dead |= set(robot.cache.notices)
            self._commit_pending_move()
            outgoing = ops.outgoing_cache(self.operator, self.now)
            if robot.cache.merge_from(outgoing):
                changed = True
            robot.known_dead |= self.operator.known_dead
            # the hand-off is two-way: the robot gets the operator's map and
            # exact stamp vector, so it leaves with knowledge, not estimates
            if merge_into(robot.local_map, self.operator.map):
                retire_dead_frontiers(robot)
            for k, v in enumerate(self.operator.stamps):
                if v > robot.know_now[k]:
                    robot.know_now[k] = v
            robot.stamps.operator_est = [
                max(a, b) for a, b in zip(robot.stamps.operator_est,
                                          self.operator.stamps)]
            for k, v in enumerate(self.operator.stamps):
                if v > self.ledger.return_stamps[k]:
                    self.ledger.return_stamps[k] = v
            chi = min(self.ledger.return_stamps)
            self.ledger.chi.append((self.now, chi))
            self.solo_last[robot.id] = self.now
            self._emit({
                "kind": "return", "t": self.now, "robot": robot.id,
                "pose": [robot.pose.x, robot.pose.y],
                "delta": runs_from_indices(idx),
                "new_cells": new_cells,
                "stamps": [round(s, 6) for s in self.operator.stamps],
                "bound": self.operator.bound,
                "summaries": [[rid, s.stamp, s.pose.x, s.pose.y]
                              for rid, s in sorted(self.operator.summaries.items())],
            })
            self._set_mode(robot)
            return True
        # opportunistic two-way contact
        light = ops.outgoing_cache(self.operator, self.now)
        if robot.cache.merge_from(light):
            changed = True
        if merge_into(robot.local_map, self.operator.map):
            retire_dead_frontiers(robot)
            changed = True
        for k, v in enumerate(self.operator.stamps):
            if v > robot.know_now[k]:
                robot.know_now[k] = v
                changed = True
        robot.known_dead |= self.operator.known_dead
        if changed:
            self.solo_last[robot.id] = self.now
            self._emit({
                "kind": "operator_contact", "t": self.now, "robot": robot.id,
                "delta": runs_from_indices(idx),
                "new_cells": new_cells,
                "stamps": [round(s, 6) for s in self.operator.stamps],
            })
        return changed

    def _complete_return(self, robot: RobotState) -> None:
        """Consume the pending operator event, wherever the robot caught us."""
        for k in range(robot.cursor, len(robot.plan.steps)):
            step = robot.plan.steps[k]
            if isinstance(step, PlanEvent):
                if step.involves_operator():
                    robot.cursor = k + 1
                    robot.wp_index = 0
                    robot.leftover_m = 0.0
                    robot.waiting_since = None
                return

    def _pending_return(self, robot: RobotState) -> PlanEvent | None:
        nxt = robot.next_event()
        if nxt is not None and nxt.involves_operator():
            return nxt
        return None

    def _commit_pending_move(self) -> None:
        op = self.operator
        if op.move_goal is None or self._move_path:
            return
        region = ops.compute_feasible_region(op, self._true_events())
        op.last_region = sorted(region)
        waypoint = ops.decompose_goal(op, op.move_goal, region)
        if waypoint == op.pose:
            return
        path = shortest_path(op.map, op.pose, waypoint, NO_CLASS)
        if path is None or len(path.waypoints) < 2:
            return
        self._move_path = list(path.waypoints)
        self._move_started = self.now
        self._emit({"kind": "operator_move", "t": self.now,
                    "path": [[p.x, p.y] for p in self._move_path],
                    "speed": op.move_speed,
                    "resolution": op.map.resolution,
                    "region": [[p.x, p.y] for p in op.last_region]})

    def _step_operator_motion(self) -> None:
        if not self._move_path:
            return
        op = self.operator
        steps = int((self.now - self._move_started) * op.move_speed
                    / op.map.resolution + 1e-9)
        steps = max(0, min(steps, len(self._move_path) - 1))
        op.pose = self._move_path[steps]
        if steps == len(self._move_path) - 1:
            self._emit({"kind": "move_done", "t": self.now,
                        "pose": [op.pose.x, op.pose.y]})
            self._move_path = []
            self._move_started = None
            if op.pose == op.move_goal:
                op.move_goal = None
                op.last_region = []
                if self._q2_goal_req:
                    self._emit({"kind": "request_done", "t": self.now,
                                "req_id": self._q2_goal_req})
                    self._active_requests.pop(self._q2_goal_req, None)
                    self._q2_goal_req = None

    # ------------------------------------------------------------- marker

    def set_marker(self, robot_id: int, at_time: float) -> None:
        """Instrument a datum at one robot to watch it spread over meetings."""
        self._marker = {"origin": robot_id, "t": at_time, "holders": set(),
                        "started": False, "meetings": 0, "done_after": None}

    def _mark_exchange(self, a: int, b: int, planned: bool) -> None:
        m = self._marker
        if m is None or not m["started"]:
            return
        if planned:
            m["meetings"] += 1
        if a in m["holders"] or b in m["holders"]:
            m["holders"] |= {a, b}
        if m["done_after"] is None and \
                m["holders"] >= {r.id for r in self.robots if r.alive}:
            m["done_after"] = m["meetings"]

    def _mark_operator_exchange(self, rid: int) -> None:
        m = self._marker
        if m is None or not m["started"]:
            return
        if rid in m["holders"]:
            m["holders"].add(OPERATOR)
        elif OPERATOR in m["holders"]:
            m["holders"].add(rid)
        if m["done_after"] is None and \
                m["holders"] >= {r.id for r in self.robots if r.alive}:
            m["done_after"] = m["meetings"]

    @property
    def marker_result(self) -> dict | None:
        return self._marker

    # --------------------------------------------------------------- solo

    def _solo_decide(self, robot: RobotState) -> None:
        """Independent explorer: nearest frontier that still allows returning."""
        if not robot.alive:
            return
        grid = robot.local_map
        ph = robot.cache.operator_pose
        deadline = self.solo_last[robot.id] + robot.cache.bound
        best = None
        for f in extract_frontiers(grid):
            if f.centroid == robot.pose:
                continue
            to_f = travel_time(grid, robot.pose, f.centroid, robot.speed,
                               robot.robot_class)
            back = travel_time(grid, f.centroid, ph, robot.speed,
                               robot.robot_class)
            if math.isinf(to_f) or math.isinf(back):
                continue
            arr_f = arrival_after(self.now, to_f * robot.speed, robot.speed, self.dt)
            arr_home = arrival_after(arr_f, back * robot.speed, robot.speed, self.dt)
            if arr_home > deadline + 1e-9:
                continue
            key = (to_f, f.anchor)
            if best is None or key < best[0]:
                best = (key, f)
        if best is not None:
            f = best[1]
            seg = build_segment(grid, robot.pose, [], [], f.centroid,
                                robot.robot_class)
            seg.goals[len(seg.path.waypoints) - 1] = f.id
            robot.set_plan(Plan([seg]))
            self.ex[robot.id].solo_goal = f.centroid
            robot.mode = MODE_EXPLORING
            return
        # nothing feasible: head home if away or if data is pending
        if robot.pose != ph or self.solo_last[robot.id] < self.now:
            seg = build_segment(grid, robot.pose, [], [], ph, robot.robot_class)
            if seg is not None:
                trip = travel_time(grid, robot.pose, ph, robot.speed,
                                   robot.robot_class)
                arr = arrival_after(self.now, trip * robot.speed, robot.speed,
                                    self.dt)
                ev = PlanEvent(arr, ph, robot.id, OPERATOR, KIND_RETURN)
                robot.set_plan(Plan([seg, ev]))
                robot.mode = MODE_RETURNING
                self.ex[robot.id].solo_goal = None

    # ------------------------------------------------------------ failures

    def _ring_neighbors(self, rid: int) -> tuple[int | None, int | None]:
        if rid not in self.ring or len(self.ring) < 2:
            return None, None
        k = self.ring.index(rid)
        return self.ring[k - 1], self.ring[(k + 1) % len(self.ring)]

    def _detect_failures(self) -> None:
        for robot in self.robots:
            if not robot.alive or self.ex[robot.id].repair is not None:
                continue
            ev = robot.current_event()
            if ev is None or ev.involves_operator():
                continue
            partner = ev.partner_of(robot.id)
            partner_robot = self.robots[partner]
            if partner_robot.alive and partner_robot.next_event() is ev:
                near = can_communicate(self.truth, partner_robot.pose, ev.place,
                                       self.config.comm_range)
                if near:
                    continue
            pred, succ = self._ring_neighbors(partner)
            role = "pred" if robot.id == pred else "succ"
            timeout = (self.config.predecessor_timeout if role == "pred"
                       else self.config.successor_timeout)
            waited_from = max(ev.time, robot.waiting_since or ev.time)
            if self.now - waited_from < timeout - 1e-9:
                continue
            self._emit({"kind": "detect", "t": self.now, "by": robot.id,
                        "failed": partner, "case": role})
            robot.known_dead.add(partner)
            if role == "succ":
                meet = robot.pose
                expect = pred if pred is not None else partner
            else:
                meet = self._known_meeting_place(robot, partner, succ)
                expect = succ if succ is not None else partner
            robot.cache.notices[partner] = FailureNotice(
                partner, robot.id, self.now, meet)
            if partner in self.ring:
                self.ring.remove(partner)
            remaining = [e for e in robot.pending_events() if not e.involves(partner)]
            self._engage_repair(robot, meet, expect, remaining)

    def _known_meeting_place(self, robot: RobotState, dead: int,
                             succ: int | None) -> Pose:
        candidates = [e for e in robot.fleet.known_events(dead)
                      if succ is not None and e.involves(succ)]
        future = [e for e in candidates if e.time >= self.now]
        if future:
            return min(future, key=lambda e: e.time).place
        if candidates:
            return max(candidates, key=lambda e: e.time).place
        return robot.cache.operator_pose

    def _engage_repair(self, robot: RobotState, target: Pose, expect: int,
                       remaining: list[PlanEvent]) -> None:
        grid = robot.local_map
        seg = build_segment(grid, robot.pose, [], [], target, robot.robot_class)
        if seg is None:
            target = robot.cache.operator_pose
            seg = build_segment(grid, robot.pose, [], [], target,
                                robot.robot_class)
            if seg is None:
                self._rebuild_direct(robot, remaining)
                return
        if remaining:
            e1 = remaining[0]
            go = travel_time(grid, robot.pose, target, robot.speed,
                             robot.robot_class)
            back = travel_time(grid, target, e1.place, robot.speed,
                               robot.robot_class)
            arr_there = arrival_after(self.now, go * robot.speed, robot.speed,
                                      self.dt)
            arr_back = arrival_after(arr_there, back * robot.speed, robot.speed,
                                     self.dt)
            if math.isinf(arr_back) or arr_back > e1.time + 1e-9:
                self.ex[robot.id].repair_later = (target, expect)
                self._rebuild_direct(robot, remaining)
                return
            bail = e1.time - arrival_after(0.0, back * robot.speed,
                                           robot.speed, self.dt) - self.dt
        else:
            bail = self.now + 2 * self.config.successor_timeout \
                + 2 * self.config.predecessor_timeout
        robot.set_plan(Plan([seg]))
        self.ex[robot.id].repair = RepairState(expect, target, bail, remaining)
        robot.mode = MODE_TRAVELING

    def _rebuild_direct(self, robot: RobotState, events: list[PlanEvent]) -> None:
        steps: list = []
        cursor = robot.pose
        for ev in events:
            seg = build_segment(robot.local_map, cursor, [], [], ev.place,
                                robot.robot_class)
            if seg is None:
                continue
            steps.append(seg)
            steps.append(ev)
            cursor = ev.place
        robot.set_plan(Plan(steps))
        self._set_mode(robot)
        if not steps:
            self._park_at_operator(robot)

    def _park_at_operator(self, robot: RobotState) -> None:
        ph = robot.cache.operator_pose
        if robot.pose == ph:
            robot.set_plan(Plan([]))
            return
        seg = build_segment(robot.local_map, robot.pose, [], [], ph,
                            robot.robot_class)
        if seg is not None:
            trip = travel_time(robot.local_map, robot.pose, ph, robot.speed,
                               robot.robot_class)
            arr = arrival_after(self.now, trip * robot.speed, robot.speed, self.dt)
            ev = PlanEvent(arr, ph, robot.id, OPERATOR, KIND_RETURN)
            robot.set_plan(Plan([seg, ev]))
            robot.mode = MODE_RETURNING

    def _repair_tick(self) -> None:
        for robot in self.robots:
            if not robot.alive:
                continue
            exec_ = self.ex[robot.id]
            # react to notices about my pending partners
            if exec_.repair is None:
                dead_known = set(robot.cache.notices) | robot.known_dead
                for rid in sorted(dead_known):
                    robot.known_dead.add(rid)
                    if rid in self.ring:
                        self.ring.remove(rid)
                    if any(e.involves(rid) for e in robot.pending_events()
                           if not e.involves_operator()):
                        notice = robot.cache.notices.get(rid)
                        meet = notice.meet_place if notice and notice.meet_place \
                            else robot.cache.operator_pose
                        remaining = [e for e in robot.pending_events()
                                     if not e.involves(rid)]
                        expect = notice.detected_by if notice and \
                            notice.detected_by not in (robot.id, -1) else rid
                        self._engage_repair(robot, meet, expect, remaining)
                        break
            exec_ = self.ex[robot.id]
            if exec_.repair is None:
                if exec_.repair_later is not None and robot.next_event() is None:
                    target, expect = exec_.repair_later
                    exec_.repair_later = None
                    self._engage_repair(robot, target, expect, [])
                continue
            state = exec_.repair
            if self.now >= state.bail - 1e-9:
                exec_.repair = None
                if state.resume_events:
                    exec_.repair_later = (state.target, state.expect)
                    self._rebuild_direct(robot, state.resume_events)
                elif state.target != robot.cache.operator_pose:
                    self._engage_repair(robot, robot.cache.operator_pose,
                                        state.expect, [])
                else:
                    self._park_at_operator(robot)
                continue
            if robot.current_segment() is None and robot.current_event() is None:
                robot.mode = MODE_WAITING

    def _try_repair_meeting(self, ra: RobotState, rb: RobotState) -> bool:
        sa, sb = self.ex[ra.id].repair, self.ex[rb.id].repair
        expects = (sa is not None and sa.expect == rb.id) or \
                  (sb is not None and sb.expect == ra.id)
        if not expects:
            return False
        for robot, state in ((ra, sa), (rb, sb)):
            other = rb if robot is ra else ra
            dead = robot.known_dead | other.known_dead
            events = [e for e in robot.pending_events()
                      if not any(e.involves(d) for d in dead)]
            if state is not None:
                events = [e for e in state.resume_events
                          if not any(e.involves(d) for d in dead)]
            self._rebuild_direct(robot, events)
            self.ex[robot.id].repair = None
            self.ex[robot.id].repair_later = None
        self._coordinate(ra, rb)
        self._emit({"kind": "repair", "t": self.now, "a": ra.id, "b": rb.id,
                    "ring": list(self.ring)})
        return True

    # ---------------------------------------------------------------- step

    def step(self) -> None:
        if self.finished:
            return
        with self._lock:
            self.tick += 1
            self.now = self.tick * self.dt
            self._drain_commands()
            self._fire_script()
            self._inject_failures()
            if self._marker and not self._marker["started"] \
                    and self.now >= self._marker["t"] - 1e-9:
                self._marker["started"] = True
                self._marker["holders"] = {self._marker["origin"]}
            for robot in self.robots:
                self._sense_robot(robot)
            self._motion_phase()
            self._contact_phase()
            self._planned_events_phase()
            # a return scheduled right after a meeting at the operator's
            # side completes on the same tick it was planned for
            self._operator_contacts()
            self._detect_failures()
            self._repair_tick()
            self._fulfillment_phase()
            self._step_operator_motion()
            self._ledger_phase()
            self._termination_phase()
            if self.tick % self.config.decimation == 0 or self.finished:
                self._snapshots.append(self.operator_view().snapshot())

    def _drain_commands(self) -> None:
        pending, self._commands = self._commands, []
        for req in pending:
            self._accept_request(req)

    def queue_request(self, request: Request) -> None:
        with self._lock:
            self._commands.append(request)

    def _fire_script(self) -> None:
        for k, entry in enumerate(self.config.operator_script):
            if self._script_fired[k] or entry.get("t", 0) > self.now + 1e-9:
                continue
            self._script_fired[k] = True
            kind = entry["kind"]
            try:
                if kind == Q0:
                    req = Request(Q0, self.now, bound=entry["bound"])
                elif kind == Q1:
                    poly = tuple(Pose(x, y) for x, y in entry["polygon"])
                    req = Request(Q1, self.now, polygon=poly)
                else:
                    req = Request(Q2, self.now, goal=Pose(*entry["goal"]))
            except (ValueError, KeyError) as exc:
                self._emit({"kind": "request", "t": self.now, "q": kind,
                            "req_id": f"s{k}", "accepted": False,
                            "reason": str(exc)})
                continue
            self._accept_request(req)

    def _inject_failures(self) -> None:
        for rid, t_fail in self.config.failures:
            robot = self.robots[rid]
            if robot.alive and self.now >= t_fail - 1e-9:
                robot.alive = False
                robot.mode = MODE_FAILED
                self._emit({"kind": "failure", "t": self.now, "robot": rid})

    def _motion_phase(self) -> None:
        for robot in self.robots:
            if not robot.alive or robot.current_event() is not None:
                continue
            if robot.current_segment() is None:
                if robot.id in self.solo_robots:
                    self._solo_decide(robot)
                continue
            arrival = advance(robot, self.dt)
            if isinstance(arrival, GoalArrival):
                self._on_goal(robot, arrival)
            elif isinstance(arrival, EventArrival):
                robot.waiting_since = self.now
                self._emit({"kind": "move", "t": self.now, "robot": robot.id,
                            "pose": [robot.pose.x, robot.pose.y]})
            self._set_mode(robot)

    def _on_goal(self, robot: RobotState, arrival: GoalArrival) -> None:
        self._sense_robot(robot)
        robot.assigned = [f for f in robot.assigned if f.id != arrival.frontier_id]
        if robot.id in self.solo_robots:
            self._solo_decide(robot)
            return
        if not self.adapt_enabled:
            return
        nxt = robot.next_event()
        if nxt is None:
            return

        def can_make(pose: Pose, via: Pose, deadline: float) -> bool:
            grid = robot.local_map
            d1 = travel_time(grid, pose, via, robot.speed, robot.robot_class)
            d2 = travel_time(grid, via, nxt.place, robot.speed, robot.robot_class)
            if math.isinf(d1) or math.isinf(d2):
                return False
            t1 = arrival_after(self.now, d1 * robot.speed, robot.speed, self.dt)
            t2 = arrival_after(t1, d2 * robot.speed, robot.speed, self.dt)
            return t2 <= deadline + 1e-9

        choice = adapt_local_plan(robot, self.now, self.config.weights, can_make)
        if choice is not None:
            seg = build_segment(robot.local_map, robot.pose, [choice.centroid],
                                [choice.id], nxt.place, robot.robot_class)
            if seg is not None:
                robot.replace_current_segment(seg)
                if not any(choice.overlaps(f) for f in robot.assigned):
                    robot.assigned.append(choice)
                return
        seg = build_segment(robot.local_map, robot.pose, [], [], nxt.place,
                            robot.robot_class)
        if seg is not None:
            robot.replace_current_segment(seg)

    def _contact_phase(self) -> None:
        # robot-robot: repairs first, then spontaneous data sharing
        alive = [r for r in self.robots if r.alive]
        if self.strategy != "BA-IND":
            for ai in range(len(alive)):
                for bi in range(ai + 1, len(alive)):
                    ra, rb = alive[ai], alive[bi]
                    if self.strategy == "BA-SUB" and ra.id // 2 != rb.id // 2:
                        continue
                    if not can_communicate(self.truth, ra.pose, rb.pose,
                                           self.config.comm_range):
                        continue
                    if self._try_repair_meeting(ra, rb):
                        continue
                    na, nb = ra.next_event(), rb.next_event()
                    if (na is not None and na.involves(rb.id)) or \
                            (nb is not None and nb.involves(ra.id)):
                        continue
                    if spontaneous_exchange(ra, rb, self.now):
                        retire_dead_frontiers(ra)
                        retire_dead_frontiers(rb)
                        ra.known_dead |= set(ra.cache.notices)
                        rb.known_dead |= set(rb.cache.notices)
                        self._mark_exchange(ra.id, rb.id, planned=False)
                        self._emit({"kind": "comm", "t": self.now,
                                    "a": ra.id, "b": rb.id,
                                    "comm_kind": "spontaneous"})
        self._operator_contacts()

    def _operator_contacts(self) -> None:
        for robot in self.robots:
            if not robot.alive:
                continue
            self._fast_forward(robot)
            if not can_communicate(self.truth, robot.pose, self.operator.pose,
                                   self.config.comm_range):
                # returners stuck at a stale operator pose chase the real one
                pending = self._pending_return(robot)
                if pending is not None and robot.current_event() is pending:
                    seg = build_segment(robot.local_map, robot.pose, [], [],
                                        self.operator.pose, robot.robot_class)
                    if seg is not None and len(seg.path.waypoints) > 1:
                        robot.plan.steps.insert(robot.cursor, seg)
                        robot.wp_index = 0
                        robot.leftover_m = 0.0
                        robot.mode = MODE_RETURNING
                continue
            pending = self._pending_return(robot)
            if pending is not None and robot.current_event() is pending \
                    and self.now >= pending.time - 1e-9:
                self._deliver(robot, formal=True)
                self._fast_forward(robot)
            else:
                self._deliver(robot, formal=False)

    @staticmethod
    def _fast_forward(robot: RobotState) -> None:
        """Consume zero-length segments so due events become current."""
        while True:
            seg = robot.current_segment()
            if seg is None or len(seg.path.waypoints) > 1:
                return
            robot.cursor += 1
            robot.wp_index = 0
            robot.leftover_m = 0.0

    def _planned_events_phase(self) -> None:
        ready: dict[int, tuple[float, PlanEvent]] = {}
        for robot in self.robots:
            if not robot.alive:
                continue
            ev = robot.current_event()
            if ev is None or ev.involves_operator() or self.now < ev.time - 1e-9:
                continue
            partner = self.robots[ev.partner_of(robot.id)]
            if not partner.alive or partner.current_event() is not ev:
                continue
            ready[ev.id] = (ev.time, ev)
        for _, ev in sorted(ready.values(), key=lambda kv: (kv[0], kv[1].id)):
            ra, rb = self.robots[ev.a], self.robots[ev.b]
            if not can_communicate(self.truth, ra.pose, rb.pose,
                                   self.config.comm_range):
                continue
            self._consume_event(ra, ev)
            self._consume_event(rb, ev)
            self._coordinate(ra, rb)

    @staticmethod
    def _consume_event(robot: RobotState, ev: PlanEvent) -> None:
        for k in range(robot.cursor, len(robot.plan.steps)):
            if robot.plan.steps[k] is ev:
                robot.cursor = k + 1
                robot.wp_index = 0
                robot.leftover_m = 0.0
                robot.waiting_since = None
                return

    def _fulfillment_phase(self) -> None:
        op = self.operator
        for region in op.active_regions():
            if ops.region_explored(op, region):
                op.fulfilled.add(region.id)
                req_id = getattr(self, "_region_req_ids", {}).get(region.id,
                                                                  region.id)
                self._emit({"kind": "request_done", "t": self.now,
                            "req_id": req_id})
                self._active_requests.pop(req_id, None)

    def _ledger_phase(self) -> None:
        bound = self.operator.bound
        for robot in self.robots:
            if not robot.alive:
                self.ledger.in_violation.discard(robot.id)
                continue
            latency = self.now - self.operator.stamps[robot.id]
            self.ledger.max_latency = max(self.ledger.max_latency, latency)
            if latency > bound + 1e-6:
                if robot.id not in self.ledger.in_violation:
                    self.ledger.in_violation.add(robot.id)
                    self.ledger.violations.append(
                        (self.now, robot.id, latency, bound))
                    self._emit({"kind": "violation", "t": self.now,
                                "robot": robot.id,
                                "latency": round(latency, 6), "bound": bound})
            else:
                self.ledger.in_violation.discard(robot.id)

    def _termination_phase(self) -> None:
        known = (self.operator.map.cells != UNKNOWN) & self.target_mask
        complete = int(known.sum()) == self.target_cells
        if complete or self.now >= self.config.max_duration - 1e-9:
            self.finished = True
            self.finish_reason = "complete" if complete else "budget"
            self._emit({"kind": "end", "t": self.now,
                        "reason": self.finish_reason,
                        "coverage_cells": int(known.sum()),
                        "union_cells": int((self.union_mask & self.target_mask).sum()),
                        "ticks": self.tick})
            self.trace.close()

    # ------------------------------------------------------------- running

    def run(self, max_ticks: int | None = None) -> MetricsLog:
        budget = max_ticks if max_ticks is not None else \
            int(self.config.max_duration / self.dt) + 2
        while not self.finished and self.tick < budget:
            self.step()
        if not self.finished:
            self.finished = True
            self.finish_reason = "tick-limit"
            self._emit({"kind": "end", "t": self.now, "reason": "tick-limit",
                        "coverage_cells": 0, "union_cells": 0,
                        "ticks": self.tick})
            self.trace.close()
        return self.metrics()

    def metrics(self) -> MetricsLog:
        return compute_metrics(self.trace.records, self.trace.header)

    def operator_view(self) -> OperatorView:
        op = self.operator
        pending_q2 = op.move_goal is not None
        view = OperatorView(
            tick=self.tick, time=self.now, map=op.map.copy(), pose=op.pose,
            bound=op.bound,
            summaries={rid: (s.stamp, s.pose, s.battery)
                       for rid, s in op.summaries.items()},
            active_requests=[{"id": r["req_id"], "q": r["q"], "t": r["t"]}
                             for r in self._active_requests.values()],
            feasible_region=(list(op.last_region) if pending_q2 else None),
            finished=self.finished,
        )
        return view

    def snapshots_since(self, cursor: int) -> tuple[list[dict], int]:
        with self._lock:
            out = self._snapshots[cursor:]
            return out, cursor + len(out)
