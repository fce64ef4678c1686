"""Append-only event trace: JSONL records, readers, and snapshot replay.

Every run emits one header line then one JSON object per record. Traces are
byte-reproducible for a given config and replayable into the exact operator
view without re-running the simulation.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .grid import GridMap, Pose

SCHEMA = "rendezsim.trace"
SCHEMA_VERSION = 1


class TraceError(ValueError):
    pass


def runs_from_indices(indices: np.ndarray) -> list[int]:
    """Compress sorted flat cell indices into [start, length, ...] runs."""
    runs: list[int] = []
    for idx in np.sort(indices).tolist():
        if runs and idx == runs[-2] + runs[-1]:
            runs[-1] += 1
        else:
            runs.extend((idx, 1))
    return runs


def indices_from_runs(runs: list[int]) -> list[int]:
    out: list[int] = []
    for k in range(0, len(runs), 2):
        out.extend(range(runs[k], runs[k] + runs[k + 1]))
    return out


class TraceLog:
    """In-memory record list with an optional JSONL sink."""

    def __init__(self, header: dict, path: str | None = None):
        self.header = dict(header)
        self.records: list[dict] = []
        self._fh = open(path, "w", encoding="utf-8") if path else None
        self.path = path
        if self._fh:
            self._fh.write(_dump(self.header) + "\n")

    def emit(self, record: dict) -> None:
        self.records.append(record)
        if self._fh:
            self._fh.write(_dump(record) + "\n")

    def close(self) -> None:
        if self._fh:
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._fh.close()
            self._fh = None

    def dumps(self) -> str:
        lines = [_dump(self.header)]
        lines.extend(_dump(r) for r in self.records)
        return "\n".join(lines) + "\n"


def _dump(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def parse_trace(text: str) -> tuple[dict, list[dict]]:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise TraceError("missing schema header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError:
        raise TraceError("missing schema header")
    if header.get("schema") != SCHEMA:
        raise TraceError("missing schema header")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            raise TraceError(
                f"corrupt record at line {lineno}; last valid line {lineno - 1}")
    return header, records


def read_trace(path: str) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        return parse_trace(fh.read())


@dataclass
class OperatorView:
    """Exactly what the operator-facing console may see at one instant."""

    tick: int
    time: float
    map: GridMap
    pose: Pose
    bound: float
    summaries: dict[int, tuple[float, Pose, float]] = field(default_factory=dict)
    active_requests: list[dict] = field(default_factory=list)
    feasible_region: list[Pose] | None = None
    finished: bool = False

    def snapshot(self) -> dict:
        chars = {0: "?", 1: ".", 2: "#"}
        cells = "".join(chars[int(v)] for v in self.map.cells.ravel())
        return {
            "kind": "Snapshot",
            "schema_version": SCHEMA_VERSION,
            "tick": self.tick,
            "t": self.time,
            "map": {"width": self.map.width, "height": self.map.height,
                    "resolution": self.map.resolution, "cells": cells},
            "operator": [self.pose.x, self.pose.y],
            "bound": self.bound,
            "returns": [
                {"robot": rid, "stamp": s[0], "pose": [s[1].x, s[1].y],
                 "battery": s[2]}
                for rid, s in sorted(self.summaries.items())
            ],
            "active_requests": self.active_requests,
            "feasible_region": (None if self.feasible_region is None else
                                [[p.x, p.y] for p in self.feasible_region]),
            "finished": self.finished,
        }


class Replay:
    """Rebuilds the operator view from a trace, one record fold at a time."""

    def __init__(self, header: dict, records: list[dict], truth: GridMap,
                 operator_start: Pose, bound: float, dt: float):
        self.header = header
        self.records = records
        self.truth = truth
        self.dt = dt
        self._start_pose = operator_start
        self._start_bound = bound
        self.reset()

    def reset(self) -> None:
        self._cursor = 0
        self._view = OperatorView(0, 0.0, self.truth.unknown_like(),
                                  self._start_pose, self._start_bound)
        self._move: dict | None = None
        self._requests: dict[str, dict] = {}
        self._q2_req: str | None = None

    def view_at(self, tick: int) -> OperatorView:
        if tick * self.dt < self._view.time:
            self.reset()
        target_t = tick * self.dt + 1e-9
        while self._cursor < len(self.records):
            rec = self.records[self._cursor]
            if rec["t"] > target_t:
                break
            self._fold(rec)
            self._cursor += 1
        self._view.tick = tick
        self._view.time = tick * self.dt
        self._apply_motion(tick * self.dt)
        return self._view

    def _fold(self, rec: dict) -> None:
        kind = rec["kind"]
        view = self._view
        if kind in ("return", "operator_contact"):
            flat = view.map.cells.ravel()
            idx = indices_from_runs(rec.get("delta", []))
            if idx:
                flat[idx] = self.truth.cells.ravel()[idx]
                view.map.touch()
            if kind == "return":
                view.summaries = {
                    rid: (stamp, Pose(x, y), 1.0)
                    for rid, stamp, x, y in rec.get("summaries", [])}
                view.bound = rec.get("bound", view.bound)
        elif kind == "request":
            if rec.get("accepted", True) and rec["q"] != "Q0":
                self._requests[rec["req_id"]] = rec
                self._refresh_active()
            if rec["q"] == "Q2" and rec.get("accepted", True) \
                    and rec.get("region") is not None:
                view.feasible_region = [Pose(x, y) for x, y in rec["region"]]
                self._q2_req = rec["req_id"]
            if rec["q"] == "Q0" and rec.get("accepted", True):
                view.bound = rec["bound"]
        elif kind == "request_done":
            self._requests.pop(rec["req_id"], None)
            self._refresh_active()
            if rec["req_id"] == getattr(self, "_q2_req", None):
                view.feasible_region = None
                self._q2_req = None
        elif kind == "operator_move":
            self._move = rec
            if rec.get("region") is not None:
                view.feasible_region = [Pose(x, y) for x, y in rec["region"]]
        elif kind == "move_done":
            if self._move is not None:
                view.pose = Pose(*self._move["path"][-1])
            self._move = None
        elif kind == "end":
            view.finished = True

    def _refresh_active(self) -> None:
        self._view.active_requests = [
            {"id": r["req_id"], "q": r["q"], "t": r["t"]}
            for r in self._requests.values()]

    def _apply_motion(self, now: float) -> None:
        if self._move is None:
            return
        path = self._move["path"]
        steps = int((now - self._move["t"]) * self._move["speed"]
                    / self._move["resolution"] + 1e-9)
        steps = max(0, min(steps, len(path) - 1))
        self._view.pose = Pose(*path[steps])
