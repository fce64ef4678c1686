"""Operator requests and the gossip payloads robots relay for each other."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .grid import Pose
from .plan import PlanEvent

Q0 = "Q0"
Q1 = "Q1"
Q2 = "Q2"


@dataclass(frozen=True)
class Request:
    """An operator command: new latency bound, priority region, or move goal."""

    kind: str
    issued_at: float
    bound: float | None = None
    polygon: tuple[Pose, ...] = ()
    goal: Pose | None = None

    def __post_init__(self):
        if self.kind == Q0 and (self.bound is None or self.bound <= 0):
            raise ValueError("Q0 needs a positive bound")
        if self.kind == Q1 and len(self.polygon) < 3:
            raise ValueError("Q1 polygon needs at least 3 vertices")
        if self.kind == Q2 and self.goal is None:
            raise ValueError("Q2 needs a goal pose")


@dataclass(frozen=True)
class PriorityRegion:
    polygon: tuple[Pose, ...]
    issued_at: float
    id: str = ""

    @staticmethod
    def of(polygon: tuple[Pose, ...], issued_at: float) -> "PriorityRegion":
        digest = hashlib.sha1()
        for p in polygon:
            digest.update(f"{p.x},{p.y};".encode())
        digest.update(str(issued_at).encode())
        return PriorityRegion(polygon, issued_at, digest.hexdigest()[:12])


@dataclass(frozen=True)
class FailureNotice:
    failed: int
    detected_by: int
    detected_at: float
    meet_place: Pose | None = None


@dataclass
class RequestCache:
    """What a robot currently believes the operator has asked for.

    Merged pairwise at every exchange: latest issue time wins for the bound
    and the operator pose, priority regions accumulate until fulfilled, and
    failure notices are unioned.
    """

    bound: float
    bound_stamp: float = 0.0
    operator_pose: Pose = Pose(0, 0)
    operator_pose_stamp: float = 0.0
    regions: dict[str, PriorityRegion] = field(default_factory=dict)
    fulfilled: set[str] = field(default_factory=set)
    notices: dict[int, FailureNotice] = field(default_factory=dict)

    def copy(self) -> "RequestCache":
        return RequestCache(self.bound, self.bound_stamp,
                            self.operator_pose, self.operator_pose_stamp,
                            dict(self.regions), set(self.fulfilled),
                            dict(self.notices))

    def active_regions(self) -> list[PriorityRegion]:
        live = [r for rid, r in self.regions.items() if rid not in self.fulfilled]
        live.sort(key=lambda r: (r.issued_at, r.id))
        return live

    def merge_from(self, other: "RequestCache") -> bool:
        """Fold ``other`` in; returns True when anything changed."""
        changed = False
        if (other.bound_stamp, other.bound) > (self.bound_stamp, self.bound):
            self.bound, self.bound_stamp = other.bound, other.bound_stamp
            changed = True
        if other.operator_pose_stamp > self.operator_pose_stamp:
            self.operator_pose = other.operator_pose
            self.operator_pose_stamp = other.operator_pose_stamp
            changed = True
        for rid, region in other.regions.items():
            if rid not in self.regions:
                self.regions[rid] = region
                changed = True
        new_done = other.fulfilled - self.fulfilled
        if new_done:
            self.fulfilled |= new_done
            changed = True
        for rid, notice in other.notices.items():
            if rid not in self.notices:
                self.notices[rid] = notice
                changed = True
        return changed


@dataclass(frozen=True)
class FrontierClaim:
    """Who last claimed a frontier; owner None means it was given back."""

    cells: frozenset
    centroid: Pose
    frontier_id: str
    owner: int | None
    stamp: float


def merge_claims(dst: dict[str, FrontierClaim],
                 src: dict[str, FrontierClaim]) -> bool:
    """Recency-wins merge of frontier ownership gossip."""
    changed = False
    for fid, claim in src.items():
        cur = dst.get(fid)
        if cur is None or claim.stamp > cur.stamp or \
                (claim.stamp == cur.stamp and _claim_key(claim) < _claim_key(cur)):
            if cur != claim:
                dst[fid] = claim
                changed = True
    return changed


def _claim_key(claim: FrontierClaim) -> tuple:
    owner = claim.owner if claim.owner is not None else -1
    return (owner,)


@dataclass
class FleetKnowledge:
    """Stamped hearsay about every robot: pending events and last seen pose."""

    events: dict[int, tuple[float, tuple[PlanEvent, ...]]] = field(default_factory=dict)
    poses: dict[int, tuple[float, Pose]] = field(default_factory=dict)

    def copy(self) -> "FleetKnowledge":
        return FleetKnowledge(dict(self.events), dict(self.poses))

    def note_events(self, robot: int, stamp: float, events: tuple[PlanEvent, ...]) -> None:
        cur = self.events.get(robot)
        if cur is None or stamp >= cur[0]:
            self.events[robot] = (stamp, events)

    def note_pose(self, robot: int, stamp: float, pose: Pose) -> None:
        cur = self.poses.get(robot)
        if cur is None or stamp >= cur[0]:
            self.poses[robot] = (stamp, pose)

    def merge_from(self, other: "FleetKnowledge") -> bool:
        changed = False
        for robot, (stamp, events) in other.events.items():
            cur = self.events.get(robot)
            if cur is None or stamp > cur[0]:
                self.events[robot] = (stamp, events)
                changed = True
        for robot, (stamp, pose) in other.poses.items():
            cur = self.poses.get(robot)
            if cur is None or stamp > cur[0]:
                self.poses[robot] = (stamp, pose)
                changed = True
        return changed

    def known_events(self, robot: int) -> tuple[PlanEvent, ...]:
        entry = self.events.get(robot)
        return entry[1] if entry else ()


def point_in_polygon(p: Pose, polygon: tuple[Pose, ...]) -> bool:
    """Even-odd rule on cell centers; boundary handling is deterministic."""
    x, y = float(p.x), float(p.y)
    inside = False
    n = len(polygon)
    for k in range(n):
        ax, ay = polygon[k]
        bx, by = polygon[(k + 1) % n]
        if (ay > y) != (by > y):
            x_cross = ax + (y - ay) * (bx - ax) / (by - ay)
            if x < x_cross:
                inside = not inside
    return inside
