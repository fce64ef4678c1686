"""Robot plans: alternating confirmed events and revisable path segments."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

from .grid import GridPath, Pose

OPERATOR = -1  # partner id meaning "the human operator"

KIND_PLANNED = "planned"
KIND_RETURN = "return"
KIND_REPAIR = "repair"
KIND_SPONTANEOUS = "spontaneous"

_event_ids = itertools.count(1)


@dataclass(frozen=True)
class PlanEvent:
    """A confirmed communication event; immutable once it enters a plan.

    Both participants hold the same object, so identity survives exchange
    and the confirmed set can be compared across replanning.
    """

    time: float
    place: Pose
    a: int
    b: int
    kind: str = KIND_PLANNED
    id: int = field(default_factory=lambda: next(_event_ids))

    def involves_operator(self) -> bool:
        return OPERATOR in (self.a, self.b)

    def partner_of(self, robot: int) -> int:
        return self.b if robot == self.a else self.a

    def involves(self, robot: int) -> bool:
        return robot in (self.a, self.b)


@dataclass
class PathSegment:
    """A revisable route between two confirmed events.

    ``goals`` maps waypoint indices to frontier ids so execution knows where
    to pause, mark a frontier visited and reconsider the local plan.
    """

    path: GridPath
    goals: dict[int, str] = field(default_factory=dict)

    def goal_indices(self) -> list[int]:
        return sorted(self.goals)


@dataclass
class Plan:
    """Alternating [PathSegment, PlanEvent, PathSegment, ...] sequence."""

    steps: list = field(default_factory=list)

    def events(self) -> list[PlanEvent]:
        return [s for s in self.steps if isinstance(s, PlanEvent)]

    def segments(self) -> list[PathSegment]:
        return [s for s in self.steps if isinstance(s, PathSegment)]

    def next_event(self) -> PlanEvent | None:
        for s in self.steps:
            if isinstance(s, PlanEvent):
                return s
        return None

    def last_event(self) -> PlanEvent | None:
        for s in reversed(self.steps):
            if isinstance(s, PlanEvent):
                return s
        return None

    def validate(self) -> None:
        last_time = -math.inf
        prev_place: Pose | None = None
        for s in self.steps:
            if isinstance(s, PlanEvent):
                if s.time < last_time:
                    raise ValueError("plan events out of time order")
                last_time = s.time
                if prev_place is not None and prev_place != s.place:
                    raise ValueError("segment does not end at the next event place")
                prev_place = None
            else:
                prev_place = s.path.end

    def frontier_ids(self) -> set[str]:
        out: set[str] = set()
        for seg in self.segments():
            out.update(seg.goals.values())
        return out


def quantize_up(t: float, dt: float) -> float:
    """Round ``t`` up to the tick grid; event times always live on it."""
    if math.isinf(t):
        return t
    ticks = int(math.ceil(round(t / dt, 9)))
    return ticks * dt


def arrival_after(t0: float, length_m: float, speed: float, dt: float) -> float:
    """Tick-aligned arrival when departing a tick boundary at ``t0``.

    Matches execution exactly: a robot moving speed*dt per tick along a
    route of ``length_m`` arrives at the first tick boundary past t0 + L/v.
    """
    if length_m <= 0:
        return t0
    if speed <= 0 or math.isinf(length_m):
        return math.inf
    return quantize_up(t0 + length_m / speed, dt)
