"""Communication model: range + line-of-sight links, packets, map fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .frontier import Frontier
from .grid import UNKNOWN, GridMap, Pose, euclidean_m, line_of_sight
from .messages import FleetKnowledge, FrontierClaim, RequestCache, merge_claims
from .robot import RobotState
from .stamps import TimestampVectors, merge_operator_stamps


class MapConflictError(RuntimeError):
    """Two known cells disagreed during a merge; a simulator bug, not user error."""


def can_communicate(truth: GridMap, a: Pose, b: Pose, comm_range_m: float) -> bool:
    """Links exist within range and with unobstructed line of sight."""
    if euclidean_m(truth, a, b) > comm_range_m + 1e-9:
        return False
    return line_of_sight(truth, a, b)


def merge_maps(a: GridMap, b: GridMap) -> GridMap:
    """Cellwise fusion; known cells must agree since sensing is idealized."""
    if (a.width, a.height) != (b.width, b.height) or a.resolution != b.resolution:
        raise ValueError("cannot merge maps with different geometry")
    conflict = (a.cells != UNKNOWN) & (b.cells != UNKNOWN) & (a.cells != b.cells)
    if conflict.any():
        y, x = np.argwhere(conflict)[0]
        raise MapConflictError(f"known-state conflict at ({x},{y})")
    out = a.copy()
    take = (out.cells == UNKNOWN) & (b.cells != UNKNOWN)
    out.cells[take] = b.cells[take]
    out.touch()
    return out


def merge_into(dst: GridMap, src: GridMap) -> int:
    """In-place variant of merge_maps; returns how many cells became known."""
    conflict = (dst.cells != UNKNOWN) & (src.cells != UNKNOWN) & (dst.cells != src.cells)
    if conflict.any():
        y, x = np.argwhere(conflict)[0]
        raise MapConflictError(f"known-state conflict at ({x},{y})")
    take = (dst.cells == UNKNOWN) & (src.cells != UNKNOWN)
    count = int(take.sum())
    if count:
        dst.cells[take] = src.cells[take]
        dst.touch()
    return count


def dedupe_frontiers(frontiers: list[Frontier]) -> list[Frontier]:
    seen: set[str] = set()
    out = []
    for f in frontiers:
        if f.id not in seen:
            seen.add(f.id)
            out.append(f)
    return out


def eligible_frontiers(merged: list[Frontier],
                       foreign_i: list[Frontier], assigned_j: list[Frontier],
                       foreign_j: list[Frontier], assigned_i: list[Frontier],
                       ) -> tuple[list[Frontier], list[Frontier]]:
    """Frontiers of the merged map the pair may plan, plus the exclusions.

    Excluded are frontiers already assigned to robots outside the pair:
    foreign-to-one and not owned by the other. Identity across maps is by
    overlapping cell sets, since re-extraction renumbers clusters. Stale
    exclusions, no longer frontiers of the merged map, drop out here.
    """
    exclusions = [f for f in foreign_i if not any(f.overlaps(g) for g in assigned_j)]
    exclusions += [f for f in foreign_j if not any(f.overlaps(g) for g in assigned_i)]
    exclusions = dedupe_frontiers(exclusions)
    live_exclusions = [e for e in exclusions if any(e.overlaps(f) for f in merged)]
    usable = [f for f in merged if not any(f.overlaps(e) for e in live_exclusions)]
    return usable, live_exclusions


@dataclass
class DataPacket:
    """Everything handed over at a communication event."""

    sender: int
    pose: Pose
    map: GridMap
    stamps: TimestampVectors        # protocol estimates, pinned to confirmed events
    know_now: list[float]           # actual knowledge ages right now
    assigned: list[Frontier]
    foreign: list[Frontier]         # frontiers believed owned by other robots
    claims: dict[str, FrontierClaim]
    pending_events: tuple
    cache: RequestCache
    fleet: FleetKnowledge
    known_dead: set[int]


def build_packet(robot: RobotState, now: float) -> DataPacket:
    robot.refresh_own_stamp(now)
    return DataPacket(
        sender=robot.id,
        pose=robot.pose,
        map=robot.local_map,
        stamps=robot.stamps.copy(),
        know_now=list(robot.know_now),
        assigned=list(robot.assigned),
        foreign=robot.foreign_frontiers(),
        claims=dict(robot.claims),
        pending_events=tuple(robot.pending_events()),
        cache=robot.cache.copy(),
        fleet=robot.fleet.copy(),
        known_dead=set(robot.known_dead),
    )


def absorb_packet(receiver: RobotState, packet: DataPacket, now: float) -> bool:
    """Fold a peer's data into ``receiver`` without touching its plan.

    This is the spontaneous-meeting exchange: maps fuse, actual knowledge
    and protocol stamps take elementwise maxima, request caches and fleet
    hearsay merge by recency. No meeting is coordinated here.
    """
    changed = merge_into(receiver.local_map, packet.map) > 0
    receiver.refresh_own_stamp(now)
    for n in range(len(receiver.know_now)):
        if packet.know_now[n] > receiver.know_now[n]:
            receiver.know_now[n] = packet.know_now[n]
            changed = True
    merged_local = merge_operator_stamps(receiver.stamps.local, packet.stamps.local)
    if merged_local != receiver.stamps.local:
        receiver.stamps.local = merged_local
        changed = True
    merged_est = merge_operator_stamps(receiver.stamps.operator_est,
                                       packet.stamps.operator_est)
    if merged_est != receiver.stamps.operator_est:
        receiver.stamps.operator_est = merged_est
        changed = True
    if receiver.cache.merge_from(packet.cache):
        changed = True
    if receiver.fleet.merge_from(packet.fleet):
        changed = True
    if merge_claims(receiver.claims, packet.claims):
        changed = True
    new_dead = packet.known_dead - receiver.known_dead
    if new_dead:
        receiver.known_dead |= new_dead
        changed = True
    receiver.fleet.note_pose(packet.sender, now, packet.pose)
    receiver.fleet.note_events(packet.sender, now, packet.pending_events)
    return changed


def spontaneous_exchange(ri: RobotState, rk: RobotState, now: float) -> bool:
    """Unplanned in-range encounter: swap data, leave both plans untouched."""
    pi = build_packet(ri, now)
    pk = build_packet(rk, now)
    changed = absorb_packet(ri, pk, now)
    changed = absorb_packet(rk, pi, now) or changed
    return changed
