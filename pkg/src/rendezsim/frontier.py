"""Frontier extraction: free cells bordering unexplored space, clustered."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import FREE, UNKNOWN, GridMap, Pose

_EIGHT_CONNECTED = np.ones((3, 3), dtype=np.uint8)


@dataclass(frozen=True)
class Frontier:
    """One 8-connected cluster of frontier cells.

    The centroid is snapped to a member cell so it is always a reachable
    goal; the id is a stable digest of the member cells.
    """

    cells: frozenset[Pose]
    centroid: Pose
    id: str

    def overlaps(self, other: "Frontier") -> bool:
        return not self.cells.isdisjoint(other.cells)

    @property
    def anchor(self) -> int:
        """Lowest row-major member index; deterministic tie-break key."""
        return min(p.y * 65536 + p.x for p in self.cells)


def frontier_cell_mask(grid: GridMap) -> np.ndarray:
    """Free cells 4-adjacent to at least one unknown cell."""
    unknown = grid.cells == UNKNOWN
    near_unknown = np.zeros_like(unknown)
    near_unknown[1:, :] |= unknown[:-1, :]
    near_unknown[:-1, :] |= unknown[1:, :]
    near_unknown[:, 1:] |= unknown[:, :-1]
    near_unknown[:, :-1] |= unknown[:, 1:]
    return (grid.cells == FREE) & near_unknown


def make_frontier(cells: frozenset[Pose]) -> Frontier:
    digest = hashlib.sha1()
    for p in sorted(cells):
        digest.update(f"{p.x},{p.y};".encode())
    sx = sum(p.x for p in cells) / len(cells)
    sy = sum(p.y for p in cells) / len(cells)
    centroid = min(cells, key=lambda p: ((p.x - sx) ** 2 + (p.y - sy) ** 2, p.y, p.x))
    return Frontier(cells, centroid, digest.hexdigest()[:16])


def extract_frontiers(grid: GridMap) -> list[Frontier]:
    """All frontiers of ``grid`` as 8-connected clusters, deterministically ordered."""
    mask = frontier_cell_mask(grid)
    if not mask.any():
        return []
    labels, count = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    frontiers = []
    for lab in range(1, count + 1):
        ys, xs = np.nonzero(labels == lab)
        cells = frozenset(Pose(int(x), int(y)) for x, y in zip(xs, ys))
        frontiers.append(make_frontier(cells))
    frontiers.sort(key=lambda f: f.anchor)
    return frontiers


def live_frontier(frontier: Frontier, grid: GridMap) -> bool:
    """True while every member cell is still a frontier cell of ``grid``."""
    mask = frontier_cell_mask(grid)
    return all(mask[p.y, p.x] for p in frontier.cells)


def any_cell_retired(frontier: Frontier, grid: GridMap) -> bool:
    """True once any member cell stopped being a frontier cell of ``grid``."""
    mask = frontier_cell_mask(grid)
    return any(not mask[p.y, p.x] for p in frontier.cells)
