"""Scene file parsing, serialization and seeded scene generation.

Scene format, one item per line:
    resolution=<float>          header, required first
    <grid rows>                 '#'=occupied '.'=free 'S'=spawn 'H'=operator
    class <c>: x,y x,y ...      optional, cells open only to robot class c
    spawn x,y                   optional explicit spawn (must land on free)
    operator x,y                optional explicit operator pose
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np

from .grid import FREE, NO_CLASS, OCCUPIED, GridMap, Pose

GRID_CHARS = {"#": OCCUPIED, ".": FREE, "S": FREE, "H": FREE}


class SceneError(ValueError):
    """Malformed scene file; message carries the offending line."""


@dataclass
class Scene:
    truth: GridMap
    spawns: list[Pose]
    operator: Pose
    text: str = field(default="", repr=False)


def parse_scene(text: str) -> Scene:
    lines = text.splitlines()
    resolution = None
    rows: list[str] = []
    directives: list[tuple[int, str]] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip()
        if not line or line.startswith(";"):
            continue
        if line.startswith("resolution="):
            try:
                resolution = float(line.split("=", 1)[1])
            except ValueError:
                raise SceneError(f"bad resolution on line {lineno}")
            if resolution <= 0:
                raise SceneError(f"resolution must be positive (line {lineno})")
        elif line.startswith(("class ", "spawn ", "operator ")):
            directives.append((lineno, line))
        else:
            rows.append(line)
    if resolution is None:
        raise SceneError("missing resolution header")
    if not rows:
        raise SceneError("scene has no grid rows")

    width = len(rows[0])
    height = len(rows)
    cells = np.full((height, width), FREE, dtype=np.uint8)
    spawns: list[Pose] = []
    operator: Pose | None = None
    for y, row in enumerate(rows):
        if len(row) != width:
            raise SceneError(f"ragged row {y + 1}")
        for x, ch in enumerate(row):
            if ch not in GRID_CHARS:
                raise SceneError(f"unknown cell character {ch!r} in row {y + 1}")
            cells[y, x] = GRID_CHARS[ch]
            if ch == "S":
                spawns.append(Pose(x, y))
            elif ch == "H":
                if operator is not None:
                    raise SceneError(f"duplicate operator marker in row {y + 1}")
                operator = Pose(x, y)

    access = None
    grid = GridMap(width, height, resolution, cells, access)
    for lineno, line in directives:
        head, _, rest = line.partition(" ")
        if head == "class":
            label, _, cell_list = rest.partition(":")
            try:
                cls = int(label.strip())
            except ValueError:
                raise SceneError(f"bad class id on line {lineno}")
            if access is None:
                access = np.full((height, width), NO_CLASS, dtype=np.int16)
                grid.access = access
            for token in cell_list.split():
                p = _parse_cell(token, lineno)
                _require_cell(grid, p, lineno)
                access[p.y, p.x] = cls
        elif head == "spawn":
            p = _parse_cell(rest.strip(), lineno)
            _require_cell(grid, p, lineno)
            if grid.state(p) != FREE:
                raise SceneError(f"spawn on occupied cell (line {lineno})")
            spawns.append(p)
        elif head == "operator":
            p = _parse_cell(rest.strip(), lineno)
            _require_cell(grid, p, lineno)
            if grid.state(p) != FREE:
                raise SceneError(f"operator on occupied cell (line {lineno})")
            operator = p

    if operator is None:
        raise SceneError("scene defines no operator pose")
    if not spawns:
        raise SceneError("scene defines no robot spawns")
    grid.touch()
    return Scene(grid, spawns, operator, text)


def _parse_cell(token: str, lineno: int) -> Pose:
    try:
        x_str, y_str = token.split(",")
        return Pose(int(x_str), int(y_str))
    except ValueError:
        raise SceneError(f"bad cell '{token}' on line {lineno}")


def _require_cell(grid: GridMap, p: Pose, lineno: int) -> None:
    if not grid.in_bounds(p):
        raise SceneError(f"cell {tuple(p)} out of bounds (line {lineno})")


def scene_to_text(scene: Scene) -> str:
    grid = scene.truth
    spawn_set = set(scene.spawns)
    lines = [f"resolution={grid.resolution}"]
    for y in range(grid.height):
        row = []
        for x in range(grid.width):
            p = Pose(x, y)
            if p == scene.operator:
                row.append("H")
            elif p in spawn_set:
                row.append("S")
            elif grid.state(p) == OCCUPIED:
                row.append("#")
            else:
                row.append(".")
        lines.append("".join(row))
    if grid.access is not None:
        by_class: dict[int, list[Pose]] = {}
        ys, xs = np.nonzero(grid.access != NO_CLASS)
        for y, x in zip(ys.tolist(), xs.tolist()):
            by_class.setdefault(int(grid.access[y, x]), []).append(Pose(x, y))
        for cls in sorted(by_class):
            cell_list = " ".join(f"{p.x},{p.y}" for p in by_class[cls])
            lines.append(f"class {cls}: {cell_list}")
    return "\n".join(lines) + "\n"


def generate_scene(seed: int, width: int = 40, height: int = 24,
                   n_spawns: int = 4, resolution: float = 0.5,
                   obstacle_rate: float = 0.12) -> Scene:
    """Seeded random indoor-style scene with guaranteed connected free space.

    Walls the border, scatters rectangular obstacles, then fills in any free
    pocket unreachable from the operator so every free cell is explorable.
    """
    rng = random.Random(seed)
    cells = np.full((height, width), FREE, dtype=np.uint8)
    cells[0, :] = OCCUPIED
    cells[-1, :] = OCCUPIED
    cells[:, 0] = OCCUPIED
    cells[:, -1] = OCCUPIED

    target_blocked = int(obstacle_rate * width * height)
    blocked = 0
    attempts = 0
    while blocked < target_blocked and attempts < 200:
        attempts += 1
        bw = rng.randint(1, max(2, width // 6))
        bh = rng.randint(1, max(2, height // 6))
        bx = rng.randint(1, width - bw - 1)
        by = rng.randint(1, height - bh - 1)
        region = cells[by:by + bh, bx:bx + bw]
        blocked += int((region == FREE).sum())
        region[:] = OCCUPIED

    grid = GridMap(width, height, resolution, cells)
    operator = _nearest_free(grid, Pose(2, 2))
    reach = grid.distance_field(operator)
    sealed = (cells == FREE) & (reach < 0)
    cells[sealed] = OCCUPIED
    grid.touch()

    spawns: list[Pose] = []
    for p in _spiral(operator, grid):
        if grid.state(p) == FREE and p != operator:
            spawns.append(p)
        if len(spawns) == n_spawns:
            break
    if len(spawns) < n_spawns:
        raise SceneError("generated scene too cramped for requested spawns")
    scene = Scene(grid, spawns, operator)
    scene.text = scene_to_text(scene)
    return scene


def _nearest_free(grid: GridMap, near: Pose) -> Pose:
    for p in _spiral(near, grid):
        if grid.state(p) == FREE:
            return p
    raise SceneError("no free cell in generated scene")


def _spiral(center: Pose, grid: GridMap):
    yield center
    for radius in range(1, max(grid.width, grid.height)):
        for dy in range(-radius, radius + 1):
            for dx in range(-radius, radius + 1):
                if max(abs(dx), abs(dy)) != radius:
                    continue
                p = Pose(center.x + dx, center.y + dy)
                if grid.in_bounds(p):
                    yield p
