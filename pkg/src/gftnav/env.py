"""Partially observable egocentric 2D grid world.

Cells are addressed (row, col); row 0 is the north edge.  The map holds
free cells and obstacles; objects sit on otherwise free cells and block
movement like obstacles do, except that bumping into one is reported so the
teacher can judge it.
"""
from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field, replace
from enum import IntEnum
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .render import render_window

FREE, OBSTACLE = 0, 1
WINDOW = 5


class Action(IntEnum):
    MOVE_FORWARD = 0
    MOVE_BACKWARD = 1
    MOVE_LEFT = 2
    MOVE_RIGHT = 3
    TURN_LEFT = 4
    TURN_RIGHT = 5


class Heading(IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3


HEADING_VEC = {Heading.N: (-1, 0), Heading.E: (0, 1), Heading.S: (1, 0), Heading.W: (0, -1)}


def heading_vec(h: int) -> tuple[int, int]:
    return HEADING_VEC[Heading(h % 4)]


@dataclass(frozen=True)
class MapConfig:
    size_x: int
    size_y: int
    n_objects: int
    n_obstacles: int
    level: int | None = None

    def __post_init__(self):
        if self.size_x < 1 or self.size_y < 1:
            raise ValueError("map dimensions must be positive")
        if self.n_objects < 0 or self.n_obstacles < 0:
            raise ValueError("entity counts must be non-negative")
        if self.n_objects + self.n_obstacles + 1 > self.size_x * self.size_y:
            raise ValueError(f"{self} cannot fit its entities plus the agent")

    @property
    def horizon(self) -> int:
        return 3 * self.size_x * self.size_y


# level -> (size, goals, obstacles)
CURRICULUM = {1: (3, 2, 0), 2: (4, 2, 3), 3: (5, 2, 6), 4: (6, 4, 9), 5: (7, 4, 12), 6: (8, 4, 16)}
LARGER_MAPS = {9: (6, 20), 10: (6, 24), 11: (8, 28)}


def level_config(level: int) -> MapConfig:
    size, goals, obstacles = CURRICULUM[level]
    return MapConfig(size, size, goals, obstacles, level)


def larger_map_config(size: int) -> MapConfig:
    goals, obstacles = LARGER_MAPS[size]
    return MapConfig(size, size, goals, obstacles)


@dataclass(frozen=True)
class Entity:
    class_id: int
    cell: tuple[int, int]
    yaw: float
    scale: float


@dataclass(frozen=True)
class StepEvent:
    kind: str  # none | reached_object | blocked | timeout
    cell: tuple[int, int] | None = None
    class_id: int | None = None


@dataclass(frozen=True)
class EnvironmentState:
    grid: np.ndarray = field(compare=False)
    objects: tuple[Entity, ...] = ()
    agent: tuple[int, int] | None = None
    heading: int = Heading.N
    t: int = 0
    horizon: int = 0
    terminated: bool = False
    n_classes: int = 16

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def in_bounds(self, cell) -> bool:
        r, c = cell
        return 0 <= r < self.grid.shape[0] and 0 <= c < self.grid.shape[1]

    def object_at(self, cell) -> Entity | None:
        for o in self.objects:
            if o.cell == cell:
                return o
        return None

    def passable(self, cell) -> bool:
        return self.in_bounds(cell) and self.grid[cell] == FREE and self.object_at(cell) is None

    def to_dict(self) -> dict:
        return {
            "grid": ["".join("#" if v else "." for v in row) for row in self.grid],
            "objects": [[o.class_id, o.cell[0], o.cell[1], o.yaw, o.scale] for o in self.objects],
            "agent": list(self.agent) if self.agent is not None else None,
            "heading": int(self.heading),
            "t": self.t,
            "horizon": self.horizon,
            "terminated": self.terminated,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentState":
        grid = np.array([[1 if ch == "#" else 0 for ch in row] for row in d["grid"]], dtype=np.int8)
        objects = tuple(Entity(int(k), (int(r), int(c)), float(y), float(s)) for k, r, c, y, s in d["objects"])
        agent = tuple(d["agent"]) if d["agent"] is not None else None
        return cls(grid, objects, agent, int(d["heading"]), int(d["t"]), int(d["horizon"]),
                   bool(d["terminated"]), int(d.get("n_classes", 16)))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class MapGenerationError(RuntimeError):
    pass


class PlacementError(RuntimeError):
    """Constraints could not be met on this map; the caller should regenerate it."""


# ---------------------------------------------------------------- maze generation

def neighbors4(cell, shape) -> Iterable[tuple[int, int]]:
    r, c = cell
    for dr, dc in ((-1, 0), (0, 1), (1, 0), (0, -1)):
        rr, cc = r + dr, c + dc
        if 0 <= rr < shape[0] and 0 <= cc < shape[1]:
            yield rr, cc


def bfs(start, passable, shape) -> set[tuple[int, int]]:
    seen = {start}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        for nb in neighbors4(cell, shape):
            if nb not in seen and passable(nb):
                seen.add(nb)
                queue.append(nb)
    return seen


def free_cells_connected(grid: np.ndarray) -> bool:
    free = list(zip(*np.nonzero(grid == FREE)))
    if not free:
        return True
    free = [(int(r), int(c)) for r, c in free]
    reach = bfs(free[0], lambda cell: grid[cell] == FREE, grid.shape)
    return len(reach) == len(free)


def prim_walls(rows: int, cols: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Randomised Prim spanning tree over the even-coordinate lattice.

    Lattice nodes and the cells between tree-adjacent nodes are passages;
    everything else is returned as a proposed wall.
    """
    nodes = [(r, c) for r in range(0, rows, 2) for c in range(0, cols, 2)]
    start = nodes[int(rng.integers(len(nodes)))]
    in_tree = {start}
    open_cells = {start}
    frontier = []

    def push(node):
        r, c = node
        for dr, dc in ((-2, 0), (0, 2), (2, 0), (0, -2)):
            nb = (r + dr, c + dc)
            if 0 <= nb[0] < rows and 0 <= nb[1] < cols and nb not in in_tree:
                frontier.append((node, nb))

    push(start)
    while frontier:
        a, b = frontier.pop(int(rng.integers(len(frontier))))
        if b in in_tree:
            continue
        in_tree.add(b)
        open_cells.add(b)
        open_cells.add(((a[0] + b[0]) // 2, (a[1] + b[1]) // 2))
        push(b)
    return [(r, c) for r in range(rows) for c in range(cols) if (r, c) not in open_cells]


def generate_map(cfg: MapConfig, rng: np.random.Generator, max_retries: int = 500,
                 n_classes: int = 16) -> EnvironmentState:
    """Maze with exactly ``cfg.n_obstacles`` obstacles and one connected free region."""
    rows, cols = cfg.size_y, cfg.size_x
    for _ in range(max_retries):
        grid = np.zeros((rows, cols), dtype=np.int8)
        if cfg.n_obstacles:
            walls = prim_walls(rows, cols, rng)
            if cfg.n_obstacles <= len(walls):
                picks = rng.choice(len(walls), cfg.n_obstacles, replace=False)
                chosen = [walls[i] for i in picks]
            else:
                others = [(r, c) for r in range(rows) for c in range(cols) if (r, c) not in set(walls)]
                extra = rng.choice(len(others), cfg.n_obstacles - len(walls), replace=False)
                chosen = walls + [others[i] for i in extra]
            for cell in chosen:
                grid[cell] = OBSTACLE
        if free_cells_connected(grid):
            return EnvironmentState(grid=grid, horizon=cfg.horizon, n_classes=n_classes)
    raise MapGenerationError(f"no connected layout found for {cfg} after {max_retries} tries")


# ---------------------------------------------------------------- entity placement

@dataclass
class PlacementSpec:
    """Which classes to place and how the first few must relate.

    relation is one of:
      None                        -- no constraint
      ("adjacent", i, j)          -- object j 4-adjacent to object i
      ("between", i, j)           -- i and j collinear with one free cell between them
      ("direction", i, j, d)      -- object j at offset ``d`` (drow, dcol) from object i
    success_objects lists object indices whose cells count as goals; for
    "between" the middle cell is the goal instead.
    """

    classes: list[int]
    relation: tuple | None = None
    success_objects: list[int] = field(default_factory=list)


def _sample_cell(candidates: Sequence[tuple[int, int]], rng) -> tuple[int, int]:
    return candidates[int(rng.integers(len(candidates)))]


def _place_once(state: EnvironmentState, spec: PlacementSpec, rng) -> tuple[list, tuple | None] | None:
    grid = state.grid
    free = [(int(r), int(c)) for r, c in zip(*np.nonzero(grid == FREE))]
    taken: set[tuple[int, int]] = set()
    cells: list[tuple[int, int] | None] = [None] * len(spec.classes)
    middle = None
    rel = spec.relation

    def is_free(cell):
        return 0 <= cell[0] < grid.shape[0] and 0 <= cell[1] < grid.shape[1] \
            and grid[cell] == FREE and cell not in taken

    if rel is not None:
        kind = rel[0]
        if kind == "adjacent":
            _, i, j = rel
            a = _sample_cell(free, rng)
            opts = [nb for nb in neighbors4(a, grid.shape) if grid[nb] == FREE]
            if not opts:
                return None
            cells[i], cells[j] = a, _sample_cell(opts, rng)
        elif kind == "between":
            _, i, j = rel
            m = _sample_cell(free, rng)
            axes = [(dr, dc) for dr, dc in ((1, 0), (0, 1))
                    if is_free((m[0] - dr, m[1] - dc)) and is_free((m[0] + dr, m[1] + dc))]
            if not axes:
                return None
            dr, dc = axes[int(rng.integers(len(axes)))]
            cells[i], cells[j] = (m[0] - dr, m[1] - dc), (m[0] + dr, m[1] + dc)
            middle = m
        elif kind == "direction":
            _, i, j, (dr, dc) = rel
            a = _sample_cell(free, rng)
            b = (a[0] + dr, a[1] + dc)
            if not is_free(b):
                return None
            cells[i], cells[j] = a, b
        else:
            raise ValueError(f"unknown relation {kind!r}")
        taken.update(c for c in cells if c is not None)
        if middle is not None:
            taken.add(middle)

    for k in range(len(cells)):
        if cells[k] is None:
            opts = [c for c in free if c not in taken]
            if not opts:
                return None
            cells[k] = _sample_cell(opts, rng)
            taken.add(cells[k])
    if middle is not None:
        taken.discard(middle)
    agent_opts = [c for c in free if c not in taken and c != middle]
    if not agent_opts:
        return None
    agent = _sample_cell(agent_opts, rng)
    return cells, (agent, middle)


def reachable_goals(state: EnvironmentState, goal_cells: Iterable[tuple[int, int]]) -> set:
    """Goal cells the agent can bump into (objects) or step onto (free cells)."""
    reach = bfs(state.agent, state.passable, state.shape)
    out = set()
    for g in goal_cells:
        if state.object_at(g) is None:
            if g in reach:
                out.add(g)
        elif any(nb in reach for nb in neighbors4(g, state.shape)):
            out.add(g)
    return out


def place_entities(state: EnvironmentState, spec: PlacementSpec, rng: np.random.Generator,
                   max_retries: int = 200) -> EnvironmentState:
    for _ in range(max_retries):
        placed = _place_once(state, spec, rng)
        if placed is None:
            continue
        cells, (agent, middle) = placed
        objects = tuple(
            Entity(cls, cell, float(rng.uniform(0.0, 360.0)), float(rng.uniform(0.5, 1.0)))
            for cls, cell in zip(spec.classes, cells)
        )
        new = replace(state, objects=objects, agent=agent, heading=int(rng.integers(4)),
                      t=0, terminated=False)
        goals = [middle] if middle is not None else [cells[i] for i in spec.success_objects]
        if not goals or reachable_goals(new, goals):
            return new
    raise PlacementError("placement constraints unsatisfiable on this map")


# ---------------------------------------------------------------- dynamics

def _move_offset(heading: int, action: Action) -> tuple[int, int]:
    turn = {Action.MOVE_FORWARD: 0, Action.MOVE_RIGHT: 1, Action.MOVE_BACKWARD: 2, Action.MOVE_LEFT: 3}[action]
    return heading_vec(heading + turn)


# (heading, action) -> grid offset for the four move actions; plain ints keep step() cheap
_OFFSETS = {(h, int(a)): _move_offset(h, a) for h in range(4)
            for a in (Action.MOVE_FORWARD, Action.MOVE_BACKWARD, Action.MOVE_LEFT, Action.MOVE_RIGHT)}
_TURN_LEFT, _TURN_RIGHT = int(Action.TURN_LEFT), int(Action.TURN_RIGHT)


def step(state: EnvironmentState, action: int) -> tuple[EnvironmentState, StepEvent]:
    if state.terminated or state.t >= state.horizon:
        raise RuntimeError("step() called on a terminated session")
    action = int(action)
    if not 0 <= action < len(Action):
        raise ValueError(f"{action} is not a valid Action")
    heading, agent = state.heading, state.agent
    kind, cls, cell = "none", None, agent
    if action == _TURN_LEFT:
        heading = (heading - 1) % 4
    elif action == _TURN_RIGHT:
        heading = (heading + 1) % 4
    else:
        dr, dc = _OFFSETS[heading, action]
        target = (agent[0] + dr, agent[1] + dc)
        rows, cols = state.grid.shape
        if not (0 <= target[0] < rows and 0 <= target[1] < cols) or state.grid[target] == OBSTACLE:
            kind = "blocked"
        else:
            obj = state.object_at(target)
            if obj is not None:
                kind, cls, cell = "reached_object", obj.class_id, target
            else:
                agent = cell = target
    t = state.t + 1
    if t == state.horizon and kind != "reached_object":
        kind, cls = "timeout", None
    new = EnvironmentState(state.grid, state.objects, agent, heading, t, state.horizon,
                           state.terminated or kind == "timeout", state.n_classes)
    return new, StepEvent(kind, cell, cls)


def terminate(state: EnvironmentState) -> EnvironmentState:
    return replace(state, terminated=True)


# ---------------------------------------------------------------- visibility

def window_offsets(i: int, j: int) -> tuple[int, int]:
    """(forward, lateral) offsets of window cell (i, j); agent sits at (4, 2)."""
    return WINDOW - 1 - i, j - WINDOW // 2


def _line_candidates(f: int, s: int) -> list[list[tuple[int, int]]]:
    """Intermediate cells of the Bresenham line from (0, 0) to (f, s).

    Each entry lists the cells the line may pass through at that step; two
    entries means an exact tie between neighbouring cells.
    """
    steps = max(abs(f), abs(s))
    out = []
    for k in range(1, steps):
        cand = []
        for major, minor, swap in ((f, s, False), (s, f, True)):
            if abs(major) != steps:
                continue
            a = Fraction(k * (1 if major > 0 else -1))
            b = Fraction(k * minor, steps)
            lo, hi = int(np.floor(b)), int(np.ceil(b))
            if b - lo == Fraction(1, 2):
                opts = [lo, hi]
            else:
                opts = [int(round(b))]
            cand = [(int(a), o) if not swap else (o, int(a)) for o in opts]
            break
        out.append(cand)
    return out


@lru_cache(maxsize=None)
def _window_lines() -> dict[tuple[int, int], list[list[tuple[int, int]]]]:
    lines = {}
    for i in range(WINDOW):
        for j in range(WINDOW):
            f, s = window_offsets(i, j)
            lines[(i, j)] = _line_candidates(f, s)
    return lines


def window_cell(state: EnvironmentState, f: int, s: int) -> tuple[int, int]:
    fr, fc = heading_vec(state.heading)
    rr, rc = heading_vec(state.heading + 1)
    r, c = state.agent
    return r + f * fr + s * rr, c + f * fc + s * rc


def visible_mask(state: EnvironmentState) -> np.ndarray:
    """5x5 visibility; row 0 is farthest ahead, the agent is at (4, 2)."""
    mask = np.zeros((WINDOW, WINDOW), dtype=bool)
    grid = state.grid
    for (i, j), line in _window_lines().items():
        f, s = window_offsets(i, j)
        cell = window_cell(state, f, s)
        if not state.in_bounds(cell):
            continue
        clear = True
        for options in line:
            if not any(state.in_bounds(w) and grid[w] != OBSTACLE
                       for w in (window_cell(state, ff, ss) for ff, ss in options)):
                clear = False
                break
        mask[i, j] = clear
    return mask


@dataclass
class Observation:
    image: np.ndarray  # (80, 80, 3) uint8
    mask: np.ndarray   # (5, 5) bool


def render(state: EnvironmentState) -> Observation:
    mask = visible_mask(state)
    cells = []
    for i in range(WINDOW):
        row = []
        for j in range(WINDOW):
            if not mask[i, j]:
                row.append(None)
                continue
            cell = window_cell(state, *window_offsets(i, j))
            if state.grid[cell] == OBSTACLE:
                row.append(("obstacle",))
            else:
                obj = state.object_at(cell)
                if obj is None:
                    row.append(("floor",))
                else:
                    yaw = (obj.yaw + 90.0 * state.heading) % 360.0
                    row.append(("object", obj.class_id, yaw, obj.scale))
        cells.append(row)
    image = render_window(cells, state.n_classes)
    return Observation(image, mask)


def text_render(state: EnvironmentState) -> str:
    arrows = "^>v<"
    lines = []
    for r in range(state.shape[0]):
        row = []
        for c in range(state.shape[1]):
            if state.agent == (r, c):
                row.append(arrows[state.heading])
            elif state.grid[r, c] == OBSTACLE:
                row.append("#")
            else:
                obj = state.object_at((r, c))
                row.append(chr(ord("a") + obj.class_id % 26) if obj else ".")
        lines.append("".join(row))
    return "\n".join(lines)
