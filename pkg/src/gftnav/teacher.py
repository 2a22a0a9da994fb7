"""Programmatic teacher: task sampling, scene constraints, commands, judging and curriculum."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

import numpy as np

from .env import (CURRICULUM, EnvironmentState, MapConfig, MapGenerationError, PlacementError,
                  PlacementSpec, StepEvent, generate_map, level_config, neighbors4, place_entities)
from .grammar import Grammar, GrammarError, Vocabulary

STEP_PENALTY_CENTI = -1
SUCCESS_CENTI = 100
FAILURE_CENTI = -100

# allocentric compass offsets (drow, dcol) for nav_dir
DIRECTION_OFFSETS = {"front": (-1, 0), "behind": (1, 0), "left": (0, -1), "right": (0, 1)}


class TaskType(str, Enum):
    NAV = "nav"
    NAV_NR = "nav_nr"
    NAV_BW = "nav_bw"
    NAV_AVOID = "nav_avoid"
    NAV_DIR = "nav_dir"

    @property
    def rule(self) -> str:
        return self.value.upper()

    @property
    def n_referents(self) -> int:
        return 2 if self is TaskType.NAV_BW else 1


TASKS = tuple(TaskType)


def sample_task(rng: np.random.Generator) -> TaskType:
    return TASKS[int(rng.integers(len(TASKS)))]


@dataclass
class SceneSpec:
    task: TaskType
    placement: PlacementSpec
    referents: list[int]          # object classes named by the command
    direction: str | None = None  # nav_dir only


def scene_spec(task: TaskType, cfg: MapConfig, rng: np.random.Generator, n_classes: int = 16) -> SceneSpec:
    """Classes and geometric constraints that make a command for ``task`` well posed.

    Objects always carry distinct classes, so every named referent is unique
    on the map.  Index 0 is the named object (the first anchor for nav_bw);
    index 1 is the second anchor or the intended goal where there is one.
    """
    task = TaskType(task)
    need = 1 if task is TaskType.NAV else 2
    if cfg.n_objects < need:
        raise ValueError(f"{task.value} needs at least {need} objects, config has {cfg.n_objects}")
    if cfg.n_objects > n_classes:
        raise ValueError(f"cannot place {cfg.n_objects} distinct classes from {n_classes}")
    classes = [int(c) for c in rng.choice(n_classes, cfg.n_objects, replace=False)]
    direction = None
    if task is TaskType.NAV:
        placement = PlacementSpec(classes, None, [0])
        referents = [classes[0]]
    elif task is TaskType.NAV_NR:
        placement = PlacementSpec(classes, ("adjacent", 0, 1), [1])
        referents = [classes[0]]
    elif task is TaskType.NAV_BW:
        placement = PlacementSpec(classes, ("between", 0, 1), [])
        referents = [classes[0], classes[1]]
    elif task is TaskType.NAV_AVOID:
        placement = PlacementSpec(classes, None, list(range(1, len(classes))))
        referents = [classes[0]]
    else:
        direction = sorted(DIRECTION_OFFSETS)[int(rng.integers(4))]
        placement = PlacementSpec(classes, ("direction", 0, 1, DIRECTION_OFFSETS[direction]), [1])
        referents = [classes[0]]
    return SceneSpec(task, placement, referents, direction)


@dataclass
class Command:
    task: TaskType
    tokens: list[int]
    words: list[str]
    referents: tuple[int, ...]
    direction: str | None = None

    @property
    def text(self) -> str:
        return " ".join(self.words)


def _leaf_referents(leaves, vocab: Vocabulary) -> tuple[tuple[int, ...], str | None]:
    objs = tuple(vocab.object_index[w] for parent, w in leaves if parent == "OBJ")
    dirs = [w for parent, w in leaves if parent.startswith("DIR")]
    if len(dirs) > 1:
        raise GrammarError(f"derivation carries several directions: {dirs}")
    return objs, (dirs[0] if dirs else None)


def generate_command(spec: SceneSpec, grammar: Grammar, rng: np.random.Generator,
                     max_tries: int = 1000) -> Command:
    vocab = grammar.vocab
    rule = spec.task.rule
    if rule not in grammar.rules:
        raise GrammarError(f"grammar has no template for task {spec.task.value}")
    names = [vocab.objects[c] for c in spec.referents]
    for _ in range(max_tries):
        leaves = grammar.sample(rng, rule, fill={"OBJ": list(names)})
        objs, direction = _leaf_referents(leaves, vocab)
        if direction != spec.direction:
            continue
        if list(objs) != list(spec.referents):
            raise GrammarError(f"template for {rule} does not use exactly {len(names)} OBJ slots")
        words = [w for _, w in leaves]
        return Command(spec.task, vocab.ids(words), words, tuple(objs), direction)
    raise GrammarError(f"no {rule} template realises direction {spec.direction!r}")


def parse_command(words, grammar: Grammar) -> set[tuple[TaskType, tuple[int, ...], str | None]]:
    """Every (task, referents, direction) reading of a sentence."""
    out = set()
    for alt, leaves in grammar.parses(list(words)):
        if len(alt) != 1:
            continue
        try:
            task = TaskType(alt[0].lower())
        except ValueError:
            continue
        objs, direction = _leaf_referents(leaves, grammar.vocab)
        out.add((task, objs, direction))
    return out


@dataclass(frozen=True)
class TargetSpec:
    success_cells: frozenset
    failure_classes: frozenset
    enter_to_succeed: bool = False  # the goal is a free cell the agent walks onto


def _cells_of(state: EnvironmentState) -> dict[int, tuple[int, int]]:
    return {o.class_id: o.cell for o in state.objects}


def target_spec(state: EnvironmentState, command: Command) -> TargetSpec:
    cells = _cells_of(state)
    for c in command.referents:
        if c not in cells:
            raise ValueError(f"command names class {c}, which is not on the map")
    task = command.task
    anchor = cells[command.referents[0]]
    enter = False
    if task is TaskType.NAV:
        success = {anchor}
    elif task is TaskType.NAV_NR:
        near = set(neighbors4(anchor, state.shape))
        success = {cell for cell in cells.values() if cell in near}
    elif task is TaskType.NAV_BW:
        a, b = anchor, cells[command.referents[1]]
        if (a[0] != b[0] and a[1] != b[1]) or abs(a[0] - b[0]) + abs(a[1] - b[1]) != 2:
            raise ValueError("nav_bw anchors are not two cells apart on one line")
        success = {((a[0] + b[0]) // 2, (a[1] + b[1]) // 2)}
        enter = True
    elif task is TaskType.NAV_AVOID:
        success = {cell for cls, cell in cells.items() if cls != command.referents[0]}
    else:
        dr, dc = DIRECTION_OFFSETS[command.direction]
        goal = (anchor[0] + dr, anchor[1] + dc)
        success = {goal} if state.object_at(goal) is not None else set()
    if not success:
        raise ValueError(f"command {command.text!r} has no success cell on this map")
    failure = {cls for cls, cell in cells.items() if cell not in success}
    return TargetSpec(frozenset(success), frozenset(failure), enter)


@dataclass(frozen=True)
class Judgement:
    reward_centi: int
    outcome: str  # success | failure | timeout | none

    @property
    def reward(self) -> float:
        return self.reward_centi / 100.0

    @property
    def exact_reward(self) -> Fraction:
        return Fraction(self.reward_centi, 100)

    @property
    def terminal(self) -> bool:
        return self.outcome != "none"


def judge(event: StepEvent, spec: TargetSpec) -> Judgement:
    """Reward in hundredths plus session outcome for one environment step."""
    r = STEP_PENALTY_CENTI
    if event.kind == "reached_object":
        if event.cell in spec.success_cells:
            return Judgement(r + SUCCESS_CENTI, "success")
        if event.class_id in spec.failure_classes:
            return Judgement(r + FAILURE_CENTI, "failure")
    if spec.enter_to_succeed and event.kind in ("none", "timeout") and event.cell in spec.success_cells:
        return Judgement(r + SUCCESS_CENTI, "success")
    if event.kind == "timeout":
        return Judgement(r, "timeout")
    return Judgement(r, "none")


# ---------------------------------------------------------------- sessions

@dataclass
class Session:
    task: TaskType
    state: EnvironmentState
    command: Command
    target: TargetSpec
    level: int | None = None


def new_session(cfg: MapConfig, grammar: Grammar, rng: np.random.Generator,
                task: TaskType | None = None, max_maps: int = 100) -> Session:
    """Sample a task, arrange a matching scene and issue a command for it."""
    task = sample_task(rng) if task is None else TaskType(task)
    n_classes = len(grammar.vocab.objects)
    for _ in range(max_maps):
        spec = scene_spec(task, cfg, rng, n_classes)
        state = generate_map(cfg, rng, n_classes=n_classes)
        try:
            state = place_entities(state, spec.placement, rng)
        except PlacementError:
            continue
        command = generate_command(spec, grammar, rng)
        return Session(task, state, command, target_spec(state, command), cfg.level)
    raise MapGenerationError(f"could not arrange a {task.value} scene for {cfg}")


# ---------------------------------------------------------------- curriculum

@dataclass
class CurriculumState:
    """Level plus a sliding window of (task, success) session outcomes."""

    level: int = 1
    max_level: int = 6
    window_size: int = 200
    min_per_task: int = 20
    threshold: float = 0.7
    window: deque = field(default_factory=deque)
    tasks: tuple | None = None  # task types that gate promotion; all of them when None

    def config(self) -> MapConfig:
        return level_config(self.level)

    def rates(self) -> dict[TaskType, float | None]:
        out = {}
        for t in TASKS:
            hits = [s for k, s in self.window if k is t]
            out[t] = sum(hits) / len(hits) if hits else None
        return out

    def to_dict(self) -> dict:
        return {"level": self.level, "max_level": self.max_level, "window_size": self.window_size,
                "min_per_task": self.min_per_task, "threshold": self.threshold,
                "window": [[k.value, bool(s)] for k, s in self.window],
                "tasks": list(self.tasks) if self.tasks else None}

    @classmethod
    def from_dict(cls, d: dict) -> "CurriculumState":
        cs = cls(d["level"], d["max_level"], d["window_size"], d["min_per_task"], d["threshold"])
        cs.window = deque((TaskType(k), bool(s)) for k, s in d["window"])
        cs.tasks = tuple(d["tasks"]) if d.get("tasks") else None
        return cs


def curriculum_update(cs: CurriculumState, task: TaskType, success: bool) -> CurriculumState:
    """Record one outcome; advance a level once every task type clears the threshold."""
    window = deque(cs.window)
    window.append((TaskType(task), bool(success)))
    while len(window) > cs.window_size:
        window.popleft()
    new = CurriculumState(cs.level, cs.max_level, cs.window_size, cs.min_per_task, cs.threshold, window,
                          cs.tasks)
    if new.level >= min(new.max_level, max(CURRICULUM)):
        return new
    counts = {t: 0 for t in TASKS}
    wins = {t: 0 for t in TASKS}
    for k, s in window:
        counts[k] += 1
        wins[k] += s
    required = [TaskType(t) for t in cs.tasks] if cs.tasks else TASKS
    if all(counts[t] >= cs.min_per_task and wins[t] > cs.threshold * counts[t] for t in required):
        new.level += 1
        new.window = deque()
    return new
