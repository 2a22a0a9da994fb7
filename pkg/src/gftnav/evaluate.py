"""Evaluation protocol, scripted reference policies and larger-map generalisation."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import tensor as T
from .agent import Agent, AgentConfig, History, reset_history, select_actions, stack_histories
from .env import (LARGER_MAPS, Action, EnvironmentState, MapConfig, heading_vec, larger_map_config,
                  level_config, neighbors4, render, step as env_step)
from .grammar import Grammar
from .teacher import TASKS, Session, TaskType, judge, new_session
from .tensor import ParameterSet


class Policy(Protocol):
    def begin(self, sessions: Sequence[Session]) -> None: ...

    def act(self, rows: Sequence[int], states: Sequence[EnvironmentState]) -> np.ndarray: ...


class AgentPolicy:
    """Network policy; greedy (argmax) unless ``greedy=False``."""

    def __init__(self, agent: Agent, greedy: bool = True, seed: int = 0):
        self.agent, self.greedy = agent, greedy
        self.rng = np.random.default_rng(seed)

    def begin(self, sessions):
        self.sessions = list(sessions)
        self.hist = [reset_history(self.agent.cfg, 1) for _ in sessions]

    def act(self, rows, states):
        with T.no_grad():
            images = np.stack([render(s).image for s in states])
            tokens = [self.sessions[r].command.tokens for r in rows]
            m = self.agent.perceive(images, tokens)
            hist = stack_histories([self.hist[r] for r in rows])
            actions, _, new = self.agent.act_and_value(m, hist, self.rng, greedy=self.greedy)
        for k, r in enumerate(rows):
            self.hist[r] = new.select([k]).detach()
        return actions


class RandomPolicy:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def begin(self, sessions):
        pass

    def act(self, rows, states):
        return self.rng.integers(0, len(Action), size=len(rows))


class TurnOnlyPolicy:
    def begin(self, sessions):
        pass

    def act(self, rows, states):
        return np.full(len(rows), int(Action.TURN_LEFT))


class OraclePolicy:
    """Follows a BFS shortest path to the nearest success cell (full-map knowledge)."""

    def begin(self, sessions):
        self.sessions = list(sessions)

    def act(self, rows, states):
        return np.array([oracle_action(s, self.sessions[r].target) for r, s in zip(rows, states)])


_MOVE_BY_TURN = [Action.MOVE_FORWARD, Action.MOVE_RIGHT, Action.MOVE_BACKWARD, Action.MOVE_LEFT]


def oracle_action(state: EnvironmentState, target) -> int:
    goals = set(target.success_cells)
    start = state.agent
    parent = {start: None}
    queue = deque([start])
    hit = None
    while queue and hit is None:
        cell = queue.popleft()
        for nb in neighbors4(cell, state.shape):
            if nb in goals:
                hit = (cell, nb)
                break
            if nb not in parent and state.passable(nb):
                parent[nb] = cell
                queue.append(nb)
    if hit is None:
        return int(Action.TURN_LEFT)
    cell, goal = hit
    nxt = goal
    while cell != start:
        nxt, cell = cell, parent[cell]
    d = (nxt[0] - start[0], nxt[1] - start[1])
    for turn, action in enumerate(_MOVE_BY_TURN):
        if heading_vec(state.heading + turn) == d:
            return int(action)
    raise AssertionError("oracle step is not a 4-neighbour move")


# ---------------------------------------------------------------- sessions and reports

def eval_sessions(cfg: MapConfig, grammar: Grammar, n: int, seed: int,
                  tasks: Sequence[TaskType] | None = None) -> list[Session]:
    """Fixed, reproducible test sessions; task types assigned round-robin."""
    tasks = list(tasks) if tasks else list(TASKS)
    rng = np.random.default_rng(seed)
    return [new_session(cfg, grammar, rng, tasks[i % len(tasks)]) for i in range(n)]


@dataclass
class RunResult:
    successes: dict[str, int]
    sessions: dict[str, int]
    outcomes: dict[str, int]
    total_centi: int

    def rate(self, task: str) -> Fraction | None:
        n = self.sessions.get(task, 0)
        return Fraction(100 * self.successes.get(task, 0), n) if n else None


def play(policy: Policy, sessions: Sequence[Session], batch: int = 64) -> RunResult:
    """Run every session to termination, ``batch`` at a time."""
    succ = {t.value: 0 for t in TASKS}
    count = {t.value: 0 for t in TASKS}
    outcomes = {"success": 0, "failure": 0, "timeout": 0}
    total = 0
    for lo in range(0, len(sessions), batch):
        chunk = list(sessions[lo:lo + batch])
        policy.begin(chunk)
        states = [s.state for s in chunk]
        live = list(range(len(chunk)))
        while live:
            actions = policy.act(live, [states[r] for r in live])
            still = []
            for r, a in zip(live, actions):
                states[r], event = env_step(states[r], int(a))
                verdict = judge(event, chunk[r].target)
                total += verdict.reward_centi
                if verdict.terminal:
                    task = chunk[r].task.value
                    count[task] += 1
                    succ[task] += verdict.outcome == "success"
                    outcomes[verdict.outcome] += 1
                else:
                    still.append(r)
            live = still
    return RunResult(succ, count, outcomes, total)


@dataclass
class EvalReport:
    map_size: int
    n_objects: int
    n_obstacles: int
    sessions_requested: int
    per_task_sessions: dict[str, int]
    mean: dict[str, float]
    std: dict[str, float]
    runs: list[dict[str, str]] = field(default_factory=list)
    outcomes: list[dict[str, int]] = field(default_factory=list)
    selection: str = "greedy"

    def to_dict(self) -> dict:
        return {"map_size": self.map_size, "n_objects": self.n_objects, "n_obstacles": self.n_obstacles,
                "sessions_requested": self.sessions_requested, "per_task_sessions": self.per_task_sessions,
                "mean": self.mean, "std": self.std, "runs": self.runs, "outcomes": self.outcomes,
                "selection": self.selection}

    def table(self) -> str:
        head = "task       " + "  ".join(f"{t.value:>10}" for t in TASKS)
        body = "rate (%)   " + "  ".join(
            f"{self.mean[t.value]:6.1f}±{self.std[t.value]:<3.1f}" if t.value in self.mean else f"{'-':>10}"
            for t in TASKS)
        return f"{self.map_size}x{self.map_size}, {self.n_objects} goals, {self.n_obstacles} obstacles\n{head}\n{body}"


def format_rate(r: Fraction) -> str:
    """Exact rational percentage rendered to one decimal (round half up)."""
    tenths = (r * 10 + Fraction(1, 2)).__floor__()
    return f"{tenths // 10}.{tenths % 10}"


def run_evaluation(policies: Sequence[Policy], cfg: MapConfig, n_sessions: int, grammar: Grammar,
                   seed: int = 12345, tasks: Sequence[TaskType] | None = None,
                   selection: str = "greedy") -> EvalReport:
    if not policies:
        raise ValueError("run_evaluation needs at least one model")
    sessions = eval_sessions(cfg, grammar, n_sessions, seed, tasks)
    results = [play(p, sessions) for p in policies]
    counts = results[0].sessions
    present = [t.value for t in TASKS if counts[t.value]]
    runs = [{t: format_rate(r.rate(t)) for t in present} for r in results]
    mean, std = {}, {}
    for t in present:
        vals = np.array([float(r.rate(t)) for r in results])
        mean[t] = float(vals.mean())
        std[t] = float(vals.std())
    return EvalReport(cfg.size_x, cfg.n_objects, cfg.n_obstacles, n_sessions, dict(counts), mean, std, runs,
                      [r.outcomes for r in results], selection)


def run_generalization(policies: Sequence[Policy], sizes: Iterable[int], n_sessions: int, grammar: Grammar,
                       seed: int = 12345) -> dict[int, EvalReport]:
    out = {}
    for size in sizes:
        if size not in LARGER_MAPS:
            raise ValueError(f"no larger-map configuration for size {size}; have {sorted(LARGER_MAPS)}")
        out[size] = run_evaluation(policies, larger_map_config(size), n_sessions, grammar, seed)
    return out


def random_baseline(cfg: MapConfig, grammar: Grammar, n_sessions: int = 2000, seed: int = 999,
                    task: TaskType = TaskType.NAV) -> Fraction:
    """Success rate (percent) of a uniform-random policy on one task type."""
    res = play(RandomPolicy(seed), eval_sessions(cfg, grammar, n_sessions, seed, [task]))
    return res.rate(TaskType(task).value)


def agent_from_params(agent_cfg: AgentConfig, params: dict[str, np.ndarray]) -> Agent:
    ps = ParameterSet(0)
    agent = Agent(agent_cfg, ps)
    ps.load_state(params)
    return agent
