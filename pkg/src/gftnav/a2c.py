"""Synchronous advantage actor-critic with barrier-separated collection and updates."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .agent import Agent, AgentConfig, History, reset_history, select_actions, stack_histories
from .env import EnvironmentState, render, step as env_step
from .grammar import Grammar
from .teacher import (TASKS, Command, CurriculumState, Session, TaskType, curriculum_update, judge,
                      new_session, target_spec)
from .tensor import ParameterSet, Tensor


@dataclass
class TrainerConfig:
    gamma: float = 0.99
    kappa: float = 0.05
    eta: float = 1.0
    lr: float = 1e-5
    rms_eps: float = 0.01
    rms_decay: float = 0.95
    momentum: float = 0.9
    n_agent: int = 32
    n_batch: int = 128
    minibatches: int = 2_000_000
    start_level: int = 1
    max_level: int = 6
    tasks: list | None = None
    success_window: int = 200
    checkpoint_every: int = 5000
    verify_snapshot: bool = True

    def __post_init__(self):
        if self.n_agent < 1 or self.n_batch % self.n_agent:
            raise ValueError(f"n_batch={self.n_batch} must be a positive multiple of n_agent={self.n_agent}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 1 <= self.start_level <= self.max_level <= 6:
            raise ValueError("need 1 <= start_level <= max_level <= 6")
        if self.tasks is not None:
            self.tasks = [TaskType(t).value for t in self.tasks]

    @property
    def steps_per_agent(self) -> int:
        return self.n_batch // self.n_agent

    @classmethod
    def desk(cls, **kw) -> "TrainerConfig":
        base = dict(n_agent=8, n_batch=32, max_level=2)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- advantages and loss

def compute_advantages(rewards: Sequence[float], values: Sequence[float], terminals: Sequence[bool],
                       bootstrap: float, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Forward-view n-step returns and advantages for one segment.

    R_t = r_t + gamma * R_{t+1}, cut to r_t at a terminal; R_n = bootstrap.
    Returns (advantages, returns).
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    done = np.asarray(terminals, dtype=bool)
    R = np.empty_like(r)
    acc = float(bootstrap)
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + (0.0 if done[t] else gamma * acc)
        R[t] = acc
    return R - v, R


def a2c_loss(log_prob_taken: Tensor, entropy: Tensor, values: Tensor, returns: np.ndarray,
             advantages: np.ndarray, cfg: TrainerConfig) -> tuple[Tensor, dict]:
    """mean[-log pi(a) * A + eta * 0.5 * (R - v)^2 - kappa * H(pi)]; A is a constant."""
    A = Tensor(np.asarray(advantages, dtype=np.float64))
    R = Tensor(np.asarray(returns, dtype=np.float64))
    policy = T.mean(T.mul(log_prob_taken, A)) * -1.0
    value = T.mean(T.square(R - values)) * (0.5 * cfg.eta)
    ent = T.mean(entropy)
    loss = policy + value - ent * cfg.kappa
    parts = {"policy": float(policy.data), "value": float(value.data), "entropy": float(ent.data),
             "loss": float(loss.data)}
    return loss, parts


# ---------------------------------------------------------------- optimiser

@dataclass
class OptimizerState:
    square_avg: dict[str, np.ndarray] = field(default_factory=dict)
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0

    @classmethod
    def for_params(cls, params: ParameterSet) -> "OptimizerState":
        return cls({n: np.zeros_like(t.data) for n, t in params},
                   {n: np.zeros_like(t.data) for n, t in params})

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.square_avg:
            out[f"square_avg/{n}"] = self.square_avg[n]
            out[f"momentum/{n}"] = self.momentum[n]
        return out

    @classmethod
    def from_arrays(cls, d: dict[str, np.ndarray], skipped: int = 0) -> "OptimizerState":
        s = {k.split("/", 1)[1]: v.copy() for k, v in d.items() if k.startswith("square_avg/")}
        m = {k.split("/", 1)[1]: v.copy() for k, v in d.items() if k.startswith("momentum/")}
        return cls(s, m, skipped)


def rmsprop_update(params: ParameterSet, grads: dict[str, np.ndarray], opt: OptimizerState,
                   cfg: TrainerConfig) -> bool:
    """In-place RMSprop with momentum.  Returns False (and skips) on a non-finite gradient."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        opt.skipped += 1
        return False
    rho, mu = cfg.rms_decay, cfg.momentum
    for name, g in grads.items():
        s = opt.square_avg[name]
        u = opt.momentum[name]
        s *= rho
        s += (1.0 - rho) * g * g
        u *= mu
        u += cfg.lr * g / np.sqrt(s + cfg.rms_eps)
        params[name].data -= u
    return True


# ---------------------------------------------------------------- workers

@dataclass
class Worker:
    wid: int
    rng_env: np.random.Generator
    rng_act: np.random.Generator
    curriculum: CurriculumState
    session: Session | None = None
    state: EnvironmentState | None = None
    history: History | None = None
    episode_steps: int = 0
    episode_centi: int = 0

    @property
    def needs_session(self) -> bool:
        return self.session is None


@dataclass
class Rollout:
    """One worker's contribution to a minibatch."""

    wid: int
    actions: list = field(default_factory=list)
    rewards_centi: list = field(default_factory=list)
    terminals: list = field(default_factory=list)
    values: list = field(default_factory=list)
    slots: list = field(default_factory=list)  # (step index, row) into the batched tensors
    bootstrap: float = 0.0
    outcome: str | None = None

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def rewards(self) -> list[float]:
        return [c / 100.0 for c in self.rewards_centi]


@dataclass
class Minibatch:
    rollouts: list[Rollout]
    log_prob_taken: list[Tensor]  # per step, (B_step,)
    entropy: list[Tensor]
    values: list[Tensor]
    finished: list[tuple[str, str, int]]  # (task, outcome, level)

    @property
    def n_records(self) -> int:
        return sum(len(r) for r in self.rollouts)


class MinibatchAborted(RuntimeError):
    pass


def make_workers(n: int, seed: int, cfg: TrainerConfig) -> list[Worker]:
    seq = np.random.SeedSequence(seed)
    children = seq.spawn(n)
    out = []
    for i, child in enumerate(children):
        env_seed, act_seed = child.spawn(2)
        cs = CurriculumState(level=cfg.start_level, max_level=cfg.max_level, window_size=cfg.success_window,
                             tasks=tuple(cfg.tasks) if cfg.tasks else None)
        out.append(Worker(i, np.random.default_rng(env_seed), np.random.default_rng(act_seed), cs))
    return out


def _start_session(w: Worker, agent: Agent, grammar: Grammar, cfg: TrainerConfig) -> None:
    task = None
    if cfg.tasks:
        task = TaskType(cfg.tasks[int(w.rng_env.integers(len(cfg.tasks)))])
    w.session = new_session(w.curriculum.config(), grammar, w.rng_env, task)
    w.state = w.session.state
    w.history = reset_history(agent.cfg, 1)
    w.episode_steps = 0
    w.episode_centi = 0


def collect_minibatch(agent: Agent, workers: list[Worker], grammar: Grammar, cfg: TrainerConfig) -> Minibatch:
    """Advance every worker up to n_batch / n_agent steps under the current parameters.

    A worker whose session ends stops contributing; it is given a new session
    at the start of the next minibatch.
    """
    for w in workers:
        if w.needs_session:
            _start_session(w, agent, grammar, cfg)
        w.history = w.history.detach()
    rollouts = {w.wid: Rollout(w.wid) for w in workers}
    active = list(workers)
    lp_steps, ent_steps, val_steps, finished = [], [], [], []
    try:
        for k in range(cfg.steps_per_agent):
            if not active:
                break
            images = np.stack([render(w.state).image for w in active])
            tokens = [w.session.command.tokens for w in active]
            hist = stack_histories([w.history for w in active])
            m = agent.perceive(images, tokens)
            uniforms = np.array([w.rng_act.random() for w in active])
            actions, out, new_hist = agent.act_and_value(m, hist, uniforms=uniforms)
            rows = np.arange(len(active))
            lp_steps.append(T.index(out.log_probs, (rows, actions)))
            ent_steps.append(out.entropy())
            val_steps.append(out.value)
            still = []
            for row, w in enumerate(active):
                a = int(actions[row])
                w.state, event = env_step(w.state, a)
                verdict = judge(event, w.session.target)
                w.episode_steps += 1
                w.episode_centi += verdict.reward_centi
                ro = rollouts[w.wid]
                ro.actions.append(a)
                ro.rewards_centi.append(verdict.reward_centi)
                ro.terminals.append(verdict.terminal)
                ro.values.append(float(out.value.data[row]))
                ro.slots.append((k, row))
                w.history = new_hist.select([row])
                if verdict.terminal:
                    ro.outcome = verdict.outcome
                    finished.append((w.session.task.value, verdict.outcome, w.curriculum.level))
                    w.curriculum = curriculum_update(w.curriculum, w.session.task, verdict.outcome == "success")
                    w.session = None
                    w.history = None
                else:
                    still.append(w)
            active = still
        if active:
            with T.no_grad():
                images = np.stack([render(w.state).image for w in active])
                hist = stack_histories([w.history for w in active])
                out, _ = agent.recur(agent.perceive(images, [w.session.command.tokens for w in active]), hist)
            for row, w in enumerate(active):
                rollouts[w.wid].bootstrap = float(out.value.data[row])
    except Exception as exc:  # a failing worker invalidates the whole minibatch
        raise MinibatchAborted(f"minibatch aborted: {exc!r}") from exc
    return Minibatch([rollouts[w.wid] for w in workers], lp_steps, ent_steps, val_steps, finished)


def minibatch_loss(mb: Minibatch, cfg: TrainerConfig) -> tuple[Tensor, dict]:
    """Gather the per-step tensors into record order and build the loss."""
    lp = T.concat(mb.log_prob_taken, 0)
    ent = T.concat(mb.entropy, 0)
    val = T.concat(mb.values, 0)
    offsets = np.cumsum([0] + [t.shape[0] for t in mb.log_prob_taken])
    order, adv, ret = [], [], []
    for ro in mb.rollouts:
        if not len(ro):
            continue
        A, R = compute_advantages(ro.rewards, ro.values, ro.terminals, ro.bootstrap, cfg.gamma)
        order += [offsets[k] + row for k, row in ro.slots]
        adv.append(A)
        ret.append(R)
    idx = np.array(order, dtype=int)
    return a2c_loss(T.index(lp, idx), T.index(ent, idx), T.index(val, idx),
                    np.concatenate(ret), np.concatenate(adv), cfg)


# ---------------------------------------------------------------- trainer

class Trainer:
    """Owns parameters, optimiser and workers; one call of :meth:`step` is one minibatch."""

    def __init__(self, agent_cfg: AgentConfig, cfg: TrainerConfig, seed: int = 0,
                 grammar: Grammar | None = None):
        self.grammar = grammar or Grammar.load()
        if agent_cfg.vocab_size != len(self.grammar.vocab):
            agent_cfg.vocab_size = len(self.grammar.vocab)
        self.agent_cfg, self.cfg, self.seed = agent_cfg, cfg, seed
        self.params = ParameterSet(seed)
        self.agent = Agent(agent_cfg, self.params)
        self.opt = OptimizerState.for_params(self.params)
        self.workers = make_workers(cfg.n_agent, seed, cfg)
        self.batch = 0
        self.env_steps = 0
        self.sessions = 0
        self.recent = {t.value: deque(maxlen=cfg.success_window) for t in TASKS}

    def step(self) -> dict:
        before = self.params.checksum() if self.cfg.verify_snapshot else None
        mb = collect_minibatch(self.agent, self.workers, self.grammar, self.cfg)
        if before is not None and self.params.checksum() != before:
            raise RuntimeError("parameters changed during collection")
        loss, parts = minibatch_loss(mb, self.cfg)
        self.params.zero_grad()
        T.backward(loss)
        grads = {n: self.params.grad(n) for n in self.params.names()}
        applied = rmsprop_update(self.params, grads, self.opt, self.cfg)
        self.params.zero_grad()
        self.batch += 1
        self.env_steps += mb.n_records
        for task, outcome, _ in mb.finished:
            self.recent[task].append(outcome == "success")
            self.sessions += 1
        levels = {}
        for w in self.workers:
            levels[str(w.curriculum.level)] = levels.get(str(w.curriculum.level), 0) + 1
        return {
            "batch": self.batch,
            "env_steps": self.env_steps,
            "records": mb.n_records,
            "sessions": self.sessions,
            **parts,
            "update_applied": applied,
            "success": {t: (sum(d) / len(d) if d else None) for t, d in self.recent.items()},
            "success_n": {t: len(d) for t, d in self.recent.items()},
            "levels": levels,
        }

    def run(self, n: int, metrics_fh=None, stop: Callable[[dict], bool] | None = None,
            on_checkpoint: Callable[["Trainer"], None] | None = None) -> list[dict]:
        out = []
        for _ in range(n):
            rec = self.step()
            out.append(rec)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                metrics_fh.flush()
            if on_checkpoint is not None and self.cfg.checkpoint_every and self.batch % self.cfg.checkpoint_every == 0:
                on_checkpoint(self)
            if stop is not None and stop(rec):
                break
        return out

    # ------------------------------------------------------------ state for checkpoints

    def state_dict(self) -> dict:
        """Everything besides parameters and optimiser arrays, JSON-serialisable."""
        workers = []
        for w in self.workers:
            entry = {
                "wid": w.wid,
                "rng_env": w.rng_env.bit_generator.state,
                "rng_act": w.rng_act.bit_generator.state,
                "curriculum": w.curriculum.to_dict(),
                "episode_steps": w.episode_steps,
                "episode_centi": w.episode_centi,
                "session": None,
            }
            if w.session is not None:
                c = w.session.command
                entry["session"] = {
                    "task": w.session.task.value,
                    "initial": w.session.state.to_dict(),
                    "state": w.state.to_dict(),
                    "command": {"task": c.task.value, "tokens": c.tokens, "words": c.words,
                                "referents": list(c.referents), "direction": c.direction},
                    "level": w.session.level,
                }
            workers.append(entry)
        return {
            "batch": self.batch,
            "env_steps": self.env_steps,
            "sessions": self.sessions,
            "seed": self.seed,
            "skipped": self.opt.skipped,
            "recent": {t: [bool(x) for x in d] for t, d in self.recent.items()},
            "workers": workers,
        }

    def history_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for w in self.workers:
            if w.history is not None:
                for k, v in w.history.to_arrays().items():
                    out[f"history/{w.wid}/{k}"] = v
        return out

    def load_state(self, state: dict, params: dict[str, np.ndarray], opt: dict[str, np.ndarray],
                   histories: dict[str, np.ndarray]) -> None:
        self.params.load_state(params)
        self.opt = OptimizerState.from_arrays(opt, state.get("skipped", 0))
        self.batch, self.env_steps, self.sessions = state["batch"], state["env_steps"], state["sessions"]
        self.recent = {t: deque(v, maxlen=self.cfg.success_window) for t, v in state["recent"].items()}
        for w, entry in zip(self.workers, state["workers"]):
            w.rng_env.bit_generator.state = entry["rng_env"]
            w.rng_act.bit_generator.state = entry["rng_act"]
            w.curriculum = CurriculumState.from_dict(entry["curriculum"])
            w.episode_steps, w.episode_centi = entry["episode_steps"], entry["episode_centi"]
            s = entry["session"]
            if s is None:
                w.session = w.state = w.history = None
                continue
            c = s["command"]
            cmd = Command(TaskType(c["task"]), list(c["tokens"]), list(c["words"]),
                          tuple(c["referents"]), c["direction"])
            initial = EnvironmentState.from_dict(s["initial"])
            w.session = Session(TaskType(s["task"]), initial, cmd, target_spec(initial, cmd), s["level"])
            w.state = EnvironmentState.from_dict(s["state"])
            prefix = f"history/{w.wid}/"
            w.history = History.from_arrays({k[len(prefix):]: v for k, v in histories.items()
                                             if k.startswith(prefix)})
