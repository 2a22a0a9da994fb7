"""Acceptance suite: one test per criterion, each timed against its budget.

A summary line per criterion is printed at the end of the pytest run.
"""
import itertools
import json
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from gftnav import tensor as T
from gftnav.a2c import Trainer, TrainerConfig, collect_minibatch, compute_advantages, a2c_loss
from gftnav.agent import Agent, AgentConfig, gft_transforms, reset_history
from gftnav.analysis import reference_mean, svd_decompose, transform_fingerprint
from gftnav.checkpoint import decode, encode, restore_trainer, trainer_payload
from gftnav.config import ExperimentConfig
from gftnav.env import (CURRICULUM, EnvironmentState, PlacementSpec, bfs, generate_map, level_config,
                        place_entities, reachable_goals, render, step)
from gftnav.evaluate import oracle_action, random_baseline
from gftnav.grammar import Grammar
from gftnav.grounding import FUSIONS, film_apply, gft_step
from gftnav.teacher import TASKS, TaskType, judge, new_session, parse_command
from gftnav.tensor import ParameterSet, Tensor

from test_a2c import brute_returns, scripted_workers, tiny_agent_cfg
from test_grammar import brute_force, toy_grammars

ROOT = Path(__file__).resolve().parents[1]


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.1f} s, budget {self.seconds} s"


@pytest.fixture(scope="module")
def grammar():
    return Grammar.load()


@pytest.mark.criterion(1, "diagonal GFT equals FiLM, 1000 cases, D in {4, 64}, 1e-12")
def test_c01_gft_reduces_to_film():
    rng = np.random.default_rng(101)
    worst = 0.0
    with Budget(5):
        for k in range(1000):
            D = 4 if k % 2 == 0 else 64
            N = int(rng.integers(1, 37))
            C = rng.normal(size=(D, N))
            lam, b = rng.normal(size=D), rng.normal(size=D)
            Tj = np.hstack([np.diag(lam), b[:, None]])
            got = gft_step(Tensor(C), Tensor(Tj)).data
            ref = film_apply(Tensor(C), Tensor(lam), Tensor(b)).data
            # independent elementwise form: relu(lambda_d * C_dn + b_d)
            direct = np.maximum(lam[:, None] * C + b[:, None], 0.0)
            worst = max(worst, np.abs(got - ref).max(), np.abs(got - direct).max())
    assert worst <= 1e-12


def conv1x1_loops(C, Tj):
    D, N = C.shape
    out = np.empty((D, N))
    for o in range(D):
        acc = np.full(N, Tj[o, D])
        for i in range(D):
            acc = acc + Tj[o, i] * C[i]
        out[o] = acc
    return np.maximum(out, 0.0)


@pytest.mark.criterion(2, "GFT equals a 1x1 convolution, 1000 cases, 1e-12")
def test_c02_gft_is_one_by_one_conv():
    rng = np.random.default_rng(202)
    worst = 0.0
    with Budget(5):
        for _ in range(1000):
            D, side = int(rng.integers(1, 9)), int(rng.integers(1, 7))
            C = rng.normal(size=(D, side * side))
            Tj = rng.normal(size=(D, D + 1))
            got = gft_step(Tensor(C), Tensor(Tj)).data
            worst = max(worst, np.abs(got - conv1x1_loops(C, Tj)).max())
    assert worst <= 1e-12


def loss_closure(fusion, seed=0):
    """Full agent over a fixed three-step scripted rollout plus the actor-critic loss."""
    cfg = AgentConfig(D=4, embed=6, action_embed=4, h_a=4, h_m=5, f=5, head_hidden=5, fusion_hidden=5, proj=6,
                      conv=[[8, 4, 3], [4, 2, 4], [3, 1, 4]], fusion=fusion, vocab_size=12, activation="tanh")
    ps = ParameterSet(seed)
    agent = Agent(cfg, ps)
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(3, 2, 80, 80, 3), dtype=np.uint8)
    tokens = [[1, 4, 7], [2, 2, 9, 3]]
    actions = rng.integers(0, 6, size=(3, 2))
    rewards = rng.normal(size=(2, 3))
    terminals = [[False, False, False], [False, True, False]]
    tcfg = TrainerConfig()

    def forward():
        h = reset_history(cfg, 2)
        lps, ents, vals = [], [], []
        for k in range(3):
            out, h = agent.recur(agent.perceive(images[k], tokens), h)
            h.prev_action = actions[k]
            lps.append(T.index(out.log_probs, (np.arange(2), actions[k])))
            ents.append(out.entropy())
            vals.append(out.value)
        return T.concat(lps, 0), T.concat(ents, 0), T.concat(vals, 0)

    with T.no_grad():
        _, _, v = forward()
    v = v.data.reshape(3, 2)
    R = np.concatenate([compute_advantages(rewards[i], v[:, i], terminals[i], 0.3, 0.99)[1] for i in range(2)])
    order = [0, 2, 4, 1, 3, 5]  # step-major tensors to worker-major records
    A = R - v.T.reshape(-1)

    def loss():
        lp, ent, val = forward()
        return a2c_loss(T.index(lp, order), T.index(ent, order), T.index(val, order), R, A, tcfg)[0]

    return loss, ps


@pytest.mark.criterion(3, "full agent + loss finite-difference check, every fusion, 100 probes, < 1e-4")
def test_c03_gradient_integrity():
    with Budget(600):
        errs = {}
        for fusion in FUSIONS:
            loss, ps = loss_closure(fusion)
            errs[fusion] = T.grad_check(loss, ps, probes=100, h=1e-5, seed=3)
    assert max(errs.values()) < 1e-4, errs


@pytest.mark.criterion(4, "SVD of 1000 random 64x64 matrices to 1e-10")
def test_c04_svd():
    M = np.random.default_rng(404).normal(size=(1000, 64, 64))
    with Budget(60):
        res = svd_decompose(M)
    I = np.eye(64)
    rec = np.linalg.norm(res.reconstruct() - M, axis=(1, 2)) / np.linalg.norm(M, axis=(1, 2))
    assert rec.max() <= 1e-10
    assert np.abs(np.swapaxes(res.U, 1, 2) @ res.U - I).max() <= 1e-10
    assert np.abs(np.swapaxes(res.V, 1, 2) @ res.V - I).max() <= 1e-10
    s = res.singular_values
    assert np.all(s >= 0) and np.all(np.diff(s, axis=1) <= 0)


@pytest.mark.criterion(5, "1000 maps per level: counts, connectivity, 500-step walks")
def test_c05_environment_soundness():
    rng = np.random.default_rng(505)
    with Budget(60):
        for level in sorted(CURRICULUM):
            cfg = level_config(level)
            for _ in range(1000):
                s = place_entities(generate_map(cfg, rng), PlacementSpec(list(range(cfg.n_objects))), rng)
                assert int(s.grid.sum()) == cfg.n_obstacles
                assert len(s.objects) == cfg.n_objects
                free = {(r, c) for r in range(cfg.size_y) for c in range(cfg.size_x) if s.grid[r, c] == 0}
                assert bfs(next(iter(free)), lambda x: s.grid[x] == 0, s.grid.shape) == free
                s = EnvironmentState(s.grid, s.objects, s.agent, s.heading, 0, 10 ** 6)
                occupied = {o.cell for o in s.objects}
                for a in rng.integers(0, 6, size=500):
                    s, _ = step(s, int(a))
                    assert s.grid[s.agent] == 0 and s.agent not in occupied


@pytest.mark.criterion(6, "1000 sessions per task: parse, success sets, reward 1 - 0.01 n")
def test_c06_teacher_soundness(grammar):
    rng = np.random.default_rng(606)
    with Budget(120):
        for task in TASKS:
            for k in range(1000):
                s = new_session(level_config(k % 6 + 1), grammar, rng, task)
                assert parse_command(s.command.words, grammar) == {(task, s.command.referents, s.command.direction)}
                assert s.target.success_cells
                assert reachable_goals(s.state, s.target.success_cells)
                fail = {o.cell for o in s.state.objects if o.class_id in s.target.failure_classes}
                assert not fail & s.target.success_cells
                state, total, n = s.state, Fraction(0), 0
                while True:
                    state, ev = step(state, oracle_action(state, s.target))
                    j = judge(ev, s.target)
                    total += j.exact_reward
                    n += 1
                    if j.terminal:
                        break
                assert j.outcome == "success" and total == 1 - Fraction(n, 100)


@pytest.mark.criterion(7, "n-step advantages vs brute force, 2^4 terminal patterns x 10 draws, 1e-12")
def test_c07_advantage_oracle():
    rng = np.random.default_rng(707)
    with Budget(1):
        for pattern in itertools.product([False, True], repeat=4):
            for _ in range(10):
                r, v = rng.normal(size=4), rng.normal(size=4)
                boot, gamma = rng.normal(), rng.uniform(0.5, 1.0)
                A, R = compute_advantages(r, v, pattern, boot, gamma)
                ref = brute_returns(r, pattern, boot, gamma)
                assert np.abs(R - ref).max() <= 1e-12
                assert np.abs(A - (ref - v)).max() <= 1e-12


@pytest.mark.criterion(8, "8 workers x 4 steps give 32 records; forced terminals shorten rollouts")
def test_c08_batching():
    cfg = TrainerConfig(n_agent=8, n_batch=32)
    tr = Trainer(tiny_agent_cfg(), cfg, seed=8)
    with Budget(1):
        mb = collect_minibatch(tr.agent, scripted_workers(tr, [None] * 8), tr.grammar, cfg)
        assert mb.n_records == 32 and not any(any(r.terminals) for r in mb.rollouts)
        left = [None, 1, None, 3, 2, None, None, 1]
        mb = collect_minibatch(tr.agent, scripted_workers(tr, left), tr.grammar, cfg)
    assert [len(r) for r in mb.rollouts] == [4 if k is None else k for k in left]
    assert mb.n_records == 32 - sum(4 - k for k in left if k is not None)
    assert all(not any(r.terminals[:-1]) for r in mb.rollouts)


@pytest.mark.criterion(10, "same seed gives identical metrics and checkpoint bytes; resume matches")
def test_c10_determinism_and_resume(tmp_path):
    cfg = ExperimentConfig.load(ROOT / "configs" / "toy.json")

    def fresh():
        return Trainer(AgentConfig(**cfg.agent.to_dict()), TrainerConfig(**cfg.trainer.to_dict()), seed=cfg.seed)

    with Budget(600):
        a, b = fresh(), fresh()
        ma, mb = a.run(12), b.run(12)
        assert json.dumps(ma, sort_keys=True) == json.dumps(mb, sort_keys=True)
        assert encode(*trainer_payload(a)) == encode(*trainer_payload(b))

        c = fresh()
        first = c.run(5)
        blob = encode(*trainer_payload(c))
        resumed = restore_trainer(decode(blob))
        rest = resumed.run(7)
        assert json.dumps(first + rest, sort_keys=True) == json.dumps(ma, sort_keys=True)
        assert encode(*trainer_payload(resumed)) == encode(*trainer_payload(a))


@pytest.mark.criterion(11, "fingerprints: zero for one reference, mean zero, BoW paraphrase invariance")
def test_c11_fingerprints(grammar):
    rng = np.random.default_rng(1111)
    with Budget(60):
        one = [rng.normal(size=(64, 65)), rng.normal(size=(64, 65))]
        assert all(np.all(f == 0.0) for f in transform_fingerprint(one, reference_mean([one])))
        stacks = [[rng.normal(size=(16, 17)) for _ in range(2)] for _ in range(200)]
        mean = reference_mean(stacks)
        fps = [transform_fingerprint(s, mean) for s in stacks]
        for j in range(2):
            assert np.abs(np.mean([f[j] for f in fps], axis=0)).max() <= 1e-10

        cfg = AgentConfig.desk(fusion="gft2", vocab_size=len(grammar.vocab))
        agent = Agent(cfg, ParameterSet(11))
        refs = [grammar.vocab.ids([w for _, w in grammar.sample(rng)]) for _ in range(200)]
        mean = reference_mean([gft_transforms(agent, r) for r in refs])
        a = grammar.vocab.ids("go to the apple .".split())
        b = grammar.vocab.ids(". apple the to go".split())
        fa = transform_fingerprint(gft_transforms(agent, a), mean)
        fb = transform_fingerprint(gft_transforms(agent, b), mean)
        assert all(np.array_equal(x, y) for x, y in zip(fa, fb))


@pytest.mark.criterion(12, "grammar counting vs exhaustive enumeration; 1e5 sample lengths in [1, 15]")
def test_c12_grammar(grammar):
    with Budget(60):
        from hypothesis import HealthCheck, given, settings

        @settings(max_examples=200, deadline=None, suppress_health_check=list(HealthCheck), derandomize=True)
        @given(toy_grammars())
        def check(g):
            derivs = brute_force(g.rules, "N0")
            assert len(derivs) <= 10 ** 5
            assert g.derivation_count() == len(derivs)
            assert g.sentences() == set(derivs)

        check()
        rng = np.random.default_rng(1212)
        lengths = np.array([len(grammar.sample(rng)) for _ in range(100_000)])
    assert lengths.min() >= 1 and lengths.max() <= 15


# ---------------------------------------------------------------- learning demonstration

LEARN_CONFIG = ROOT / "configs" / "learn_level1.json"
LEARN_SEEDS = (0, 1, 2, 3)
STEP_BUDGET = 500_000
MARGIN = 0.20


def learn_one(cfg, seed, baseline, log):
    tr = Trainer(AgentConfig(**cfg.agent.to_dict()), TrainerConfig(**cfg.trainer.to_dict()), seed=seed)
    window = tr.cfg.success_window

    def reached(rec):
        nav = rec["success"]["nav"]
        return rec["success_n"]["nav"] >= window and nav >= baseline + MARGIN

    best = 0.0
    while tr.env_steps < STEP_BUDGET:
        rec = tr.step()
        if rec["success_n"]["nav"] >= window:
            best = max(best, rec["success"]["nav"])
        if rec["batch"] % 1000 == 0:
            log.write(f"seed {seed} batch {rec['batch']} steps {rec['env_steps']} nav {rec['success']['nav']}\n")
            log.flush()
        if reached(rec):
            return True, rec["env_steps"], best
    return False, tr.env_steps, best


@pytest.mark.slow
@pytest.mark.criterion(9, "level-1 nav beats random by 20 points within 500k steps on 3 of 4 seeds")
def test_c09_desk_learning(grammar, tmp_path):
    cfg = ExperimentConfig.load(LEARN_CONFIG)
    assert cfg.trainer.max_level == 1 and cfg.agent.fusion == "gft1"
    assert (cfg.trainer.n_agent, cfg.trainer.n_batch) == (8, 32)
    baseline = float(random_baseline(level_config(1), grammar, 4000, seed=cfg.eval_seed)) / 100
    results = []
    with Budget(2.5 * 3600), open(tmp_path / "learning.log", "w") as log:
        for seed in LEARN_SEEDS:
            results.append(learn_one(cfg, seed, baseline, log))
            if sum(ok for ok, _, _ in results) >= 3:
                break
            if sum(not ok for ok, _, _ in results) >= 2:
                break
    summary = [f"seed {s}: {'reached' if ok else 'missed'} at {n} steps (best trailing rate {b:.3f})"
               for s, (ok, n, b) in zip(LEARN_SEEDS, results)]
    print(f"random baseline {baseline:.3f}; target {baseline + MARGIN:.3f}\n" + "\n".join(summary))
    assert sum(ok for ok, _, _ in results) >= 3, summary
