from fractions import Fraction

import numpy as np
import pytest

from gftnav.env import Entity, EnvironmentState, MapConfig, StepEvent, level_config, reachable_goals, step
from gftnav.evaluate import oracle_action
from gftnav.grammar import Grammar
from gftnav.teacher import (DIRECTION_OFFSETS, TASKS, Command, CurriculumState, TargetSpec, TaskType,
                            curriculum_update, generate_command, judge, new_session, parse_command,
                            scene_spec, target_spec)


@pytest.fixture(scope="module")
def grammar():
    return Grammar.load()


def run_oracle(session):
    state, total, n = session.state, 0, 0
    while True:
        state, ev = step(state, oracle_action(state, session.target))
        j = judge(ev, session.target)
        total += j.exact_reward
        n += 1
        if j.terminal:
            return j.outcome, total, n


@pytest.mark.parametrize("task", TASKS)
@pytest.mark.parametrize("level", [1, 3, 6])
def test_sessions_are_well_posed(grammar, task, level):
    rng = np.random.default_rng(level * 10 + TASKS.index(task))
    for _ in range(25):
        s = new_session(level_config(level), grammar, rng, task)
        readings = parse_command(s.command.words, grammar)
        assert readings == {(task, s.command.referents, s.command.direction)}
        assert s.target.success_cells
        assert reachable_goals(s.state, s.target.success_cells)
        failure_cells = {o.cell for o in s.state.objects if o.class_id in s.target.failure_classes}
        assert not failure_cells & s.target.success_cells
        classes = [o.class_id for o in s.state.objects]
        assert len(set(classes)) == len(classes) == level_config(level).n_objects
        outcome, total, n = run_oracle(s)
        assert outcome == "success"
        assert total == 1 - Fraction(1, 100) * n


def test_task_specific_geometry(grammar):
    rng = np.random.default_rng(5)
    cfg = level_config(4)
    s = new_session(cfg, grammar, rng, TaskType.NAV_DIR)
    anchor = next(o.cell for o in s.state.objects if o.class_id == s.command.referents[0])
    dr, dc = DIRECTION_OFFSETS[s.command.direction]
    assert s.target.success_cells == {(anchor[0] + dr, anchor[1] + dc)}
    s = new_session(cfg, grammar, rng, TaskType.NAV_AVOID)
    named = next(o.cell for o in s.state.objects if o.class_id == s.command.referents[0])
    assert named not in s.target.success_cells and len(s.target.success_cells) == cfg.n_objects - 1
    s = new_session(cfg, grammar, rng, TaskType.NAV_BW)
    assert s.target.enter_to_succeed and len(s.target.success_cells) == 1
    assert s.state.passable(next(iter(s.target.success_cells)))


def test_scene_spec_infeasible():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        scene_spec(TaskType.NAV_NR, MapConfig(3, 3, 1, 0), rng)
    with pytest.raises(ValueError):
        scene_spec(TaskType.NAV, MapConfig(5, 5, 17, 0), rng)
    assert scene_spec(TaskType.NAV, MapConfig(3, 3, 1, 0), rng).referents


def test_generate_command_respects_direction(grammar):
    rng = np.random.default_rng(2)
    for _ in range(20):
        spec = scene_spec(TaskType.NAV_DIR, level_config(2), rng)
        cmd = generate_command(spec, grammar, rng)
        assert cmd.direction == spec.direction
        assert cmd.tokens == grammar.vocab.ids(cmd.words)


def test_target_spec_rejects_missing_referent():
    grid = np.zeros((3, 3), dtype=np.int8)
    state = EnvironmentState(grid, (Entity(0, (0, 0), 0.0, 1.0),), (2, 2), 0, 0, 27)
    cmd = Command(TaskType.NAV, [], ["x"], (5,))
    with pytest.raises(ValueError):
        target_spec(state, cmd)
    cmd = Command(TaskType.NAV_DIR, [], ["x"], (0,), "front")
    with pytest.raises(ValueError):
        target_spec(state, cmd)  # the cell in front of the anchor is off the map


SPEC = TargetSpec(frozenset({(0, 1)}), frozenset({3}))


@pytest.mark.parametrize("event,centi,outcome", [
    (StepEvent("none", (1, 1)), -1, "none"),
    (StepEvent("blocked", (1, 1)), -1, "none"),
    (StepEvent("reached_object", (0, 1), 2), 99, "success"),
    (StepEvent("reached_object", (2, 2), 3), -101, "failure"),
    (StepEvent("timeout", (1, 1)), -1, "timeout"),
])
def test_judge(event, centi, outcome):
    j = judge(event, SPEC)
    assert (j.reward_centi, j.outcome) == (centi, outcome)
    assert j.exact_reward == Fraction(centi, 100)
    assert j.terminal == (outcome != "none")


def test_judge_enter_to_succeed():
    spec = TargetSpec(frozenset({(1, 1)}), frozenset({0, 1}), enter_to_succeed=True)
    assert judge(StepEvent("none", (1, 1)), spec).outcome == "success"
    assert judge(StepEvent("timeout", (1, 1)), spec).outcome == "success"
    assert judge(StepEvent("none", (1, 2)), spec).outcome == "none"
    assert judge(StepEvent("reached_object", (1, 0), 0), spec).outcome == "failure"


# ---------------------------------------------------------------- curriculum

def feed(cs, pattern):
    for task, ok in pattern:
        cs = curriculum_update(cs, task, ok)
    return cs


def test_curriculum_advances_when_all_tasks_clear():
    cs = CurriculumState()
    cs = feed(cs, [(t, k % 4 != 0) for k in range(20) for t in TASKS])  # 75% per task
    assert cs.level == 2 and len(cs.window) == 0


def test_curriculum_holds_at_threshold_and_with_sparse_tasks():
    cs = feed(CurriculumState(), [(t, k % 10 < 7) for k in range(20) for t in TASKS])  # exactly 70%
    assert cs.level == 1
    cs = feed(CurriculumState(), [(TaskType.NAV, True)] * 300)
    assert cs.level == 1 and len(cs.window) == 200


def test_curriculum_task_subset():
    cs = CurriculumState(tasks=("nav",))
    cs = feed(cs, [(TaskType.NAV, True)] * 20)
    assert cs.level == 2
    assert CurriculumState.from_dict(cs.to_dict()) == cs


def test_curriculum_is_capped():
    cs = CurriculumState(level=2, max_level=2)
    cs = feed(cs, [(t, True) for _ in range(30) for t in TASKS])
    assert cs.level == 2
    cs = feed(CurriculumState(level=6), [(t, True) for _ in range(30) for t in TASKS])
    assert cs.level == 6


def test_curriculum_round_trip():
    cs = feed(CurriculumState(), [(TaskType.NAV_BW, False), (TaskType.NAV, True)])
    back = CurriculumState.from_dict(cs.to_dict())
    assert list(back.window) == list(cs.window) and back.level == cs.level
    assert back.rates()[TaskType.NAV] == 1.0 and back.rates()[TaskType.NAV_DIR] is None
