"""Episode traces (JSON lines) and deterministic frame replays."""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

from .analysis import write_ppm
from .env import EnvironmentState, render, step as env_step, text_render
from .teacher import Session, judge

TRACE_VERSION = 1


class TraceError(ValueError):
    pass


def record_episode(policy, session: Session, path: str | Path) -> list[dict]:
    """Play one session with ``policy`` and write its trace; returns the step records."""
    policy.begin([session])
    state = session.state
    c = session.command
    header = {"type": "header", "version": TRACE_VERSION, "task": session.task.value,
              "initial": state.to_dict(), "initial_hash": state.digest(),
              "command": {"words": c.words, "tokens": c.tokens, "referents": list(c.referents),
                          "direction": c.direction}}
    records = []
    while True:
        action = int(policy.act([0], [state])[0])
        state, event = env_step(state, action)
        verdict = judge(event, session.target)
        records.append({"t": state.t, "state_hash": state.digest(), "action": action,
                        "event": asdict(event), "reward": verdict.reward, "outcome": verdict.outcome})
        if verdict.terminal:
            break
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return records


def read_trace(path: str | Path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise TraceError(f"{path}: empty trace")
    try:
        header = json.loads(lines[0])
        steps = [json.loads(line) for line in lines[1:] if line.strip()]
    except json.JSONDecodeError as exc:
        raise TraceError(f"{path}: malformed JSON ({exc})") from None
    if header.get("type") != "header" or header.get("version") != TRACE_VERSION:
        raise TraceError(f"{path}: missing or unsupported trace header")
    return header, steps


def replay_states(path: str | Path) -> list[EnvironmentState]:
    """Re-simulate a trace, checking every recorded state hash."""
    header, steps = read_trace(path)
    state = EnvironmentState.from_dict(header["initial"])
    if state.digest() != header["initial_hash"]:
        raise TraceError(f"{path}: initial state hash mismatch (environment version drift?)")
    states = [state]
    for rec in steps:
        state, _ = env_step(state, rec["action"])
        if state.digest() != rec["state_hash"]:
            raise TraceError(f"{path}: state hash mismatch at t={rec['t']} (environment version drift?)")
        states.append(state)
    return states


def replay_episode(path: str | Path, out_dir: str | Path) -> list[Path]:
    """Write one PPM frame per state (initial state included) plus a text render of each."""
    states = replay_states(path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = []
    grids = []
    for k, s in enumerate(states):
        p = out / f"frame_{k:04d}.ppm"
        write_ppm(p, render(s).image)
        frames.append(p)
        grids.append(f"t={s.t}\n{text_render(s)}\n")
    (out / "grid.txt").write_text("\n".join(grids))
    return frames
