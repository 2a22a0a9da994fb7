"""Experiment configuration: a JSON file with a fixed key schema."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .agent import AgentConfig
from .a2c import TrainerConfig

OUTPUT_ENV = "GFTNAV_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


def _strict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed {sorted(known)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class ExperimentConfig:
    agent: AgentConfig = field(default_factory=AgentConfig.desk)
    trainer: TrainerConfig = field(default_factory=TrainerConfig.desk)
    seed: int = 0
    eval_sessions: int = 1000
    eval_seed: int = 12345
    vocab: str | None = None
    grammar: str | None = None
    output_dir: str = "run"
    profile: str = "desk"

    def __post_init__(self):
        for label, path in (("vocab", self.vocab), ("grammar", self.grammar)):
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{label} file {path!r} does not exist")
        if self.eval_sessions < 1:
            raise ConfigError("eval_sessions must be positive")

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path = ".") -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"config: unknown keys {unknown}; allowed {sorted(known)}")
        profile = data.get("profile", "desk")
        if profile not in ("desk", "paper"):
            raise ConfigError(f"profile must be 'desk' or 'paper', got {profile!r}")
        agent_base = asdict(AgentConfig.desk()) if profile == "desk" else asdict(AgentConfig())
        trainer_base = asdict(TrainerConfig.desk()) if profile == "desk" else asdict(TrainerConfig())
        for key, base, kind in (("agent", agent_base, AgentConfig), ("trainer", trainer_base, TrainerConfig)):
            section = data.get(key, {})
            if not isinstance(section, dict):
                raise ConfigError(f"{key}: expected an object")
            unknown = sorted(set(section) - set(base))
            if unknown:
                raise ConfigError(f"{key}: unknown keys {unknown}; allowed {sorted(base)}")
            merged = {**base, **section}
            if key == "agent" and "D" in section and "conv" not in section:
                merged["conv"] = [list(c) for c in merged["conv"][:-1]] + [merged["conv"][-1][:2] + [merged["D"]]]
            data[key] = _strict(kind, merged, key)
        for key in ("vocab", "grammar"):
            if data.get(key) is not None:
                data[key] = str(Path(base_dir) / data[key])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {str(path)!r} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data, path.parent)

    def to_dict(self) -> dict:
        return {"agent": self.agent.to_dict(), "trainer": self.trainer.to_dict(), "seed": self.seed,
                "eval_sessions": self.eval_sessions, "eval_seed": self.eval_seed, "vocab": self.vocab,
                "grammar": self.grammar, "output_dir": self.output_dir, "profile": self.profile}

    def output_path(self) -> Path:
        root = Path(os.environ.get(OUTPUT_ENV, "."))
        return root / self.output_dir
