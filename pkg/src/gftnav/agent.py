"""Perception and control network: CNN -> fusion -> three GRUs -> policy/value heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .grounding import FUSIONS, encode_bow, fusion_output_size, make_fusion
from .layers import GRUCell, Linear
from .tensor import ParameterSet, Tensor

N_ACTIONS = 6
START_ACTION = N_ACTIONS  # extra row of the action embedding used before the first move


@dataclass
class AgentConfig:
    D: int = 64
    embed: int = 128
    action_embed: int = 128
    h_a: int = 128
    h_m: int = 512
    f: int = 512
    head_hidden: int = 512
    fusion_hidden: int = 128
    proj: int = 512
    conv: list = field(default_factory=lambda: [[8, 4, 32], [4, 2, 64], [3, 1, 64]])
    image: int = 80
    fusion: str = "gft2"
    activation: str = "relu"
    vocab_size: int = 64

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}; choose from {FUSIONS}")
        widths = (self.D, self.embed, self.action_embed, self.h_a, self.h_m, self.f,
                  self.head_hidden, self.fusion_hidden, self.proj, self.vocab_size)
        if any(int(w) < 1 for w in widths):
            raise ValueError("all widths must be positive")
        self.conv = [list(map(int, layer)) for layer in self.conv]
        if self.conv[-1][2] != self.D:
            raise ValueError(f"last conv layer must emit D={self.D} channels, got {self.conv[-1][2]}")
        self.spatial  # raises when the stack collapses the image

    @classmethod
    def desk(cls, **kw) -> "AgentConfig":
        base = dict(D=16, embed=32, action_embed=32, h_a=32, h_m=64, f=64, head_hidden=64, proj=64,
                    conv=[[8, 4, 32], [4, 2, 64], [3, 1, 16]])
        base.update(kw)
        return cls(**base)

    @property
    def word_dim(self) -> int:
        # the concept fusion uses the sentence embedding itself as a 1x1 filter over D channels
        return self.D if self.fusion == "concept" else self.embed

    @property
    def spatial(self) -> tuple[int, int]:
        s = self.image
        for k, stride, _ in self.conv:
            s = T.conv_output_size(s, k, stride)
        if s < 1:
            raise ValueError(f"conv stack {self.conv} collapses a {self.image}px image")
        return s, s

    @property
    def N(self) -> int:
        h, w = self.spatial
        return h * w

    @property
    def fusion_out(self) -> int:
        return fusion_output_size(self.fusion, self.D, self.N, self.proj)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class History:
    """Recurrent state for a batch of sessions.

    ``h_a`` summarises actions up to two steps back; it is advanced with
    ``prev_action`` at the start of the next step, so the f-GRU always sees
    the action history through the previous action.
    """

    h_m: Tensor
    h_a: Tensor
    f: Tensor
    prev_action: np.ndarray

    def __len__(self) -> int:
        return len(self.prev_action)

    def detach(self) -> "History":
        return History(self.h_m.detach(), self.h_a.detach(), self.f.detach(), self.prev_action.copy())

    def select(self, rows) -> "History":
        rows = np.asarray(rows, dtype=int)
        return History(T.index(self.h_m, rows), T.index(self.h_a, rows), T.index(self.f, rows),
                       self.prev_action[rows].copy())

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"h_m": self.h_m.data.copy(), "h_a": self.h_a.data.copy(), "f": self.f.data.copy(),
                "prev_action": self.prev_action.astype(np.float64)}

    @classmethod
    def from_arrays(cls, d: dict[str, np.ndarray]) -> "History":
        return cls(Tensor(d["h_m"]), Tensor(d["h_a"]), Tensor(d["f"]), d["prev_action"].astype(np.int64))


def reset_history(cfg: AgentConfig, batch: int = 1) -> History:
    return History(Tensor(np.zeros((batch, cfg.h_m))), Tensor(np.zeros((batch, cfg.h_a))),
                   Tensor(np.zeros((batch, cfg.f))), np.full(batch, START_ACTION, dtype=np.int64))


def stack_histories(items: Sequence[History]) -> History:
    return History(T.concat([h.h_m for h in items], 0), T.concat([h.h_a for h in items], 0),
                   T.concat([h.f for h in items], 0), np.concatenate([h.prev_action for h in items]))


@dataclass
class PolicyOutput:
    probs: Tensor      # (B, 6)
    log_probs: Tensor  # (B, 6)
    value: Tensor      # (B,)
    f: Tensor

    def entropy(self) -> Tensor:
        return T.tsum(T.mul(self.probs, self.log_probs), axis=1) * -1.0


def images_to_input(images: np.ndarray) -> np.ndarray:
    """uint8 (B, H, W, 3) or (H, W, 3) -> float (B, 3, H, W) in [0, 1]."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=np.float64) / 255.0


class Agent:
    """Holds the layers; parameters live in the shared ParameterSet."""

    def __init__(self, cfg: AgentConfig, params: ParameterSet):
        self.cfg, self.params = cfg, params
        self.word_embed = params.init_parameter("word_embed", (cfg.vocab_size, cfg.word_dim), kind="embedding")
        self.convs = []
        c_in = 3
        for i, (k, stride, c_out) in enumerate(cfg.conv, 1):
            w = params.init_parameter(f"conv{i}.w", (c_out, c_in, k, k))
            b = params.init_parameter(f"conv{i}.b", (c_out,), fan_in=c_in * k * k)
            self.convs.append((w, b, stride))
            c_in = c_out
        self.fusion = make_fusion(cfg.fusion, params, cfg.D, cfg.N, cfg.word_dim, cfg.fusion_hidden, cfg.proj,
                                  cfg.activation)
        self.pre_m = Linear(params, "gru_m.pre", cfg.fusion_out, cfg.h_m)
        self.gru_m = GRUCell(params, "gru_m", cfg.h_m, cfg.h_m)
        self.action_embed = params.init_parameter("action_embed", (N_ACTIONS + 1, cfg.action_embed), kind="embedding")
        self.gru_a = GRUCell(params, "gru_a", cfg.action_embed, cfg.h_a)
        self.pre_f = Linear(params, "gru_f.pre", cfg.h_m + cfg.h_a, cfg.f)
        self.gru_f = GRUCell(params, "gru_f", cfg.f, cfg.f)
        self.pi1 = Linear(params, "policy.l1", cfg.f, cfg.head_hidden)
        self.pi2 = Linear(params, "policy.l2", cfg.head_hidden, N_ACTIONS)
        self.v1 = Linear(params, "value.l1", cfg.f, cfg.head_hidden)
        self.v2 = Linear(params, "value.l2", cfg.head_hidden, 1)

    # ---------------------------------------------------------------- perception

    def features(self, images: np.ndarray) -> Tensor:
        """CNN feature cube, (B, D, N)."""
        x = Tensor(images_to_input(images))
        for w, b, stride in self.convs:
            x = T.conv2d(x, w, stride)
            x = T.relu(x + T.reshape(b, (1, -1, 1, 1)))
        B = x.shape[0]
        return T.reshape(x, (B, self.cfg.D, -1))

    def sentence(self, tokens: Sequence[Sequence[int]]) -> Tensor:
        return encode_bow([list(t) for t in tokens], self.word_embed)

    def perceive(self, images: np.ndarray, tokens: Sequence[Sequence[int]]) -> Tensor:
        """Grounded, flattened feature vector per session: (B, fusion_out)."""
        C = self.features(images)
        out = self.fusion(C, self.sentence(tokens))
        return T.reshape(out, (C.shape[0], -1))

    # ---------------------------------------------------------------- control

    def recur(self, m: Tensor, hist: History) -> tuple[PolicyOutput, History]:
        h_m = self.gru_m(self.pre_m(m, "relu"), hist.h_m)
        # fold the previous action into the action history before the f-GRU reads it
        a_emb = T.index(self.action_embed, hist.prev_action)
        h_a = self.gru_a(a_emb, hist.h_a)
        f = self.gru_f(self.pre_f(T.concat([h_m, h_a], 1), "relu"), hist.f)
        logits = self.pi2(self.pi1(f, "relu"))
        value = T.reshape(self.v2(self.v1(f, "relu")), (-1,))
        out = PolicyOutput(T.softmax_rows(logits), T.log_softmax_rows(logits), value, f)
        return out, History(h_m, h_a, f, hist.prev_action)

    def act_and_value(self, m: Tensor, hist: History, rng: np.random.Generator | None = None,
                      greedy: bool = False, uniforms: np.ndarray | None = None):
        """Run one recurrent step and pick actions.

        Sampling uses inverse-CDF on ``uniforms`` (drawn from ``rng`` when not given).
        """
        out, new = self.recur(m, hist)
        actions = select_actions(out.probs.data, rng, greedy, uniforms)
        new.prev_action = actions.copy()
        return actions, out, new


def select_actions(probs: np.ndarray, rng: np.random.Generator | None = None, greedy: bool = False,
                   uniforms: np.ndarray | None = None) -> np.ndarray:
    if greedy:
        return np.argmax(probs, axis=1).astype(np.int64)
    if uniforms is None:
        uniforms = rng.random(len(probs))
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < np.asarray(uniforms)[:, None] * cdf[:, -1:]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1).astype(np.int64)


def gft_transforms(agent: Agent, tokens: Sequence[int]) -> list[np.ndarray]:
    """The T_j matrices a GFT agent generates for one command."""
    if not agent.cfg.fusion.startswith("gft"):
        raise ValueError(f"transform analysis needs a GFT fusion, model uses {agent.cfg.fusion!r}")
    with T.no_grad():
        stack = agent.fusion.transforms(agent.sentence([list(tokens)]))
    return [m.data[0].copy() for m in stack.matrices]
