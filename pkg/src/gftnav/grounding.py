"""Language-vision fusion: guided feature transformation and baseline modules.

Feature cubes are tensors of shape (B, D, N): D channels over N spatial
locations.  Sentence embeddings are (B, E) bag-of-words sums.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .layers import Linear, MLP2
from .tensor import ParameterSet, Tensor

FUSIONS = ("gft1", "gft2", "gft3", "film", "gated", "cgated", "concat", "concept")


def encode_bow(tokens: Sequence[int] | Sequence[Sequence[int]], embeddings: Tensor) -> Tensor:
    """Sum-pool word embeddings.

    ``tokens`` is either one id list (returns shape (E,)) or a batch of id
    lists (returns (B, E)).
    """
    single = len(tokens) == 0 or isinstance(tokens[0], (int, np.integer))
    bags = [list(tokens)] if single else [list(b) for b in tokens]
    # summing in sorted id order makes the result bit-identical for any word order
    bags = [sorted(int(t) for t in bag) for bag in bags]
    vocab = embeddings.shape[0]
    for bag in bags:
        for tok in bag:
            if not 0 <= int(tok) < vocab:
                raise KeyError(f"token id {tok} outside vocabulary of size {vocab}")
    out = T.embedding_bag(embeddings, bags)
    return out[0] if single else out


def _batch_cube(C: Tensor) -> tuple[Tensor, bool]:
    if C.data.ndim == 2:
        return T.reshape(C, (1,) + C.shape), True
    if C.data.ndim != 3:
        raise ValueError(f"feature cube must be (D, N) or (B, D, N), got {C.shape}")
    return C, False


def gft_step(C: Tensor, Tj: Tensor, g: str = "relu") -> Tensor:
    """One guided transformation: ``g(T_j @ [C; 1^T])``."""
    Cb, single = _batch_cube(C)
    B, D, N = Cb.shape
    Tb = T.reshape(Tj, (1,) + Tj.shape) if Tj.data.ndim == 2 else Tj
    if Tb.shape[-2:] != (D, D + 1):
        raise ValueError(f"transform shape {Tj.shape} does not match D={D} (need {D}x{D + 1})")
    aug = T.concat([Cb, Tensor(np.ones((B, 1, N)))], axis=1)
    out = T.activate(T.matmul(Tb, aug), g)
    return T.reshape(out, (D, N)) if single else out


def gft_apply(C: Tensor, stack: Sequence[Tensor], g: str = "relu") -> Tensor:
    if len(stack) < 1:
        raise ValueError("transform stack must hold at least one matrix")
    out = C
    for Tj in stack:
        out = gft_step(out, Tj, g)
    return out


def film_apply(C: Tensor, scale: Tensor, bias: Tensor, g: str = "relu") -> Tensor:
    """Per-channel ``g(scale_d * c_d + bias_d)``; scale and bias are (B, D) or (D,)."""
    Cb, single = _batch_cube(C)
    B, D, N = Cb.shape
    s = T.reshape(scale, (-1, D, 1))
    b = T.reshape(bias, (-1, D, 1))
    out = T.activate(s * Cb + b, g)
    return T.reshape(out, (D, N)) if single else out


@dataclass
class TransformStack:
    matrices: list[Tensor]
    activation: str = "relu"

    @property
    def J(self) -> int:
        return len(self.matrices)


class GFT:
    """Generates J transforms from l_BoW with a shared first layer, then applies them."""

    def __init__(self, params: ParameterSet, D: int, embed_dim: int, hidden: int = 128, J: int = 1,
                 g: str = "relu", name: str = "fusion.gft"):
        if J not in (1, 2, 3):
            raise ValueError("J must be 1, 2 or 3")
        self.D, self.J, self.g = D, J, g
        self.first = Linear(params, f"{name}.l1", embed_dim, hidden)
        self.second = [Linear(params, f"{name}.l2_{j}", hidden, D * (D + 1)) for j in range(J)]

    def transforms(self, l: Tensor) -> TransformStack:
        lb = l if l.data.ndim == 2 else T.reshape(l, (1, -1))
        hidden = self.first(lb, "relu")
        mats = [T.reshape(layer(hidden), (-1, self.D, self.D + 1)) for layer in self.second]
        if l.data.ndim == 1:
            mats = [T.reshape(m, (self.D, self.D + 1)) for m in mats]
        return TransformStack(mats, self.g)

    def __call__(self, C: Tensor, l: Tensor) -> Tensor:
        return gft_apply(C, self.transforms(l).matrices, self.g)


class FiLM:
    """Two-layer generator emitting D scales followed by D biases."""

    def __init__(self, params: ParameterSet, D: int, embed_dim: int, hidden: int = 128,
                 g: str = "relu", name: str = "fusion.film"):
        self.D, self.g = D, g
        self.mlp = MLP2(params, name, embed_dim, hidden, 2 * D)

    def params_for(self, l: Tensor) -> tuple[Tensor, Tensor]:
        out = self.mlp(l if l.data.ndim == 2 else T.reshape(l, (1, -1)))
        return out[:, :self.D], out[:, self.D:]

    def __call__(self, C: Tensor, l: Tensor) -> Tensor:
        scale, bias = self.params_for(l)
        return film_apply(C, scale, bias, self.g)


class Gated:
    def __init__(self, params: ParameterSet, D: int, embed_dim: int, hidden: int = 128,
                 name: str = "fusion.gated"):
        self.D = D
        self.mlp = MLP2(params, name, embed_dim, hidden, D, out_act="sigmoid")

    def gate(self, l: Tensor) -> Tensor:
        return self.mlp(l if l.data.ndim == 2 else T.reshape(l, (1, -1)))

    def __call__(self, C: Tensor, l: Tensor) -> Tensor:
        Cb, single = _batch_cube(C)
        out = T.reshape(self.gate(l), (-1, self.D, 1)) * Cb
        return T.reshape(out, C.shape) if single else out


class CGated:
    def __init__(self, params: ParameterSet, D: int, N: int, embed_dim: int, proj: int = 512,
                 name: str = "fusion.cgated"):
        self.visual = Linear(params, f"{name}.visual", D * N, proj)
        self.gate_layer = Linear(params, f"{name}.gate", embed_dim, proj)

    def gate(self, l: Tensor) -> Tensor:
        return self.gate_layer(l if l.data.ndim == 2 else T.reshape(l, (1, -1)), "sigmoid")

    def project(self, C: Tensor) -> Tensor:
        Cb, _ = _batch_cube(C)
        return self.visual(T.reshape(Cb, (Cb.shape[0], -1)), "relu")

    def __call__(self, C: Tensor, l: Tensor) -> Tensor:
        return self.project(C) * self.gate(l)


class Concat:
    """[relu(W_v vec(C)) ; relu(W_l l)] with the visual half first."""

    def __init__(self, params: ParameterSet, D: int, N: int, embed_dim: int, proj: int = 512,
                 name: str = "fusion.concat"):
        self.visual = Linear(params, f"{name}.visual", D * N, proj)
        self.language = Linear(params, f"{name}.language", embed_dim, proj)

    def __call__(self, C: Tensor, l: Tensor) -> Tensor:
        Cb, _ = _batch_cube(C)
        v = self.visual(T.reshape(Cb, (Cb.shape[0], -1)), "relu")
        w = self.language(l if l.data.ndim == 2 else T.reshape(l, (1, -1)), "relu")
        return T.concat([v, w], axis=1)


class Concept:
    """Sentence embedding used directly as a 1x1 filter.

    Output maps are stacked attention-first: (B, 2, N).
    """

    def __init__(self, params: ParameterSet, D: int, name: str = "fusion.concept"):
        self.D = D
        self.w = params.init_parameter(f"{name}.env.w", (1, D))
        self.b = params.init_parameter(f"{name}.env.b", (1,), fan_in=D)

    def __call__(self, C: Tensor, l: Tensor) -> Tensor:
        Cb, single = _batch_cube(C)
        if l.shape[-1] != self.D:
            raise ValueError(f"concept fusion needs embedding length {self.D}, got {l.shape[-1]}")
        filt = T.reshape(l, (-1, 1, self.D))
        attention = T.relu(T.matmul(filt, Cb))
        env = T.relu(T.matmul(T.reshape(self.w, (1, 1, self.D)), Cb) + T.reshape(self.b, (1, 1, 1)))
        out = T.concat([attention, env], axis=1)
        return T.reshape(out, (2, Cb.shape[2])) if single else out


def make_fusion(kind: str, params: ParameterSet, D: int, N: int, embed_dim: int,
                hidden: int = 128, proj: int = 512, g: str = "relu"):
    if kind in ("gft1", "gft2", "gft3"):
        return GFT(params, D, embed_dim, hidden, J=int(kind[-1]), g=g)
    if kind == "film":
        return FiLM(params, D, embed_dim, hidden, g=g)
    if kind == "gated":
        return Gated(params, D, embed_dim, hidden)
    if kind == "cgated":
        return CGated(params, D, N, embed_dim, proj)
    if kind == "concat":
        return Concat(params, D, N, embed_dim, proj)
    if kind == "concept":
        return Concept(params, D)
    raise ValueError(f"unknown fusion {kind!r}; expected one of {FUSIONS}")


def fusion_output_size(kind: str, D: int, N: int, proj: int = 512) -> int:
    if kind in ("gft1", "gft2", "gft3", "film", "gated"):
        return D * N
    if kind == "cgated":
        return proj
    if kind == "concat":
        return 2 * proj
    if kind == "concept":
        return 2 * N
    raise ValueError(f"unknown fusion {kind!r}")
