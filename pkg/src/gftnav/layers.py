"""Parameterised building blocks shared by the grounding modules and the agent."""
from __future__ import annotations

from . import tensor as T
from .tensor import ParameterSet, Tensor


class Linear:
    def __init__(self, params: ParameterSet, name: str, n_in: int, n_out: int, bias: bool = True):
        self.name = name
        self.W = params.init_parameter(f"{name}.w", (n_out, n_in))
        self.b = params.init_parameter(f"{name}.b", (n_out,), fan_in=n_in) if bias else None

    def __call__(self, x: Tensor, act: str = "identity") -> Tensor:
        return T.activate(T.affine(x, self.W, self.b), act)


class MLP2:
    """Two dense layers: relu hidden layer, configurable output activation."""

    def __init__(self, params: ParameterSet, name: str, n_in: int, hidden: int, n_out: int,
                 out_act: str = "identity"):
        self.l1 = Linear(params, f"{name}.l1", n_in, hidden)
        self.l2 = Linear(params, f"{name}.l2", hidden, n_out)
        self.out_act = out_act

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(self.l1(x, "relu"), self.out_act)


class GRUCell:
    """Reset/update-gate GRU.

    r = sigmoid(W_r x + U_r h + b_r)
    z = sigmoid(W_z x + U_z h + b_z)
    n = tanh(W_n x + U_n (r * h) + b_n)
    h' = (1 - z) * h + z * n
    """

    def __init__(self, params: ParameterSet, name: str, n_in: int, hidden: int):
        self.hidden = hidden
        self.W_rz = params.init_parameter(f"{name}.w_rz", (2 * hidden, n_in))
        self.U_rz = params.init_parameter(f"{name}.u_rz", (2 * hidden, hidden))
        self.b_rz = params.init_parameter(f"{name}.b_rz", (2 * hidden,), fan_in=hidden)
        self.W_n = params.init_parameter(f"{name}.w_n", (hidden, n_in))
        self.U_n = params.init_parameter(f"{name}.u_n", (hidden, hidden))
        self.b_n = params.init_parameter(f"{name}.b_n", (hidden,), fan_in=hidden)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        H = self.hidden
        gates = T.sigmoid(T.affine(x, self.W_rz, self.b_rz) + T.affine(h, self.U_rz))
        r = gates[:, :H]
        z = gates[:, H:]
        n = T.tanh(T.affine(x, self.W_n, self.b_n) + T.affine(r * h, self.U_n))
        return h + z * (n - h)
