"""Dense float64 tensors with a taped reverse-mode autodiff.

Every op builds an output :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back into them.  :func:`backward`
sorts the reachable nodes topologically and runs each closure once.

Batched inputs carry the batch on the leading axis.
"""
from __future__ import annotations

import contextlib
import os
import struct
import threading
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

DEBUG = bool(os.environ.get("GFTNAV_DEBUG"))

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def square(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, 2.0 * x.data * g)

    return _make(x.data * x.data, (x,), bw, "square")


def activate(x: Tensor, kind: str) -> Tensor:
    """Elementwise relu, sigmoid, tanh or identity."""
    if kind == "relu":
        mask = x.data > 0
        out = np.where(mask, x.data, 0.0)

        def bw(g):
            _accum(x, g * mask)
    elif kind == "sigmoid":
        out = expit(x.data)

        def bw(g):
            _accum(x, g * out * (1.0 - out))
    elif kind == "tanh":
        out = np.tanh(x.data)

        def bw(g):
            _accum(x, g * (1.0 - out * out))
    elif kind in ("identity", "none", None):
        return x
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return _make(out, (x,), bw, kind)


def relu(x: Tensor) -> Tensor:
    return activate(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activate(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return activate(x, "tanh")


# ---------------------------------------------------------------- shaping

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def bw(g):
        _accum(x, g.reshape(old))

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def index(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        _accum(x, full)

    return _make(np.array(out, copy=True), (x,), bw, "index")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def tsum(x: Tensor, axis=None) -> Tensor:
    def bw(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), bw, "sum")


def mean(x: Tensor) -> Tensor:
    return mul(tsum(x), 1.0 / x.data.size)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product following numpy broadcasting rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul needs at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``out[i, j] = sum_k W[j, k] * x[i, k] + b[j]`` for x of shape (B, n)."""
    x = as_tensor(x)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ValueError(f"affine shape mismatch: x {x.shape}, W {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ValueError(f"affine bias shape {b.shape} != ({W.shape[0]},)")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def bw(g):
        if x.requires_grad:
            _accum(x, g @ W.data)
        if W.requires_grad:
            _accum(W, g.T @ x.data)
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _make(out, parents, bw, "affine")


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def conv2d(x: Tensor, filters: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation.  x is (C, H, W) or (B, C, H, W)."""
    x = as_tensor(x)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or filters.data.ndim != 4:
        raise ValueError("conv2d expects (B,C,H,W) input and (O,C,a,a) filters")
    B, C, H, W = xd.shape
    O, Cf, ka, kb = filters.shape
    if Cf != C:
        raise ValueError(f"conv2d channel mismatch: input {C}, filters {Cf}")
    if ka > H or kb > W:
        raise ValueError(f"kernel {ka}x{kb} larger than input {H}x{W}")
    Ho, Wo = conv_output_size(H, ka, stride), conv_output_size(W, kb, stride)
    win = sliding_window_view(xd, (ka, kb), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * ka * kb)
    wmat = filters.data.reshape(O, -1)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        if filters.requires_grad:
            _accum(filters, (g2.T @ cols).reshape(filters.shape))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, ka, kb)
            dx = np.zeros_like(xd)
            for i in range(ka):
                for j in range(kb):
                    dx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            _accum(x, dx[0] if squeeze else dx)

    return _make(np.ascontiguousarray(out), (x, filters), bw, "conv2d")


# ---------------------------------------------------------------- rows

def softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accum(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _make(s, (x,), bw, "softmax")


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        _accum(x, g - s * g.sum(axis=-1, keepdims=True))

    return _make(out, (x,), bw, "log_softmax")


def embedding_bag(table: Tensor, bags: Sequence[Sequence[int]]) -> Tensor:
    """Row ``i`` of the output is the sum of ``table`` rows listed in ``bags[i]``."""
    out = np.zeros((len(bags), table.shape[1]))
    for i, ids in enumerate(bags):
        if len(ids):
            out[i] = table.data[list(ids)].sum(axis=0)

    def bw(g):
        full = np.zeros_like(table.data)
        for i, ids in enumerate(bags):
            for k in ids:
                full[k] += g[i]
        _accum(table, full)

    return _make(out, (table,), bw, "embedding_bag")


# ---------------------------------------------------------------- graph + backward

@dataclass
class Graph:
    """Topologically ordered nodes reachable from a root."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def is_topological(self) -> bool:
        pos = {id(n): i for i, n in enumerate(self.nodes)}
        return all(pos[id(p)] < pos[id(n)] for n in self.nodes for p in n.parents)


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.from_root(loss)
    if not loss.requires_grad:
        return graph
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            # leaf: accumulate into the persistent gradient buffer
            if node.grad is None:
                node.grad = np.array(g, copy=True)
            else:
                node.grad += g
            continue
        # route parent grads through a scratch map so intermediates are freed
        uniq = list({id(p): p for p in node.parents}.values())
        saved = [(p, p.grad) for p in uniq]
        for p in uniq:
            p.grad = None
        node.backward_fn(g)
        for p, old in saved:
            if p.grad is not None:
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + p.grad
                else:
                    grads[id(p)] = p.grad
            p.grad = old
    return graph


# ---------------------------------------------------------------- parameters

def init_values(name: str, shape: Sequence[int], seed: int, kind: str = "weight",
                fan_in: int | None = None) -> np.ndarray:
    if not shape or any(int(n) < 1 for n in shape):
        raise ValueError(f"invalid parameter shape {shape!r}")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])
    if kind == "embedding":
        bound = 0.1
    else:
        if fan_in is None:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
        bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=tuple(int(n) for n in shape))


class ParameterSet:
    """Named, ordered collection of trainable tensors."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._params: dict[str, Tensor] = {}

    def init_parameter(self, name: str, shape: Sequence[int], kind: str = "weight",
                       fan_in: int | None = None) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(init_values(name, shape, self.seed, kind, fan_in), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def size(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grad(self, name: str) -> np.ndarray:
        t = self._params[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def checksum(self) -> int:
        h = 0
        for name, t in self._params.items():
            h = zlib.crc32(name.encode(), h)
            h = zlib.crc32(np.ascontiguousarray(t.data).tobytes(), h)
        return h

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, values: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(values) != set(self._params):
            missing = set(self._params) - set(values)
            extra = set(values) - set(self._params)
            raise KeyError(f"parameter mismatch; missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in values.items():
            t = self._params[name]
            if tuple(arr.shape) != t.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.data = np.array(arr, dtype=np.float64, copy=True)


# ---------------------------------------------------------------- finite differences

def grad_check(f: Callable[[], Tensor], params: ParameterSet, probes: int = 100,
               h: float = 1e-5, seed: int = 0, names: Iterable[str] | None = None) -> float:
    """Max relative error between backprop and central differences.

    Each probe perturbs one randomly chosen scalar parameter.  The error is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    params.zero_grad()
    backward(f())
    pool = list(names) if names is not None else params.names()
    sizes = np.array([params[n].data.size for n in pool], dtype=float)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for _ in range(probes):
            name = pool[rng.choice(len(pool), p=sizes / sizes.sum())]
            t = params[name]
            flat = t.data.reshape(-1)
            k = int(rng.integers(flat.size))
            analytic = params.grad(name).reshape(-1)[k]
            orig = flat[k]
            flat[k] = orig + h
            fp = float(f().data)
            flat[k] = orig - h
            fm = float(f().data)
            flat[k] = orig
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    params.zero_grad()
    return worst


# ---------------------------------------------------------------- record io

def write_records(fh: BinaryIO, items: Iterable[tuple[str, np.ndarray]], dtype: str = "<f4") -> int:
    """Write ``name, ndim, dims(u32 LE), values`` records; returns the count."""
    n = 0
    for name, arr in items:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
        n += 1
    return n


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated record stream")
    return buf


def read_records(fh: BinaryIO, count: int, dtype: str = "<f4") -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    itemsize = np.dtype(dtype).itemsize
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
        dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim)) if ndim else ()
        size = int(np.prod(dims)) if dims else 1
        vals = np.frombuffer(_read_exact(fh, size * itemsize), dtype=dtype)
        out[name] = vals.astype(np.float64).reshape(dims)
    return out
