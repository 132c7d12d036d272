"""A small reverse-mode automatic differentiation engine over numpy float64 arrays.

Every primitive records its parents and a backward closure on the result.
Backward replays the recorded nodes in reverse creation order, which is a
valid topological order of the dynamic tape.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

_grad_enabled = True
_counter = itertools.count()
_kink_log: list[np.ndarray] | None = None


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def kink_monitor():
    """Collect the activation pattern of every ReLU evaluated inside the block."""
    global _kink_log
    prev = _kink_log
    _kink_log = []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_counter)
        self.name = name

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        nodes = _reachable(self)
        self.grad = np.ones_like(self.data)
        for node in nodes:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        # gradients are never updated in place, so incoming buffers can be shared
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        out.append(t)
        stack.extend(t._parents)
    out.sort(key=lambda t: t._id, reverse=True)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return _make(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(-g)

    return _make(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # fold the batch dimensions into one GEMM
        data = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            if a.ndim == 2 and b.ndim > 2:
                g2 = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
                b2 = np.moveaxis(b.data, -2, 0).reshape(b.shape[-2], -1)
                a._accum(g2 @ b2.T)
            elif b.ndim == 2 and a.ndim > 2:
                a._accum((g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape))
            else:
                a._accum(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                b._accum(a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accum(np.swapaxes(a.data, -1, -2) @ g)

    return _make(data, (a, b), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a._accum(np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None

    def backward(g):
        a._accum(g.reshape(a.shape))

    return _make(data, (a,), backward)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return _make(data, tuple(tensors), backward)


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        a._accum(g * out * (1.0 - out))

    return _make(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _kink_log is not None:
        _kink_log.append(mask.copy())

    def backward(g):
        a._accum(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - out**2))

    return _make(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        a._accum(g * out)

    return _make(out, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        a._accum(out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (a,), backward)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(reduce_sum(a, axis, keepdims), 1.0 / n)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Convolution along the second-to-last axis with same-length zero padding.

    ``x``: (..., T, C_in), ``w``: (K, C_in, C_out) with K odd, ``b``: (C_out,).
    """
    k, c_in, c_out = w.shape
    if k % 2 == 0 or x.shape[-1] != c_in:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    t_len = x.shape[-2]
    pad = k // 2
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, widths)
    out = sum(xp[..., j:j + t_len, :] @ w.data[j] for j in range(k))
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j:j + t_len, :] += g @ w.data[j].T
            x._accum(gxp[..., pad:pad + t_len, :])
        if w.requires_grad:
            gx2 = g.reshape(-1, c_out)
            w._accum(np.stack([xp[..., j:j + t_len, :].reshape(-1, c_in).T @ gx2 for j in range(k)]))
        if b is not None and b.requires_grad:
            b._accum(g.reshape(-1, c_out).sum(axis=0))

    return _make(out, parents, backward)


# ----------------------------------------------------------------- modules


class Module:
    """Parameter container; parameters are discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise KeyError(f"state mismatch: {sorted(set(params) ^ set(state))}")
        for k, p in params.items():
            if p.data.shape != state[k].shape:
                raise ShapeError(f"{k}: expected {p.data.shape}, got {state[k].shape}")
            p.data[...] = state[k]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def parameter(shape, rng: np.random.Generator, fan_in: int, name: str | None = None) -> Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = parameter((n_in, n_out), rng, n_in)
        self.bias = parameter((n_out,), rng, n_in)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


# --------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState) -> None:
    """Bias-corrected Adam; parameters without a gradient are treated as zero-gradient."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.data.shape:
            raise ShapeError(f"adam moments for {name} have shape {m.shape}, parameter {p.data.shape}")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(p.grad**2)) for p in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


# ------------------------------------------------------------ checkpoints


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write ``<path>.bin`` (little-endian float64, concatenated) and ``<path>.manifest``."""
    path = Path(path)
    lines = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"checkpoint names may not contain whitespace: {name!r}")
        arr = np.asarray(arr, dtype="<f8")  # tobytes is C-ordered; keeps 0-d shapes
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name} {shape} {offset}")
        chunks.append(arr.tobytes())
        offset += arr.size
    tmp_bin, tmp_man = path.with_suffix(".bin.tmp"), path.with_suffix(".manifest.tmp")
    tmp_bin.write_bytes(b"".join(chunks))
    tmp_man.write_text("\n".join(lines) + "\n")
    tmp_bin.replace(path.with_suffix(".bin"))
    tmp_man.replace(path.with_suffix(".manifest"))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    out: dict[str, np.ndarray] = {}
    for line in path.with_suffix(".manifest").read_text().splitlines():
        if not line.strip():
            continue
        name, shape_s, offset_s = line.split()
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split("x"))
        offset = int(offset_s)
        size = int(np.prod(shape)) if shape else 1
        out[name] = flat[offset:offset + size].reshape(shape).astype(np.float64)
    return out


# ------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    excluded: dict[str, int]

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.worst < tol


def grad_check(fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
               floor: float = 1e-6, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of the scalar ``fn()`` with central differences.

    Entries whose perturbation flips any ReLU activation are excluded (the
    function is not differentiable there).  ``max_entries`` subsamples large
    parameters.
    """
    for p in params.values():
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    errs: dict[str, float] = {}
    excluded: dict[str, int] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        worst = 0.0
        skipped = 0
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                with kink_monitor() as up_masks:
                    f_up = fn().item()
                flat[i] = orig - h
                with kink_monitor() as dn_masks:
                    f_dn = fn().item()
            flat[i] = orig
            if any(not np.array_equal(u, d) for u, d in zip(up_masks, dn_masks)):
                skipped += 1
                continue
            num = (f_up - f_dn) / (2 * h)
            ana = analytic[name].reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
        errs[name] = worst
        excluded[name] = skipped
    return GradCheckReport(errs, excluded)
