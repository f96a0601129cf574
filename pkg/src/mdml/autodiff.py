"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable operation records a node holding its parents and a
closure mapping the upstream gradient to per-parent gradients. ``backward``
walks the reachable nodes once in reverse topological order; a graph that has
been backwarded cannot be backwarded again.

Shapes are explicit. The only implicit expansion is ``add_bias`` (a vector
added along the trailing axis).
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class ParameterError(ValueError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no graph nodes inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple
    backward_fn: Callable | None
    consumed: bool = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # Operator sugar keeps model code readable; all routes go through the ops below.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_scalar(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, out: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    t.node = Node(op, tuple(parents), backward_fn) if t.requires_grad else None
    return t


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-differentiable array of identical shape (e.g. attention masks)."""
    c = np.asarray(c, dtype=DTYPE)
    if c.shape != a.shape:
        raise ShapeError(f"add_const: shapes {a.shape} and {c.shape} differ")
    return _make("add_const", a.data + c, (a,), lambda g: (g,))


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    c = np.asarray(c, dtype=DTYPE)
    if c.shape != a.shape:
        raise ShapeError(f"mul_const: shapes {a.shape} and {c.shape} differ")
    return _make("mul_const", a.data * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match trailing dim of {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _make("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must be identical."""
    if (a.data.ndim < 2 or a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2]
            or a.shape[-1] != b.shape[-2]):
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make("matmul", ad @ bd, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., k] @ w[k, n] (+ b[n])."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: cannot apply weight {w.shape} to input {x.shape}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ wd).reshape(xd.shape[:-1] + (wd.shape[1],))
    if b is None:
        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ wd.T).reshape(xd.shape), x2.T @ g2
        return _make("linear", out, (x, w), back)
    if b.data.ndim != 1 or b.shape[0] != wd.shape[1]:
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = out + b.data

    def back_b(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g2 @ wd.T).reshape(xd.shape), x2.T @ g2, g2.sum(axis=0)

    return _make("linear", out, (x, w, b), back_b)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _make("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def stack(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise ShapeError("stack: empty input")
    for t in xs[1:]:
        _same_shape("stack", xs[0], t)
    out = np.stack([t.data for t in xs], axis=axis)
    n = len(xs)
    return _make("stack", out, tuple(xs), lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def mix(outputs: Sequence[Tensor], weights: Tensor) -> Tensor:
    """Σ_k weights[..., k] * outputs[k]; outputs share shape weights.shape[:-1] + (d,)."""
    k = len(outputs)
    if k == 0:
        raise ShapeError("mix: no outputs")
    if weights.shape[-1] != k:
        raise ShapeError(f"mix: {k} outputs but weights have trailing dim {weights.shape[-1]}")
    for o in outputs:
        if o.shape[:-1] != weights.shape[:-1]:
            raise ShapeError(f"mix: output {o.shape} incompatible with weights {weights.shape}")
    w = weights.data
    out = w[..., 0:1] * outputs[0].data
    for i in range(1, k):
        out = out + w[..., i:i + 1] * outputs[i].data
    datas = [o.data for o in outputs]

    def back(g):
        gw = np.stack([(g * d).sum(axis=-1) for d in datas], axis=-1)
        return (gw,) + tuple(g * w[..., i:i + 1] for i in range(k))

    return _make("mix", out, (weights,) + tuple(outputs), back)


def select_last(x: Tensor, cols: Sequence[int]) -> Tensor:
    """x[..., cols] for an explicit list of trailing-axis indices."""
    cols = np.asarray(cols, dtype=np.int64)
    if cols.size == 0 or cols.min() < 0 or cols.max() >= x.shape[-1]:
        raise ShapeError(f"select_last: indices {cols.tolist()} invalid for {x.shape}")
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=DTYPE)
        np.add.at(gx, (..., cols), g)
        return (gx,)

    return _make("select_last", x.data[..., cols], (x,), back)


# -------------------------------------------------------------- nonlinearity

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


gelu_or_relu = relu


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise FloatingPointError("log of non-positive value")
    xd = x.data
    return _make("log", np.log(xd), (x,), lambda g: (g / xd,))


def _check_axis(x: Tensor, axis: int) -> int:
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"invalid axis {axis} for shape {x.shape}")
    return axis % nd


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make("softmax", p, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.data.ndim - 1))
    gd = gain.data

    def back(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make("layer_norm", out, (x, gain, bias), back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def grad_reverse(x: Tensor, lambda_rev: float = 1.0) -> Tensor:
    """Identity forward; backward passes -lambda_rev times the upstream gradient."""
    if lambda_rev < 0:
        raise ParameterError(f"lambda_rev must be non-negative, got {lambda_rev}")
    c = -float(lambda_rev)
    return _make("grad_reverse", x.data, (x,), lambda g: (g * c,))


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        shape = x.shape
        return _make("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=DTYPE),))
    axis = _check_axis(x, axis)
    shape = x.shape
    return _make("sum", x.data.sum(axis=axis), (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return scale(sum(x), 1.0 / n)


def mean_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    """Masked mean over axis 1 of x[B, T, D]; mask[B, T] is 1 on valid positions."""
    if x.data.ndim != 3 or mask.shape != x.shape[:2]:
        raise ShapeError(f"mean_pool: input {x.shape} with mask {np.shape(mask)}")
    m = np.asarray(mask, dtype=DTYPE)
    counts = m.sum(axis=1)
    if np.any(counts == 0):
        raise ShapeError("mean_pool: empty reduction (row with no valid positions)")
    w = (m / counts[:, None])[:, :, None]
    return _make("mean_pool", (x.data * w).sum(axis=1), (x,), lambda g: (g[:, None, :] * w,))


def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[...] = x[..., idx[...]]."""
    idx = np.asarray(idx)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"gather_last: index {idx.shape} vs input {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
        raise IndexError("gather_last: index out of range")
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _make("gather_last", out, (x,), back)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"embedding id out of range [0, {v})")
    shape = table.shape

    def back(g):
        gt = np.zeros(shape, dtype=DTYPE)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _make("embedding", table.data[ids], (table,), back)


def cross_entropy(log_probs: Tensor, target_ids: np.ndarray, pad_id: int) -> Tensor:
    """Mean negative log-likelihood over positions whose target is not ``pad_id``."""
    target_ids = np.asarray(target_ids)
    if target_ids.shape != log_probs.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {target_ids.shape} vs log_probs {log_probs.shape}")
    valid = target_ids != pad_id
    n = int(valid.sum())
    if n == 0:
        raise ShapeError("cross_entropy: empty reduction (all targets are padding)")
    safe = np.where(valid, target_ids, 0)
    picked = np.take_along_axis(log_probs.data, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * valid).sum() / n
    shape = log_probs.shape

    def back(g):
        gx = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(gx, safe[..., None], (-g / n * valid)[..., None], axis=-1)
        return (gx,)

    return _make("cross_entropy", np.asarray(loss), (log_probs,), back)


# ------------------------------------------------------------------ backward

@dataclass
class Graph:
    """Nodes reachable from a loss, in topological order (inputs first)."""

    nodes: list
    gradients: dict = field(default_factory=dict)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Graph":
        order, seen = [], set()
        stack_ = [(loss, False)]
        while stack_:
            t, expanded = stack_.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack_.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack_.append((p, False))
        return cls(order)


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad``; return {leaf: grad}.

    Leaves passed in ``params`` that are not on a path to ``loss`` get zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.from_loss(loss)
    for t in graph.nodes:
        if t.node is not None and t.node.consumed:
            raise GraphError("graph has already been backwarded")
    grads = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    leaves = {}
    for t in reversed(graph.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
                leaves[t] = t.grad
            continue
        pgrads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, pgrads):
            if not p.requires_grad:
                continue
            if pg.shape != p.shape:
                pg = pg.reshape(p.shape)
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
        t.node.consumed = True
        t.node.backward_fn = None
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros(p.shape, dtype=DTYPE)
            leaves.setdefault(p, p.grad)
    graph.gradients = leaves
    return leaves


# ----------------------------------------------------------------- optimizer

def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
                lr: float, betas=(0.9, 0.98), eps: float = 1e-9):
    """One Adam step on raw arrays. Returns (new_param, new_m, new_v)."""
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    mhat = m / (1.0 - b1 ** t)
    vhat = v / (1.0 - b2 ** t)
    return param - lr * mhat / (np.sqrt(vhat) + eps), m, v


class Adam:
    """Adam over a name -> Tensor mapping; state is keyed by parameter name."""

    def __init__(self, betas=(0.9, 0.98), eps: float = 1e-9):
        self.betas = tuple(betas)
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, lr: float):
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros(p.shape, dtype=DTYPE)
            m = self.m.get(name)
            if m is None:
                m = np.zeros(p.shape, dtype=DTYPE)
                self.v[name] = np.zeros(p.shape, dtype=DTYPE)
            p.data, self.m[name], self.v[name] = adam_update(
                p.data, g, m, self.v[name], self.t, lr, self.betas, self.eps)

    def state_arrays(self) -> dict:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, t: int, arrays: dict):
        self.t = t
        self.m = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("v/")}
