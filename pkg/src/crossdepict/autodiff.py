"""Dense float64 tensors with a replayable tape and reverse-mode gradients.

Every primitive's backward rule is written in terms of other primitives, so a
gradient computed with ``create_graph=True`` lands on the same tape and can be
differentiated again (Hessian-vector products, unrolled inner loops).
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeNode",
    "ParamSet",
    "ShapeError",
    "GradError",
    "apply_primitive",
    "grad",
    "hessian_vector_product",
    "softmax",
    "softmax_cross_entropy",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    pass


class GradError(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def _owned(a) -> np.ndarray:
    """Freeze a freshly computed result in place (no copy)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.flags.writeable:
        arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable float64 array, optionally recorded as node ``index`` of ``tape``."""

    __slots__ = ("data", "tape", "index")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, tape: Optional["Tape"] = None, index: int = -1):
        if isinstance(data, np.ndarray) and data.dtype == np.float64 and not data.flags.writeable:
            self.data = data
        else:
            self.data = _frozen(data)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        where = f", tape#{self.index}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{where})"

    # Operators route through apply_primitive on this tensor's tape.
    def __add__(self, other):
        return apply_primitive("add", [self, other])

    def __radd__(self, other):
        return apply_primitive("add", [other, self])

    def __sub__(self, other):
        return apply_primitive("sub", [self, other])

    def __rsub__(self, other):
        return apply_primitive("sub", [other, self])

    def __mul__(self, other):
        if np.isscalar(other):
            return apply_primitive("scale", [self], c=float(other))
        return apply_primitive("mul", [self, other])

    def __rmul__(self, other):
        if np.isscalar(other):
            return apply_primitive("scale", [self], c=float(other))
        return apply_primitive("mul", [other, self])

    def __truediv__(self, other):
        if np.isscalar(other):
            return apply_primitive("scale", [self], c=1.0 / float(other))
        return apply_primitive("div", [self, other])

    def __neg__(self):
        return apply_primitive("scale", [self], c=-1.0)

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    def __rmatmul__(self, other):
        return apply_primitive("matmul", [other, self])

    @property
    def T(self):
        return apply_primitive("transpose", [self])


@dataclass
class TapeNode:
    kind: str
    inputs: tuple
    output: Tensor
    attrs: dict = field(default_factory=dict)


class Tape:
    """Append-only record of primitive applications, topologically ordered by construction."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, kind, inputs, data, attrs) -> Tensor:
        out = Tensor(data, self, len(self.nodes))
        self.nodes.append(TapeNode(kind, tuple(inputs), out, attrs))
        return out

    def _record(self, kind, inputs, data, attrs) -> Tensor:
        out = Tensor(_owned(data), self, len(self.nodes))
        self.nodes.append(TapeNode(kind, tuple(inputs), out, attrs))
        return out

    def leaf(self, value) -> Tensor:
        """A differentiable input."""
        return self._append("leaf", (), value, {})

    def const(self, value) -> Tensor:
        """A non-differentiable input (data, frozen weights, seeds)."""
        return self._append("const", (), value, {})

    def replay(self, leaves: Optional[Mapping[int, Any]] = None) -> list[np.ndarray]:
        """Re-execute every node; ``leaves`` overrides recorded leaf values by node index."""
        values: list[np.ndarray] = []
        for i, node in enumerate(self.nodes):
            if node.kind in ("leaf", "const"):
                v = node.output.data
                if leaves is not None and i in leaves:
                    v = _frozen(leaves[i])
            else:
                prim = PRIMITIVES[node.kind]
                v = prim.forward(*(values[j] for j in node.inputs), **node.attrs)
            values.append(v)
        return values


# ---------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Primitive:
    name: str
    arity: int
    forward: Callable[..., np.ndarray]
    check: Callable[..., None]
    vjp: Callable[..., tuple]
    # False for rules whose backward is not itself differentiable
    twice_differentiable: bool = True


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, arity, forward, check, vjp, twice_differentiable=True):
    PRIMITIVES[name] = Primitive(name, arity, forward, check, vjp, twice_differentiable)


def _no_check(*shapes, **attrs):
    return None


def _broadcast_check(name):
    def check(sa, sb, **attrs):
        if sa == sb or not sa or not sb:
            return
        try:
            np.broadcast_shapes(sa, sb)
        except ValueError:
            raise ShapeError(f"{name}: shapes {sa} and {sb} do not broadcast") from None

    return check


def _matmul_check(sa, sb, **attrs):
    if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
        raise ShapeError(f"matmul: shapes {sa} and {sb} are not conformable")


def _sum_to_shape(x: np.ndarray, shape: tuple) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    out = x.sum(axis=tuple(range(lead))) if lead > 0 else x
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and out.shape[i] != 1)
    if axes:
        out = out.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


def _sum_forward(a, axis=None):
    if axis is None:
        return np.sum(a)
    return np.sum(a, axis=axis, keepdims=True)


def _sum_check(sa, axis=None):
    if axis not in (None, -1):
        raise ShapeError(f"sum: axis must be None or -1, got {axis} for shape {sa}")
    if axis == -1 and len(sa) == 0:
        raise ShapeError("sum: axis=-1 on a scalar shape ()")


def _max_check(sa):
    if len(sa) == 0 or sa[-1] == 0:
        raise ShapeError(f"max: needs a non-empty last axis, got shape {sa}")


def _bcast_to_check(sa, shape=()):
    try:
        ok = np.broadcast_shapes(sa, shape) == tuple(shape)
    except ValueError:
        ok = False
    if not ok:
        raise ShapeError(f"broadcast_to: shape {sa} cannot broadcast to {tuple(shape)}") from None


def _sum_to_check(sa, shape=()):
    try:
        ok = np.broadcast_shapes(sa, shape) == tuple(sa)
    except ValueError:
        ok = False
    if not ok:
        raise ShapeError(f"sum_to: shape {sa} does not reduce to {tuple(shape)}") from None


def _onehot_argmax(a: np.ndarray) -> np.ndarray:
    idx = np.argmax(a, axis=-1)
    mask = np.zeros_like(a)
    np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
    return mask


# vjp rules: (g, inputs, out, **attrs) -> tuple of cotangents (None = no gradient)

def _vjp_matmul(g, a, b, out):
    return g @ b.T, a.T @ g


def _vjp_add(g, a, b, out):
    return _sum_to(g, a.shape), _sum_to(g, b.shape)


def _vjp_sub(g, a, b, out):
    return _sum_to(g, a.shape), _sum_to(-g, b.shape)


def _vjp_mul(g, a, b, out):
    return _sum_to(g * b, a.shape), _sum_to(g * a, b.shape)


def _vjp_div(g, a, b, out):
    ga = g / b
    return _sum_to(ga, a.shape), _sum_to(-(ga * out), b.shape)


def _vjp_scale(g, a, out, c):
    return (apply_primitive("scale", [g], c=c),)


def _vjp_relu(g, a, out):
    return (g * _const_like(g, (a.data > 0).astype(np.float64)),)


def _vjp_tanh(g, a, out):
    return (g * (1.0 - out * out),)


def _vjp_exp(g, a, out):
    return (g * out,)


def _vjp_log(g, a, out):
    return (g / a,)


def _vjp_abs(g, a, out):
    return (g * _const_like(g, np.sign(a.data)),)


def _vjp_sign(g, a, out):
    return (None,)


def _vjp_sum(g, a, out, axis=None):
    return (apply_primitive("broadcast_to", [g], shape=a.shape),)


def _vjp_max(g, a, out):
    spread = apply_primitive("broadcast_to", [g], shape=a.shape)
    return (spread * _const_like(g, _onehot_argmax(a.data)),)


def _vjp_transpose(g, a, out):
    return (g.T,)


def _vjp_broadcast_to(g, a, out, shape=()):
    return (_sum_to(g, a.shape),)


def _vjp_sum_to(g, a, out, shape=()):
    return (apply_primitive("broadcast_to", [g], shape=a.shape),)


def _sum_to(g: Tensor, shape) -> Tensor:
    if g.shape == tuple(shape):
        return g
    return apply_primitive("sum_to", [g], shape=tuple(shape))


def _const_like(ref: Tensor, value) -> Tensor:
    if ref.tape is not None:
        return ref.tape.const(value)
    return Tensor(value)


_register("matmul", 2, lambda a, b: a @ b, _matmul_check, _vjp_matmul)
_register("add", 2, np.add, _broadcast_check("add"), _vjp_add)
_register("sub", 2, np.subtract, _broadcast_check("sub"), _vjp_sub)
_register("mul", 2, np.multiply, _broadcast_check("mul"), _vjp_mul)
_register("div", 2, np.divide, _broadcast_check("div"), _vjp_div)
_register("scale", 1, lambda a, c: a * c, _no_check, _vjp_scale)
_register("relu", 1, lambda a: np.maximum(a, 0.0), _no_check, _vjp_relu)
_register("tanh", 1, np.tanh, _no_check, _vjp_tanh)
_register("exp", 1, np.exp, _no_check, _vjp_exp)
_register("log", 1, np.log, _no_check, _vjp_log)
_register("abs", 1, np.abs, _no_check, _vjp_abs)
_register("sign", 1, np.sign, _no_check, _vjp_sign)
_register("sum", 1, _sum_forward, _sum_check, _vjp_sum)
_register("max", 1, lambda a: np.max(a, axis=-1, keepdims=True), _max_check, _vjp_max)
_register("transpose", 1, lambda a: a.T, _no_check, _vjp_transpose)
_register("broadcast_to", 1, lambda a, shape: np.broadcast_to(a, shape).copy(), _bcast_to_check,
          _vjp_broadcast_to)
_register("sum_to", 1, _sum_to_shape, _sum_to_check, _vjp_sum_to)


def apply_primitive(kind: str, inputs: Sequence, tape: Optional[Tape] = None, **attrs) -> Tensor:
    """Apply primitive ``kind`` to ``inputs``.

    ``tape`` defaults to the tape of the first taped input. Plain arrays and
    untaped tensors are recorded as constants on that tape. Elementwise
    binaries follow numpy broadcasting (covering the batch-axis bias add);
    ``matmul`` is strictly 2-D; ``sum`` takes ``axis=None`` (to a scalar) or
    ``axis=-1`` (keepdims); ``max`` reduces the last axis with keepdims.
    """
    prim = PRIMITIVES.get(kind)
    if prim is None:
        raise KeyError(f"unknown primitive {kind!r}")
    if len(inputs) != prim.arity:
        raise ShapeError(f"{kind}: expected {prim.arity} inputs, got {len(inputs)}")
    if tape is None:
        for x in inputs:
            if isinstance(x, Tensor) and x.tape is not None:
                tape = x.tape
                break
    ts = []
    for x in inputs:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if tape is not None:
            if x.tape is None:
                x = tape.const(x.data)
            elif x.tape is not tape:
                raise GradError(f"{kind}: inputs recorded on different tapes")
        ts.append(x)
    prim.check(*(t.shape for t in ts), **attrs)
    data = prim.forward(*(t.data for t in ts), **attrs)
    if tape is None:
        return Tensor(_owned(data))
    return tape._record(kind, [t.index for t in ts], data, attrs)


def relu(x):
    return apply_primitive("relu", [x])


def tanh(x):
    return apply_primitive("tanh", [x])


def exp(x):
    return apply_primitive("exp", [x])


def log(x):
    return apply_primitive("log", [x])


def absolute(x):
    return apply_primitive("abs", [x])


def sign(x):
    return apply_primitive("sign", [x])


def tsum(x, axis=None):
    return apply_primitive("sum", [x], axis=axis)


def tmax(x):
    return apply_primitive("max", [x])


# ---------------------------------------------------------------------------
# parameter sets


class ParamSet(Mapping):
    """Named parameters with a fixed ordering (construction order).

    The flat view concatenates each entry's row-major values in that order.
    Values may be numpy arrays or Tensors; the name set never changes.
    """

    __slots__ = ("_names", "_values")

    def __init__(self, items):
        pairs = list(items.items()) if isinstance(items, Mapping) else list(items)
        self._names = tuple(k for k, _ in pairs)
        if len(set(self._names)) != len(self._names):
            raise ValueError("duplicate parameter names")
        self._values = dict(pairs)

    def __getitem__(self, name):
        return self._values[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._names)

    def __len__(self):
        return len(self._names)

    def __repr__(self):
        body = ", ".join(f"{k}:{tuple(np.shape(_data(v)))}" for k, v in self.items())
        return f"ParamSet({body})"

    @property
    def names(self) -> tuple:
        return self._names

    def arrays(self) -> "ParamSet":
        return ParamSet((k, _data(v)) for k, v in self.items())

    def size(self) -> int:
        return sum(int(np.size(_data(v))) for v in self._values.values())

    def flatten(self) -> np.ndarray:
        if not self._names:
            return np.zeros(0)
        return np.concatenate([np.ravel(_data(self._values[k])) for k in self._names])

    def unflatten(self, vec) -> "ParamSet":
        """Inverse of :meth:`flatten`, using this set's names and shapes."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size(),):
            raise ShapeError(f"unflatten: expected vector of length {self.size()}, got {vec.shape}")
        out, i = [], 0
        for k in self._names:
            shape = np.shape(_data(self._values[k]))
            n = int(np.prod(shape, dtype=int))
            out.append((k, vec[i:i + n].reshape(shape).copy()))
            i += n
        return ParamSet(out)

    def map(self, fn) -> "ParamSet":
        return ParamSet((k, fn(v)) for k, v in self.items())

    def replace(self, **updates) -> "ParamSet":
        unknown = set(updates) - set(self._names)
        if unknown:
            raise KeyError(f"unknown parameter names {sorted(unknown)}")
        return ParamSet((k, updates.get(k, v)) for k, v in self.items())

    def subset(self, names) -> "ParamSet":
        return ParamSet((k, self._values[k]) for k in names)

    def merged(self, other: Mapping) -> "ParamSet":
        """This set with ``other``'s entries overriding; names must already exist."""
        return self.replace(**dict(other))


def _data(v):
    return v.data if isinstance(v, Tensor) else v


# ---------------------------------------------------------------------------
# differentiation


def grad(objective: Tensor, wrt: ParamSet, create_graph: bool = False) -> ParamSet:
    """Gradient of a scalar taped ``objective`` with respect to leaf tensors ``wrt``.

    With ``create_graph`` the backward pass is recorded on the objective's
    tape, so the returned Tensors can feed further differentiation.
    Parameters that the objective does not depend on get zeros.
    """
    if not isinstance(objective, Tensor) or objective.tape is None:
        raise GradError("objective must be a taped Tensor")
    if objective.size != 1:
        raise GradError(f"objective must be scalar, got shape {objective.shape}")
    tape = objective.tape
    for name, p in wrt.items():
        if not isinstance(p, Tensor) or p.tape is not tape or tape.nodes[p.index].kind != "leaf":
            raise GradError(f"parameter {name!r} is not a leaf on the objective's tape")

    last = objective.index
    nodes = tape.nodes
    needs = bytearray(last + 1)
    for p in wrt.values():
        if p.index <= last:
            needs[p.index] = 1
    for i in range(last + 1):
        node = nodes[i]
        if not needs[i] and node.inputs and any(needs[j] for j in node.inputs):
            needs[i] = 1

    def view(t: Tensor) -> Tensor:
        return t if create_graph else Tensor(t.data)

    seed = np.ones(objective.shape)
    cot: dict[int, Tensor] = {last: tape.const(seed) if create_graph else Tensor(seed)}
    for i in range(last, -1, -1):
        g = cot.pop(i, None) if nodes[i].kind != "leaf" else cot.get(i)
        if g is None or not needs[i]:
            continue
        node = nodes[i]
        if node.kind == "leaf":
            continue
        prim = PRIMITIVES[node.kind]
        if create_graph and not prim.twice_differentiable:
            raise GradError(f"primitive {node.kind!r} has no second-derivative rule")
        ins = [view(nodes[j].output) for j in node.inputs]
        grads = prim.vjp(g, *ins, view(node.output), **node.attrs)
        for j, gj in zip(node.inputs, grads):
            if gj is None or not needs[j]:
                continue
            prev = cot.get(j)
            cot[j] = gj if prev is None else prev + gj
    out = []
    for name, p in wrt.items():
        g = cot.get(p.index)
        if g is None:
            g = tape.const(np.zeros(p.shape)) if create_graph else Tensor(np.zeros(p.shape))
        out.append((name, g))
    return ParamSet(out)


def leaves_for(tape: Tape, params: Mapping) -> ParamSet:
    """Record every entry of ``params`` as a leaf on ``tape``."""
    return ParamSet((k, tape.leaf(_data(v))) for k, v in params.items())


def value_and_grad(fn: Callable[[ParamSet], Tensor], params: Mapping) -> tuple[float, ParamSet]:
    """Evaluate ``fn`` on a fresh tape and return (value, gradient arrays)."""
    tape = Tape()
    leaves = leaves_for(tape, params)
    f = fn(leaves)
    g = grad(f, leaves)
    return f.item(), g.arrays()


def hessian_vector_product(objective: Callable[[ParamSet], Tensor], wrt: Mapping, v: Mapping,
                           mode: str = "exact", eps: float = 1e-5) -> ParamSet:
    """H·v of the scalar ``objective`` at ``wrt``.

    ``objective`` maps a ParamSet of Tensors to a scalar Tensor. ``exact``
    differentiates <grad f, v> again on the same tape; ``finite-diff`` takes a
    central difference of gradients along ``v``.
    """
    wrt = ParamSet(wrt)
    for k in wrt:
        if np.shape(_data(v[k])) != np.shape(_data(wrt[k])):
            raise ShapeError(f"hvp: direction {k!r} has shape {np.shape(_data(v[k]))}, "
                             f"parameter has {np.shape(_data(wrt[k]))}")
    if mode == "exact":
        tape = Tape()
        leaves = leaves_for(tape, wrt)
        g = grad(objective(leaves), leaves, create_graph=True)
        dot = None
        for k in wrt:
            term = tsum(g[k] * tape.const(_data(v[k])))
            dot = term if dot is None else dot + term
        return grad(dot, leaves).arrays()
    if mode == "finite-diff":
        plus = ParamSet((k, _data(wrt[k]) + eps * _data(v[k])) for k in wrt)
        minus = ParamSet((k, _data(wrt[k]) - eps * _data(v[k])) for k in wrt)
        _, gp = value_and_grad(objective, plus)
        _, gm = value_and_grad(objective, minus)
        return ParamSet((k, (gp[k] - gm[k]) / (2 * eps)) for k in wrt)
    raise ValueError(f"unknown hvp mode {mode!r}")


# ---------------------------------------------------------------------------
# softmax / cross-entropy


def softmax(logits) -> np.ndarray:
    y = np.asarray(_data(logits), dtype=np.float64)
    e = np.exp(y - y.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax at ``labels``; shift by the (detached) row max."""
    labels = np.asarray(labels, dtype=np.int64)
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    if len(logits.shape) != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be batch x N, got {logits.shape}")
    b, n = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 0} labels "
                         f"for a batch of {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        bad = int(labels[(labels < 0) | (labels >= n)][0])
        raise ValueError(f"label {bad} outside [0, {n})")
    onehot = np.zeros((b, n))
    onehot[np.arange(b), labels] = 1.0
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = log(tsum(exp(shifted), axis=-1))
    picked = tsum(shifted * onehot, axis=-1)
    return tsum(lse - picked) * (1.0 / b)
