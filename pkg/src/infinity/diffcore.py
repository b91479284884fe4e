"""Dense float64 arrays with a reverse-mode autodiff engine.

Every primitive's backward rule is written with the same differentiable
primitives, so running the reverse pass with ``create_graph=True`` records a
new graph on top of the old one. That is what lets the meta-learning outer
loop differentiate through the inner gradient steps.

Two layers are exposed:

* :class:`Tensor` plus :func:`grad` for define-by-run code (the INR, the
  meta-training loop, the processor).
* :class:`Record`, an ordered replayable list of primitive applications
  obtained by tracing a function, with :func:`evaluate`, :func:`gradient`,
  :func:`gradient_of_gradient` and :func:`finite_difference_check`.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "Record",
    "RecordShapeError",
    "NonScalarOutputError",
    "NonFiniteInputError",
    "as_tensor",
    "grad",
    "no_grad",
    "is_grad_enabled",
    "evaluate",
    "gradient",
    "gradient_of_gradient",
    "finite_difference_check",
    "matmul",
    "concat",
    "exp",
    "log",
    "sin",
    "cos",
    "tanh",
    "relu",
    "gelu",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "broadcast_to",
    "sum_to",
]


class RecordShapeError(ValueError):
    """A primitive in a record received operands of incompatible shape."""

    def __init__(self, node: str, message: str):
        super().__init__(f"node {node}: {message}")
        self.node = node


class NonScalarOutputError(ValueError):
    pass


class NonFiniteInputError(ValueError):
    pass


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class _Node:
    __slots__ = ("prim", "parents", "attrs")

    def __init__(self, prim: "Primitive", parents: tuple, attrs: dict):
        self.prim = prim
        self.parents = parents
        self.attrs = attrs


class Tensor:
    """A float64 array that may carry a link to the primitive that produced it."""

    __slots__ = ("data", "requires_grad", "_node", "_aux", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, *, check_finite: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if check_finite and not np.all(np.isfinite(arr)):
            raise NonFiniteInputError("input array contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None
        self._aux = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self._node.prim.name}" if self._node is not None else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        return power(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


class Primitive:
    """A forward numpy kernel plus a vector-Jacobian rule in Tensor ops.

    ``vjp(g, out, *inputs, **attrs)`` returns one cotangent (or None) per
    input. It must only use differentiable Tensor operations so that the
    backward pass can itself be recorded.
    """

    def __init__(self, name: str, forward: Callable, vjp: Callable):
        self.name = name
        self.forward = forward
        self.vjp = vjp

    def __repr__(self):
        return f"<primitive {self.name}>"

    def __call__(self, *inputs, **attrs) -> Tensor:
        tensors = tuple(as_tensor(t) for t in inputs)
        out = Tensor(self.forward(*(t.data for t in tensors), **attrs))
        if is_grad_enabled() and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out._node = _Node(self, tensors, attrs)
        return out


def _reduce_axes(shape: tuple, target: tuple) -> tuple:
    lead = len(shape) - len(target)
    axes = list(range(lead))
    for i, n in enumerate(target):
        if n == 1 and shape[lead + i] != 1:
            axes.append(lead + i)
    return tuple(axes)


def _sum_to_forward(a, shape):
    if a.shape == tuple(shape):
        return a
    out = a.sum(axis=_reduce_axes(a.shape, shape), keepdims=True)
    return out.reshape(shape)


def _broadcast_forward(a, shape):
    return np.array(np.broadcast_to(a, shape))


sum_to = Primitive(
    "sum_to",
    _sum_to_forward,
    lambda g, out, a, shape: (broadcast_to(g, a.shape),),
)
broadcast_to = Primitive(
    "broadcast_to",
    _broadcast_forward,
    lambda g, out, a, shape: (sum_to(g, shape=a.shape),),
)
# Keyword-only wrappers keep attrs uniform in the record.
_sum_to_prim, _broadcast_prim = sum_to, broadcast_to


def sum_to(x, shape) -> Tensor:  # noqa: F811
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _sum_to_prim(x, shape=shape)


def broadcast_to(x, shape) -> Tensor:  # noqa: F811
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _broadcast_prim(x, shape=shape)


def _unb(g: Tensor, like: Tensor) -> Tensor:
    return sum_to(g, like.shape)


add = Primitive("add", np.add, lambda g, out, a, b: (_unb(g, a), _unb(g, b)))
sub = Primitive("sub", np.subtract, lambda g, out, a, b: (_unb(g, a), _unb(-g, b)))
mul = Primitive("mul", np.multiply, lambda g, out, a, b: (_unb(g * b, a), _unb(g * a, b)))
div = Primitive(
    "div",
    np.divide,
    lambda g, out, a, b: (_unb(g / b, a), _unb(-g * out / b, b)),
)
neg = Primitive("neg", np.negative, lambda g, out, a: (-g,))
def _power_vjp(g, out, a, p):
    if p == 0.0:
        return (None,)
    if p == 1.0:
        return (g,)
    return (g * (p * power(a, p=p - 1.0)),)


power = Primitive("power", lambda a, p: np.power(a, p), _power_vjp)
_power_prim = power


def power(x, p) -> Tensor:  # noqa: F811
    return _power_prim(x, p=float(p))


exp = Primitive("exp", np.exp, lambda g, out, a: (g * out,))
log = Primitive("log", np.log, lambda g, out, a: (g / a,))
sin = Primitive("sin", np.sin, lambda g, out, a: (g * cos(a),))
cos = Primitive("cos", np.cos, lambda g, out, a: (-g * sin(a),))
tanh = Primitive("tanh", np.tanh, lambda g, out, a: (g * (1.0 - out * out),))


def _relu_vjp(g, out, a):
    # subgradient 0 at the kink; the mask is a constant so d2 relu = 0
    return (g * Tensor((a.data > 0.0).astype(np.float64)),)


relu = Primitive("relu", lambda a: np.maximum(a, 0.0), _relu_vjp)

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _normal_terms(x: Tensor):
    """(cdf, pdf) of the standard normal at ``x``, cached on the tensor."""
    if x._aux is None:
        v = x.data
        x._aux = (0.5 * (1.0 + _erf(v / _SQRT2)), _INV_SQRT2PI * np.exp(-0.5 * v * v))
    return x._aux


class _GeluFamily(Primitive):
    """GELU and its derivatives; erf/exp evaluated once per input tensor."""

    def __init__(self, name, kernel, vjp):
        super().__init__(name, None, vjp)
        self.kernel = kernel
        self.forward = lambda a: kernel(a, *_normal_terms(Tensor(a)))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        cdf, pdf = _normal_terms(x)
        out = Tensor(self.kernel(x.data, cdf, pdf))
        if is_grad_enabled() and x.requires_grad:
            out.requires_grad = True
            out._node = _Node(self, (x,), {})
        return out


def _gelu_d3(x: Tensor) -> Tensor:
    # composite so that any further order stays differentiable
    phi = _INV_SQRT2PI * exp(-0.5 * x * x)
    return x * phi * (x * x - 4.0)


gelu_d2 = _GeluFamily(
    "gelu_d2", lambda x, cdf, pdf: pdf * (2.0 - x * x), lambda g, out, a: (g * _gelu_d3(a),)
)
gelu_d1 = _GeluFamily("gelu_d1", lambda x, cdf, pdf: cdf + x * pdf, lambda g, out, a: (g * gelu_d2(a),))
gelu = _GeluFamily("gelu", lambda x, cdf, pdf: x * cdf, lambda g, out, a: (g * gelu_d1(a),))


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul operands must be at least 2-D, got {a.shape} and {b.shape}")
    return np.matmul(a, b)


def _matmul_vjp(g, out, a, b):
    ga = matmul(g, transpose(b, axes=_swap_last(b.ndim)))
    gb = matmul(transpose(a, axes=_swap_last(a.ndim)), g)
    return (_unb(ga, a), _unb(gb, b))


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


_matmul_prim = Primitive("matmul", _matmul_fwd, _matmul_vjp)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics; 1-D operands are promoted."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim >= 2 and b.ndim >= 2:
        return _matmul_prim(a, b)
    a2 = reshape(a, (1, a.shape[0])) if a.ndim == 1 else a
    b2 = reshape(b, (b.shape[0], 1)) if b.ndim == 1 else b
    out = _matmul_prim(a2, b2)
    if a.ndim == 1 and b.ndim == 1:
        return reshape(out, ())
    if a.ndim == 1:
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    return reshape(out, out.shape[:-1])


_transpose_prim = Primitive(
    "transpose",
    lambda a, axes: np.transpose(a, axes),
    lambda g, out, a, axes: (transpose(g, axes=tuple(np.argsort(axes))),),
)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    return _transpose_prim(x, axes=tuple(int(i) for i in axes))


_reshape_prim = Primitive(
    "reshape",
    lambda a, shape: np.reshape(a, shape),
    lambda g, out, a, shape: (reshape(g, a.shape),),
)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if x.shape == shape:
        return x
    return _reshape_prim(x, shape=shape)


def _sum_fwd(a, axis, keepdims):
    return np.sum(a, axis=axis, keepdims=keepdims)


def _sum_vjp(g, out, a, axis, keepdims):
    if not keepdims and axis is not None:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % a.ndim for ax in axes)
        kshape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
        g = reshape(g, kshape)
    elif not keepdims:
        g = reshape(g, (1,) * a.ndim)
    return (broadcast_to(g, a.shape),)


_sum_prim = Primitive("sum", _sum_fwd, _sum_vjp)


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    if isinstance(axis, list):
        axis = tuple(axis)
    return _sum_prim(x, axis=axis, keepdims=bool(keepdims))


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[ax] for ax in axes]))
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def _scatter_fwd(g, index, shape):
    out = np.zeros(shape)
    if _is_basic(index):
        out[index] = g
    else:
        np.add.at(out, index, g)
    return out


_scatter_prim = Primitive(
    "scatter",
    _scatter_fwd,
    lambda g, out, a, index, shape: (getitem(g, index),),
)
_getitem_prim = Primitive(
    "getitem",
    lambda a, index: np.array(a[index]),
    lambda g, out, a, index: (_scatter_prim(g, index=index, shape=a.shape),),
)


def getitem(x, index) -> Tensor:
    return _getitem_prim(x, index=index)


def _concat_fwd(*arrays, axis):
    return np.concatenate(arrays, axis=axis)


def _concat_vjp(g, out, *inputs, axis):
    grads = []
    start = 0
    ax = axis % out.ndim
    for t in inputs:
        stop = start + t.shape[ax]
        idx = (slice(None),) * ax + (slice(start, stop),)
        grads.append(getitem(g, idx))
        start = stop
    return tuple(grads)


_concat_prim = Primitive("concat", _concat_fwd, _concat_vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    return _concat_prim(*tensors, axis=int(axis))


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def grad(
    output: Tensor,
    inputs: Sequence[Tensor] | Tensor,
    grad_output=None,
    create_graph: bool = False,
) -> list | Tensor:
    """Gradient of ``output`` with respect to each of ``inputs``.

    The output must be scalar unless ``grad_output`` supplies the cotangent.
    With ``create_graph=True`` the returned gradients are themselves part of
    the graph and can be differentiated again. Unused inputs get zeros.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise NonScalarOutputError(f"gradient needs a scalar output, got shape {output.shape}")
        grad_output = Tensor(np.ones_like(output.data))
    wanted = {id(x) for x in inputs}
    grads: dict[int, Tensor] = {id(output): as_tensor(grad_output)}
    if output.requires_grad:
        with _grad_mode(create_graph):
            for t in reversed(_topological(output)):
                node = t._node
                if node is None:
                    continue
                key = id(t)
                g = grads.get(key) if key in wanted else grads.pop(key, None)
                if g is None:
                    continue
                parent_grads = node.prim.vjp(g, t, *node.parents, **node.attrs)
                for p, pg in zip(node.parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    pk = id(p)
                    grads[pk] = grads[pk] + pg if pk in grads else pg
    result = []
    for x in inputs:
        g = grads.get(id(x))
        result.append(g if g is not None else Tensor(np.zeros_like(x.data)))
    return result[0] if single else result


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RecordNode:
    name: str
    prim: Primitive
    parents: tuple  # slot indices
    attrs: dict


class Record:
    """Immutable, ordered list of primitive applications.

    Slots ``0..n_inputs-1`` are the inputs, followed by captured constants,
    followed by one slot per node. Each node only references earlier slots.
    """

    def __init__(self, n_inputs: int, constants: list, nodes: list, output_slot: int):
        self.n_inputs = n_inputs
        self.constants = tuple(np.array(c, copy=True) for c in constants)
        for c in self.constants:
            c.setflags(write=False)
        self.nodes = tuple(nodes)
        self.output_slot = output_slot

    def __len__(self) -> int:
        return len(self.nodes)

    def __repr__(self) -> str:
        ops = ", ".join(n.prim.name for n in self.nodes[:8])
        more = ", ..." if len(self.nodes) > 8 else ""
        return f"Record(inputs={self.n_inputs}, nodes=[{ops}{more}])"

    @classmethod
    def trace(cls, fn: Callable, *example_inputs) -> "Record":
        """Record ``fn`` applied to arrays shaped like ``example_inputs``."""
        leaves = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in example_inputs]
        out = as_tensor(fn(*leaves))
        slots = {id(t): i for i, t in enumerate(leaves)}
        order = _topological_all(out)
        constants = [t for t in order if t._node is None and id(t) not in slots]
        for t in constants:
            slots[id(t)] = len(slots)
        nodes = []
        for t in order:
            if t._node is None:
                continue
            parents = tuple(slots[id(p)] for p in t._node.parents)
            nodes.append(RecordNode(f"n{len(nodes)}:{t._node.prim.name}", t._node.prim, parents, dict(t._node.attrs)))
            slots[id(t)] = len(slots)
        return cls(len(leaves), [c.data for c in constants], nodes, slots[id(out)])

    def replay(self, inputs: Sequence) -> Tensor:
        """Re-run the record on ``inputs`` (Tensors keep differentiability)."""
        if len(inputs) != self.n_inputs:
            raise ValueError(f"record expects {self.n_inputs} inputs, got {len(inputs)}")
        values = [as_tensor(x) for x in inputs]
        for x in values:
            if not np.all(np.isfinite(x.data)):
                raise NonFiniteInputError("record input contains NaN or Inf")
        values.extend(Tensor(c) for c in self.constants)
        for node in self.nodes:
            args = [values[i] for i in node.parents]
            try:
                values.append(node.prim(*args, **node.attrs))
            except (ValueError, IndexError) as exc:
                shapes = ", ".join(str(a.shape) for a in args)
                raise RecordShapeError(node.name, f"operand shapes {shapes}: {exc}") from exc
        return values[self.output_slot]


def _topological_all(root: Tensor) -> list:
    # like _topological but also visits parents that are constants
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in reversed(t._node.parents):
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def _as_inputs(inputs) -> list:
    return [np.asarray(x, dtype=np.float64) for x in inputs]


def evaluate(record: Record, inputs: Sequence) -> np.ndarray:
    with no_grad():
        return record.replay(_as_inputs(inputs)).data


def gradient(record: Record, inputs: Sequence, wrt: int) -> np.ndarray:
    leaves = [Tensor(x, requires_grad=True) for x in _as_inputs(inputs)]
    with _grad_mode(True):
        out = record.replay(leaves)
    if out.size != 1:
        raise NonScalarOutputError(f"record output has shape {out.shape}; gradient needs a scalar")
    return grad(out, leaves[wrt]).data


def gradient_of_gradient(
    record: Record,
    inputs: Sequence,
    inner_wrt: int,
    outer_wrt: int,
    cotangent=None,
) -> np.ndarray:
    """d/d inputs[outer_wrt] of <cotangent, d record / d inputs[inner_wrt]>.

    The cotangent defaults to all ones, i.e. the sum of the inner gradient.
    """
    leaves = [Tensor(x, requires_grad=True) for x in _as_inputs(inputs)]
    with _grad_mode(True):
        out = record.replay(leaves)
        if out.size != 1:
            raise NonScalarOutputError(f"record output has shape {out.shape}; gradient needs a scalar")
        g = grad(out, leaves[inner_wrt], create_graph=True)
        v = np.ones(g.shape) if cotangent is None else np.asarray(cotangent, dtype=np.float64)
        s = sum(g * v)
    return grad(s, leaves[outer_wrt]).data


def finite_difference_check(
    record: Record,
    inputs: Sequence,
    wrt: int,
    step: float = 1e-6,
    inner_wrt: int | None = None,
    cotangent=None,
) -> float:
    """Max relative error of autodiff against central differences.

    With ``inner_wrt`` set, checks :func:`gradient_of_gradient` against
    central differences of the inner gradient contracted with ``cotangent``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    xs = _as_inputs(inputs)

    if inner_wrt is None:
        analytic = gradient(record, xs, wrt)

        def scalar(args):
            return float(evaluate(record, args))
    else:
        analytic = gradient_of_gradient(record, xs, inner_wrt, wrt, cotangent)

        def scalar(args):
            g = gradient(record, args, inner_wrt)
            v = np.ones(g.shape) if cotangent is None else np.asarray(cotangent)
            return float(np.sum(g * v))

    fd = np.zeros_like(xs[wrt])
    flat = fd.reshape(-1)
    for i in range(flat.size):
        plus = [x.copy() for x in xs]
        minus = [x.copy() for x in xs]
        plus[wrt].reshape(-1)[i] += step
        minus[wrt].reshape(-1)[i] -= step
        flat[i] = (scalar(plus) - scalar(minus)) / (2.0 * step)
    err = np.abs(analytic - fd) / (np.abs(fd) + 1e-12)
    return float(err.max()) if err.size else 0.0
