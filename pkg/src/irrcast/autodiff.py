"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation on a :class:`Tensor` whose inputs require gradients records
one node: the parent tensors plus a closure mapping the output gradient to
input gradients.  Nodes carry a monotonically increasing id, so reverse
construction order is simply descending id.  A graph is consumed by
:func:`backward` unless ``retain_graph=True``.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .errors import (
    DetachedTensor,
    MissingGradient,
    NonFiniteInput,
    NotScalar,
    ShapeMismatch,
    TapeConsumed,
)

_node_ids = itertools.count()

DTYPE = np.float64


def _as_array(value):
    return np.asarray(value, dtype=DTYPE)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_node", "_consumed")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._node = None
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def tape_id(self):
        return self._node

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def backward(self, params=None, retain_graph=False):
        backward(self, params=params, retain_graph=retain_graph)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor_from(shape, values, requires_grad=False):
    """Build a tensor from a flat row-major value list."""
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ShapeMismatch("shape must be nonempty")
    values = _as_array(values).reshape(-1)
    if math.prod(shape) != values.size:
        raise ShapeMismatch(f"shape {shape} needs {math.prod(shape)} values, got {values.size}")
    return Tensor(values.reshape(shape), requires_grad=requires_grad)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    tracked = tuple(p for p in parents if isinstance(p, Tensor) and (p.requires_grad or p._backward is not None))
    if tracked:
        out.requires_grad = True
        out._parents = tracked
        out._backward = backward_fn
        out._node = next(_node_ids)
    return out


def _needs(t):
    return isinstance(t, Tensor) and (t.requires_grad or t._backward is not None)


# -- elementwise --------------------------------------------------------

def _check_broadcast(a, b):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot combine shapes {a.shape} and {b.shape}") from exc


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), _pair(a, b, bw))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), _pair(a, b, bw))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), _pair(a, b, bw))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), _pair(a, b, bw))


def _pair(a, b, bw):
    """Adapt a two-input backward to the tracked-parents convention."""
    need_a, need_b = _needs(a), _needs(b)

    def backward_fn(g):
        ga, gb = bw(g)
        out = []
        if need_a:
            out.append(ga)
        if need_b:
            out.append(gb)
        return out

    return backward_fn


def _unary(x, value, local_grad):
    x = as_tensor(x)
    return _make(value, (x,), lambda g: [g * local_grad()])


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _unary(x, y, lambda: 1.0 - y * y)


def relu(x):
    x = as_tensor(x)
    return _unary(x, np.maximum(x.data, 0.0), lambda: (x.data > 0).astype(DTYPE))


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _unary(x, y, lambda: y)


def log(x):
    x = as_tensor(x)
    return _unary(x, np.log(x.data), lambda: 1.0 / x.data)


def sqrt(x):
    x = as_tensor(x)
    y = np.sqrt(x.data)
    return _unary(x, y, lambda: 0.5 / y)


def absolute(x):
    x = as_tensor(x)
    return _unary(x, np.abs(x.data), lambda: np.sign(x.data))


def power(x, exponent):
    x = as_tensor(x)
    exponent = float(exponent)
    return _unary(x, x.data**exponent, lambda: exponent * x.data ** (exponent - 1.0))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": mul,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
}


def elementwise(op, a, b=None):
    """Dispatch by name: ``add``, ``sub``, ``mul``, ``scale``, ``tanh``, ``relu``, ``exp``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("tanh", "relu", "exp"):
        return fn(a)
    if b is None:
        raise ValueError(f"{op} needs a second operand")
    if op == "scale" and not np.isscalar(b):
        raise ShapeMismatch("scale takes a scalar factor")
    return fn(a, b)


# -- reductions and shape ops -------------------------------------------

def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, x.shape).copy()]

    return _make(np.asarray(y, dtype=DTYPE), (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: [g.reshape(x.shape)])


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: [g.transpose(inverse)])


def getitem(x, index):
    x = as_tensor(x)

    def bw(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return [full]

    return _make(np.array(x.data[index], dtype=DTYPE), (x,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    needed = [_needs(t) for t in tensors]

    def bw(g):
        parts = np.split(g, bounds, axis=axis)
        return [p for p, n in zip(parts, needed) if n]

    return _make(data, tensors, bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if axis < 0:
        axis += tensors[0].ndim + 1
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- linear algebra ------------------------------------------------------

def matmul(a, b):
    """Matrix product with batched leading dimensions broadcast as in numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeMismatch("matmul needs at least 1-D operands")
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1,) + a.shape), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, b.shape + (1,))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeMismatch(f"matmul batch dims differ: {a.shape} x {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), _pair(a, b, bw))


# -- normalisation / attention helpers ----------------------------------

def softmax(x, axis=-1, mask=None):
    """Max-stabilised softmax; ``mask`` (True = excluded) forces zero weight."""
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteInput("softmax input contains non-finite values")
    if axis >= x.ndim or axis < -x.ndim:
        raise ShapeMismatch(f"axis {axis} out of range for rank {x.ndim}")
    z = x.data
    if mask is not None:
        z = np.where(mask, -np.inf, z)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return [y * (g - (g * y).sum(axis=axis, keepdims=True))]

    return _make(y, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv
    y = xhat * gain.data + bias.data
    needed = [_needs(t) for t in (x, gain, bias)]

    def bw(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
        dg = _unbroadcast(g * xhat, gain.shape)
        db = _unbroadcast(g, bias.shape)
        return [v for v, n in zip((dx, dg, db), needed) if n]

    return _make(y, (x, gain, bias), bw)


def dropout(x, rate, rng, training=True):
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(DTYPE) / (1.0 - rate)
    return mul(x, keep)


# -- backward pass -------------------------------------------------------

def _topo(loss):
    seen = {}
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        if t._node is None or t._node in seen:
            continue
        seen[t._node] = t
        stack_.extend(t._parents)
    return [seen[k] for k in sorted(seen, reverse=True)]


def backward(loss, params=None, retain_graph=False):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate.  Parameters listed in ``params`` that the
    loss does not reach receive a zero gradient.  Unless ``retain_graph``
    is set the graph is released and a second call raises TapeConsumed.
    """
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeConsumed("graph already consumed; run the forward pass again")
    if loss._backward is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) + (0 if loss.grad is None else loss.grad)
            return
        raise DetachedTensor("loss is not connected to any tensor requiring grad")

    grads = {loss._node: np.ones_like(loss.data)}
    for node in _topo(loss):
        g = grads.pop(node._node, None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if parent._backward is not None:
                prev = grads.get(parent._node)
                grads[parent._node] = pg if prev is None else prev + pg
            elif parent.requires_grad:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
        if not retain_graph:
            node._backward = None
            node._parents = ()
            node._consumed = True
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# -- optimisers ----------------------------------------------------------

def clip_grad_norm(params, max_norm):
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class Optimizer:
    kind = None

    def __init__(self, params, lr):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.learning_rate = float(lr)
        self.step_count = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise MissingGradient(f"parameter {p.name or p.shape} has no gradient")
        self._update()
        self.step_count += 1
        self.zero_grad()


class SGD(Optimizer):
    kind = "SGD"

    def _update(self):
        for p in self.params:
            p.data -= self.learning_rate * p.grad


class Adam(Optimizer):
    kind = "Adam"

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(params, lr)
        self.betas = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _update(self):
        b1, b2 = self.betas
        t = self.step_count + 1
        for p, m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def optimizer_step(state, params=None):
    """Functional alias: apply one update of ``state`` (an SGD/Adam instance)."""
    if params is not None and list(params) != state.params:
        raise ValueError("optimizer was built for a different parameter set")
    state.step()


# -- verification oracle -------------------------------------------------

def finite_difference_check(f, x, step=1e-5, coords=None, floor=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the tensor ``x`` (input or parameter; perturbed in place)
    to a scalar tensor.  ``coords`` optionally restricts the check to a
    list of flat indices.  The denominator never drops below ``floor``, so
    an exactly-zero gradient (the key bias under softmax, say) is compared
    against roundoff-sized differences instead of dividing noise by noise.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteInput("finite-difference point is not finite")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    if loss._backward is None and not loss.requires_grad:
        analytic = np.zeros(x.size)
    else:
        backward(loss, params=[x])
        analytic = x.grad.reshape(-1).copy()
    x.grad = None
    x.requires_grad = was

    flat = x.data.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + step
        up = float(f(x).data)
        flat[i] = orig - step
        down = float(f(x).data)
        flat[i] = orig
        central = (up - down) / (2 * step)
        if not (np.isfinite(central) and np.isfinite(analytic[i])):
            raise NonFiniteInput(f"non-finite gradient at coordinate {i}")
        err = abs(analytic[i] - central) / max(abs(analytic[i]) + abs(central), floor)
        worst = max(worst, err)
    return worst


# -- initialisation ------------------------------------------------------

def xavier_uniform(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))
