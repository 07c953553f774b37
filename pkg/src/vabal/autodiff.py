"""Minimal reverse-mode automatic differentiation on numpy arrays.

Primitives are recorded on the innermost active :class:`Tape` whenever
at least one input requires gradients.  Outside a tape every primitive
just computes its value, which is what inference code uses.

    >>> w = Tensor([[1.0], [2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(square(matmul(Tensor([[1.0, 1.0]]), w)))
    >>> tape.backward(loss, wrt=[w])[0].ravel().tolist()
    [6.0, 6.0]
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericOverflowError, ShapeError

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._scalar_error()

    def _scalar_error(self):
        raise ContractError(f"item() needs a single element, got shape {self.shape}")

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    vjp: object
    primitive: str


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, which is a topological order of
    the computation graph, so :meth:`backward` simply walks it in reverse.
    """

    _stack = []

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def active(cls):
        return cls._stack[-1] if cls._stack else None

    def record(self, out, inputs, vjp, primitive):
        self.nodes.append(_Node(out, inputs, vjp, primitive))

    def backward(self, output, wrt=None):
        """Back-propagate from a scalar ``output``.

        Every leaf in ``wrt`` (default: every recorded leaf that requires
        gradients) gets its ``.grad`` set; leaves the output does not
        depend on receive exact zeros.  Returns the gradients in ``wrt``
        order.
        """
        if output.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
        if not self.nodes:
            raise ContractError("backward called on an empty tape")
        grads = {id(output): np.ones_like(output.data)}
        produced = set()
        leaves = {}
        for node in reversed(self.nodes):
            produced.add(id(node.out))
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                leaves[key] = inp
        if wrt is None:
            wrt = [t for k, t in leaves.items() if k not in produced]
        out = []
        for t in wrt:
            g = grads.get(id(t))
            t.grad = np.zeros_like(t.data) if g is None else g
            out.append(t.grad)
        return out


def forward(graph_fn, *inputs):
    """Run ``graph_fn(*inputs)`` on a fresh tape; return ``(output, tape)``."""
    for t in inputs:
        if isinstance(t, Tensor) and not np.all(np.isfinite(t.data)):
            raise NumericOverflowError("forward input")
    with Tape() as tape:
        out = graph_fn(*inputs)
    return out, tape


def backward(output, tape, wrt=None):
    return tape.backward(output, wrt)


# ---------------------------------------------------------------------------
# primitive plumbing
# ---------------------------------------------------------------------------


def _finish(primitive, value, inputs, vjp):
    if not np.all(np.isfinite(value)):
        raise NumericOverflowError(primitive)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = value
    out.requires_grad = needs
    out.grad = None
    out.name = None
    tape = Tape.active()
    if needs and tape is not None:
        tape.record(out, inputs, vjp, primitive)
    return out


def _check_broadcast(primitive, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(primitive, sa, sb)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish("add", a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finish("sub", a.data - b.data, (a, b), vjp)


def mul(a, b):
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish("mul", a.data * b.data, (a, b), vjp)


def neg(a):
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c):
    """Multiply by a Python constant."""
    c = float(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _finish("matmul", a.data @ b.data, (a, b), vjp)


def relu(a):
    mask = a.data > 0.0  # subgradient at 0 is 0
    return _finish("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x):
    # tanh form: overflow-free for any finite x
    return 0.5 * np.tanh(0.5 * x) + 0.5


def sigmoid(a):
    s = _sigmoid(a.data)
    return _finish("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a):
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _finish("exp", e, (a,), lambda g: (g * e,))


def log(a):
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(x)
    return _finish("log", value, (a,), lambda g: (g / x,))


def square(a):
    x = a.data
    return _finish("square", x * x, (a,), lambda g: (2.0 * g * x,))


def abs_(a):
    x = a.data
    return _finish("abs", np.abs(x), (a,), lambda g: (g * np.sign(x),))


def clip(a, lo, hi):
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _finish("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def softmax(a):
    """Softmax over the last axis."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _finish("softmax", s, (a,), vjp)


def log_softmax(a):
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def vjp(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _finish("log_softmax", out, (a,), vjp)


def sum_(a, axis=None):
    """Sum over all elements (``axis=None``) or over one axis."""
    shape = a.shape
    if axis is None:
        value = np.asarray(a.data.sum())

        def vjp(g):
            return (np.broadcast_to(g, shape).copy(),)

    else:
        ax = axis % a.data.ndim
        value = a.data.sum(axis=ax)

        def vjp(g):
            return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _finish("sum", value, (a,), vjp)


def mean(a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def reshape(a, shape):
    old = a.shape
    try:
        value = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _finish("reshape", value, (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _finish("concat", value, tuple(tensors), vjp)


def take_cols(a, start, stop):
    """Columns ``start:stop`` of the last axis."""
    shape = a.shape
    if not 0 <= start < stop <= shape[-1]:
        raise ShapeError("take_cols", shape, (start, stop))

    def vjp(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _finish("take_cols", a.data[..., start:stop].copy(), (a,), vjp)


def dense(x, weight, bias):
    """``x @ weight + bias`` for a batch of row vectors."""
    return add(matmul(x, weight), bias)


# ---------------------------------------------------------------------------
# stochastic and probabilistic helpers
# ---------------------------------------------------------------------------


def reparameterize(mu, log_var, rng=None, eps=None):
    """Draw ``z = mu + exp(0.5 * log_var) * eps`` with ``eps ~ N(0, I)``.

    ``log_var`` is clamped to ``[-10, 10]`` first.  Pass ``eps`` to fix
    the noise (gradient checks, common random numbers).
    """
    if mu.shape != log_var.shape:
        raise ShapeError("reparameterize", mu.shape, log_var.shape)
    if eps is None:
        if rng is None:
            raise ContractError("reparameterize needs an rng or explicit eps")
        eps = rng.standard_normal(mu.shape)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != mu.shape:
        raise ShapeError("reparameterize", mu.shape, eps.shape)
    std = exp(scale(clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX), 0.5))
    return add(mu, mul(std, Tensor(eps)))


def kl_diag_gaussian(mu, log_var, axis=None):
    """KL( N(mu, diag exp(log_var)) || N(0, I) ).

    Summed over everything for ``axis=None``; ``axis=-1`` gives one value
    per row.
    """
    if mu.shape != log_var.shape:
        raise ShapeError("kl_diag_gaussian", mu.shape, log_var.shape)
    lv = clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX)
    inner = sub(add(lv, 1.0), add(square(mu), exp(lv)))
    return scale(sum_(inner, axis), -0.5)


def kl_diag_gaussian_np(mu, log_var):
    """Row-wise KL on plain arrays (inference path)."""
    lv = np.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX)
    return -0.5 * np.sum(1.0 + lv - mu * mu - np.exp(lv), axis=-1)


def logsumexp(values):
    """``log(sum(exp(values)))`` computed with a max shift."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ContractError("logsumexp of an empty sequence")
    m = v.max()
    if v.size == 1 or not np.isfinite(m):
        return float(m)
    return float(m + math.log(np.exp(v - m).sum()))


def logsumexp_rows(a):
    """Row-wise logsumexp of a 2-D array."""
    m = a.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=-1, keepdims=True)))[..., 0]


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One in-place Adam update of ``params`` (list of Tensors)."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("adam_step: params, grads and state are misaligned")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    inv_sqrt_c2 = 1.0 / np.sqrt(c2)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
        # in-place with one scratch buffer; this runs once per minibatch
        tmp = np.multiply(g, 1.0 - b1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp *= inv_sqrt_c2
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= state.lr / c1
        p.data -= tmp
    return params, state
