"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every value is a numpy float64 array wrapped in a Tensor node. Operations
record their parents and a gradient rule; ``backward`` walks the resulting
acyclic graph in reverse topological order. Reductions run in numpy's
row-major order, so identical inputs give bit-identical results.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf encountered while strict mode is enabled."""


_STRICT = False


def set_strict_mode(enabled: bool) -> None:
    """Globally enable/disable NaN/Inf checking on op inputs and gradients."""
    global _STRICT
    _STRICT = bool(enabled)


def strict_mode_enabled() -> bool:
    return _STRICT


class Tensor:
    """A node in the computation graph.

    ``data`` is always a float64 ndarray. ``op`` names the producing
    operation (None for leaves). ``grad`` is lazily allocated by
    ``backward`` and accumulates across calls until reset.
    """

    __slots__ = ("data", "grad", "op", "_parents", "_grad_fn")

    def __init__(self, data, op=None, parents=(), grad_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.op = op
        self._parents = tuple(parents)
        self._grad_fn = grad_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Detached copy of the values."""
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = self.op or "leaf"
        return f"Tensor(shape={self.data.shape}, op={tag})"

    # operator sugar; all arithmetic goes through the module-level ops
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_(self, exponent)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)


class Param:
    """A named, optionally trainable leaf tensor."""

    __slots__ = ("name", "tensor", "trainable")

    def __init__(self, name: str, values, trainable: bool = True):
        self.name = name
        self.tensor = values if isinstance(values, Tensor) else Tensor(values)
        self.trainable = trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.tensor.shape}, trainable={self.trainable})"


class ParamSet:
    """Ordered registry of Params with unique names."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, values, trainable: bool = True) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate param name {name!r}")
        p = Param(name, values, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def trainable(self):
        return [p for p in self._params.values() if p.trainable]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_finite(arrays, op):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite input to op {op!r} in strict mode")


def _node(data, op, parents, grad_fn) -> Tensor:
    if _STRICT:
        _check_finite([p.data for p in parents], op)
    return Tensor(data, op=op, parents=parents, grad_fn=grad_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / broadcasting ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    return _node(out, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None
    return _node(out, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    return _node(out, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from None
    return _node(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def pow_(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    out = a.data ** p
    # d/dx x^p = p * x^(p-1); safe because callers keep the base positive
    return _node(out, "pow", (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + e^x), stable for large |x|. Gradient is sigmoid(x)."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    x = a.data
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node(out, "softplus", (a,), lambda g: (g * sig,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Smooth tanh-form gelu; preferred over relu where gradient checks matter."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, "gelu", (a,), grad_fn)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.maximum(a.data, b.data)
    take_a = np.broadcast_to(a.data, out.shape) >= np.broadcast_to(b.data, out.shape)
    return _node(out, "maximum", (a, b),
                 lambda g: (_unbroadcast(g * take_a, a.shape),
                            _unbroadcast(g * ~take_a, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.minimum(a.data, b.data)
    take_a = np.broadcast_to(a.data, out.shape) <= np.broadcast_to(b.data, out.shape)
    return _node(out, "minimum", (a, b),
                 lambda g: (_unbroadcast(g * take_a, a.shape),
                            _unbroadcast(g * ~take_a, b.shape)))


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true with a constant."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} vs data {a.shape}")
    out = np.where(mask, value, a.data)
    return _node(out, "masked_fill", (a,), lambda g: (g * ~mask,))


# ---------------------------------------------------------------------------
# contraction / structural ops


def matmul(a, b) -> Tensor:
    """2D x 2D or batched 3D x 3D (equal leading dim) matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: batched dims {a.shape} @ {b.shape}")
    else:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        return (g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g)

    return _node(out, "matmul", (a, b), grad_fn)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _node(out, "softmax", (a,), grad_fn)


def layer_norm(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis`` (no affine)."""
    a = as_tensor(a)
    mean = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = centered * inv

    def grad_fn(g):
        gm = g.mean(axis=axis, keepdims=True)
        gym = (g * out).mean(axis=axis, keepdims=True)
        return ((g - gm - out * gym) * inv,)

    return _node(out, "layer_norm", (a,), grad_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _node(out, "concat", tuple(tensors), grad_fn)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = as_tensor(a)
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(f"slice: [{start}:{start + length}) out of range for axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index].copy()

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _node(out, "slice", (a,), grad_fn)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _node(out, "transpose", (a,), lambda g: (g.transpose(inverse),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from None
    return _node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def expand(a, shape) -> Tensor:
    """Broadcast to a larger shape; gradient sums over the expanded axes."""
    a = as_tensor(a)
    try:
        out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError:
        raise ShapeError(f"expand: {a.shape} -> {shape}") from None
    return _node(out, "expand", (a,), lambda g: (_unbroadcast(g, a.shape),))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _node(out, "sum", (a,), grad_fn)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.shape[axis]

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, a.shape).copy(),)

    return _node(out, "mean", (a,), grad_fn)


def take_rows(a, indices) -> Tensor:
    """Gather rows of a 2D tensor; duplicate indices accumulate on backward."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"take_rows: need 2D input, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx].copy()

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(out, "take_rows", (a,), grad_fn)


_OP_TABLE = {
    "add": lambda inputs, attrs: add(*inputs),
    "sub": lambda inputs, attrs: sub(*inputs),
    "mul": lambda inputs, attrs: mul(*inputs),
    "div": lambda inputs, attrs: div(*inputs),
    "neg": lambda inputs, attrs: neg(*inputs),
    "scale": lambda inputs, attrs: mul(inputs[0], attrs["factor"]),
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "exp": lambda inputs, attrs: exp(*inputs),
    "log": lambda inputs, attrs: log(*inputs),
    "pow": lambda inputs, attrs: pow_(inputs[0], attrs["exponent"]),
    "abs": lambda inputs, attrs: abs_(*inputs),
    "sigmoid": lambda inputs, attrs: sigmoid(*inputs),
    "softplus": lambda inputs, attrs: softplus(*inputs),
    "relu": lambda inputs, attrs: relu(*inputs),
    "gelu": lambda inputs, attrs: gelu(*inputs),
    "tanh": lambda inputs, attrs: tanh(*inputs),
    "maximum": lambda inputs, attrs: maximum(*inputs),
    "minimum": lambda inputs, attrs: minimum(*inputs),
    "masked_fill": lambda inputs, attrs: masked_fill(inputs[0], attrs["mask"], attrs["value"]),
    "softmax": lambda inputs, attrs: softmax(inputs[0], attrs.get("axis", -1)),
    "layer_norm": lambda inputs, attrs: layer_norm(inputs[0], attrs.get("axis", -1),
                                                   attrs.get("eps", 1e-12)),
    "concat": lambda inputs, attrs: concat(inputs, attrs.get("axis", 0)),
    "slice": lambda inputs, attrs: narrow(inputs[0], attrs["axis"], attrs["start"], attrs["length"]),
    "transpose": lambda inputs, attrs: transpose(inputs[0], attrs.get("axes")),
    "reshape": lambda inputs, attrs: reshape(inputs[0], attrs["shape"]),
    "expand": lambda inputs, attrs: expand(inputs[0], attrs["shape"]),
    "sum": lambda inputs, attrs: sum_(inputs[0], attrs.get("axis"), attrs.get("keepdims", False)),
    "mean": lambda inputs, attrs: mean_(inputs[0], attrs.get("axis"), attrs.get("keepdims", False)),
    "take_rows": lambda inputs, attrs: take_rows(inputs[0], attrs["indices"]),
}


def op_kinds():
    return sorted(_OP_TABLE.keys())


def forward_op(kind: str, inputs, attrs=None) -> Tensor:
    """Uniform dispatch by op kind; same tape recording as the direct API."""
    if kind not in _OP_TABLE:
        raise KeyError(f"unknown op kind {kind!r}; valid kinds: {op_kinds()}")
    return _OP_TABLE[kind]([as_tensor(x) for x in inputs], attrs or {})


# ---------------------------------------------------------------------------
# reverse sweep


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params=None) -> dict[str, np.ndarray]:
    """Propagate d(loss)/d(node) to every reachable node.

    ``loss`` must be scalar. Gradients accumulate into ``.grad`` (call
    ``zero_grad`` between steps). When ``params`` is given, returns a map
    from param name to its gradient; params unreachable from ``loss`` get
    exact zeros.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    order = _topo_order(loss)
    local: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = local.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._grad_fn is None:
            continue
        parent_grads = node._grad_fn(g)
        if _STRICT:
            for pg in parent_grads:
                if pg is not None and not np.all(np.isfinite(pg)):
                    raise NonFiniteError(f"non-finite gradient out of op {node.op!r}")
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != parent.data.shape:
                raise ShapeError(
                    f"gradient shape {pg.shape} vs parent {parent.data.shape} in op {node.op!r}")
            key = id(parent)
            if key in local:
                local[key] = local[key] + pg
            else:
                local[key] = pg
    if params is None:
        return {}
    out = {}
    for p in params:
        if p.trainable:
            out[p.name] = (p.tensor.grad.copy() if p.tensor.grad is not None
                           else np.zeros_like(p.tensor.data))
    return out


def grad_check(f, params, eps: float = 1e-5, max_coords_per_param=None, seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` must rebuild its graph from the current param values on every
    call and return a scalar Tensor. By default every coordinate of every
    trainable param is probed; ``max_coords_per_param`` caps the probes
    per param (deterministic sample) for large models. Relative error is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    params = [p for p in params if p.trainable]
    for p in params:
        p.tensor.grad = None
    loss = f()
    if not np.isfinite(loss.data):
        raise NonFiniteError("grad_check: non-finite loss at the base point")
    analytic = backward(loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.tensor.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = np.sort(rng.choice(n, size=max_coords_per_param, replace=False))
        else:
            coords = range(n)
        ana_flat = analytic[p.name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"grad_check: non-finite probe at {p.name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            ana = ana_flat[i]
            rel = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
            if rel > worst:
                worst = rel
    return worst
