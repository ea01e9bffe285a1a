"""Dense float64 tensors with a reverse-mode autodiff graph."""

from __future__ import annotations

import threading

import numpy as np

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class no_grad:
    """Context manager that disables graph construction on this thread."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _state.enabled = False

    def __exit__(self, *exc):
        _state.enabled = self._prev


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of NumPy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _is_basic_index(idx):
    """True when ``idx`` cannot select an element twice."""
    if isinstance(idx, np.ndarray) and idx.dtype == bool:
        return True
    items = idx if isinstance(idx, tuple) else (idx,)
    for it in items:
        if it is None or it is Ellipsis or isinstance(it, (slice, int, np.integer)):
            continue
        return False
    return True


class Tensor:
    """An n-dimensional float64 array that can take part in backward passes.

    Leaves created with ``requires_grad=True`` accumulate into ``.grad`` when
    :meth:`backward` is called on a scalar that depends on them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = None
        self._backward = None
        self.op = None

    # ------------------------------------------------------------ basics

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # ------------------------------------------------------------ backward

    def backward(self):
        """Populate ``.grad`` on every requires-grad leaf reachable from self."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._parents is not None:
                for p in node._parents:
                    if p.requires_grad and id(p) not in visited:
                        stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg

    # ------------------------------------------------------------ arithmetic

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return make_node(a + b, (self, other), bw, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return make_node(a - b, (self, other), bw, "sub")

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def bw(g):
            ga = _unbroadcast(g * b, a.shape) if self.requires_grad else None
            gb = _unbroadcast(g * a, b.shape) if other.requires_grad else None
            return ga, gb

        return make_node(a * b, (self, other), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def bw(g):
            ga = _unbroadcast(g / b, a.shape) if self.requires_grad else None
            gb = _unbroadcast(-g * a / (b * b), b.shape) if other.requires_grad else None
            return ga, gb

        return make_node(a / b, (self, other), bw, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return make_node(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self.data
        return make_node(a ** p, (self,), lambda g: (g * p * a ** (p - 1),), "pow")

    def __matmul__(self, other):
        from .ops import matmul

        return matmul(self, other)

    def __getitem__(self, idx):
        if isinstance(idx, Tensor):
            idx = idx.data
        a = self.data
        basic = _is_basic_index(idx)

        def bw(g):
            out = np.zeros_like(a)
            if basic:
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return (out,)

        return make_node(a[idx], (self,), bw, "index")

    # ------------------------------------------------------------ shape ops

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return make_node(self.data.reshape(shape), (self,),
                         lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return make_node(self.data.transpose(axes), (self,),
                         lambda g: (g.transpose(inv),), "transpose")

    def swapaxes(self, a1, a2):
        axes = list(range(self.ndim))
        axes[a1], axes[a2] = axes[a2], axes[a1]
        return self.transpose(axes)

    @property
    def T(self):
        return self.transpose()

    # ------------------------------------------------------------ reductions

    def sum(self, axis=None, keepdims=False):
        src = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return make_node(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw, "sum")

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, backward, op):
    """Wrap ``data`` as the output of an op, recording the graph if needed.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 \
        else np.asarray(data, dtype=np.float64)
    out.grad = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = None
        out._backward = None
    return out
