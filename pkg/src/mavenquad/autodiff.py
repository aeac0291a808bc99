"""Reverse-mode automatic differentiation over float64 numpy arrays.

Small tape-based engine: each op records its parents and vector-Jacobian
products, backward() runs an iterative topological sweep. Only the ops the
training losses need are implemented.
"""

import numpy as np

__all__ = ["Tensor", "concat", "where", "minimum", "maximum"]


def _unbroadcast(g, shape):
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjps = ()

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _node(data, parents, vjps):
        out = Tensor(data)
        tracked = [(p, v) for p, v in zip(parents, vjps) if p.requires_grad]
        if tracked:
            out.requires_grad = True
            out._parents = tuple(p for p, _ in tracked)
            out._vjps = tuple(v for _, v in tracked)
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        a, b = self, _lift(other)
        return Tensor._node(a.data + b.data, (a, b),
                            (lambda g: _unbroadcast(g, a.data.shape),
                             lambda g: _unbroadcast(g, b.data.shape)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._node(-self.data, (self,), (lambda g: -g,))

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        a, b = self, _lift(other)
        return Tensor._node(a.data * b.data, (a, b),
                            (lambda g: _unbroadcast(g * b.data, a.data.shape),
                             lambda g: _unbroadcast(g * a.data, b.data.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, _lift(other)
        return Tensor._node(
            a.data / b.data, (a, b),
            (lambda g: _unbroadcast(g / b.data, a.data.shape),
             lambda g: _unbroadcast(-g * a.data / (b.data * b.data),
                                    b.data.shape)))

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __pow__(self, k):
        if not np.isscalar(k):
            raise TypeError("only scalar exponents are supported")
        a = self
        return Tensor._node(a.data ** k, (a,),
                            (lambda g: g * k * a.data ** (k - 1),))

    def __matmul__(self, other):
        a, b = self, _lift(other)
        return Tensor._node(a.data @ b.data, (a, b),
                            (lambda g: g @ b.data.T,
                             lambda g: a.data.T @ g))

    def __getitem__(self, idx):
        a = self

        def vjp(g):
            out = np.zeros_like(a.data)
            np.add.at(out, idx, g)
            return out

        return Tensor._node(a.data[idx], (a,), (vjp,))

    # -- elementwise functions ----------------------------------------------

    def exp(self):
        y = np.exp(self.data)
        return Tensor._node(y, (self,), (lambda g: g * y,))

    def log(self):
        a = self
        return Tensor._node(np.log(a.data), (a,), (lambda g: g / a.data,))

    def sqrt(self):
        y = np.sqrt(self.data)
        return Tensor._node(y, (self,), (lambda g: g * 0.5 / y,))

    def tanh(self):
        y = np.tanh(self.data)
        return Tensor._node(y, (self,), (lambda g: g * (1.0 - y * y),))

    def relu(self):
        a = self
        return Tensor._node(np.maximum(a.data, 0.0), (a,),
                            (lambda g: g * (a.data > 0.0),))

    def softplus(self):
        # log(1 + e^x), overflow-safe; derivative is the sigmoid
        a = self
        y = np.logaddexp(0.0, a.data)
        sig = np.exp(-np.logaddexp(0.0, -a.data))
        return Tensor._node(y, (a,), (lambda g: g * sig,))

    def abs(self):
        a = self
        return Tensor._node(np.abs(a.data), (a,),
                            (lambda g: g * np.sign(a.data),))

    def clamp(self, lo, hi):
        a = self
        inside = (a.data >= lo) & (a.data <= hi)
        return Tensor._node(np.clip(a.data, lo, hi), (a,),
                            (lambda g: g * inside,))

    # -- reductions and shape ops ---------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        y = a.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, a.data.shape).copy()

        return Tensor._node(y, (a,), (vjp,))

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        a = self
        return Tensor._node(a.data.reshape(*shape), (a,),
                            (lambda g: g.reshape(a.data.shape),))

    # -- backward pass --------------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a "
                                 "scalar output")
            grad = np.ones_like(self.data)
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite value reached backward()")

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                topo.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.asarray(grad, dtype=np.float64)
        for t in reversed(topo):
            if t.grad is None:
                continue
            for p, vjp in zip(t._parents, t._vjps):
                g = vjp(t.grad)
                p.grad = g if p.grad is None else p.grad + g


def concat(tensors, axis: int = 0) -> Tensor:
    parts = [_lift(t) for t in tensors]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * parts[i].data.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return Tensor._node(np.concatenate([p.data for p in parts], axis=axis),
                        tuple(parts),
                        tuple(make_vjp(i) for i in range(len(parts))))


def where(cond, a, b) -> Tensor:
    """Elementwise select; cond is a plain boolean array, not differentiated."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _lift(a), _lift(b)
    return Tensor._node(
        np.where(cond, a.data, b.data), (a, b),
        (lambda g: _unbroadcast(g * cond, a.data.shape),
         lambda g: _unbroadcast(g * ~cond, b.data.shape)))


def minimum(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return where(a.data <= b.data, a, b)


def maximum(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return where(a.data >= b.data, a, b)
