"""Reverse-mode gradients over a small, fixed vocabulary of numpy operations.

Every operation returns a :class:`Tensor`. When at least one operand requires
a gradient the result is recorded as a tape node: it remembers its parents,
a closure mapping the output adjoint to parent adjoints, and a monotonically
increasing sequence number. :func:`backward` replays the reachable nodes in
reverse creation order, which is a valid reverse topological order because a
node is always created after its operands.

Nodes hold no global state, so independent forward passes on different
threads build independent tapes while sharing read-only parameters.
"""

from __future__ import annotations

import contextlib
import itertools
import struct
import threading
from collections.abc import Iterable, Iterator, Mapping

import numpy as np

DTYPE = np.float64
MASK_SENTINEL = -1e9

_seq = itertools.count()
_local = threading.local()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording on this thread."""
    prev = getattr(_local, "off", False)
    _local.off = True
    try:
        yield
    finally:
        _local.off = prev


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's rule."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class Tensor:
    """Dense float64 array that may take part in gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(()))  # raises for non-scalars

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by constant scalars")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    if not getattr(_local, "off", False) and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form stays finite for large |x|
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _node(xd * xd, (x,), lambda g: (2.0 * g * xd,))


# --- contractions and reductions --------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., m, k) and ``b`` of shape (k, p) or (..., k, p)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    if b.ndim == 2:
        def backward(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        try:
            np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2])
        except ValueError:
            raise ShapeError("matmul", a.shape, b.shape) from None

        def backward(g):
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
            return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), backward)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


# --- shape manipulation -----------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _node(y, (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, index) -> Tensor:
    """Basic slicing and integer-array gathering."""
    shape = x.shape
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        if fancy:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _node(np.asarray(x.data[index]), (x,), backward)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(y, tensors, backward)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        y = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("stack", *(t.shape for t in tensors)) from None

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(y, tensors, backward)


# --- normalisation ----------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _node(y, (x,), backward)


# --- reverse pass -----------------------------------------------------------


def backward(loss: Tensor, seed_grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Leaves accumulate across calls; intermediate adjoints live only for the
    duration of the call.
    """
    if seed_grad is None:
        if loss.size != 1:
            raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
        seed_grad = np.ones(loss.shape, dtype=DTYPE)
    if not loss.requires_grad:
        return

    nodes: dict[int, Tensor] = {}
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        for p in t._parents:
            if p.requires_grad and id(p) not in nodes:
                stack_.append(p)

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed_grad, dtype=DTYPE)}
    for t in sorted(nodes.values(), key=lambda t: t._seq, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, gp in zip(t._parents, t._backward(g)):
            if not p.requires_grad:
                continue
            k = id(p)
            prev = grads.get(k)
            grads[k] = gp if prev is None else prev + gp


# --- parameters -------------------------------------------------------------


class ParamStore(Mapping):
    """Ordered, fixed collection of named trainable tensors."""

    def __init__(self, shapes: Mapping[str, tuple[int, ...]] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, shape in (shapes or {}).items():
            self.add(name, np.zeros(shape))

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def num_values(self) -> int:
        return int(np.sum([t.size for t in self._params.values()]))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Adjoints by name; parameters that received none report zeros."""
        return {
            k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in self._params.items()
        }

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._params.items()}

    def copy(self) -> ParamStore:
        out = ParamStore()
        for k, t in self._params.items():
            out.add(k, t.data.copy())
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        if list(arrays) != list(self._params):
            raise KeyError("parameter names differ from this store")
        for k, a in arrays.items():
            a = np.asarray(a, dtype=DTYPE)
            if a.shape != self._params[k].shape:
                raise ShapeError(f"load {k}", self._params[k].shape, a.shape)
            self._params[k].data = a.copy()


def init_uniform(store: ParamStore, lo: float = -0.08, hi: float = 0.08, seed=0) -> ParamStore:
    """Fill every parameter, in store order, with i.i.d. U[lo, hi] draws."""
    if not lo < hi:
        raise ValueError(f"init_uniform: need lo < hi, got [{lo}, {hi}]")
    rng = np.random.default_rng(seed)
    for t in store.values():
        t.data = rng.uniform(lo, hi, size=t.shape)
    return store


def global_norm(store: ParamStore) -> float:
    total = 0.0
    for t in store.values():
        if t.grad is not None:
            total += float(np.sum(t.grad * t.grad))
    return float(np.sqrt(total))


def clip_global_norm(store: ParamStore, max_norm: float) -> float:
    """Rescale adjoints so their joint L2 norm is at most ``max_norm``; return the scale."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(store)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for t in store.values():
        if t.grad is not None:
            t.grad = t.grad * scale
    return scale


class Adam:
    """Adam with bias correction and a staircase learning-rate decay.

    The effective rate after ``step`` completed updates is
    ``lr * decay_factor ** (step // decay_steps)``.
    """

    def __init__(
        self,
        store: ParamStore,
        lr: float = 1e-3,
        decay_steps: int = 5000,
        decay_factor: float = 0.96,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.store = store
        self.lr = lr
        self.decay_steps = decay_steps
        self.decay_factor = decay_factor
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in store.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in store.items()}

    def effective_lr(self, step: int | None = None) -> float:
        step = self.step_count if step is None else step
        return self.lr * self.decay_factor ** (step // self.decay_steps)

    def step(self) -> None:
        lr = self.effective_lr()
        t = self.step_count + 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for k, p in self.store.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = b1 * self.m[k] + (1.0 - b1) * g
            v = b2 * self.v[k] + (1.0 - b2) * g * g
            self.m[k], self.v[k] = m, v
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.step_count = t

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.store:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        out["step"] = np.array([self.step_count], dtype=DTYPE)
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k in self.store:
            self.m[k] = np.array(arrays[f"m/{k}"], dtype=DTYPE)
            self.v[k] = np.array(arrays[f"v/{k}"], dtype=DTYPE)
        self.step_count = int(arrays["step"][0])


# --- checkpoint file --------------------------------------------------------

CHECKPOINT_MAGIC = b"NCOPTCKP"
CHECKPOINT_VERSION = 1


def write_arrays(fh, arrays: Mapping[str, np.ndarray]) -> None:
    """Serialise named arrays: count, then (name, ndim, shape, little-endian f8 values)."""
    fh.write(struct.pack("<I", len(arrays)))
    for name, a in arrays.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(a, dtype="<f8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}q", *a.shape))
        fh.write(a.tobytes())


def read_arrays(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", fh.read(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", fh.read(4))
        name = fh.read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).astype(DTYPE)
    return out
