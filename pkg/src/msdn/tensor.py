"""Dense tensors with define-by-run reverse-mode differentiation.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient onto input gradients. Nodes carry a
monotone creation id, so replaying closures in decreasing id order is a
valid reverse topological order of the recorded graph.
"""
from __future__ import annotations

import contextlib
import itertools
import os
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, FormatError

_DTYPES = {"f32": np.float32, "f64": np.float64}
# an unknown value falls back to f32 here; the CLI reports it as a config error
_default_dtype = _DTYPES.get(os.environ.get("MSDN_PRECISION", "f32"), np.float32)
_ids = itertools.count()
_grad_enabled = True


def get_default_dtype():
    return _default_dtype


def set_default_dtype(name):
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


@contextlib.contextmanager
def precision(name):
    """Temporarily switch the dtype used for new tensors and parameters."""
    old = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        globals()["_default_dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them for differentiation."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "op", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _op=""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                                 and data.dtype in (np.float32, np.float64)
                                                 else _default_dtype))
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self._id = next(_ids)
        self.op = _op

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- graph construction -----------------------------------------------
    def _make(self, data, parents, backward, op):
        parents = tuple(parents)
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out = Tensor(data, dtype=data.dtype, requires_grad=needs, _parents=parents if needs else (), _op=op)
        if needs:
            out._backward = backward
        return out

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            stack.extend(node._parents)
        grads = {self._id: np.ones_like(self.data)}
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b):
    """Singleton-dim broadcasting only; scalars broadcast to anything."""
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) != len(b):
        raise DimensionError(f"shapes {a} and {b} are not broadcastable")
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise DimensionError(f"shapes {a} and {b} are not broadcastable")
    return tuple(out)


def _binary(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    shape = _broadcast_shape(a.shape, b.shape)
    return a, b, shape


def add(a, b):
    a, b, _ = _binary(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return a._make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b, _ = _binary(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return a._make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    """Hadamard product with singleton broadcasting (``scale`` when b is a scalar)."""
    a, b, _ = _binary(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return a._make(a.data * b.data, (a, b), backward, "mul")


hadamard = mul


def scale(a, k):
    return mul(a, float(k))


def div(a, b):
    a, b, _ = _binary(a, b)

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return a._make(a.data / b.data, (a, b), backward, "div")


def power(a, exponent):
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return a._make(a.data ** exponent, (a,), backward, "pow")


def exp(a):
    out = np.exp(a.data)
    return a._make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return a._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def absolute(a):
    return a._make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clip(a, lo, hi):
    inside = (a.data >= lo) & (a.data <= hi)
    return a._make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def sigmoid(a):
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return a._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    mask = a.data > 0
    return a._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def activation(op, x):
    if op == "sigmoid":
        return sigmoid(x)
    if op == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {op!r}")


def elementwise(op, a, b):
    fns = {"add": add, "sub": sub, "hadamard": mul, "scale": scale}
    if op not in fns:
        raise ValueError(f"unknown elementwise op {op!r}")
    return fns[op](a, b)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return a._make(np.asarray(out, dtype=a.dtype), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def channel_softmax(a, axis=1):
    """Softmax over the channel axis of an N,C,H,W tensor."""
    (axis,) = _norm_axes(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return a._make(out, (a,), backward, "softmax")


def reductions(op, x, axes=None):
    if op == "sum":
        return tsum(x, axes)
    if op == "mean":
        return mean(x, axes)
    if op == "channel_softmax":
        return channel_softmax(x, 1 if axes is None else axes)
    raise ValueError(f"unknown reduction {op!r}")


def reshape(a, shape):
    return a._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes):
    inv = np.argsort(axes)
    return a._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def take(a, index):
    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return a._make(np.ascontiguousarray(a.data[index]), (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis=1):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return tensors[0]._make(data, tensors, backward, "concat")


def where(cond, a, b):
    a, b, _ = _binary(a, b)
    cond = np.asarray(cond, dtype=bool)

    def backward(g):
        return _unbroadcast(g * cond, a.shape), _unbroadcast(g * ~cond, b.shape)

    return a._make(np.where(cond, a.data, b.data), (a, b), backward, "where")


def stack_scalars(items: Iterable[Tensor]):
    return concat([t.reshape(1) for t in items], axis=0)


# -- gradient checking ------------------------------------------------------

def gradcheck(f: Callable[..., Tensor], *inputs, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must return a scalar tensor. Inputs are promoted to float64 leaves;
    the error for each element is ``|a - n| / max(1, |a|, |n|)``.
    """
    with precision("f64"):
        leaves = [Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
                         requires_grad=True) for x in inputs]
        out = f(*leaves)
        if out.data.size != 1:
            raise ContractError(f"gradcheck needs a scalar-valued function, got shape {out.shape}")
        out.backward()
        worst = 0.0
        for leaf in leaves:
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            flat = leaf.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = flat[i]
                hi = f(*leaves).item()
                flat[i] = orig - eps
                down = flat[i]
                lo = f(*leaves).item()
                flat[i] = orig
                # divide by the representable step actually taken
                numeric = (hi - lo) / (up - down)
                a = analytic.reshape(-1)[i]
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
    return worst


# -- binary serialization -------------------------------------------------

MAGIC = b"MSDT"
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_FROM_CODE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def tensor_to_bytes(x) -> bytes:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    header = MAGIC + struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def tensor_from_bytes(buf: bytes, offset=0):
    """Decode one tensor starting at ``offset``; returns ``(array, next_offset)``."""
    start = offset
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError("bad tensor magic", start)
    if len(buf) < offset + 6:
        raise FormatError("truncated tensor header", start)
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    if code not in _FROM_CODE:
        raise FormatError(f"unknown dtype code {code}", offset + 4)
    offset += 6
    if len(buf) < offset + 4 * rank:
        raise FormatError("truncated tensor dims", offset)
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    dt = _FROM_CODE[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) < offset + nbytes:
        raise FormatError(f"truncated tensor payload: need {nbytes} bytes", offset)
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=offset)
    arr = arr.reshape(dims).astype(dt.newbyteorder("="))
    return arr, offset + nbytes


def save_tensor(path, x):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(x))


def load_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor", end)
    return arr
