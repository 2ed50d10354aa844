"""Reverse-mode autodiff over dense float64 numpy arrays.

A Tensor wraps an ndarray and remembers which op produced it; calling
``backward`` on a scalar root fills ``.grad`` on every node reachable through
the graph. The graph is a dynamic tape rebuilt on every forward pass, which
keeps nested training loops simple: nothing is retained between steps except
the parameter tensors themselves.

Ops only build graph links when some operand requires gradients, so the same
functions double as a plain numpy forward path during inference.
"""
from __future__ import annotations

import struct

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for an op (also raised for a non-scalar
    backward root)."""

    def __init__(self, op, shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: operand shapes {self.shapes} do not conform"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ZeroNormError(ValueError):
    """A norm-dependent op received a zero-norm operand."""

    def __init__(self, op, side):
        self.op = op
        self.side = side
        super().__init__(f"{op}: {side} operand has zero norm")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad[...] = 0.0

    def detach(self):
        """A graph-free view of this value (shares the data array)."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = np.zeros_like(self.data)
        t.requires_grad = False
        t.parents = ()
        t._backward = None
        t.op = "detach"
        return t

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    # operator sugar; all dispatch to the module-level ops
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, op, parents, backward):
    """Create an op output; keeps graph links only if some parent needs them."""
    req = any(p.requires_grad for p in parents)
    t = Tensor(data, requires_grad=req, op=op)
    if req:
        t.parents = tuple(parents)
        t._backward = backward
    return t


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape]) from None


def backward(root):
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable node.

    Requires a scalar root; repeated calls without zeroing accumulate.
    """
    root = as_tensor(root)
    if root.size != 1:
        raise ShapeError("backward", [root.shape], "root must be scalar")
    # iterative topological order (graphs can be thousands of nodes deep)
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    root.grad = root.grad + np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out_data = a.data + b.data

    def bwd(g):
        a.grad += _unbroadcast(g, a.data.shape)
        b.grad += _unbroadcast(g, b.data.shape)

    return _node(out_data, "add", (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out_data = a.data - b.data

    def bwd(g):
        a.grad += _unbroadcast(g, a.data.shape)
        b.grad -= _unbroadcast(g, b.data.shape)

    return _node(out_data, "sub", (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out_data = a.data * b.data

    def bwd(g):
        a.grad += _unbroadcast(g * b.data, a.data.shape)
        b.grad += _unbroadcast(g * a.data, b.data.shape)

    return _node(out_data, "mul", (a, b), bwd)


def neg(a):
    a = as_tensor(a)

    def bwd(g):
        a.grad -= g

    return _node(-a.data, "neg", (a,), bwd)


def matmul(a, b):
    """Matrix product for 2-D x 2-D, 1-D x 2-D and 2-D x 1-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError("matmul", [a.shape, b.shape], "rank must be 1 or 2")
    ka = a.shape[-1]
    kb = b.shape[0]
    if ka != kb:
        raise ShapeError("matmul", [a.shape, b.shape], "inner dims differ")
    out_data = a.data @ b.data

    def bwd(g):
        if a.ndim == 2 and b.ndim == 2:
            a.grad += g @ b.data.T
            b.grad += a.data.T @ g
        elif a.ndim == 1 and b.ndim == 2:
            a.grad += b.data @ g
            b.grad += np.outer(a.data, g)
        elif a.ndim == 2 and b.ndim == 1:
            a.grad += np.outer(g, b.data)
            b.grad += a.data.T @ g
        else:  # 1-D x 1-D
            a.grad += g * b.data
            b.grad += g * a.data

    return _node(out_data, "matmul", (a, b), bwd)


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", [a.shape], "rank must be 2")

    def bwd(g):
        a.grad += g.T

    return _node(a.data.T, "transpose", (a,), bwd)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def bwd(g):
        a.grad += g * (1.0 - out_data * out_data)

    return _node(out_data, "tanh", (a,), bwd)


def relu(a):
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        a.grad += g * (a.data > 0.0)

    return _node(out_data, "relu", (a,), bwd)


def sigmoid(a):
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-np.clip(a.data, -60.0, 60.0)))

    def bwd(g):
        a.grad += g * out_data * (1.0 - out_data)

    return _node(out_data, "sigmoid", (a,), bwd)


# ---------------------------------------------------------------------------
# softmax family (log-space, overflow-safe)
# ---------------------------------------------------------------------------


def softmax(a):
    """Row-wise softmax for 2-D input, full softmax for 1-D."""
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot_ = (g * out_data).sum(axis=-1, keepdims=True)
        a.grad += (g - dot_) * out_data

    return _node(out_data, "softmax", (a,), bwd)


def log_softmax(a):
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    out_data = x - lse

    def bwd(g):
        p = np.exp(out_data)
        a.grad += g - p * g.sum(axis=-1, keepdims=True)

    return _node(out_data, "log_softmax", (a,), bwd)


# ---------------------------------------------------------------------------
# gather / reduce
# ---------------------------------------------------------------------------


def gather_rows(table, ids):
    """Select rows of a 2-D table by integer index (embedding lookup)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or ids.ndim != 1:
        raise ShapeError("gather_rows", [table.shape, ids.shape])
    out_data = table.data[ids]

    def bwd(g):
        np.add.at(table.grad, ids, g)

    return _node(out_data, "gather_rows", (table,), bwd)


def take_per_row(a, idx):
    """Pick one column per row: out[i] = a[i, idx[i]]."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError("take_per_row", [a.shape, idx.shape])
    rows = np.arange(a.shape[0])
    out_data = a.data[rows, idx]

    def bwd(g):
        np.add.at(a.grad, (rows, idx), g)

    return _node(out_data, "take_per_row", (a,), bwd)


def reduce_sum(a):
    a = as_tensor(a)

    def bwd(g):
        a.grad += g  # g is scalar, broadcasts

    return _node(a.data.sum(), "reduce_sum", (a,), bwd)


def reduce_mean(a):
    a = as_tensor(a)
    n = a.size

    def bwd(g):
        a.grad += g / n

    return _node(a.data.mean(), "reduce_mean", (a,), bwd)


def dot(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError("dot", [a.shape, b.shape])
    out_data = a.data @ b.data

    def bwd(g):
        a.grad += g * b.data
        b.grad += g * a.data

    return _node(out_data, "dot", (a, b), bwd)


def l2_norm(a):
    """Euclidean norm of a 1-D vector. Subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    if a.ndim != 1:
        raise ShapeError("l2_norm", [a.shape])
    n = float(np.linalg.norm(a.data))

    def bwd(g):
        if n > 0.0:
            a.grad += g * a.data / n

    return _node(n, "l2_norm", (a,), bwd)


def cosine_distance(a, b):
    """1 - a.b / (|a| |b|) for 1-D vectors; raises on a zero-norm operand."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError("cosine_distance", [a.shape, b.shape])
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0:
        raise ZeroNormError("cosine_distance", "left")
    if nb == 0.0:
        raise ZeroNormError("cosine_distance", "right")
    ab = float(a.data @ b.data)
    out_data = 1.0 - ab / (na * nb)

    def bwd(g):
        a.grad += g * (-b.data / (na * nb) + ab * a.data / (na**3 * nb))
        b.grad += g * (-a.data / (na * nb) + ab * b.data / (na * nb**3))

    return _node(out_data, "cosine_distance", (a, b), bwd)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under row logits."""
    logits = as_tensor(logits)
    x = logits.data if logits.ndim == 2 else logits.data[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (x.shape[0],):
        raise ShapeError("cross_entropy", [logits.shape, labels.shape])
    m = x.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True)))[:, 0]
    rows = np.arange(x.shape[0])
    out_data = (lse - x[rows, labels]).mean()

    def bwd(g):
        p = np.exp(x - lse[:, None])
        p[rows, labels] -= 1.0
        d = p * (g / x.shape[0])
        logits.grad += d if logits.ndim == 2 else d[0]

    return _node(out_data, "cross_entropy", (logits,), bwd)


def zero_grads(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, count, then per tensor
# (name length, name, rank, dims, little-endian f64 payload)
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"TDCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params):
    """Write named parameter arrays as a flat binary blob."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(params)))
        for name in sorted(params):
            arr = params[name]
            data = np.ascontiguousarray(
                arr.data if isinstance(arr, Tensor) else arr, dtype="<f8"
            )
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back as a dict of float64 arrays."""
    with open(path, "rb") as fh:
        magic, version, count = struct.unpack("<4sII", fh.read(12))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a parameter checkpoint: bad magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            payload = fh.read(8 * n)
            arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
            params[name] = arr
        return params
