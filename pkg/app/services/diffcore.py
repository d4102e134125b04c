# ==============================================================================
# Minimal dense-tensor engine with reverse-mode automatic differentiation.
# Every trainable part of the registration network is built from the ops in
# this module. Values are float64 numpy arrays; each op records its parents
# and a closure mapping the output gradient to parent gradients.
# ==============================================================================

import logging

import numpy as np
from scipy.special import expit, softmax as _softmax

from app.services.errors import GraphError, NonFiniteError, ShapeMismatchError

DTYPE = np.float64


class Tensor:
    """A float64 array plus the bookkeeping needed for backward."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = parents
        self._backward = backward
        self._consumed = False

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
    def is_leaf(self):
        return self._backward is None

    def item(self):
        if self.data.size != 1:
            raise GraphError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulates d(self)/d(leaf) into every reachable leaf's .grad."""
        if self._consumed:
            raise GraphError("backward called twice on one graph; run the forward pass again")
        graph = Graph(self)
        for leaf, g in graph.gradients().values():
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self._consumed = True

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"


class Graph:
    """Topologically ordered record of one forward evaluation ending at `root`."""

    def __init__(self, root):
        self.root = root
        self.nodes = _topological_order(root)

    def gradients(self):
        """Returns {id(leaf): (leaf, dRoot/dLeaf)} for every requires-grad leaf."""
        if self.root.data.ndim != 0:
            raise GraphError(f"backward needs a scalar loss, got shape {self.root.shape}")
        pending = {id(self.root): np.ones((), dtype=DTYPE)}
        leaf_grads = {}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    leaf_grads[id(node)] = (node, g)
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad
        return leaf_grads


def _topological_order(root):
    # iterative post-order DFS; parents always precede children
    order, visited = [], set()
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def grad(loss, leaves):
    """Gradients of a scalar loss w.r.t. `leaves` without touching any .grad buffer."""
    found = Graph(loss).gradients()
    result = []
    for leaf in leaves:
        entry = found.get(id(leaf))
        result.append(entry[1].copy() if entry is not None else np.zeros_like(leaf.data))
    return result


# --- construction helpers ---

def tensor(values, requires_grad=False):
    data = np.array(values, dtype=DTYPE)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("tensor: non-finite input values")
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return tensor(value)


def zeros(shape):
    return Tensor(np.zeros(shape, dtype=DTYPE))


def _make(op, data, parents, backward):
    data = np.asarray(data, dtype=DTYPE)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite values in forward output")
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=tuple(parents), backward=backward)
    return Tensor(data, op=op)


# --- elementwise ---

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError("add", a.shape, b.shape)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError("sub", a.shape, b.shape)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError("mul", a.shape, b.shape)
    return _make("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, s):
    """Multiplies by a python scalar or a 0-d tensor (the only broadcast allowed)."""
    a = as_tensor(a)
    if isinstance(s, Tensor):
        if s.ndim != 0:
            raise ShapeMismatchError("scale", a.shape, s.shape)
        return _make("scale", a.data * s.data, (a, s),
                     lambda g: (g * s.data, np.sum(g * a.data)))
    s = float(s)
    return _make("scale", a.data * s, (a,), lambda g: (g * s,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    y = expit(a.data)
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a):
    a = as_tensor(a)
    return _make("softplus", np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),))


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def softmax(a):
    """Softmax along the last axis (scipy subtracts the row max first)."""
    a = as_tensor(a)
    y = _softmax(a.data, axis=-1)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make("softmax", y, (a,), backward)


# --- linear algebra ---

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def backward(g):
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if A.ndim == 2:
            return np.outer(g, B), A.T @ g
        if B.ndim == 2:
            return B @ g, np.outer(A, g)
        return g * B, g * A

    return _make("matmul", A @ B, (a, b), backward)


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatchError("transpose", a.shape)
    return _make("transpose", a.data.T, (a,), lambda g: (g.T,))


def linear(x, weight, bias):
    """x @ weight + bias with the bias tiled explicitly over rows."""
    out = matmul(x, weight)
    if out.ndim == 2:
        return add(out, tile_rows(bias, out.shape[0]))
    return add(out, bias)


# --- reductions ---

def reduce_sum(a, axis=None):
    a = as_tensor(a)
    if axis is None:
        return _make("sum", np.sum(a.data), (a,), lambda g: (np.full(a.shape, g, dtype=DTYPE),))
    axis = axis % a.ndim

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make("sum", np.sum(a.data, axis=axis), (a,), backward)


def mean(a):
    a = as_tensor(a)
    n = a.data.size
    return _make("mean", np.mean(a.data), (a,), lambda g: (np.full(a.shape, g / n, dtype=DTYPE),))


def max_reduce(a, axis):
    """Max along `axis`; returns (values, argmax). Ties resolve to the lowest index."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    picked = np.expand_dims(idx, axis)
    values = np.take_along_axis(a.data, picked, axis=axis).squeeze(axis)

    def backward(g):
        out = np.zeros(a.shape, dtype=DTYPE)
        np.put_along_axis(out, picked, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _make("max", values, (a,), backward), idx


# --- shape / indexing ---

def concat(tensors, axis=-1):
    """Concatenation along the last axis."""
    tensors = [as_tensor(t) for t in tensors]
    head = tensors[0]
    for t in tensors[1:]:
        if t.ndim != head.ndim or t.shape[:-1] != head.shape[:-1]:
            raise ShapeMismatchError("concat", head.shape, t.shape)
    if axis not in (-1, head.ndim - 1):
        raise ShapeMismatchError("concat", head.shape)
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=-1)
    return _make("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=-1)))


def stack(tensors):
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeMismatchError("stack", tensors[0].shape, t.shape)
    out = np.stack([t.data for t in tensors], axis=0)
    return _make("stack", out, tensors, lambda g: tuple(g[i] for i in range(len(tensors))))


def take_rows(a, indices):
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g):
        out = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _make("take", a.data[idx], (a,), backward)


def scatter_rows(a, indices, n):
    """Places the rows of `a` at `indices` of an n-row zero tensor."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != (a.shape[0],) or len(np.unique(idx)) != len(idx) or (len(idx) and idx.max() >= n):
        raise ShapeMismatchError("scatter", a.shape, (n,) + a.shape[1:])
    out = np.zeros((n,) + a.shape[1:], dtype=DTYPE)
    out[idx] = a.data
    return _make("scatter", out, (a,), lambda g: (g[idx],))


def tile_rows(v, n):
    v = as_tensor(v)
    if v.ndim != 1:
        raise ShapeMismatchError("tile_rows", v.shape)
    return _make("tile", np.tile(v.data, (n, 1)), (v,), lambda g: (g.sum(axis=0),))


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError("reshape", a.shape, shape) from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


# --- geometry primitives ---

def normalize(v):
    """v / ||v|| for a 1-d tensor."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise ShapeMismatchError("normalize", v.shape)
    norm = float(np.linalg.norm(v.data))
    if norm == 0.0:
        raise NonFiniteError("normalize: zero-length vector")
    u = v.data / norm
    return _make("normalize", u, (v,), lambda g: ((g - u * np.dot(u, g)) / norm,))


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    q = as_tensor(q)
    if q.shape != (4,):
        raise ShapeMismatchError("quat_to_matrix", q.shape, (4,))
    w, x, y, z = q.data
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    # J[i, j, k] = dR[i, j] / dq[k]
    J = 2.0 * np.array([
        [[0, 0, -2 * y, -2 * z], [-z, y, x, -w], [y, z, w, x]],
        [[z, y, x, w], [0, -2 * x, 0, -2 * z], [-x, -w, z, y]],
        [[-y, z, -w, x], [x, w, z, y], [0, -2 * x, -2 * y, 0]],
    ])
    return _make("quat_to_matrix", R, (q,), lambda g: (np.einsum("ij,ijk->k", g, J),))


# --- checking and optimisation ---

def gradcheck(f, x, epsilon=1e-5, max_coords=None, seed=0):
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|) (central differences)."""
    if not x.requires_grad:
        raise GraphError("gradcheck needs a tensor with requires_grad=True")
    loss = f(x)
    if loss.ndim != 0:
        raise GraphError(f"gradcheck needs a scalar function, got shape {loss.shape}")
    analytic = grad(loss, [x])[0]

    coords = list(np.ndindex(*x.shape))
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(picked)]

    worst = 0.0
    for idx in coords:
        original = x.data[idx]
        x.data[idx] = original + epsilon
        f_plus = f(x).item()
        x.data[idx] = original - epsilon
        f_minus = f(x).item()
        x.data[idx] = original
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        worst = max(worst, abs(analytic[idx] - numeric) / max(1.0, abs(numeric)))
    return worst


class Adam:
    """Adaptive-moment optimizer over a fixed list of leaf tensors."""

    def __init__(self, parameters, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.parameters = list(parameters)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.parameters]
        self.v = [np.zeros_like(p.data) for p in self.parameters]

    def step(self, gradients):
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for i, (param, g) in enumerate(zip(self.parameters, gradients)):
            if g is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / correction1
            v_hat = self.v[i] / correction2
            param.data = param.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        logging.debug(f"Adam step {self.t} applied to {len(self.parameters)} tensors")

    def zero_grad(self):
        for param in self.parameters:
            param.grad = None


def glorot_uniform(rng, fan_in, fan_out):
    """Trainable (fan_in, fan_out) weight drawn from U(-sqrt(6/(in+out)), +sqrt(6/(in+out)))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


def zeros_param(shape):
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=True)
