"""Dense tensors with reverse-mode automatic differentiation.

The op set is deliberately minimal: exactly what the voxel backbone, the
dynamic point branch, and the fusion path need. float64 is the default
dtype so analytic gradients can be validated against central finite
differences; float32 is an opt-in for timed runs.

Broadcasting is restricted to row-vector bias addition; every other shape
mix is an error. Explicit `tile_rows` covers the one place a row vector is
multiplied against a matrix.
"""

import numpy as np

from . import _kernels


class AutodiffError(ValueError):
    pass


class DimensionError(AutodiffError):
    """Operand shapes (or dtypes) do not satisfy an op's contract."""


class NumericError(AutodiffError):
    """Non-finite input where finite values are required."""


_FLOAT_DTYPES = (np.float32, np.float64)

_GRAD_ENABLED = True


class no_grad:
    """Inside this context ops return parentless values: forward data is
    identical but nothing is retained for backward, so long inference
    passes don't hold every intermediate alive."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


class Value:
    """A node in the computation graph: dense data, lazy grad, backward recipe.

    Leaves are created directly and never gain parents; every op returns a
    fresh Value wired to its operands. After ``backward`` from a scalar root,
    leaf grads accumulate across calls while interior grads are recomputed.
    """

    __slots__ = ("data", "grad", "_parents", "_backward", "op")

    def __init__(self, data, dtype=None, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        if _GRAD_ENABLED:
            self._parents = tuple(_parents)
            self._backward = _backward
        else:
            self._parents = ()
            self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self):
        """Plain array copy, outside the graph."""
        return self.data.copy()

    def __repr__(self):
        return f"Value(shape={self.data.shape}, op={self.op!r})"


def _check_same_dtype(*vals):
    dt = vals[0].data.dtype
    for v in vals[1:]:
        if v.data.dtype != dt:
            raise DimensionError(
                f"dtype mismatch: {[str(v.data.dtype) for v in vals]}")
    return dt


def matmul(a, b):
    """Matrix product of two 2-D values."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    _check_same_dtype(a, b)
    out_data = a.data @ b.data

    def bwd(g):
        a.ensure_grad()
        b.ensure_grad()
        a.grad += g @ b.data.T
        b.grad += a.data.T @ g

    return Value(out_data, _parents=(a, b), _backward=bwd, op="matmul")


def add(a, b):
    """Elementwise sum; also accepts a 1-D bias row-vector as ``b``."""
    bias = a.data.ndim == 2 and b.data.ndim == 1
    if bias:
        if b.data.shape[0] != a.data.shape[1]:
            raise DimensionError(
                f"bias length {b.data.shape} does not match rows of {a.data.shape}")
    elif a.data.shape != b.data.shape:
        raise DimensionError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
    _check_same_dtype(a, b)
    out_data = a.data + b.data

    def bwd(g):
        a.ensure_grad()
        b.ensure_grad()
        a.grad += g
        b.grad += g.sum(axis=0) if bias else g

    return Value(out_data, _parents=(a, b), _backward=bwd, op="add")


def mul(a, b):
    """Hadamard product of same-shape values."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")
    _check_same_dtype(a, b)
    out_data = a.data * b.data

    def bwd(g):
        a.ensure_grad()
        b.ensure_grad()
        a.grad += g * b.data
        b.grad += g * a.data

    return Value(out_data, _parents=(a, b), _backward=bwd, op="mul")


def scale(a, s):
    """Multiply by a python scalar."""
    s = float(s)
    out_data = a.data * a.data.dtype.type(s)

    def bwd(g):
        a.ensure_grad()
        a.grad += g * a.data.dtype.type(s)

    return Value(out_data, _parents=(a,), _backward=bwd, op="scale")


def relu(a):
    mask = a.data > 0

    def bwd(g):
        a.ensure_grad()
        a.grad += g * mask

    return Value(a.data * mask, _parents=(a,), _backward=bwd, op="relu")


def concat_cols(parts):
    """Concatenate 2-D values along the channel axis."""
    parts = list(parts)
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != rows:
            raise DimensionError(
                f"concat_cols row mismatch: {[p.data.shape for p in parts]}")
    _check_same_dtype(*parts)
    out_data = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p.ensure_grad()
            p.grad += g[:, lo:hi]

    return Value(out_data, _parents=tuple(parts), _backward=bwd, op="concat")


def gather_rows(a, idx):
    """out[j] = a[idx[j]] for a 2-D value."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows needs a matrix, got {a.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise DimensionError("gather_rows index out of range")
    out_data = a.data[idx]

    def bwd(g):
        a.ensure_grad()
        _kernels.scatter_add(a.grad, np.ascontiguousarray(g), idx)

    return Value(out_data, _parents=(a,), _backward=bwd, op="gather")


def scatter_rows(src, idx, num_rows):
    """Accumulate rows of ``src`` into a fresh (num_rows, C) value: out[idx[j]] += src[j]."""
    idx = np.asarray(idx, dtype=np.int64)
    if src.data.ndim != 2 or idx.shape[0] != src.data.shape[0]:
        raise DimensionError(
            f"scatter_rows: {src.data.shape} rows vs {idx.shape} indices")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise DimensionError("scatter_rows index out of range")
    out_data = np.zeros((num_rows, src.data.shape[1]), dtype=src.data.dtype)
    _kernels.scatter_add(out_data, np.ascontiguousarray(src.data), idx)

    def bwd(g):
        src.ensure_grad()
        src.grad += g[idx]

    return Value(out_data, _parents=(src,), _backward=bwd, op="scatter")


def slice_first(a, i):
    """a[i] along the leading axis (used to pick one kernel offset block)."""
    i = int(i)
    if not 0 <= i < a.data.shape[0]:
        raise DimensionError(f"slice index {i} out of range for {a.data.shape}")
    out_data = a.data[i].copy()

    def bwd(g):
        a.ensure_grad()
        a.grad[i] += g

    return Value(out_data, _parents=(a,), _backward=bwd, op="slice")


def transpose(a):
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got {a.data.shape}")
    out_data = np.ascontiguousarray(a.data.T)

    def bwd(g):
        a.ensure_grad()
        a.grad += g.T

    return Value(out_data, _parents=(a,), _backward=bwd, op="transpose")


def tile_rows(v, n):
    """Repeat a 1-D value into n identical rows."""
    if v.data.ndim != 1:
        raise DimensionError(f"tile_rows needs a vector, got {v.data.shape}")
    out_data = np.broadcast_to(v.data, (n, v.data.shape[0])).copy()

    def bwd(g):
        v.ensure_grad()
        v.grad += g.sum(axis=0)

    return Value(out_data, _parents=(v,), _backward=bwd, op="tile")


def _groups_to_csr(groups, n_rows):
    if isinstance(groups, tuple) and len(groups) == 2:
        flat = np.ascontiguousarray(groups[0], dtype=np.int64)
        starts = np.ascontiguousarray(groups[1], dtype=np.int64)
        if (np.diff(starts) <= 0).any():
            raise DimensionError("group_maxpool: empty group")
    elif isinstance(groups, np.ndarray) and groups.ndim == 2:
        flat = np.ascontiguousarray(groups, dtype=np.int64).ravel()
        starts = np.arange(groups.shape[0] + 1, dtype=np.int64) * groups.shape[1]
    else:
        lens = np.array([len(g) for g in groups], dtype=np.int64)
        if (lens == 0).any():
            raise DimensionError("group_maxpool: empty group")
        starts = np.zeros(lens.shape[0] + 1, dtype=np.int64)
        np.cumsum(lens, out=starts[1:])
        flat = np.concatenate([np.asarray(g, dtype=np.int64) for g in groups])
    if flat.size == 0:
        raise DimensionError("group_maxpool: empty group")
    if flat.min() < 0 or flat.max() >= n_rows:
        raise DimensionError("group_maxpool index out of range")
    return flat, starts


def group_maxpool(feats, groups):
    """Channelwise max over index groups; gradient flows to the earliest argmax."""
    if feats.data.ndim != 2:
        raise DimensionError(f"group_maxpool needs a matrix, got {feats.data.shape}")
    flat, starts = _groups_to_csr(groups, feats.data.shape[0])
    vals, arg_rows = _kernels.group_max_csr(feats.data, flat, starts)
    n, c = feats.data.shape
    cols = np.broadcast_to(np.arange(c, dtype=np.int64), arg_rows.shape)
    lin = (arg_rows * c + cols).ravel()

    def bwd(g):
        feats.ensure_grad()
        np.add.at(feats.grad.reshape(-1), lin, g.ravel())

    return Value(vals, _parents=(feats,), _backward=bwd, op="group_maxpool")


def softmax_rows(a, scale_by):
    """Rowwise softmax of a / scale_by, computed with max subtraction."""
    if scale_by <= 0:
        raise DimensionError(f"softmax scale must be positive, got {scale_by}")
    if not np.isfinite(a.data).all():
        raise NumericError("softmax_rows: non-finite input")
    x = a.data / a.data.dtype.type(scale_by)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        a.ensure_grad()
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        a.grad += (g - inner) * out_data / a.data.dtype.type(scale_by)

    return Value(out_data, _parents=(a,), _backward=bwd, op="softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row normalization with learnable scale and shift."""
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm needs a matrix, got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(
            f"layer_norm params {gamma.data.shape}/{beta.data.shape} vs width {c}")
    _check_same_dtype(x, gamma, beta)
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    y = xc * inv
    out_data = y * gamma.data + beta.data

    def bwd(g):
        x.ensure_grad()
        gamma.ensure_grad()
        beta.ensure_grad()
        gh = g * gamma.data
        x.grad += (gh - gh.mean(axis=1, keepdims=True)
                   - y * (gh * y).mean(axis=1, keepdims=True)) * inv
        gamma.grad += (g * y).sum(axis=0)
        beta.grad += g.sum(axis=0)

    return Value(out_data, _parents=(x, gamma, beta), _backward=bwd, op="layer_norm")


def sum_all(a):
    out_data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g):
        a.ensure_grad()
        a.grad += g

    return Value(out_data, _parents=(a,), _backward=bwd, op="sum")


def mean_all(a):
    n = a.data.size
    out_data = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def bwd(g):
        a.ensure_grad()
        a.grad += g / a.data.dtype.type(n)

    return Value(out_data, _parents=(a,), _backward=bwd, op="mean")


def cross_entropy_rows(logits, labels):
    """Mean cross entropy of rowwise softmax against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise DimensionError(
            f"cross_entropy: logits {logits.data.shape} vs labels {labels.shape}")
    n, c = logits.data.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DimensionError("cross_entropy: label out of range")
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=1, keepdims=True)
    log_p = logits.data - m - np.log(z)
    out_data = np.asarray(-log_p[np.arange(n), labels].mean(),
                          dtype=logits.data.dtype)
    p = e / z

    def bwd(g):
        logits.ensure_grad()
        gl = p.copy()
        gl[np.arange(n), labels] -= 1.0
        logits.grad += gl * (g / logits.data.dtype.type(n))

    return Value(out_data, _parents=(logits,), _backward=bwd, op="cross_entropy")


def backward(root):
    """Reverse-mode sweep from a scalar root.

    Interior grads are recomputed from scratch; leaf grads accumulate across
    calls until zeroed. Returns the number of graph nodes visited (each node
    exactly once).
    """
    if root.data.size != 1:
        raise DimensionError(f"backward root must be scalar, got {root.data.shape}")
    topo = []
    seen = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            topo.append(node)
            stack.pop()

    for node in topo:
        if node._parents:
            node.grad = np.zeros_like(node.data)
    root.ensure_grad()
    root.grad += 1.0

    visited = 0
    for node in reversed(topo):
        visited += 1
        if node._backward is not None:
            node._backward(node.grad)
    return visited
