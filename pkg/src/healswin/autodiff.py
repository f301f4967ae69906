"""Reverse-mode autodiff over numpy arrays.

Only the operations the window transformer needs are provided. Every op
records its parents and a closure mapping the output gradient to parent
gradients; :func:`backward` walks that graph once in reverse topological
order.
"""
import contextlib
import math

import numpy as np
from scipy import special

_state = {"dtype": np.float32}


class ShapeError(ValueError):
    pass


def get_dtype():
    return _state["dtype"]


def set_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (float64 for gradient checks)."""
    old = _state["dtype"]
    set_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


class Tensor:
    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data)
        if data.dtype != get_dtype():
            data = data.astype(get_dtype())
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

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
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise ---------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def reciprocal(a):
    out = 1.0 / a.data

    def bw(g):
        return (-g * out * out,)

    return _node(out, (a,), bw, "reciprocal")


def exp(a):
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _node(out, (a,), bw, "exp")


def square(a):
    def bw(g):
        return (2.0 * g * a.data,)

    return _node(a.data * a.data, (a,), bw, "square")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _node((x * cdf).astype(x.dtype, copy=False), (a,), bw, "gelu")


def masked_fill(a, mask, value):
    """Replace entries where ``mask`` is True by ``value`` (mask is a constant array)."""
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, a.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: mask shape {mask.shape} does not broadcast to {a.shape}") from None
    out = np.where(mask, np.asarray(value, dtype=a.data.dtype), a.data)

    def bw(g):
        return (_unbroadcast(np.where(mask, 0.0, g), a.shape).astype(g.dtype, copy=False),)

    return _node(out, (a,), bw, "masked_fill")


# --- linear algebra --------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(out.reshape(lead + (weight.shape[1],)), parents, bw, "linear")


# --- normalizations ----------------------------------------------------------------


def softmax(a, axis=-1):
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bw, "log_softmax")


def layer_norm(a, gamma=None, beta=None, eps=1e-5):
    """Normalize over the last axis, then apply the optional affine."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = tuple(t for t in (a, gamma, beta) if t is not None)

    def bw(g):
        gh = g * gamma.data if gamma is not None else g
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return tuple(grads)

    return _node(out, parents, bw, "layer_norm")


def l2_normalize(a, axis=-1, eps=1e-12):
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x / denom

    def bw(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(norm > eps, (g - out * proj) / denom, g / eps),)

    return _node(out, (a,), bw, "l2_normalize")


# --- reductions ------------------------------------------------------------------------


def reduce_sum(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), bw, "sum")


def reduce_mean(a, axis=None, keepdims=False):
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size // max(np.asarray(out).size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.data.dtype),)

    return _node(np.asarray(out, dtype=a.data.dtype), (a,), bw, "mean")


# --- indexing and shape ------------------------------------------------------------


def _is_permutation(idx, n):
    return idx.ndim == 1 and idx.shape[0] == n and np.array_equal(np.bincount(idx, minlength=n), np.ones(n, dtype=np.int64))


def _scatter(g, idx, axis, size):
    shape = list(g.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=g.dtype)
    if _is_permutation(idx, size):
        sl = [slice(None)] * g.ndim
        sl[axis] = idx
        out[tuple(sl)] = g
    else:
        np.add.at(out, (slice(None),) * axis + (idx,), g)
    return out


def gather(a, idx, axis=0):
    """``a`` indexed by the integer array ``idx`` along ``axis``."""
    idx = np.asarray(idx, dtype=np.int64)
    axis = axis % a.ndim
    out = np.take(a.data, idx, axis=axis)
    n = a.shape[axis]

    def bw(g):
        if idx.ndim != 1:
            gg = g.reshape(g.shape[:axis] + (-1,) + g.shape[axis + idx.ndim:])
            return (_scatter(gg, idx.ravel(), axis, n),)
        return (_scatter(g, idx, axis, n),)

    return _node(out, (a,), bw, "gather")


def scatter_add(a, idx, size, axis=0):
    """Sum slices of ``a`` into ``size`` slots along ``axis`` (inverse of gather)."""
    idx = np.asarray(idx, dtype=np.int64)
    axis = axis % a.ndim
    if idx.ndim != 1 or idx.shape[0] != a.shape[axis]:
        raise ShapeError(f"scatter_add: index shape {idx.shape} does not match axis {axis} of {a.shape}")
    out = _scatter(a.data, idx, axis, size)

    def bw(g):
        return (np.take(g, idx, axis=axis),)

    return _node(out, (a,), bw, "scatter_add")


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None

    def bw(g):
        return (g.reshape(a.shape),)

    return _node(out, (a,), bw, "reshape")


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _node(np.transpose(a.data, axes), (a,), bw, "transpose")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), bw, "concat")


# --- backward ------------------------------------------------------------------------------


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf with requires_grad."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if pg.dtype != p.data.dtype:
                pg = pg.astype(p.data.dtype)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# --- optimizer ---------------------------------------------------------------------------


class AdamW:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            if self.weight_decay:
                p.data -= (self.lr * self.weight_decay) * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_dict(self):
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


# --- finite differences ----------------------------------------------------------------------


def numerical_grad(fn, tensor, index, eps=1e-6):
    """Central difference of scalar ``fn()`` w.r.t. one entry of ``tensor``."""
    old = tensor.data[index]
    tensor.data[index] = old + eps
    fp = float(fn().data)
    tensor.data[index] = old - eps
    fm = float(fn().data)
    tensor.data[index] = old
    return (fp - fm) / (2.0 * eps)


def gradcheck(fn, tensors, eps=1e-6, max_entries=None, rng=None):
    """Largest norm-wise relative error between analytic and numerical gradients.

    ``fn`` builds a fresh graph from ``tensors`` and returns a scalar. With
    ``max_entries`` only that many randomly chosen entries per tensor are probed.
    """
    for t in tensors:
        t.grad = None
    backward(fn())
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = np.arange(t.data.size)
        if max_entries is not None and t.data.size > max_entries:
            rng = rng if rng is not None else np.random.default_rng(0)
            flat = np.sort(rng.choice(t.data.size, max_entries, replace=False))
        a = np.array([analytic.flat[i] for i in flat])
        n = np.array([numerical_grad(fn, t, np.unravel_index(i, t.data.shape), eps) for i in flat])
        scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-10)
        worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst


# --- attention ----------------------------------------------------------------------------

TAU_MIN = 0.01


def cosine_attention(q, k, v, tau, bias=None, mask=None):
    """Scaled cosine attention over windows.

    ``q, k, v``: (..., windows, heads, n, head_dim). ``tau``: per-head
    temperature of shape (heads, 1, 1). ``bias``: (heads, n, n). ``mask``:
    boolean (windows, n, n), True where attention is allowed.
    """
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"cosine_attention: q {q.shape}, k {k.shape}, v {v.shape} disagree")
    if np.any(tau.data <= TAU_MIN):
        raise ValueError(f"attention temperature must exceed {TAU_MIN}")
    n = q.shape[-2]
    qn = l2_normalize(q)
    kn = l2_normalize(k)
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = matmul(qn, transpose(kn, axes)) * reciprocal(tau)
    if bias is not None:
        scores = scores + bias
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (q.shape[-4], n, n):
            raise ShapeError(f"cosine_attention: mask shape {mask.shape} does not match {(q.shape[-4], n, n)}")
        scores = masked_fill(scores, ~mask[:, None], -np.inf)
    return matmul(softmax(scores, axis=-1), v)
