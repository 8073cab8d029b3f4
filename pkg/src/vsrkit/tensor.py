"""Tensor core: double-precision arrays with reverse-mode autodiff.

Define-by-run: every tracked operation appends a node (output tensor +
local gradient closure) to an implicit graph; ``backward`` linearizes
the graph reachable from a scalar loss and runs the closures in reverse
topological order.  The graph is rebuilt on every forward pass.

Values are float64 throughout.  Softmax and log-softmax subtract the
row maximum before exponentiating.  Layer normalization keeps its
epsilon (1e-5) inside the square root, so constant inputs normalize to
exact zeros instead of NaN.
"""

from contextlib import contextmanager

import numpy as np

from . import kernels as K
from .errors import DomainError, GraphError, ShapeError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation paths)."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw", "_op",
                 "_backward_done")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bw = None
        self._op = "leaf"
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g)
        else:
            self.grad += g

    def _accum_new(self, g):
        """Accumulate a gradient array the caller just allocated and
        will not reuse; ownership transfers on first accumulation."""
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def backward(self):
        backward(self)

    # operator sugar -------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, op, bw):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bw = bw
        out._op = op
    return out


def linearize(root):
    """Topological order of the graph below ``root`` (parents first).

    Each entry is an operation record: output tensor, parent tensors
    and the local-gradient closure.  Backward walks it once, reversed.
    """
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``grad`` on every tracked tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise GraphError(
            f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise GraphError(
            "backward already ran from this loss; rebuild the graph first")
    loss._backward_done = True
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(linearize(loss)):
        if node._bw is not None and node.grad is not None:
            node._bw(node.grad)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise arithmetic ---------------------------------------------

def _broadcast_check(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        t, c = (a, b) if isinstance(a, Tensor) else (b, a)
        out = _node(t.data + float(c), (t,), "add", None)
        if out.requires_grad:
            out._bw = lambda g: t._accum(g)
        return out
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), "add", bw)


def sub(a, b):
    if isinstance(b, (int, float)):
        return add(a, -b)
    if isinstance(a, (int, float)):
        return add(mul(b, -1.0), a)
    return add(a, mul(b, -1.0))


def mul(a, b):
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        t, c = (a, b) if isinstance(a, Tensor) else (b, a)
        c = float(c)
        out = _node(t.data * c, (t,), "mul", None)
        if out.requires_grad:
            out._bw = lambda g: t._accum(g * c)
        return out
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accum_new(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum_new(_unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), "mul", bw)


def div(a, b):
    if isinstance(b, (int, float)):
        if b == 0:
            raise DomainError("division by scalar zero")
        return mul(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0.0):
        nz = int(np.count_nonzero(b.data == 0.0))
        raise DomainError(
            f"division by zero: {nz} zero entries in denominator of shape "
            f"{b.shape}")
    _broadcast_check(a, b, "div")
    inv = 1.0 / b.data

    def bw(g):
        if a.requires_grad:
            a._accum_new(_unbroadcast(g * inv, a.data.shape))
        if b.requires_grad:
            b._accum_new(_unbroadcast(-g * a.data * inv * inv, b.data.shape))

    return _node(a.data * inv, (a, b), "div", bw)


# transcendental and activations --------------------------------------

def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)

    def bw(g):
        x._accum_new(g * y)

    return _node(y, (x,), "exp", bw)


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError(
            f"log of nonpositive operand (min value {x.data.min():.3g})")

    def bw(g):
        x._accum_new(g / x.data)

    return _node(np.log(x.data), (x,), "log", bw)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        x._accum_new(g * mask)

    return _node(x.data * mask, (x,), "relu", bw)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """Tanh-approximation GELU."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    th = np.tanh(inner)
    y = 0.5 * v * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        x._accum_new(g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th**2) * dinner))

    return _node(y, (x,), "gelu", bw)


def sigmoid(x):
    x = as_tensor(x)
    y = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-x.data)),
                 np.exp(x.data) / (1.0 + np.exp(x.data)))

    def bw(g):
        x._accum_new(g * y * (1.0 - y))

    return _node(y, (x,), "sigmoid", bw)


def softmax(x, axis):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._accum_new(y * (g - dot))

    return _node(y, (x,), "softmax", bw)


def log_softmax(x, axis):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        x._accum_new(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _node(y, (x,), "log_softmax", bw)


# reductions -----------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accum(np.broadcast_to(g, x.data.shape))

    return _node(y, (x,), "sum", bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.data.shape[a] for a in axes]))
    y = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accum(np.broadcast_to(g, x.data.shape) / count)

    return _node(y, (x,), "mean", bw)


# shape manipulation ---------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    old = x.data.shape

    def bw(g):
        x._accum(g.reshape(old))

    return _node(x.data.reshape(shape), (x,), "reshape", bw)


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        x._accum(g.transpose(inv))

    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 "transpose", bw)


def broadcast_to(x, shape):
    x = as_tensor(x)

    def bw(g):
        x._accum(_unbroadcast(g, x.data.shape))

    return _node(np.ascontiguousarray(np.broadcast_to(x.data, shape)), (x,),
                 "broadcast", bw)


def _plain_indexing(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice)) for p in parts)


def getitem(x, idx):
    x = as_tensor(x)
    simple = _plain_indexing(idx)  # disjoint targets: += on the view is safe

    def bw(g):
        full = np.zeros_like(x.data)
        if simple:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        x._accum_new(full)

    return _node(x.data[idx].copy(), (x,), "getitem", bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return _node(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), "concat", bw)


def embedding(table, ids):
    """Row lookup: out[i] = table[ids[i]] with scatter-add gradient."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise DomainError(
            f"embedding ids outside [0, {table.data.shape[0]}) "
            f"(range {ids.min()}..{ids.max()})")

    def bw(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        table._accum_new(dt)

    return _node(table.data[ids], (table,), "embedding", bw)


# linear algebra -------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul contraction mismatch: {a.shape} @ {b.shape}")
    y = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accum_new(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accum_new(_unbroadcast(gb, b.data.shape))

    return _node(y, (a, b), "matmul", bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis; zero-variance rows map to exact zeros."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=lead))
        if beta.requires_grad:
            beta._accum(g.sum(axis=lead))
        if x.requires_grad:
            gg = g * gamma.data
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            x._accum_new(inv * (gg - m1 - xhat * m2))

    return _node(gamma.data * xhat + beta.data, (x, gamma, beta),
                 "layer_norm", bw)


def cosine_sim(a, b, axis, eps=1e-8):
    """Cosine similarity along ``axis`` with broadcasting.

    A zero-norm operand clamps the denominator at ``eps``, giving
    similarity 0 there with zero gradient (flat plateau).
    """
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "cosine_sim")
    ad, bd = a.data, b.data
    dot = (ad * bd).sum(axis=axis, keepdims=True)
    na2 = np.broadcast_to((ad * ad).sum(axis=axis, keepdims=True), dot.shape)
    nb2 = np.broadcast_to((bd * bd).sum(axis=axis, keepdims=True), dot.shape)
    m_raw = np.sqrt(na2) * np.sqrt(nb2)
    clamped = m_raw < eps
    m = np.where(clamped, eps, m_raw)
    s = dot / m
    live = ~clamped

    def bw(g):
        ge = np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            if a.requires_grad:
                ga = np.where(live, ge * (bd / m - s * ad / na2), 0.0)
                a._accum(_unbroadcast(np.nan_to_num(ga), ad.shape))
            if b.requires_grad:
                gb = np.where(live, ge * (ad / m - s * bd / nb2), 0.0)
                b._accum(_unbroadcast(np.nan_to_num(gb), bd.shape))

    return _node(np.squeeze(s, axis=axis), (a, b), "cosine_sim", bw)


def batched_cosine_rows(a, b, eps=1e-8):
    """Cosine similarity between row vectors of ``a`` and column vectors
    of ``b``, batched: a (B, N, D), b (B, D, P) -> (B, N, P).

    Same clamp convention as cosine_sim (zero-norm pairs give 0 with a
    flat gradient), but forward and backward are pure contractions, so
    no (N, D, P)-sized intermediate is ever built.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.data.shape[-1] != b.data.shape[-2] \
            or a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(
            f"batched_cosine_rows expects (B,N,D) by (B,D,P), got "
            f"{a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    dot = np.matmul(ad, bd)                                   # (B, N, P)
    na2 = (ad * ad).sum(axis=2)[:, :, None]                   # (B, N, 1)
    nb2 = (bd * bd).sum(axis=1)[:, None, :]                   # (B, 1, P)
    m_raw = np.sqrt(na2) * np.sqrt(nb2)
    clamped = m_raw < eps
    m = np.where(clamped, eps, m_raw)
    s = dot / m
    any_clamped = bool(clamped.any())

    na2_safe = np.where(na2 == 0.0, 1.0, na2)
    nb2_safe = np.where(nb2 == 0.0, 1.0, nb2)

    def bw(g):
        ge = g * (~clamped) if any_clamped else g
        gm = ge / m
        gs = ge * s
        if a.requires_grad:
            term = np.matmul(gm, np.swapaxes(bd, 1, 2))
            a._accum_new(term - ad * (gs.sum(axis=2)[:, :, None] / na2_safe))
        if b.requires_grad:
            term = np.matmul(np.swapaxes(ad, 1, 2), gm)
            b._accum_new(term - bd * (gs.sum(axis=1)[:, None, :] / nb2_safe))

    return _node(s, (a, b), "batched_cosine_rows", bw)


# convolutions ---------------------------------------------------------

def _out_len(n, k, s, p):
    o = (n + 2 * p - k) // s + 1
    if o < 1:
        raise ShapeError(
            f"convolution output collapsed: input {n}, kernel {k}, "
            f"stride {s}, padding {p}")
    return o


def conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0)):
    """x: (N, C, H, W), w: (O, C, kh, kw), b: (O,) or None."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"conv2d expects (N,C,H,W) by (O,C,kh,kw) with matching C, "
            f"got {x.shape} and {w.shape}")
    n, c, h, wi = x.data.shape
    o, _, kh, kw = w.data.shape
    sh, sw = stride
    ph, pw = padding
    oh, ow = _out_len(h, kh, sh, ph), _out_len(wi, kw, sw, pw)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = K.im2col2d(xp, kh, kw, sh, sw, oh, ow)
    wf = w.data.reshape(o, -1)
    yf = cols @ wf.T
    if b is not None:
        b = as_tensor(b)
        yf = yf + b.data
    y = yf.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gf = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        if b is not None and b.requires_grad:
            b._accum_new(gf.sum(axis=0))
        if w.requires_grad:
            w._accum_new((gf.T @ cols).reshape(w.data.shape))
        if x.requires_grad:
            dxp = K.col2im2d(np.ascontiguousarray(gf @ wf), n, c,
                             h + 2 * ph, wi + 2 * pw, kh, kw, sh, sw, oh, ow)
            if ph == 0 and pw == 0:
                x._accum_new(dxp)
            else:
                x._accum(dxp[:, :, ph:ph + h, pw:pw + wi])

    return _node(np.ascontiguousarray(y), parents, "conv2d", bw)


def conv3d(x, w, b=None, stride=(1, 1, 1), padding=(0, 0, 0)):
    """x: (N, C, T, H, W), w: (O, C, kt, kh, kw), b: (O,) or None."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"conv3d expects (N,C,T,H,W) by (O,C,kt,kh,kw) with matching C, "
            f"got {x.shape} and {w.shape}")
    n, c, t, h, wi = x.data.shape
    o, _, kt, kh, kw = w.data.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    ot = _out_len(t, kt, st, pt)
    oh, ow = _out_len(h, kh, sh, ph), _out_len(wi, kw, sw, pw)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    cols = K.im2col3d(xp, kt, kh, kw, st, sh, sw, ot, oh, ow)
    wf = w.data.reshape(o, -1)
    yf = cols @ wf.T
    if b is not None:
        b = as_tensor(b)
        yf = yf + b.data
    y = yf.reshape(n, ot, oh, ow, o).transpose(0, 4, 1, 2, 3)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gf = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, o)
        if b is not None and b.requires_grad:
            b._accum_new(gf.sum(axis=0))
        if w.requires_grad:
            w._accum_new((gf.T @ cols).reshape(w.data.shape))
        if x.requires_grad:
            dxp = K.col2im3d(np.ascontiguousarray(gf @ wf), n, c, t + 2 * pt,
                             h + 2 * ph, wi + 2 * pw, kt, kh, kw, st, sh, sw,
                             ot, oh, ow)
            x._accum(dxp[:, :, pt:pt + t, ph:ph + h, pw:pw + wi])

    return _node(np.ascontiguousarray(y), parents, "conv3d", bw)


def depthwise_conv1d(x, w, b=None):
    """Per-channel temporal convolution with same padding.

    x: (..., T, D), w: (k, D) with odd k, b: (D,) or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    k, d = w.data.shape
    if k % 2 != 1 or x.data.shape[-1] != d:
        raise ShapeError(
            f"depthwise_conv1d expects odd kernel and matching channels, "
            f"got x {x.shape}, w {w.shape}")
    t = x.data.shape[-2]
    pad_spec = [(0, 0)] * (x.ndim - 2) + [(k // 2, k // 2), (0, 0)]
    xp = np.pad(x.data, pad_spec)
    y = np.zeros_like(x.data)
    for a in range(k):
        y += xp[..., a:a + t, :] * w.data[a]
    if b is not None:
        b = as_tensor(b)
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=lead))
        if w.requires_grad:
            dw = np.empty_like(w.data)
            for a in range(k):
                dw[a] = (xp[..., a:a + t, :] * g).sum(axis=lead)
            w._accum(dw)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for a in range(k):
                dxp[..., a:a + t, :] += g * w.data[a]
            x._accum(dxp[..., k // 2:k // 2 + t, :])

    return _node(y, parents, "depthwise_conv1d", bw)
