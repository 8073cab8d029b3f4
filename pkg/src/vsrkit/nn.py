"""Parameter containers and shared network building blocks."""

import numpy as np

from . import tensor as T
from .errors import ShapeError


class Module:
    """Parameter tree discovered by attribute reflection.

    Assignment order is construction order, so parameter naming and
    traversal are deterministic for a fixed architecture.
    """

    def named_parameters(self, prefix=""):
        out = {}
        for name, val in vars(self).items():
            if isinstance(val, T.Tensor) and val.requires_grad:
                out[prefix + name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(f"{prefix}{name}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{name}.{i}."))
                    elif isinstance(item, T.Tensor) and item.requires_grad:
                        out[f"{prefix}{name}.{i}"] = item
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def load_state(self, state, prefix=""):
        """Copy ndarray values into parameters by name (shape-checked)."""
        params = self.named_parameters(prefix)
        for name, tensor in params.items():
            if name not in state:
                raise KeyError(name)
            if state[name].shape != tensor.data.shape:
                raise ShapeError(
                    f"{name}: checkpoint shape {state[name].shape} vs "
                    f"model shape {tensor.data.shape}")
            tensor.data[...] = state[name]

    def state(self, prefix=""):
        return {k: v.data.copy() for k, v in self.named_parameters(prefix).items()}


def param(rng, shape, scale):
    return T.Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def zeros_param(shape):
    return T.Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape):
    return T.Tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True):
        self.weight = param(rng, (d_in, d_out), 1.0 / np.sqrt(d_in))
        self.bias = zeros_param((d_out,)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.scale = ones_param((dim,))
        self.shift = zeros_param((dim,))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.scale, self.shift, eps=self.eps)


class FeedForward(Module):
    def __init__(self, rng, dim, hidden):
        self.lin1 = Linear(rng, dim, hidden)
        self.lin2 = Linear(rng, hidden, dim)

    def __call__(self, x):
        return self.lin2(T.gelu(self.lin1(x)))


def _swap_last(x):
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return T.transpose(x, axes)


def scaled_dot_attention(q, k, v, mask=None):
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    q: (..., Tq, d), k/v: (..., Tk, d).  ``mask`` is an additive numpy
    array broadcast onto the score matrix (large negative = blocked).
    """
    d = q.shape[-1]
    scores = T.mul(T.matmul(q, _swap_last(k)), 1.0 / np.sqrt(d))
    if mask is not None:
        scores = T.add(scores, T.Tensor(mask))
    return T.matmul(T.softmax(scores, axis=-1), v)


_MASK_CACHE = {}


def causal_mask(t):
    if t not in _MASK_CACHE:
        m = np.zeros((t, t))
        m[np.triu_indices(t, k=1)] = -1e9
        _MASK_CACHE[t] = m
    return _MASK_CACHE[t]


class MultiHeadAttention(Module):
    """Standard multi-head attention; self-attention when memory is the
    query input.  Supports (T, D) and batched (B, T, D) inputs."""

    def __init__(self, rng, dim, heads):
        if dim % heads != 0:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)

    def _split(self, x):
        # (..., T, D) -> (..., heads, T, D/heads)
        t, d = x.shape[-2], x.shape[-1]
        lead = x.shape[:-2]
        x = T.reshape(x, lead + (t, self.heads, d // self.heads))
        n = len(lead)
        return T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))

    def _merge(self, x):
        lead = x.shape[:-3]
        n = len(lead)
        h, t, dh = x.shape[-3], x.shape[-2], x.shape[-1]
        x = T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
        return T.reshape(x, lead + (t, h * dh))

    def __call__(self, q_in, memory, causal=False, mask=None):
        """``mask`` is an additive numpy array broadcastable onto the
        (..., heads, Tq, Tk) score tensor (e.g. a key padding mask of
        shape (B, 1, 1, Tk) with -1e9 on padded keys)."""
        q = self._split(self.wq(q_in))
        k = self._split(self.wk(memory))
        v = self._split(self.wv(memory))
        add = causal_mask(q_in.shape[-2]) if causal else None
        if mask is not None:
            add = mask if add is None else add + mask
        ctx = scaled_dot_attention(q, k, v, add)
        return self.wo(self._merge(ctx))


_POS_CACHE = {}


def sinusoid_positions(t, dim):
    """Fixed sinusoidal position table, (t, dim) float64."""
    if (t, dim) not in _POS_CACHE:
        pos = np.arange(t)[:, None]
        i = np.arange(dim // 2)[None, :]
        angles = pos / np.power(10000.0, 2 * i / dim)
        table = np.zeros((t, dim))
        table[:, 0::2] = np.sin(angles)
        table[:, 1::2] = np.cos(angles)
        _POS_CACHE[(t, dim)] = table
    return _POS_CACHE[(t, dim)]


def add_positions(x):
    """Add sinusoidal positions along the second-to-last axis."""
    return T.add(x, T.Tensor(sinusoid_positions(x.shape[-2], x.shape[-1])))


def key_padding_mask(lengths, t_max):
    """Additive attention mask (B, 1, 1, t_max): -1e9 on padded keys.

    Masked keys score exp(-1e9 - max) = 0 exactly, so a padded batch
    reproduces per-sequence attention bit-for-bit up to BLAS summation
    order."""
    mask = np.zeros((len(lengths), 1, 1, t_max))
    for i, n in enumerate(lengths):
        mask[i, :, :, n:] = -1e9
    return mask


def valid_rows(lengths, t_max):
    """(B, t_max, 1) multiplier: 1 on real rows, 0 on padding."""
    out = np.zeros((len(lengths), t_max, 1))
    for i, n in enumerate(lengths):
        out[i, :n] = 1.0
    return out


def pad_stack(seqs, t_max=None):
    """Stack variable-length (T_i, D) tensors into (B, t_max, D) with
    zero padding; returns (batch, lengths)."""
    lengths = [s.shape[0] for s in seqs]
    t_max = t_max or max(lengths)
    d = seqs[0].shape[-1]
    padded = []
    for s, n in zip(seqs, lengths):
        if n < t_max:
            s = T.concat([s, T.Tensor(np.zeros((t_max - n, d)))], axis=0)
        padded.append(T.reshape(s, (1, t_max, d)))
    batch = padded[0] if len(padded) == 1 else T.concat(padded, axis=0)
    return batch, lengths
