"""Contextual enhancement: cross-attention layers that enrich each
local region stream with global context, then a region average.

Each layer computes, for a local stream L_prev (T, D) against the
original global sequence G (T, D):

    ctx = softmax((L_prev Wq)(G Wk)^T / sqrt(D)) (G Wv)
    out = LayerNorm(L_prev + ctx Wo)

G is the same unrefined global sequence at every layer.  Parameters are
shared across region streams; each layer has its own.  After K layers
the refined streams are averaged across regions.
"""

import numpy as np

from . import nn
from . import tensor as T


class CEMLayerParams(nn.Module):
    """Square projections plus the closing layer norm of one layer."""

    def __init__(self, rng, dim):
        s = 1.0 / np.sqrt(dim)
        self.wq = nn.param(rng, (dim, dim), s)
        self.wk = nn.param(rng, (dim, dim), s)
        self.wv = nn.param(rng, (dim, dim), s)
        self.wo = nn.param(rng, (dim, dim), s)
        self.ln = nn.LayerNorm(dim)
        self.dim = dim


def cem_layer(L_prev, G, params):
    """One enhancement layer; supports (T, D) or batched (N, T, D) L_prev."""
    d = params.dim
    q = T.matmul(L_prev, params.wq)
    k = T.matmul(G, params.wk)
    v = T.matmul(G, params.wv)
    scores = T.mul(T.matmul(q, T.transpose(k, (1, 0))), 1.0 / np.sqrt(d))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    return params.ln(T.add(L_prev, T.matmul(ctx, params.wo)))


def average_regions(streams):
    """Mean across region streams: (N, T, D) -> (T, D)."""
    return T.mean(streams, axis=0)


def cem_forward(L, G, layers):
    """Refine all region streams through every layer, then average.

    L: (T, N, D) local embeddings; G: (T, D); layers: CEMLayerParams
    sequence (K >= 1).  Returns (T, D).
    """
    streams = T.transpose(L, (1, 0, 2))   # (N, T, D)
    for params in layers:
        streams = cem_layer(streams, G, params)
    return average_regions(streams)


def _cem_layer_padded(streams, g_batch, params, mask):
    """streams: (B, N, T, D); g_batch: (B, T, D); mask: additive
    (B, 1, 1, T) with -1e9 on padded frames."""
    d = params.dim
    b, t = g_batch.shape[0], g_batch.shape[1]
    q = T.matmul(streams, params.wq)
    k = T.reshape(T.matmul(g_batch, params.wk), (b, 1, t, d))
    v = T.reshape(T.matmul(g_batch, params.wv), (b, 1, t, d))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                   1.0 / np.sqrt(d))
    scores = T.add(scores, T.Tensor(mask))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    return params.ln(T.add(streams, T.matmul(ctx, params.wo)))


def cem_forward_padded(L_list, G_list, layers):
    """Batched refinement over clips of different lengths.

    L_list: per-clip (T_i, N, D); G_list: per-clip (T_i, D).  Padded
    frames are masked out of attention, so each clip's result equals
    its unbatched cem_forward.  Returns per-clip (T_i, D).
    """
    n, d = L_list[0].shape[1], L_list[0].shape[2]
    lengths = [l.shape[0] for l in L_list]
    t_max = max(lengths)
    padded = []
    for l, t_i in zip(L_list, lengths):
        s = T.transpose(l, (1, 0, 2))    # (N, T_i, D)
        if t_i < t_max:
            s = T.concat([s, T.Tensor(np.zeros((n, t_max - t_i, d)))],
                         axis=1)
        padded.append(T.reshape(s, (1, n, t_max, d)))
    streams = padded[0] if len(padded) == 1 else T.concat(padded, axis=0)
    g_batch, _ = nn.pad_stack(G_list, t_max)
    mask = nn.key_padding_mask(lengths, t_max)
    for params in layers:
        streams = _cem_layer_padded(streams, g_batch, params, mask)
    avg = T.mean(streams, axis=1)        # (B, t_max, D)
    return [avg[i, :t_i] for i, t_i in enumerate(lengths)]


class ContextualEnhancer(nn.Module):
    def __init__(self, rng, dim, num_layers=1):
        self.layers = [CEMLayerParams(rng, dim) for _ in range(num_layers)]

    def __call__(self, L, G):
        return cem_forward(L, G, self.layers)

    def batch(self, L_list, G_list):
        return cem_forward_padded(L_list, G_list, self.layers)
