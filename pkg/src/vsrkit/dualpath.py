"""Dual-path feature extraction: global pooling branch and a local
branch driven by learnable region queries.

Global branch: spatial average pooling of the final feature map, then
a linear projector, giving one embedding per frame.

Local branch: the penultimate map is projected twice (dense map for
similarity scoring, attention map for decoding/pooling).  N learnable
region queries attend over each frame's spatial grid through a
single-layer decoder plus MLP, giving per-region embeddings R.  Cosine
similarity between R and the dense map yields soft assignments S; a
softmax turns S into attention maps M; weighted average pooling of the
projected map under M yields the local embeddings L.

The softmax axis for M is configurable: "regions" normalizes across
the N regions at each spatial location (the channel axis of S),
"spatial" normalizes across the h*w locations per region.  The pooled output
renormalizes over space either way, so both are well defined.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError

DEGENERATE_POOL_THRESHOLD = 1e-12


class DegenerateRegionWarning(UserWarning):
    """An attention map summed to ~zero over space; pooled vector zeroed."""


@dataclass
class DualPathConfig:
    num_regions: int = 5
    embed_dim: int = 32
    assign_softmax_axis: str = "regions"  # or "spatial"

    def __post_init__(self):
        if self.num_regions < 1:
            raise ConfigError("num_regions must be >= 1")
        if self.assign_softmax_axis not in ("regions", "spatial"):
            raise ConfigError(
                f"assign_softmax_axis must be 'regions' or 'spatial', "
                f"got {self.assign_softmax_axis!r}")


@dataclass
class DualPathFeatures:
    """G: (T, D); L: (T, N, D); M, S: (N, T, h, w); R: (N, T, D)."""
    G: T.Tensor
    L: T.Tensor
    M: T.Tensor
    S: T.Tensor
    R: T.Tensor


def soft_assign(R, F_dense, softmax_axis="regions", eps=1e-8):
    """Cosine similarities and normalized attention maps.

    R: (N, T, D); F_dense: (T, D, h, w).
    Returns S, M both (N, T, h, w).  The similarity runs as a batched
    contraction over frames (cosine along the channel axis).
    """
    n, t, d = R.shape
    _, _, h, w = F_dense.shape
    a = T.transpose(R, (1, 0, 2))                    # (T, N, D)
    b = T.reshape(F_dense, (t, d, h * w))            # (T, D, hw)
    S = T.batched_cosine_rows(a, b, eps=eps)         # (T, N, hw)
    S = T.reshape(T.transpose(S, (1, 0, 2)), (n, t, h, w))
    if softmax_axis == "regions":
        M = T.softmax(S, axis=0)
    else:
        M = T.reshape(T.softmax(T.reshape(S, (n, t, h * w)), axis=2),
                      (n, t, h, w))
    return S, M


def weighted_region_pool(M, F_double_prime):
    """Attention-weighted spatial average of the projected feature map.

    M: (N, T, h, w); F_double_prime: (T, D, h, w).  Returns L (T, N, D)
    with l[t, n] = sum_uv M[n,t,u,v] F''[t,:,u,v] / sum_uv M[n,t,u,v].
    A region whose weights sum below 1e-12 yields a zero vector and a
    DegenerateRegionWarning.
    """
    n, t, h, w = M.shape
    _, d, _, _ = F_double_prime.shape
    weights = T.transpose(T.reshape(M, (n, t, h * w)), (1, 0, 2))  # (T,N,hw)
    values = T.transpose(T.reshape(F_double_prime, (t, d, h * w)),
                         (0, 2, 1))                                # (T,hw,D)
    num = T.matmul(weights, values)                                # (T,N,D)
    den = T.transpose(T.sum_(M, axis=(2, 3)), (1, 0))              # (T,N)
    dead = den.data < DEGENERATE_POOL_THRESHOLD
    if dead.any():
        warnings.warn(
            f"{int(dead.sum())} region/frame attention maps sum below "
            f"{DEGENERATE_POOL_THRESHOLD}; pooled vectors zeroed",
            DegenerateRegionWarning)
        den = T.add(den, T.Tensor(dead * 1.0))
        num = T.mul(num, T.Tensor((~dead)[:, :, None] * 1.0))
    return T.div(num, T.reshape(den, (t, n, 1)))


class RegionDecoder(nn.Module):
    """Single decoder layer over each frame's spatial grid, then MLP.

    Queries self-attend, cross-attend to the frame's positions, pass a
    feed-forward branch (all residual, post-norm), and an MLP maps the
    normalized output to the final region embeddings.
    """

    def __init__(self, rng, dim, ffn_mult=2):
        self.self_attn = nn.MultiHeadAttention(rng, dim, heads=1)
        self.ln1 = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiHeadAttention(rng, dim, heads=1)
        self.ln2 = nn.LayerNorm(dim)
        self.ffn = nn.FeedForward(rng, dim, ffn_mult * dim)
        self.ln3 = nn.LayerNorm(dim)
        self.mlp1 = nn.Linear(rng, dim, dim)
        self.mlp2 = nn.Linear(rng, dim, dim)

    def __call__(self, queries, memory):
        """queries: (T, N, D) (same queries tiled per frame);
        memory: (T, P, D) spatial positions per frame."""
        q = self.ln1(T.add(queries, self.self_attn(queries, queries)))
        q = self.ln2(T.add(q, self.cross_attn(q, memory)))
        q = self.ln3(T.add(q, self.ffn(q)))
        return self.mlp2(T.relu(self.mlp1(q)))


class DualPathExtractor(nn.Module):
    def __init__(self, rng, config, final_channels, penult_channels):
        d = config.embed_dim
        self.config = config
        self.global_proj = nn.Linear(rng, final_channels, d)
        self.dense_proj = nn.Linear(rng, penult_channels, d)
        self.attn_proj = nn.Linear(rng, penult_channels, d)
        self.queries = nn.param(rng, (config.num_regions, d),
                                1.0 / np.sqrt(d))
        self.decoder = RegionDecoder(rng, d)

    def global_branch(self, F):
        """Spatial average pooling of F (T, C, Hf, Wf), then projection."""
        return self.global_proj(T.mean(F, axis=(2, 3)))

    def _project_local(self, F_prime):
        """Channel projections of the penultimate map -> two (T, D, h, w)."""
        t, c, h, w = F_prime.shape
        flat = T.transpose(F_prime, (0, 2, 3, 1))   # (T, h, w, c)
        dense = T.transpose(self.dense_proj(flat), (0, 3, 1, 2))
        attn = T.transpose(self.attn_proj(flat), (0, 3, 1, 2))
        return dense, attn

    def region_decode(self, F_double_prime):
        """F'': (T, D, h, w) -> R (N, T, D), decoded per frame."""
        t, d, h, w = F_double_prime.shape
        n = self.config.num_regions
        mem = T.transpose(T.reshape(F_double_prime, (t, d, h * w)), (0, 2, 1))
        tiled = T.broadcast_to(T.reshape(self.queries, (1, n, d)), (t, n, d))
        decoded = self.decoder(tiled, mem)          # (T, N, D)
        return T.transpose(decoded, (1, 0, 2))

    def __call__(self, pair):
        G = self.global_branch(pair.F)
        F_dense, F_pp = self._project_local(pair.F_prime)
        R = self.region_decode(F_pp)
        S, M = soft_assign(R, F_dense, self.config.assign_softmax_axis)
        L = weighted_region_pool(M, F_pp)
        return DualPathFeatures(G=G, L=L, M=M, S=S, R=R)

    def forward_pairs(self, pairs):
        """Batched forward over several clips' feature pairs.

        All operations here are per-frame, so concatenating clips along
        the frame axis computes exactly the per-clip results; outputs
        are split back at the original boundaries.
        """
        if len(pairs) == 1:
            return [self(pairs[0])]
        lens = [p.F.shape[0] for p in pairs]
        merged = type(pairs[0])(F=T.concat([p.F for p in pairs], axis=0),
                                F_prime=T.concat([p.F_prime for p in pairs],
                                                 axis=0))
        feats = self(merged)
        out = []
        offset = 0
        for n in lens:
            sl = slice(offset, offset + n)
            out.append(DualPathFeatures(
                G=feats.G[sl], L=feats.L[sl], M=feats.M[:, sl],
                S=feats.S[:, sl], R=feats.R[:, sl]))
            offset += n
        return out
