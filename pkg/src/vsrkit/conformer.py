"""Conformer-style sequence encoder.

Each block runs feed-forward, self-attention, a depthwise temporal
convolution module and a second feed-forward, all as residual branches,
then a closing layer normalization.  With every branch weight at zero a
block therefore reduces to plain layer normalization of its input.
"""

from dataclasses import dataclass

from . import nn
from . import tensor as T


@dataclass
class ConformerConfig:
    dim: int = 32
    layers: int = 2
    heads: int = 4
    conv_kernel: int = 7
    ffn_mult: int = 2


class ConvModule(nn.Module):
    """Pointwise expand + GLU, depthwise temporal conv, GELU, pointwise."""

    def __init__(self, rng, dim, kernel):
        self.pw1 = nn.Linear(rng, dim, 2 * dim)
        self.dw_weight = nn.param(rng, (kernel, dim), 1.0 / (kernel ** 0.5))
        self.dw_bias = nn.zeros_param((dim,))
        self.pw2 = nn.Linear(rng, dim, dim)
        self.dim = dim

    def __call__(self, x, valid=None):
        h = self.pw1(x)
        gate = T.sigmoid(h[..., self.dim:])
        h = T.mul(h[..., :self.dim], gate)
        if valid is not None:
            # zero padded rows so the temporal kernel sees exactly the
            # zeros that per-sequence same-padding would provide
            h = T.mul(h, T.Tensor(valid))
        h = T.depthwise_conv1d(h, self.dw_weight, self.dw_bias)
        return self.pw2(T.gelu(h))


class ConformerBlock(nn.Module):
    def __init__(self, rng, cfg):
        d = cfg.dim
        self.ln_ff1 = nn.LayerNorm(d)
        self.ff1 = nn.FeedForward(rng, d, cfg.ffn_mult * d)
        self.ln_att = nn.LayerNorm(d)
        self.attn = nn.MultiHeadAttention(rng, d, cfg.heads)
        self.ln_conv = nn.LayerNorm(d)
        self.conv = ConvModule(rng, d, cfg.conv_kernel)
        self.ln_ff2 = nn.LayerNorm(d)
        self.ff2 = nn.FeedForward(rng, d, cfg.ffn_mult * d)
        self.ln_out = nn.LayerNorm(d)

    def __call__(self, x, attn_mask=None, valid=None):
        x = T.add(x, self.ff1(self.ln_ff1(x)))
        h = self.ln_att(x)
        x = T.add(x, self.attn(h, h, mask=attn_mask))
        x = T.add(x, self.conv(self.ln_conv(x), valid))
        x = T.add(x, self.ff2(self.ln_ff2(x)))
        return self.ln_out(x)


class ConformerEncoder(nn.Module):
    """Stack of conformer blocks over (T, D) or batched (B, T, D).

    For padded batches pass ``lengths``; padded keys are masked out of
    attention and zeroed ahead of the temporal convolution, which makes
    the padded computation equal the per-sequence one."""

    def __init__(self, rng, cfg):
        self.blocks = [ConformerBlock(rng, cfg) for _ in range(cfg.layers)]

    def __call__(self, x, lengths=None):
        attn_mask = valid = None
        if lengths is not None:
            t_max = x.shape[-2]
            attn_mask = nn.key_padding_mask(lengths, t_max)
            valid = nn.valid_rows(lengths, t_max)
        for block in self.blocks:
            x = block(x, attn_mask, valid)
        return x
