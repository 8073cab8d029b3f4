"""Stage-1 objective: predict quantized speech units from the global
embedding sequence and from each local region stream.

Both stream types pass through a conformer encoder and a token
projector emitting, per frame, four independent codebook-sized heads
(one video frame covers four speech units).  The loss is the mean
cross entropy over all frame/head positions; the global and local
parts are simply added.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .conformer import ConformerConfig, ConformerEncoder
from .errors import DomainError, ShapeError

UNITS_PER_FRAME = 4


@dataclass
class AlignmentConfig:
    dim: int = 32
    layers: int = 2
    heads: int = 4
    conv_kernel: int = 7
    codebook_size: int = 64
    share_encoder: bool = True


def unit_ce_loss(logits, codes):
    """Mean cross entropy of unit predictions.

    logits: (..., T, UNITS_PER_FRAME, V); codes: int array of length
    4*T (shared by every leading stream).  Any code >= V is an error.
    """
    v = logits.shape[-1]
    t = logits.shape[-3]
    codes = np.asarray(codes, dtype=np.int64)
    if codes.shape != (UNITS_PER_FRAME * t,):
        raise ShapeError(
            f"expected {UNITS_PER_FRAME * t} codes for {t} frames, "
            f"got {codes.shape}")
    if codes.min() < 0 or codes.max() >= v:
        raise DomainError(
            f"unit code out of range [0, {v}): {codes.min()}..{codes.max()}")
    logp = T.log_softmax(logits, axis=-1)
    onehot = np.zeros((t, UNITS_PER_FRAME, v))
    onehot.reshape(-1, v)[np.arange(codes.size), codes] = 1.0
    picked = T.sum_(T.mul(logp, T.Tensor(onehot)), axis=-1)
    return T.mul(T.mean(picked), -1.0)


class AlignmentHead(nn.Module):
    """Shared (or per-stream) encoder plus global/local token projectors."""

    def __init__(self, rng, config):
        enc_cfg = ConformerConfig(dim=config.dim, layers=config.layers,
                                  heads=config.heads,
                                  conv_kernel=config.conv_kernel)
        self.config = config
        self.encoder = ConformerEncoder(rng, enc_cfg)
        self.encoder_local = (None if config.share_encoder
                              else ConformerEncoder(rng, enc_cfg))
        out = UNITS_PER_FRAME * config.codebook_size
        self.proj_global = nn.Linear(rng, config.dim, out)
        self.proj_local = nn.Linear(rng, config.dim, out)

    def global_logits(self, G):
        """G: (T, D) -> (T, 4, V)."""
        t = G.shape[0]
        enc = self.encoder(nn.add_positions(G))
        return T.reshape(self.proj_global(enc),
                         (t, UNITS_PER_FRAME, self.config.codebook_size))

    def local_logits(self, streams):
        """streams: (N, T, D) -> (N, T, 4, V)."""
        n, t, _ = streams.shape
        encoder = self.encoder if self.config.share_encoder else self.encoder_local
        enc = encoder(nn.add_positions(streams))
        return T.reshape(self.proj_local(enc),
                         (n, t, UNITS_PER_FRAME, self.config.codebook_size))


def alignment_loss(G, L, codes, head):
    """Total, global and local alignment losses.

    G: (T, D); L: (T, N, D); codes: length-4T unit ids.  The local part
    averages the per-stream cross entropies over the N regions, which
    equals one mean over all stream positions (equal position counts).
    With a shared encoder the global and local streams ride one batched
    encoder pass.
    """
    streams = T.transpose(L, (1, 0, 2))
    if head.config.share_encoder:
        t, d = G.shape
        stacked = T.concat([T.reshape(G, (1, t, d)), streams], axis=0)
        enc = head.encoder(nn.add_positions(stacked))
        v = head.config.codebook_size
        logits_g = T.reshape(head.proj_global(enc[0]),
                             (t, UNITS_PER_FRAME, v))
        logits_l = T.reshape(head.proj_local(enc[1:]),
                             (streams.shape[0], t, UNITS_PER_FRAME, v))
        global_part = unit_ce_loss(logits_g, codes)
        local_part = unit_ce_loss(logits_l, codes)
    else:
        global_part = unit_ce_loss(head.global_logits(G), codes)
        local_part = unit_ce_loss(head.local_logits(streams), codes)
    return T.add(global_part, local_part), global_part, local_part
