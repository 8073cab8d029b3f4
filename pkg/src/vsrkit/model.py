"""Model assembly for the two training stages.

Stage 1: front-end + dual-path features + alignment head predicting
speech units from the global stream and every local stream.

Stage 2: front-end + dual-path features, fused to one sequence per the
configured mode, then the recognizer (encoder, CTC head, attention
decoder).  Fusion modes:

    cem          cross-attention enhancement of local streams by the
                 global sequence, then region averaging
    avg          plain mean of the global stream and all region streams
    global_only  the global stream alone
    local_only   region average alone, no enhancement

Stage-2 runs may initialize the front-end and dual-path weights from a
stage-1 checkpoint; the alignment head is always dropped.  Optionally
the stage-1 alignment encoder can seed the recognizer encoder.
"""

import numpy as np

from . import nn
from . import tensor as T
from .alignment import AlignmentConfig, AlignmentHead, alignment_loss, unit_ce_loss
from .cem import ContextualEnhancer, average_regions
from .checkpoint import load_into
from .errors import CheckpointError
from .corpus import CHARS
from .dualpath import DualPathConfig, DualPathExtractor
from .frontend import FrontendConfig, VisualFrontend
from .recognizer import Recognizer, RecognizerConfig, Vocab


def build_vocab():
    return Vocab(CHARS)


def _frontend(cfg, rng):
    fcfg = FrontendConfig(stage_channels=tuple(cfg.stage_channels),
                          stem_stride=cfg.stem_stride,
                          embed_dim=cfg.embed_dim)
    return VisualFrontend(rng, fcfg), fcfg


def _dualpath(cfg, rng, fcfg):
    dcfg = DualPathConfig(num_regions=cfg.num_regions,
                          embed_dim=cfg.embed_dim,
                          assign_softmax_axis=cfg.assign_softmax_axis)
    return DualPathExtractor(rng, dcfg,
                             final_channels=fcfg.stage_channels[-1],
                             penult_channels=fcfg.stage_channels[-2])


class Stage1Model(nn.Module):
    def __init__(self, cfg):
        seed = cfg.seed
        self.cfg = cfg
        self.frontend, fcfg = _frontend(cfg, np.random.default_rng([seed, 1]))
        self.dualpath = _dualpath(cfg, np.random.default_rng([seed, 2]), fcfg)
        acfg = AlignmentConfig(dim=cfg.embed_dim, layers=cfg.enc_layers,
                               heads=cfg.heads, conv_kernel=cfg.conv_kernel,
                               codebook_size=cfg.codebook_size,
                               share_encoder=cfg.share_alignment_encoder)
        self.align = AlignmentHead(np.random.default_rng([seed, 5]), acfg)

    def _pair_loss(self, pair, codes):
        if self.cfg.stage1_branches == "global":
            g = self.dualpath.global_branch(pair.F)
            global_part = unit_ce_loss(self.align.global_logits(g), codes)
            return global_part, global_part, None
        feats = self.dualpath(pair)
        return alignment_loss(feats.G, feats.L, codes, self.align)

    def loss(self, frames, codes):
        """frames: (T, 1, H, W) ndarray; codes: 4T unit ids.

        Returns (total, global_part, local_part); with global-only
        branches the total is just the global part.
        """
        return self._pair_loss(self.frontend(T.Tensor(frames)), codes)

    def batch_losses(self, frames_list, codes_list):
        """Per-clip losses; the clip batch shares the 2D stages and,
        with a shared alignment encoder, one padded encoder pass."""
        pairs = self.frontend.forward_clips([T.Tensor(f) for f in frames_list])
        if not self.cfg.share_alignment_encoder:
            return [self._pair_loss(pair, codes)
                    for pair, codes in zip(pairs, codes_list)]

        head = self.align
        v = head.config.codebook_size
        global_only = self.cfg.stage1_branches == "global"
        seqs, lengths, feats = [], [], []
        for pair in pairs:
            if global_only:
                g = self.dualpath.global_branch(pair.F)
                feats.append((g, None))
                seqs.append(g)
            else:
                f = self.dualpath(pair)
                streams = T.transpose(f.L, (1, 0, 2))
                feats.append((f.G, streams))
                seqs.append(f.G)
                n, t, d = streams.shape
                for i in range(n):
                    seqs.append(streams[i])
        batch, lengths = nn.pad_stack(seqs)
        enc = head.encoder(nn.add_positions(batch), lengths=lengths)

        from .alignment import UNITS_PER_FRAME
        out = []
        row = 0
        for (g, streams), codes in zip(feats, codes_list):
            t = g.shape[0]
            logits_g = T.reshape(head.proj_global(enc[row, :t]),
                                 (t, UNITS_PER_FRAME, v))
            global_part = unit_ce_loss(logits_g, codes)
            row += 1
            if streams is None:
                out.append((global_part, global_part, None))
                continue
            n = streams.shape[0]
            local_rows = enc[row:row + n, :t]
            row += n
            logits_l = T.reshape(head.proj_local(local_rows),
                                 (n, t, UNITS_PER_FRAME, v))
            local_part = unit_ce_loss(logits_l, codes)
            out.append((T.add(global_part, local_part), global_part,
                        local_part))
        return out


class Stage2Model(nn.Module):
    def __init__(self, cfg, vocab=None):
        seed = cfg.seed
        self.cfg = cfg
        self.vocab = vocab or build_vocab()
        self.frontend, fcfg = _frontend(cfg, np.random.default_rng([seed, 1]))
        self.dualpath = _dualpath(cfg, np.random.default_rng([seed, 2]), fcfg)
        self.cem = (ContextualEnhancer(np.random.default_rng([seed, 3]),
                                       cfg.embed_dim, cfg.cem_layers)
                    if cfg.fusion == "cem" else None)
        rcfg = RecognizerConfig(dim=cfg.embed_dim, enc_layers=cfg.enc_layers,
                                dec_layers=cfg.dec_layers, heads=cfg.heads,
                                conv_kernel=cfg.conv_kernel, lam=cfg.lam)
        self.recognizer = Recognizer(np.random.default_rng([seed, 4]),
                                     self.vocab, rcfg)

    def _fuse(self, feats):
        mode = self.cfg.fusion
        if mode == "cem":
            return self.cem(feats.L, feats.G)
        if mode == "avg":
            n = feats.L.shape[1]
            total = T.add(feats.G, T.sum_(feats.L, axis=1))
            return T.mul(total, 1.0 / (n + 1))
        return average_regions(T.transpose(feats.L, (1, 0, 2)))

    def fused_features(self, frames):
        """(T, 1, H, W) ndarray -> fused sequence (T, D) per the mode."""
        pair = self.frontend(T.Tensor(frames))
        if self.cfg.fusion == "global_only":
            return self.dualpath.global_branch(pair.F)
        return self._fuse(self.dualpath(pair))

    def batch_fused(self, frames_list):
        pairs = self.frontend.forward_clips([T.Tensor(f) for f in frames_list])
        if self.cfg.fusion == "global_only":
            return [self.dualpath.global_branch(p.F) for p in pairs]
        feats = self.dualpath.forward_pairs(pairs)
        if self.cfg.fusion == "cem":
            return self.cem.batch([f.L for f in feats], [f.G for f in feats])
        return [self._fuse(f) for f in feats]

    def loss(self, frames, transcript):
        target = self.vocab.encode(transcript)
        return self.recognizer.loss(self.fused_features(frames), target)

    def batch_losses(self, frames_list, transcripts):
        """Per-clip (total, ctc, ce); the whole batch shares the 2D
        stages, the dual-path pass, one padded enhancement pass and one
        padded encoder/decoder pass."""
        fused = self.batch_fused(frames_list)
        targets = [self.vocab.encode(tr) for tr in transcripts]
        return self.recognizer.batch_loss(fused, targets)

    def decode(self, frames, **kwargs):
        return self.recognizer.decode(self.fused_features(frames), **kwargs)

    def attention_maps(self, frames):
        """(N, T, h, w) attention maps for heatmap export."""
        with T.no_grad():
            pair = self.frontend(T.Tensor(frames))
            return self.dualpath(pair).M.data


def transfer_stage1(stage2, state, load_alignment_encoder=False):
    """Initialize a stage-2 model from a stage-1 checkpoint state.

    Copies the front-end and dual-path tensors by name (all must be
    present with matching shapes) and drops the alignment head;
    optionally maps the stage-1 alignment encoder onto the recognizer
    encoder.
    """
    prefixes = ("frontend.", "dualpath.")
    carried = {k: v for k, v in state.items() if k.startswith(prefixes)}
    required = {k for k in stage2.named_parameters() if k.startswith(prefixes)}
    missing = sorted(required - set(carried))
    if missing:
        raise CheckpointError(
            "stage-1 checkpoint missing tensors:\n  " + "\n  ".join(missing))
    load_into(stage2, carried, strict=False)
    if load_alignment_encoder:
        enc = {"recognizer.encoder." + k[len("align.encoder."):]: v
               for k, v in state.items() if k.startswith("align.encoder.")}
        load_into(stage2, enc, strict=False)
