"""Sequence recognizer: conformer encoder, CTC head, autoregressive
attention decoder, hybrid loss and greedy/beam decoding.

The CTC loss runs the standard forward recursion in the log domain
(kernel-backed, with the exact alpha-beta gradient).  Decoding combines
the attention log-probability with a CTC score under a joint weight;
beam search scores partial hypotheses with a CTC prefix recursion and
always keeps the greedy hypothesis in the final candidate pool, so a
wider search can only match or improve the returned joint score.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from . import nn
from . import tensor as T
from .conformer import ConformerConfig, ConformerEncoder
from .errors import ConfigError, ShapeError

NEG_INF = -np.inf


class InadmissibleTargetWarning(UserWarning):
    """Target cannot be aligned within the available frames; loss is +inf."""


class Vocab:
    """Character inventory with stable ids.

    Layout: characters 0..C-1, then blank (CTC only), sos (decoder
    input only), eos (decoder output), pad.  Decoder targets never
    contain blank; decoder output logits cover characters + eos.
    """

    def __init__(self, chars):
        self.chars = tuple(chars)
        c = len(self.chars)
        self.blank_id = c
        self.sos_id = c + 1
        self.eos_id = c + 2
        self.pad_id = c + 3
        self.tokens = self.chars + ("<blank>", "<sos>", "<eos>", "<pad>")
        self._to_id = {ch: i for i, ch in enumerate(self.chars)}

    @property
    def num_chars(self):
        return len(self.chars)

    def encode(self, text):
        return [self._to_id[ch] for ch in text]

    def decode(self, ids):
        return "".join(self.chars[i] for i in ids)


def _joint_score(ctc_score, attn_score, lam_dec):
    """Weighted combination, with 0 * -inf defined as 0 at the
    boundaries."""
    if lam_dec == 0.0:
        return attn_score
    if lam_dec == 1.0:
        return ctc_score
    return lam_dec * ctc_score + (1.0 - lam_dec) * attn_score


def min_ctc_frames(target):
    """Smallest T that admits the target: one frame per label plus one
    separating blank between adjacent repeats."""
    target = list(target)
    repeats = sum(1 for i in range(1, len(target))
                  if target[i] == target[i - 1])
    return len(target) + repeats


def ctc_loss(log_probs, target, blank):
    """Negative log of the total probability over all CTC alignments.

    log_probs: Tensor (T, K) of per-frame log-probabilities; target:
    sequence of ids < K excluding blank.  An inadmissible target (T too
    short) yields +inf with a warning rather than a silent clip.
    """
    t_len, klass = log_probs.shape
    target = np.asarray(list(target), dtype=np.int64)
    if target.size and (target.min() < 0 or target.max() >= klass):
        raise ShapeError(
            f"target ids must lie in [0, {klass}), got "
            f"{target.min()}..{target.max()}")
    if t_len < min_ctc_frames(target):
        warnings.warn(
            f"target length {target.size} needs >= {min_ctc_frames(target)} "
            f"frames, got {t_len}; CTC loss is +inf",
            InadmissibleTargetWarning)
        return T.Tensor(np.inf)
    loss, grad = K.ctc_forward_backward(
        np.ascontiguousarray(log_probs.data), target, blank)

    def bw(g):
        log_probs._accum(float(g) * grad)

    return T._node(np.float64(loss), (log_probs,), "ctc_loss", bw)


def attention_ce_loss(decoder_logits, target_with_eos):
    """Mean token-level cross entropy under teacher forcing.

    decoder_logits: (U, K) where U = len(target) + 1; target_with_eos:
    ids of the target followed by the end marker (output-index space).
    """
    u, klass = decoder_logits.shape
    ids = np.asarray(list(target_with_eos), dtype=np.int64)
    if ids.shape != (u,):
        raise ShapeError(
            f"expected {u} target ids (target + end marker), got {ids.shape}")
    logp = T.log_softmax(decoder_logits, axis=-1)
    onehot = np.zeros((u, klass))
    onehot[np.arange(u), ids] = 1.0
    return T.mul(T.mean(T.sum_(T.mul(logp, T.Tensor(onehot)), axis=-1)), -1.0)


def hybrid_loss(ctc, ce, lam):
    """lam * ctc + (1 - lam) * ce."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"hybrid weight must lie in [0, 1], got {lam}")
    return T.add(T.mul(ctc, lam), T.mul(ce, 1.0 - lam))


@dataclass
class RecognizerConfig:
    dim: int = 32
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    conv_kernel: int = 7
    lam: float = 0.1
    max_decode_factor: int = 2


@dataclass
class Hypothesis:
    tokens: list
    text: str
    score: float
    ctc_score: float
    attn_score: float


class DecoderLayer(nn.Module):
    def __init__(self, rng, dim, heads, ffn_mult=2):
        self.self_attn = nn.MultiHeadAttention(rng, dim, heads)
        self.ln1 = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiHeadAttention(rng, dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.ffn = nn.FeedForward(rng, dim, ffn_mult * dim)
        self.ln3 = nn.LayerNorm(dim)

    def __call__(self, x, memory, memory_mask=None):
        x = self.ln1(T.add(x, self.self_attn(x, x, causal=True)))
        x = self.ln2(T.add(x, self.cross_attn(x, memory, mask=memory_mask)))
        return self.ln3(T.add(x, self.ffn(x)))


class Recognizer(nn.Module):
    def __init__(self, rng, vocab, config=None):
        cfg = config or RecognizerConfig()
        self.config = cfg
        self.vocab = vocab
        enc_cfg = ConformerConfig(dim=cfg.dim, layers=cfg.enc_layers,
                                  heads=cfg.heads,
                                  conv_kernel=cfg.conv_kernel)
        self.encoder = ConformerEncoder(rng, enc_cfg)
        self.ctc_head = nn.Linear(rng, cfg.dim, vocab.num_chars + 1)
        # decoder input embeddings: characters + sos
        self.embed = nn.param(rng, (vocab.num_chars + 1, cfg.dim),
                              1.0 / np.sqrt(cfg.dim))
        self.dec_layers = [DecoderLayer(rng, cfg.dim, cfg.heads)
                           for _ in range(cfg.dec_layers)]
        # decoder output logits: characters + eos
        self.out_proj = nn.Linear(rng, cfg.dim, vocab.num_chars + 1)

    @property
    def eos_out(self):
        """Index of the end marker in decoder output logits."""
        return self.vocab.num_chars

    @property
    def sos_in(self):
        """Index of the start marker in the decoder input embeddings."""
        return self.vocab.num_chars

    def encode(self, x):
        """x: (T, D) fused visual features -> (T, D)."""
        return self.encoder(nn.add_positions(x))

    def ctc_log_probs(self, encoded):
        return T.log_softmax(self.ctc_head(encoded), axis=-1)

    def decoder_logits(self, encoded, target_ids):
        """Teacher-forced logits: (len(target)+1, num_chars+1)."""
        inputs = np.concatenate(([self.sos_in],
                                 np.asarray(target_ids, dtype=np.int64)))
        x = nn.add_positions(T.embedding(self.embed, inputs))
        for layer in self.dec_layers:
            x = layer(x, encoded)
        return self.out_proj(x)

    def loss(self, fused, target_ids):
        """Hybrid loss over one clip; returns (total, ctc, ce)."""
        encoded = self.encode(fused)
        ctc = ctc_loss(self.ctc_log_probs(encoded), target_ids,
                       self.vocab.blank_id)
        logits = self.decoder_logits(encoded, target_ids)
        ce = attention_ce_loss(logits, list(target_ids) + [self.eos_out])
        return hybrid_loss(ctc, ce, self.config.lam), ctc, ce

    def batch_loss(self, fused_list, targets_list):
        """Per-clip (total, ctc, ce) with encoder and decoder running on
        one zero-padded batch.

        Padded keys are masked to exactly zero attention weight and
        padded rows never reach a loss term, so the results match the
        per-clip path."""
        batch, lengths = nn.pad_stack(fused_list)
        t_max = batch.shape[1]
        encoded = self.encoder(nn.add_positions(batch), lengths=lengths)
        mem_mask = nn.key_padding_mask(lengths, t_max)

        u_lens = [len(t) + 1 for t in targets_list]
        u_max = max(u_lens)
        inputs = np.full((len(fused_list), u_max), self.sos_in, dtype=np.int64)
        for i, target in enumerate(targets_list):
            inputs[i, 1:len(target) + 1] = target
        x = nn.add_positions(T.embedding(self.embed, inputs))
        for layer in self.dec_layers:
            x = layer(x, encoded, memory_mask=mem_mask)
        logits = self.out_proj(x)

        out = []
        for i, target in enumerate(targets_list):
            enc_i = encoded[i, :lengths[i]]
            ctc = ctc_loss(self.ctc_log_probs(enc_i), target,
                           self.vocab.blank_id)
            ce = attention_ce_loss(logits[i, :u_lens[i]],
                                   list(target) + [self.eos_out])
            out.append((hybrid_loss(ctc, ce, self.config.lam), ctc, ce))
        return out

    # ---------------- decoding ----------------

    def _step_log_probs(self, encoded, prefix):
        logits = self.decoder_logits(encoded, prefix)
        return T.log_softmax(logits, axis=-1).data[-1]

    def _ctc_full_score(self, ctc_lp, tokens):
        if len(tokens) and ctc_lp.shape[0] < min_ctc_frames(tokens):
            return NEG_INF
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", InadmissibleTargetWarning)
            loss, _ = K.ctc_forward_backward(
                np.ascontiguousarray(ctc_lp),
                np.asarray(tokens, dtype=np.int64), self.vocab.blank_id)
        return -loss

    def _finalize(self, tokens, attn_score, ctc_lp, lam_dec):
        ctc_score = self._ctc_full_score(ctc_lp, tokens)
        joint = _joint_score(ctc_score, attn_score, lam_dec)
        return Hypothesis(tokens=list(tokens),
                          text=self.vocab.decode(tokens), score=joint,
                          ctc_score=ctc_score, attn_score=attn_score)

    def _greedy(self, encoded, ctc_lp, lam_dec, max_len):
        tokens, attn_score = [], 0.0
        for _ in range(max_len):
            lp = self._step_log_probs(encoded, tokens)
            nxt = int(np.argmax(lp))
            attn_score += float(lp[nxt])
            if nxt == self.eos_out:
                break
            tokens.append(nxt)
        return self._finalize(tokens, attn_score, ctc_lp, lam_dec)

    def decode(self, fused, mode="greedy", beam_width=4, lam_dec=None,
               max_len=None):
        """Decode fused features (T, D) into a Hypothesis.

        Greedy follows the stepwise attention argmax.  Beam keeps the
        top-W partial hypotheses under the joint score (attention +
        CTC prefix), finishing at the end marker or the length cap.
        """
        if mode not in ("greedy", "beam"):
            raise ConfigError(f"unknown decode mode {mode!r}")
        if mode == "beam" and beam_width < 1:
            raise ConfigError(f"beam width must be >= 1, got {beam_width}")
        lam_dec = self.config.lam if lam_dec is None else lam_dec
        with T.no_grad():
            encoded = self.encode(fused)
            ctc_lp = self.ctc_log_probs(encoded).data
            t_len = encoded.shape[0]
            max_len = max_len or self.config.max_decode_factor * t_len
            greedy = self._greedy(encoded, ctc_lp, lam_dec, max_len)
            if mode == "greedy":
                return greedy
            return self._beam(encoded, ctc_lp, lam_dec, max_len,
                              beam_width, greedy)

    def _beam(self, encoded, ctc_lp, lam_dec, max_len, width, greedy):
        scorer = CTCPrefixScorer(ctc_lp, self.vocab.blank_id)
        # live entries: (tokens, attn_score, prefix_state)
        live = [([], 0.0, scorer.initial_state())]
        finished = [greedy]
        for _ in range(max_len):
            candidates = []
            for tokens, attn, state in live:
                lp = self._step_log_probs(encoded, tokens)
                eos_attn = attn + float(lp[self.eos_out])
                finished.append(self._finalize(tokens, eos_attn, ctc_lp,
                                               lam_dec))
                ctc_scores, states = scorer.extensions(state)
                for c in range(self.vocab.num_chars):
                    a = attn + float(lp[c])
                    joint = _joint_score(float(ctc_scores[c]), a, lam_dec)
                    candidates.append((joint, tokens + [c], a, states, c))
            if not candidates:
                break
            candidates.sort(key=lambda e: (-e[0], e[1]))
            live = [(toks, a, st.select(c))
                    for _, toks, a, st, c in candidates[:width]]
        for tokens, attn, _ in live:
            finished.append(self._finalize(tokens, attn, ctc_lp, lam_dec))
        return max(finished, key=lambda h: h.score)


class CTCPrefixScorer:
    """Incremental CTC prefix probabilities for beam search.

    State after prefix g holds, per frame t, the log-probability of
    paths over frames <= t whose collapse equals g, split by whether
    the path ends in a nonblank (r_n) or blank (r_b).  ``extensions``
    returns, for every character c, log P(output starts with g·c).
    """

    def __init__(self, log_probs, blank):
        self.lp = log_probs
        self.t_len, self.klass = log_probs.shape
        self.blank = blank

    def initial_state(self):
        r_b = np.cumsum(self.lp[:, self.blank])
        r_n = np.full(self.t_len, NEG_INF)
        return _PrefixState(self, r_n, r_b, last=None, none_yet=True)

    def extensions(self, state):
        """Prefix scores and batched successor states for all chars."""
        lp, t_len = self.lp, self.t_len
        chars = [c for c in range(self.klass) if c != self.blank]
        # phi[t, c]: mass of g-paths at t that may start emitting c at t+1
        phi = np.repeat(np.logaddexp(state.r_b, state.r_n)[:, None],
                        len(chars), axis=1)
        if state.last is not None:
            phi[:, chars.index(state.last)] = state.r_b
        r_n = np.full((t_len, len(chars)), NEG_INF)
        r_b = np.full((t_len, len(chars)), NEG_INF)
        emit = lp[:, chars]
        start = emit[0] if state.none_yet else np.full(len(chars), NEG_INF)
        r_n[0] = start
        r_b[0] = NEG_INF
        psi = r_n[0].copy()
        for t in range(1, t_len):
            r_n[t] = np.logaddexp(r_n[t - 1], phi[t - 1]) + emit[t]
            r_b[t] = np.logaddexp(r_b[t - 1], r_n[t - 1]) + lp[t, self.blank]
            psi = np.logaddexp(psi, phi[t - 1] + emit[t])
        scores = np.full(self.klass, NEG_INF)
        scores[chars] = psi
        bundle = _ExtensionBundle(self, chars, r_n, r_b)
        return scores, bundle


class _ExtensionBundle:
    def __init__(self, scorer, chars, r_n, r_b):
        self.scorer = scorer
        self.chars = chars
        self.r_n = r_n
        self.r_b = r_b

    def select(self, c):
        i = self.chars.index(c)
        return _PrefixState(self.scorer, self.r_n[:, i].copy(),
                            self.r_b[:, i].copy(), last=c, none_yet=False)


@dataclass
class _PrefixState:
    scorer: CTCPrefixScorer
    r_n: np.ndarray
    r_b: np.ndarray
    last: object
    none_yet: bool
