"""Recognizer: attention cross entropy, hybrid loss identities, CTC
prefix scoring and greedy/beam decoding."""

import itertools
import math

import numpy as np
import pytest

from vsrkit import optim, tensor as T
from vsrkit.errors import ConfigError
from vsrkit.recognizer import (CTCPrefixScorer, Recognizer, RecognizerConfig,
                               Vocab, attention_ce_loss, hybrid_loss)


def tiny_recognizer(rng, chars="abc"):
    cfg = RecognizerConfig(dim=8, enc_layers=1, dec_layers=1, heads=2,
                           conv_kernel=3, lam=0.1)
    return Recognizer(rng, Vocab(chars), cfg)


class TestVocab:
    def test_stable_ids_and_markers(self):
        v = Vocab("abc")
        assert v.tokens == ("a", "b", "c", "<blank>", "<sos>", "<eos>",
                            "<pad>")
        assert (v.blank_id, v.sos_id, v.eos_id, v.pad_id) == (3, 4, 5, 6)
        assert v.encode("cab") == [2, 0, 1]
        assert v.decode([2, 0, 1]) == "cab"


class TestAttentionCE:
    def test_perfect_one_hot_logits(self):
        logits = np.full((3, 5), -1e4)
        targets = [1, 4, 0]
        logits[np.arange(3), targets] = 1e4
        loss = attention_ce_loss(T.Tensor(logits), targets)
        assert loss.item() < 1e-9

    def test_uniform_logits_give_log_vocab(self):
        loss = attention_ce_loss(T.Tensor(np.zeros((4, 28))), [0, 5, 27, 3])
        np.testing.assert_allclose(loss.item(), math.log(28), atol=1e-9)
        np.testing.assert_allclose(loss.item(), 3.3322, atol=1e-4)

    def test_matches_loop_oracle(self, rng):
        logits = rng.normal(size=(3, 6))
        targets = [4, 0, 5]
        got = attention_ce_loss(T.Tensor(logits), targets).item()
        acc = 0.0
        for i, tgt in enumerate(targets):
            p = np.exp(logits[i]) / np.exp(logits[i]).sum()
            acc -= math.log(p[tgt])
        np.testing.assert_allclose(got, acc / 3, atol=1e-12)

    def test_empty_target_scores_end_marker_only(self, rng):
        rec = tiny_recognizer(rng)
        enc = rec.encode(T.Tensor(rng.normal(size=(4, 8))))
        logits = rec.decoder_logits(enc, [])
        assert logits.shape == (1, rec.vocab.num_chars + 1)
        loss = attention_ce_loss(logits, [rec.eos_out])
        assert np.isfinite(loss.item())


class TestHybrid:
    def test_boundary_identities(self, rng):
        ctc = T.Tensor(rng.normal() ** 2)
        ce = T.Tensor(rng.normal() ** 2)
        assert hybrid_loss(ctc, ce, 0.0).item() == ce.item()
        assert hybrid_loss(ctc, ce, 1.0).item() == ctc.item()

    def test_default_weight_value(self):
        got = hybrid_loss(T.Tensor(2.0), T.Tensor(1.0), 0.1)
        np.testing.assert_allclose(got.item(), 1.1, atol=1e-15)

    def test_out_of_range_weight_rejected(self):
        with pytest.raises(ConfigError):
            hybrid_loss(T.Tensor(1.0), T.Tensor(1.0), 1.5)
        with pytest.raises(ConfigError):
            hybrid_loss(T.Tensor(1.0), T.Tensor(1.0), -0.1)

    def test_gradient_linearity(self, rng):
        rec = tiny_recognizer(rng)
        fused = rng.normal(size=(6, 8))
        target = rec.vocab.encode("ab")
        lam = 0.3
        grads = {}
        for which in ("hybrid", "ctc", "ce"):
            rec.zero_grad()
            total, ctc, ce = rec.loss(T.Tensor(fused), target)
            pick = {"hybrid": hybrid_loss(ctc, ce, lam), "ctc": ctc,
                    "ce": ce}[which]
            T.backward(pick)
            grads[which] = {k: (p.grad.copy() if p.grad is not None
                                else np.zeros_like(p.data))
                            for k, p in rec.named_parameters().items()}
        for name in grads["hybrid"]:
            want = lam * grads["ctc"][name] + (1 - lam) * grads["ce"][name]
            np.testing.assert_allclose(grads["hybrid"][name], want,
                                       atol=1e-10, err_msg=name)


class TestPrefixScorer:
    def test_prefix_probability_matches_enumeration(self, rng):
        t_len, v = 4, 2
        k = v + 1
        logits = rng.normal(size=(t_len, k))
        logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
        scorer = CTCPrefixScorer(logp, blank=v)

        def brute_prefix_prob(prefix):
            total = 0.0
            for path in itertools.product(range(k), repeat=t_len):
                out = []
                prev = None
                for p in path:
                    if p != prev and p != v:
                        out.append(p)
                    prev = p
                if tuple(out[:len(prefix)]) == prefix:
                    total += float(np.exp(sum(logp[t, c]
                                              for t, c in enumerate(path))))
            return total

        state = scorer.initial_state()
        scores, bundle = scorer.extensions(state)
        for c in range(v):
            np.testing.assert_allclose(float(np.exp(scores[c])),
                                       brute_prefix_prob((c,)), atol=1e-10)
        state1 = bundle.select(0)
        scores2, _ = scorer.extensions(state1)
        for c in range(v):
            np.testing.assert_allclose(float(np.exp(scores2[c])),
                                       brute_prefix_prob((0, c)), atol=1e-10)


def trained_recognizer(rng, steps=150):
    """Overfit a tiny recognizer on two fixed feature/transcript pairs."""
    rec = tiny_recognizer(rng)
    data = [(rng.normal(size=(10, 8)), rec.vocab.encode("ab")),
            (rng.normal(size=(12, 8)), rec.vocab.encode("ca"))]
    named = rec.named_parameters()
    params = [named[k] for k in sorted(named)]
    opt = optim.AdamW(params, lr=3e-3)
    for _ in range(steps):
        losses = []
        for fused, target in data:
            total, _, _ = rec.loss(T.Tensor(fused), target)
            losses.append(total)
        combined = T.mul(T.add(losses[0], losses[1]), 0.5)
        T.backward(combined)
        optim.clip_grad_norm(params, 5.0)
        opt.step()
        opt.zero_grad()
    return rec, data


class TestDecode:
    def test_untrained_model_terminates_at_cap(self, rng):
        rec = tiny_recognizer(rng)
        fused = T.Tensor(rng.normal(size=(5, 8)))
        hyp = rec.decode(fused, mode="greedy")
        assert len(hyp.tokens) <= 2 * 5
        assert isinstance(hyp.text, str)

    def test_beam_width_one_attention_only_matches_greedy(self, rng):
        rec = tiny_recognizer(rng)
        fused = T.Tensor(rng.normal(size=(6, 8)))
        greedy = rec.decode(fused, mode="greedy")
        beam = rec.decode(fused, mode="beam", beam_width=1, lam_dec=0.0)
        assert beam.tokens == greedy.tokens

    def test_invalid_configuration_rejected(self, rng):
        rec = tiny_recognizer(rng)
        fused = T.Tensor(rng.normal(size=(4, 8)))
        with pytest.raises(ConfigError):
            rec.decode(fused, mode="beam", beam_width=0)
        with pytest.raises(ConfigError):
            rec.decode(fused, mode="dijkstra")

    def test_beam_never_scores_below_greedy_on_trained_model(self, rng):
        rec, data = trained_recognizer(rng)
        held_out = T.Tensor(np.random.default_rng(99).normal(size=(11, 8)))
        for fused in [T.Tensor(data[0][0]), T.Tensor(data[1][0]), held_out]:
            greedy = rec.decode(fused, mode="greedy", lam_dec=0.1)
            beam = rec.decode(fused, mode="beam", beam_width=4, lam_dec=0.1)
            assert beam.score >= greedy.score - 1e-12

    def test_wider_beam_never_returns_lower_score(self, rng):
        rec, data = trained_recognizer(rng)
        fused = T.Tensor(data[0][0])
        scores = [rec.decode(fused, mode="beam", beam_width=w,
                             lam_dec=0.1).score
                  for w in (1, 2, 4, 8)]
        for narrow, wide in zip(scores, scores[1:]):
            assert wide >= narrow - 1e-12

    def test_joint_score_composition(self, rng):
        rec, data = trained_recognizer(rng, steps=30)
        hyp = rec.decode(T.Tensor(data[0][0]), mode="greedy", lam_dec=0.25)
        want = 0.25 * hyp.ctc_score + 0.75 * hyp.attn_score
        np.testing.assert_allclose(hyp.score, want, atol=1e-12)

    def test_trained_model_recovers_training_transcripts(self, rng):
        rec, data = trained_recognizer(rng)
        got = rec.decode(T.Tensor(data[0][0]), mode="greedy")
        assert got.text == "ab"
