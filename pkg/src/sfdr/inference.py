"""Greedy and beam-search caption generation.

Generation never emits PAD, BOS or UNK.  EOS competes normally on score but
loses exact ties to content tokens, which keeps the degenerate all-equal-
logits model emitting the lowest content id instead of stopping immediately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data_io import BOS, EOS, PAD, UNK, FeatureBundle, TokenSeq
from .decoder import decode
from .model import CaptionModel

BLOCKED_IDS = (PAD, BOS, UNK)


def step_log_probs(context: Tensor, ids: list[int],
                   model: CaptionModel) -> np.ndarray:
    """Masked log-distribution over the next token after the given prefix."""
    out = decode(context, ids, model.decoder)
    logits = out.logits.data[-1].copy()
    logits[list(BLOCKED_IDS)] = -np.inf
    shifted = logits - logits.max()
    return shifted - np.log(np.sum(np.exp(shifted)))


def _pick(scores: np.ndarray) -> int:
    """Argmax; ties prefer content tokens over specials, then lowest id."""
    best = scores.max()
    tied = np.flatnonzero(scores == best)
    return int(min(tied, key=lambda i: (i < 4, i)))


@dataclass
class CaptionHypothesis:
    tokens: TokenSeq
    logprob: float
    finished: bool

    def normalized(self, length_norm: float) -> float:
        n = max(1, len(self.tokens.ids) - 1)  # generated tokens
        return self.logprob / (n ** length_norm)


def greedy_decode(model: CaptionModel, bundle: FeatureBundle,
                  use_text: bool = False,
                  max_new: int | None = None) -> CaptionHypothesis:
    """Argmax decoding from BOS until EOS or the generation cap."""
    cap = max_new if max_new is not None else model.cfg.max_len
    with ad.no_grad():
        context = model.forward_context(bundle, use_text).context
        ids = [BOS]
        logprob = 0.0
        finished = False
        while len(ids) - 1 < cap:
            lp = step_log_probs(context, ids, model)
            tok = _pick(lp)
            logprob += float(lp[tok])
            ids.append(tok)
            if tok == EOS:
                finished = True
                break
    return CaptionHypothesis(tokens=TokenSeq(ids), logprob=logprob,
                             finished=True if finished else len(ids) - 1 >= cap)


def beam_search(model: CaptionModel, bundle: FeatureBundle, beam: int = 5,
                length_norm: float = 0.0, use_text: bool = False,
                max_new: int | None = None) -> list[CaptionHypothesis]:
    """Breadth-limited best-first decoding keeping the top prefixes per step.

    Finished hypotheses collect in a done pool; the search stops once the
    pool holds `beam` entries whose normalized scores beat every optimistic
    bound of a live prefix.  Output is sorted by normalized score, ties by
    token ids ascending.
    """
    if beam < 1:
        raise ValueError(f"beam width must be >= 1, got {beam}")
    cap = max_new if max_new is not None else model.cfg.max_len

    def norm(lp: float, n_generated: int) -> float:
        return lp / (max(1, n_generated) ** length_norm)

    def bound(lp: float) -> float:
        # optimistic future score of a live prefix: log-probs only shrink,
        # but a longer length can shrink the denominator's effect
        if length_norm == 0.0:
            return lp
        return norm(lp, cap) if lp < 0 else lp

    with ad.no_grad():
        context = model.forward_context(bundle, use_text).context
        live: list[tuple[list[int], float]] = [([], 0.0)]
        done: list[CaptionHypothesis] = []
        for _ in range(cap):
            expansions: list[tuple[float, tuple, list[int], float, int]] = []
            for content, lp in live:
                step = step_log_probs(context, [BOS] + content, model)
                for tok in range(len(step)):
                    if tok in BLOCKED_IDS:
                        continue
                    total = lp + float(step[tok])
                    seq = content + [tok]
                    expansions.append(
                        (-norm(total, len(seq)), (tok < 4,), seq, total, tok))
            expansions.sort(key=lambda e: (e[0], e[1], e[2]))
            live = []
            for _, _, seq, total, tok in expansions[:beam]:
                if tok == EOS:
                    done.append(CaptionHypothesis(
                        tokens=TokenSeq([BOS] + seq), logprob=total,
                        finished=True))
                elif len(seq) >= cap:
                    done.append(CaptionHypothesis(
                        tokens=TokenSeq([BOS] + seq), logprob=total,
                        finished=True))
                else:
                    live.append((seq, total))
            if not live:
                break
            if len(done) >= beam:
                worst_done = sorted(
                    (h.normalized(length_norm) for h in done), reverse=True)[beam - 1]
                if all(bound(lp) <= worst_done for _, lp in live):
                    break
        for content, lp in live:
            done.append(CaptionHypothesis(tokens=TokenSeq([BOS] + content),
                                          logprob=lp, finished=False))
    done.sort(key=lambda h: (-h.normalized(length_norm), h.tokens.ids))
    return done[:beam]


def sample_sequence(model: CaptionModel, bundle: FeatureBundle,
                    rng: np.random.Generator, use_text: bool = False,
                    max_new: int | None = None) -> CaptionHypothesis:
    """Multinomial sampling at temperature 1 from the masked distribution."""
    cap = max_new if max_new is not None else model.cfg.max_len
    with ad.no_grad():
        context = model.forward_context(bundle, use_text).context
        ids = [BOS]
        logprob = 0.0
        finished = False
        while len(ids) - 1 < cap:
            lp = step_log_probs(context, ids, model)
            probs = np.exp(lp)
            probs[list(BLOCKED_IDS)] = 0.0
            probs /= probs.sum()
            tok = int(rng.choice(len(probs), p=probs))
            logprob += float(lp[tok])
            ids.append(tok)
            if tok == EOS:
                finished = True
                break
    return CaptionHypothesis(tokens=TokenSeq(ids), logprob=logprob,
                             finished=True if finished else len(ids) - 1 >= cap)


def score_sequence(model: CaptionModel, bundle: FeatureBundle, seq: TokenSeq,
                   use_text: bool = False) -> float:
    """Teacher-forced log-likelihood under the generation-time distribution."""
    if len(seq.ids) < 2:
        return 0.0
    with ad.no_grad():
        context = model.forward_context(bundle, use_text).context
        out = decode(context, seq.ids[:-1], model.decoder)
        logits = out.logits.data.copy()
        logits[:, list(BLOCKED_IDS)] = -np.inf
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
        targets = seq.ids[1:]
        return float(sum(log_probs[t, tok] for t, tok in enumerate(targets)))


def sequence_log_prob_tensor(model: CaptionModel, bundle: FeatureBundle,
                             seq: TokenSeq, use_text: bool = False):
    """Differentiable sum of generation-time log-probs of a fixed sequence."""
    mask = np.ones((len(seq.ids) - 1, model.cfg.vocab_size), dtype=bool)
    mask[:, list(BLOCKED_IDS)] = False
    trace = model.forward_context(bundle, use_text)
    out = decode(trace.context, seq.ids[:-1], model.decoder)
    picked = ad.picked_log_softmax_rows(out.logits, mask, seq.ids[1:])
    return ad.sum_all(picked)


def attention_rows(model: CaptionModel, bundle: FeatureBundle, seq: TokenSeq,
                   use_text: bool = False) -> np.ndarray:
    """Cross-attention weights (final layer, mean over heads), one row per
    generated token: row t is the attention that produced seq.ids[t + 1]."""
    with ad.no_grad():
        trace = model.forward_context(bundle, use_text)
        out = decode(trace.context, seq.ids[:-1], model.decoder,
                     want_attention=True)
    return out.cross_attention[-1]
