"""Decoding and evaluation: beam search, greedy decoding, and corpus BLEU.

Beam search is written against a plain scoring callable so it can be checked
by exhaustive enumeration with toy scorers; the model enters only through
`translate_ids`, which wraps its incremental decoder in such a callable.
"""

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .model import downsampled_length
from .subword import BOS, EOS


def length_penalty(n_emissions, alpha):
    """The ((5 + n) / 6) ** alpha normalizer; alpha 0 disables it."""
    if alpha == 0.0:
        return 1.0
    return ((5.0 + n_emissions) / 6.0) ** alpha


@dataclass
class BeamResult:
    tokens: list
    score: float
    finished: bool
    n_finished: int


def beam_search(score_fn, *, beam, max_len, alpha=0.0, bos=BOS, eos=EOS):
    """Best-first decoding with a fixed beam and GNMT length normalization.

    score_fn(prefix_ids) must return a (V,) array of log-probabilities for
    the next emission given the prefix (which always starts with bos). Every
    emission counts toward the length penalty, the terminating eos included.
    Hypotheses that emit eos are parked and keep competing on final score;
    the search always runs until max_len emissions or an empty beam, and
    equal scores resolve toward the lexicographically smaller token sequence.
    """
    if beam < 1:
        raise DataError(f"beam_search: beam must be >= 1, got {beam}")
    if max_len < 1:
        raise DataError(f"beam_search: max_len must be >= 1, got {max_len}")
    live = [((), 0.0)]
    finished = []
    for step in range(max_len):
        n_emit = step + 1
        penal = length_penalty(n_emit, alpha)
        candidates = []
        for tokens, logp in live:
            lp_vec = score_fn((bos,) + tokens)
            for tok in range(lp_vec.shape[0]):
                total = logp + float(lp_vec[tok])
                candidates.append((-(total / penal), tokens + (tok,), total))
        candidates.sort(key=lambda c: (c[0], c[1]))
        live = []
        for neg_score, tokens, total in candidates[:beam]:
            if tokens[-1] == eos:
                finished.append((-neg_score, tokens[:-1]))
            else:
                live.append((tokens, total))
        if not live:
            break
    pool = [(score, tokens, True) for score, tokens in finished]
    for tokens, logp in live:
        pool.append((logp / length_penalty(len(tokens), alpha), tokens, False))
    pool.sort(key=lambda c: (-c[0], c[1]))
    score, tokens, was_finished = pool[0]
    return BeamResult(tokens=list(tokens), score=score,
                      finished=was_finished, n_finished=len(finished))


def translate_ids(model, *, feats=None, src_ids=None, beam=5, alpha=0.0,
                  max_len_cap=512):
    """Decode one utterance (speech) or sentence (text) to target ids.

    The emission budget is twice the number of source positions, capped.
    """
    if (feats is None) == (src_ids is None):
        raise DataError("translate_ids: give exactly one of feats, src_ids")
    if feats is not None:
        memory = model.encode_speech_source(feats)
        units = downsampled_length(feats.shape[0])
    else:
        memory = model.encode_text_source(src_ids)
        units = len(src_ids)
    max_len = max(1, min(2 * units, max_len_cap))

    def score_fn(prefix):
        return model.next_token_log_probs(list(prefix), memory)

    return beam_search(score_fn, beam=beam, max_len=max_len, alpha=alpha)


def translate_text(model, vocab, *, feats=None, src_ids=None, beam=5,
                   alpha=0.0, max_len_cap=512):
    """translate_ids plus detokenization through the vocabulary."""
    result = translate_ids(model, feats=feats, src_ids=src_ids, beam=beam,
                           alpha=alpha, max_len_cap=max_len_cap)
    return vocab.decode(result.tokens), result


# -- BLEU ---------------------------------------------------------------------


@dataclass
class BleuReport:
    score: float
    precisions: dict
    brevity_penalty: float
    hyp_length: int
    ref_length: int
    orders: list = field(default_factory=list)


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses, references, max_order=4, smooth=False):
    """Corpus-level BLEU with clipped n-gram precision and brevity penalty.

    Orders that have no candidate n-grams anywhere in the corpus are dropped
    from the geometric mean, so short segments are scored on the orders they
    can express and a corpus identical to its reference always scores 100.
    By default a zero precision at any remaining order zeroes the score;
    smooth=True instead applies add-one smoothing to orders above unigram.

    Worked examples (single-segment corpora, tokens pre-split):

    1. hyp "a b c d" vs ref "a b c d": every precision is 1 and the
       brevity penalty is 1, so the score is exactly 100.
    2. hyp "a b c d" vs ref "a b c d e": all precisions are again 1 but
       the hypothesis is short, so BP = exp(1 - 5/4) and the score is
       100 * exp(-0.25) = 77.8800783...
    3. hyp "a b c d d" vs ref "a b c d e": BP = 1; clipped precisions are
       p1 = 4/5, p2 = 3/4, p3 = 2/3, p4 = 1/2, so the score is
       100 * (4/5 * 3/4 * 2/3 * 1/2)^(1/4) = 100 * 0.2^0.25 = 66.8740304...
    """
    if len(hypotheses) != len(references):
        raise DataError(
            f"corpus_bleu: {len(hypotheses)} hypotheses vs "
            f"{len(references)} references")
    if not hypotheses:
        raise DataError("corpus_bleu: empty corpus")
    matched = [0] * max_order
    total = [0] * max_order
    hyp_length = ref_length = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_length += len(hyp)
        ref_length += len(ref)
        for n in range(1, max_order + 1):
            hyp_counts = _ngram_counts(hyp, n)
            if not hyp_counts:
                continue
            ref_counts = _ngram_counts(ref, n)
            total[n - 1] += sum(hyp_counts.values())
            matched[n - 1] += sum(min(c, ref_counts[g])
                                  for g, c in hyp_counts.items())
    orders = [n for n in range(1, max_order + 1) if total[n - 1] > 0]
    precisions = {}
    for n in orders:
        m, t = matched[n - 1], total[n - 1]
        if smooth and n > 1:
            precisions[n] = (m + 1.0) / (t + 1.0)
        else:
            precisions[n] = m / t
    if hyp_length == 0 or not orders:
        return BleuReport(0.0, precisions, 0.0, hyp_length, ref_length, orders)
    if hyp_length >= ref_length:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_length / hyp_length)
    if any(precisions[n] == 0.0 for n in orders):
        score = 0.0
    else:
        log_mean = math.fsum(math.log(precisions[n]) for n in orders)
        score = 100.0 * bp * math.exp(log_mean / len(orders))
    return BleuReport(score, precisions, bp, hyp_length, ref_length, orders)
