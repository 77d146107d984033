"""Training objectives: masked reconstruction, masked CE, seq2seq CE, and CTC.

Every loss here is a scalar Tensor built on the active tape, so one backward
pass covers any weighted combination. Report values live next to the tensors
as python floats accumulated in float64, which is what the trainer logs and
what the decomposition checks compare against.
"""

import math
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from .config import derive_seed
from .errors import DataError, ShapeError
from .masking import mask_span, mask_tokens
from .numerics import (Tensor, add, cross_entropy, gather_rows, mul,
                       record_op, scale, sub, sum_)
from .subword import BOS, EOS

# distinct stream tags so speech, source, and target masks never collide
# even when drawn for the same example at the same step
_TAG_SPEECH, _TAG_SRC, _TAG_TGT = 0x51, 0x52, 0x54


@dataclass
class LossBreakdown:
    """One optimization step's loss, split into its named terms.

    `total` is the differentiable scalar. `parts` holds the unweighted term
    values and `weights` the multiplier each received, so
    sum(weights[k] * parts[k]) reproduces the reported total exactly in
    float64 arithmetic.
    """

    total: Tensor
    parts: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    n_examples: int = 0
    ctc_skipped: int = 0

    @property
    def report_total(self):
        return math.fsum(self.weights[k] * self.parts[k] for k in self.parts)


def _sum_tensors(terms):
    return reduce(add, terms)


def loss_speech_recon(recon, target, indicator):
    """Squared error on masked frames: summed over features, averaged over
    the masked frames. Frames outside the mask never enter the graph, so
    their reconstruction gradient is exactly zero.

    Returns None when nothing is masked.
    """
    if recon.shape != target.shape:
        raise ShapeError("loss_speech_recon", recon.shape, target.shape)
    idx = np.flatnonzero(indicator)
    if idx.size == 0:
        return None
    diff = sub(gather_rows(recon, idx), Tensor(target[idx]))
    return scale(sum_(mul(diff, diff)), 1.0 / idx.size)


def loss_masked_tokens(logits, target_ids, indicator, smoothing=0.0):
    """Cross entropy at masked positions only, averaged over those positions.

    Returns None when nothing is masked.
    """
    idx = np.flatnonzero(indicator)
    if idx.size == 0:
        return None
    rows = gather_rows(logits, idx)
    targets = np.asarray(target_ids, dtype=np.int64)[idx]
    return cross_entropy(rows, targets, reduction="mean", smoothing=smoothing)


def _mlm_inputs(model, ex, step, seed, rng):
    """Corrupt one example per its modalities and run the fused encoder.

    Returns (fused, plans) where plans maps segment name to its MaskPlan.
    """
    cfg = model.config
    plans = {}
    speech = None
    src = tgt = None
    if ex.feats is not None:
        plan = mask_span(ex.feats.shape[0], cfg.mask_ratio, cfg.span_len,
                         derive_seed(seed, step, ex.uid, _TAG_SPEECH))
        plans["speech"] = plan
        speech = model.acoustic_embed(ex.feats, plan=plan, rng=rng)
    if ex.src_ids is not None:
        plan = mask_tokens(len(ex.src_ids), cfg.mask_ratio,
                           derive_seed(seed, step, ex.uid, _TAG_SRC))
        plans["src"] = plan
        src = (ex.src_ids, plan)
    if ex.tgt_ids is not None:
        plan = mask_tokens(len(ex.tgt_ids), cfg.mask_ratio,
                           derive_seed(seed, step, ex.uid, _TAG_TGT))
        plans["tgt"] = plan
        tgt = (ex.tgt_ids, plan)
    return model.fuse_encode(speech=speech, src=src, tgt=tgt, rng=rng), plans


def loss_fat_mlm(model, examples, step=0, seed=0, rng=None):
    """Fused masked-LM loss over a single-flavor batch.

    Each present modality contributes a term: speech reconstruction on
    masked frames, token prediction on masked source and target positions.
    Per-example term values are averaged over the examples where the term
    had at least one masked position.
    """
    if not examples:
        raise DataError("loss_fat_mlm: empty batch")
    terms = {"s": [], "x": [], "y": []}
    for ex in examples:
        fused, plans = _mlm_inputs(model, ex, step, seed, rng)
        if "speech" in plans:
            recon = model.reconstruct_speech(fused, ex.feats.shape[0])
            t = loss_speech_recon(recon, ex.feats, plans["speech"].indicator)
            if t is not None:
                terms["s"].append(t)
        if "src" in plans:
            logits = model.predict_tokens(fused, "src")
            t = loss_masked_tokens(logits, ex.src_ids, plans["src"].indicator)
            if t is not None:
                terms["x"].append(t)
        if "tgt" in plans:
            logits = model.predict_tokens(fused, "tgt")
            t = loss_masked_tokens(logits, ex.tgt_ids, plans["tgt"].indicator)
            if t is not None:
                terms["y"].append(t)
    parts, weights, tensors = {}, {}, []
    for name, lst in terms.items():
        if not lst:
            continue
        term = scale(_sum_tensors(lst), 1.0 / len(lst))
        parts[name] = float(term.item())
        weights[name] = 1.0
        tensors.append(term)
    if not tensors:
        raise DataError("loss_fat_mlm: batch produced no loss terms")
    return LossBreakdown(total=_sum_tensors(tensors), parts=parts,
                         weights=weights, n_examples=len(examples))


def loss_seq2seq(model, examples, source, rng=None, smoothing=0.0):
    """Teacher-forced translation loss, averaged per target token.

    source is "speech" or "text" and selects the conditioning input. Each
    target sequence is framed as BOS + y -> y + EOS.
    """
    if not examples:
        raise DataError("loss_seq2seq: empty batch")
    ce_terms = []
    n_tokens = 0
    for ex in examples:
        if ex.tgt_ids is None:
            raise DataError(f"loss_seq2seq: example {ex.uid} has no target text")
        if source == "speech":
            memory = model.encode_speech_source(ex.feats, rng=rng)
        elif source == "text":
            memory = model.encode_text_source(ex.src_ids, rng=rng)
        else:
            raise DataError(f"loss_seq2seq: unknown source {source!r}")
        prefix = [BOS] + list(ex.tgt_ids)
        targets = np.asarray(list(ex.tgt_ids) + [EOS], dtype=np.int64)
        logits = model.decoder_logits(prefix, memory, rng=rng)
        ce_terms.append(cross_entropy(logits, targets, reduction="sum",
                                      smoothing=smoothing))
        n_tokens += len(targets)
    return scale(_sum_tensors(ce_terms), 1.0 / n_tokens)


# -- CTC ---------------------------------------------------------------------


def _extended_label(labels, blank):
    ext = [blank]
    for l in labels:
        ext.append(l)
        ext.append(blank)
    return np.asarray(ext, dtype=np.int64)


def ctc_loss(log_probs, labels):
    """Negative log-likelihood of `labels` under alignment-free emission.

    log_probs is (T, V+1) with the blank in the last column; rows must be
    normalized. Returns (loss, feasible). When the label cannot fit in T
    frames the loss is +inf with no gradient and feasible is False.

    The gradient with respect to log_probs is minus the per-frame symbol
    posterior, obtained from the forward/backward lattice sums.
    """
    if log_probs.data.ndim != 2:
        raise ShapeError("ctc_loss", log_probs.data.shape,
                         detail="expected (frames, symbols)")
    t_len, n_sym = log_probs.data.shape
    blank = n_sym - 1
    labels = list(labels)
    if any(not 0 <= l < blank for l in labels):
        raise DataError(f"ctc_loss: label ids must be in [0, {blank})")
    need = len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    dtype = log_probs.data.dtype
    if t_len < need:
        return Tensor(np.asarray(np.inf, dtype=dtype)), False

    ext = _extended_label(labels, blank)
    s_len = ext.size
    lp = log_probs.data.astype(np.float64)

    # a lattice state may be entered from two states back only when it is a
    # fresh non-blank label (the skip that elides an optional blank)
    can_skip = np.zeros(s_len, dtype=bool)
    can_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((t_len, s_len), -np.inf)
    alpha[0, 0] = lp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, t_len):
        stay = alpha[t - 1]
        step1 = np.full(s_len, -np.inf)
        step1[1:] = alpha[t - 1, :-1]
        step2 = np.full(s_len, -np.inf)
        step2[2:] = np.where(can_skip[2:], alpha[t - 1, :-2], -np.inf)
        alpha[t] = np.logaddexp(np.logaddexp(stay, step1), step2) + lp[t, ext]

    tail = alpha[-1, -1] if s_len == 1 else np.logaddexp(alpha[-1, -1],
                                                         alpha[-1, -2])
    if not np.isfinite(tail):
        return Tensor(np.asarray(np.inf, dtype=dtype)), False
    logp = tail

    beta = np.full((t_len, s_len), -np.inf)
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    for t in range(t_len - 2, -1, -1):
        emit = lp[t + 1, ext] + beta[t + 1]
        step1 = np.full(s_len, -np.inf)
        step1[:-1] = emit[1:]
        step2 = np.full(s_len, -np.inf)
        step2[:s_len - 2] = np.where(can_skip[2:], emit[2:], -np.inf)
        beta[t] = np.logaddexp(np.logaddexp(emit, step1), step2)

    # alpha includes the emission at t and beta does not, so their sum counts
    # each path's probability exactly once per frame
    occupancy = np.exp(alpha + beta - logp)
    posterior = np.zeros((t_len, n_sym))
    np.add.at(posterior, (slice(None), ext), occupancy)

    out = Tensor(np.asarray(-logp, dtype=dtype))

    def backward():
        if log_probs.requires_grad:
            g = float(out.grad)
            log_probs.accumulate_grad((-g * posterior).astype(dtype))

    return record_op("ctc_loss", [log_probs], out, backward), True


def loss_ctc_batch(model, examples, rng=None, memories=None):
    """Mean CTC loss over the examples that carry a transcription.

    Infeasible examples (labels longer than the downsampled frame count
    allows) are skipped; the count of skips is returned alongside. Returns
    (loss or None, n_scored, n_skipped). Precomputed encoder states can be
    passed via `memories` keyed by uid to share work with the seq2seq term.
    """
    terms = []
    skipped = 0
    for ex in examples:
        if ex.feats is None or ex.src_ids is None:
            continue
        memory = None if memories is None else memories.get(ex.uid)
        if memory is None:
            memory = model.encode_speech_source(ex.feats, rng=rng)
        states = memory.segment_states("speech")
        lp = model.ctc_log_probs(states)
        term, feasible = ctc_loss(lp, ex.src_ids)
        if feasible:
            terms.append(term)
        else:
            skipped += 1
    if not terms:
        return None, 0, skipped
    return scale(_sum_tensors(terms), 1.0 / len(terms)), len(terms), skipped


def loss_fat_st(model, batch, stream, step=0, seed=0, rng=None, weights=None,
                smoothing=0.0):
    """One training step's loss for the translation model.

    stream selects which term(s) this batch feeds: "st" (speech-to-text
    teacher forcing plus CTC on transcribed examples), "mt" (text-to-text),
    or "mlm" (the fused masked objective). Term weights default to
    st=1, mt=1, mlm=1, ctc=0.3.
    """
    w = {"st": 1.0, "mt": 1.0, "mlm": 1.0, "ctc": 0.3}
    if weights:
        w.update(weights)
    examples = batch.examples
    if stream == "st":
        memories = {ex.uid: model.encode_speech_source(ex.feats, rng=rng)
                    for ex in examples}
        ce_terms = []
        n_tokens = 0
        for ex in examples:
            prefix = [BOS] + list(ex.tgt_ids)
            targets = np.asarray(list(ex.tgt_ids) + [EOS], dtype=np.int64)
            logits = model.decoder_logits(prefix, memories[ex.uid], rng=rng)
            ce_terms.append(cross_entropy(logits, targets, reduction="sum",
                                          smoothing=smoothing))
            n_tokens += len(targets)
        st_term = scale(_sum_tensors(ce_terms), 1.0 / n_tokens)
        parts = {"st": float(st_term.item())}
        weights_out = {"st": w["st"]}
        total = scale(st_term, w["st"])
        ctc_term, _, skipped = loss_ctc_batch(model, examples, rng=rng,
                                              memories=memories)
        if ctc_term is not None:
            parts["ctc"] = float(ctc_term.item())
            weights_out["ctc"] = w["ctc"]
            total = add(total, scale(ctc_term, w["ctc"]))
        return LossBreakdown(total=total, parts=parts, weights=weights_out,
                             n_examples=len(examples), ctc_skipped=skipped)
    if stream == "mt":
        mt_term = loss_seq2seq(model, examples, "text", rng=rng,
                               smoothing=smoothing)
        return LossBreakdown(total=scale(mt_term, w["mt"]),
                             parts={"mt": float(mt_term.item())},
                             weights={"mt": w["mt"]},
                             n_examples=len(examples))
    if stream == "mlm":
        inner = loss_fat_mlm(model, examples, step=step, seed=seed, rng=rng)
        return LossBreakdown(total=scale(inner.total, w["mlm"]),
                             parts=inner.parts,
                             weights={k: w["mlm"] for k in inner.parts},
                             n_examples=inner.n_examples)
    raise DataError(f"loss_fat_st: unknown stream {stream!r}")
