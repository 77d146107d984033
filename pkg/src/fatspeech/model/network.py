"""The fused acoustic/text encoder, reconstruction heads, and decoder.

One class covers both training stages. kind="fat_mlm" builds the encoder-side
machinery only: token/language embeddings, the learned mask vectors, the conv
downsampler (two stride-2 3x3 convs, so time shrinks exactly 4x), a private
acoustic transformer, the shared transformer over the concatenation
[speech; source text; target text], the masked-token prediction head, and the
frame reconstruction head (linear + two stride-2 transposed convs, cropped to
the original frame count). kind="fat_st" adds a CTC projection over the
acoustic states and a transformer decoder whose output head shares the token
embedding table.

Sequence order in the fused input is always speech, then source text, then
target text, and sinusoidal positions restart at every segment boundary.
Language embeddings (source for speech and source text, target for target
text) are added when the model is built for translation; a monolingual model
simply does not create them, which is the documented zero-vector behavior.
"""

from dataclasses import dataclass

import numpy as np

from ..config import derive_seed
from ..errors import DataError, ShapeError
from ..masking import substitute_rows
from ..numerics import (
    Tensor, add, concat, conv2d, conv2d_transpose, log_softmax, matmul, relu,
    reshape, slice_, transpose,
)
from .layers import (
    DecoderLayer, EncoderLayer, LayerNormParams, Linear, ParamStore,
    causal_mask, dropout, embed_ids, sinusoid_positions,
)

SEGMENT_ORDER = ("speech", "src", "tgt")


@dataclass
class FusedStates:
    hidden: Tensor
    segments: list  # ordered (name, length) pairs

    def segment_bounds(self, name):
        lo = 0
        for seg, length in self.segments:
            if seg == name:
                return lo, lo + length
            lo += length
        raise DataError(f"segment {name!r} not present; have "
                        f"{[s for s, _ in self.segments]}")

    def segment_states(self, name):
        lo, hi = self.segment_bounds(name)
        return slice_(self.hidden, 0, lo, hi)


def downsampled_length(t):
    """Latent frame count after the two stride-2 convs: ceil(t / 4)."""
    t2 = (t + 2 - 3) // 2 + 1
    return (t2 + 2 - 3) // 2 + 1


class FATModel:
    def __init__(self, config, seed=0, init_params=True):
        if config.vocab_size <= 5:
            raise DataError(f"vocab_size {config.vocab_size} too small")
        if config.kind not in ("fat_mlm", "fat_st"):
            raise DataError(f"unknown model kind {config.kind!r}")
        self.config = config
        d, c = config.d_model, config.conv_channels
        self._f4 = downsampled_length(config.d_s)
        store = ParamStore(config.dtype,
                           np.random.default_rng(derive_seed(seed, 0xF47)))
        self.store = store

        store.embedding("embed.tokens", (config.vocab_size, d), d ** -0.5)
        if config.lang_embeddings:
            store.embedding("embed.lang_src", (d,), d ** -0.5)
            store.embedding("embed.lang_tgt", (d,), d ** -0.5)
        store.embedding("eps.frame", (config.d_s,), d ** -0.5)
        store.embedding("eps.token", (d,), d ** -0.5)

        store.matrix("conv.0.w", (c, 1, 3, 3), fan_in=9, fan_out=9 * c)
        store.zeros("conv.0.b", (c,))
        store.matrix("conv.1.w", (c, c, 3, 3), fan_in=9 * c, fan_out=9 * c)
        store.zeros("conv.1.b", (c,))
        self.conv_proj = Linear(store, "conv.proj", c * self._f4, d)

        args = (d, config.heads, config.ffn_dim, config.activation, config.dropout)
        self.acoustic = [EncoderLayer(store, f"acoustic.{i}", *args)
                         for i in range(config.acoustic_layers)]
        if self.acoustic:
            self.acoustic_final = LayerNormParams(store, "acoustic.final_ln", d)
        self.shared = [EncoderLayer(store, f"shared.{i}", *args)
                       for i in range(config.shared_layers)]
        self.shared_final = LayerNormParams(store, "shared.final_ln", d)

        self.recon_proj = Linear(store, "recon.proj", d, c * self._f4)
        store.matrix("recon.deconv0.w", (c, c, 3, 3), fan_in=9 * c, fan_out=9 * c)
        store.zeros("recon.deconv0.b", (c,))
        store.matrix("recon.deconv1.w", (c, 1, 3, 3), fan_in=9 * c, fan_out=9)
        store.zeros("recon.deconv1.b", (1,))

        store.zeros("head.mlm_bias", (config.vocab_size,))
        if not config.tie_embeddings:
            store.matrix("head.w", (d, config.vocab_size))

        if config.kind == "fat_st":
            self.ctc_proj = Linear(store, "ctc.proj", d, config.vocab_size + 1)
            self.decoder = [DecoderLayer(store, f"dec.{i}", *args)
                            for i in range(config.dec_layers)]
            self.dec_final = LayerNormParams(store, "dec.final_ln", d)
            store.zeros("head.dec_bias", (config.vocab_size,))

    # -- parameter access ---------------------------------------------------

    def p(self, name):
        return self.store.params[name]

    def parameters(self):
        return self.store.params

    def load_tensors(self, tensors):
        """Overwrite all parameters from a name -> array map (exact match)."""
        have = set(self.store.params)
        got = set(tensors)
        if have != got:
            missing = sorted(have - got)
            extra = sorted(got - have)
            raise ShapeError("load_tensors", (len(have),), (len(got),),
                             detail=f"missing={missing[:4]} extra={extra[:4]}")
        for name, arr in tensors.items():
            param = self.store.params[name]
            arr = np.asarray(arr)
            if arr.shape != param.data.shape:
                raise ShapeError("load_tensors", arr.shape, param.data.shape,
                                 detail=name)
            param.data = arr.astype(self.config.dtype)
            param.grad = None

    # -- encoder ------------------------------------------------------------

    def _positions(self, n):
        return sinusoid_positions(n, self.config.d_model, self.config.dtype)

    def acoustic_embed(self, feats, plan=None, rng=None, collect=None):
        """Features (T, d_s) -> acoustic states (ceil(T/4), d_model).

        plan, when given, substitutes the learned frame vector at masked
        frames before the convolutions.
        """
        feats = np.asarray(feats, dtype=self.config.dtype)
        if feats.ndim != 2 or feats.shape[1] != self.config.d_s:
            raise ShapeError("acoustic_embed", feats.shape,
                             (None, self.config.d_s))
        t = feats.shape[0]
        if t < 1:
            raise ShapeError("acoustic_embed", feats.shape, detail="empty input")
        x = Tensor(feats)
        if plan is not None:
            x = substitute_rows(x, plan.indicator, self.p("eps.frame"))
        h = reshape(x, (1, t, self.config.d_s))
        h = relu(conv2d(h, self.p("conv.0.w"), self.p("conv.0.b"),
                        stride=2, padding=1))
        h = relu(conv2d(h, self.p("conv.1.w"), self.p("conv.1.b"),
                        stride=2, padding=1))
        t4 = h.shape[1]
        h = transpose(h, (1, 0, 2))
        h = reshape(h, (t4, h.shape[1] * h.shape[2]))
        h = self.conv_proj(h)
        h = add(h, self._positions(t4))
        h = dropout(h, self.config.dropout, rng)
        layer_maps = [] if collect is not None else None
        for layer in self.acoustic:
            heads = [] if collect is not None else None
            h = layer(h, rng=rng, collect=heads)
            if collect is not None:
                layer_maps.append(heads)
        if self.acoustic:
            h = self.acoustic_final(h)
        if collect is not None:
            collect["acoustic"] = layer_maps
        return h

    def _embed_text(self, ids, plan, lang, rng):
        e = embed_ids(self.p("embed.tokens"), ids, self.config.d_model)
        if plan is not None:
            e = substitute_rows(e, plan.indicator, self.p("eps.token"))
        e = add(e, self._positions(len(ids)))
        if self.config.lang_embeddings:
            e = add(e, reshape(self.p(f"embed.lang_{lang}"),
                               (1, self.config.d_model)))
        return dropout(e, self.config.dropout, rng)

    def fuse_encode(self, speech=None, src=None, tgt=None, rng=None, collect=None):
        """Concatenate present segments and run the shared transformer.

        speech is an acoustic_embed output; src and tgt are (ids, plan)
        pairs (plan may be None for uncorrupted input). Segment order is
        fixed: speech, src, tgt.
        """
        parts, segments = [], []
        if speech is not None:
            seg = add(speech, self._positions(speech.shape[0]))
            if self.config.lang_embeddings:
                seg = add(seg, reshape(self.p("embed.lang_src"),
                                       (1, self.config.d_model)))
            parts.append(seg)
            segments.append(("speech", speech.shape[0]))
        if src is not None:
            ids, plan = src
            parts.append(self._embed_text(ids, plan, "src", rng))
            segments.append(("src", len(ids)))
        if tgt is not None:
            ids, plan = tgt
            parts.append(self._embed_text(ids, plan, "tgt", rng))
            segments.append(("tgt", len(ids)))
        if not parts:
            raise DataError("fuse_encode: no segments to encode")
        x = parts[0] if len(parts) == 1 else concat(parts, axis=0)
        layer_maps = [] if collect is not None else None
        for layer in self.shared:
            heads = [] if collect is not None else None
            x = layer(x, rng=rng, collect=heads)
            if collect is not None:
                layer_maps.append(heads)
        x = self.shared_final(x)
        if collect is not None:
            collect["shared"] = layer_maps
            collect["segments"] = list(segments)
        return FusedStates(x, segments)

    def encode_speech_source(self, feats, rng=None, collect=None):
        """Uncorrupted speech -> fused states, the translation-time encoder."""
        return self.fuse_encode(
            speech=self.acoustic_embed(feats, rng=rng, collect=collect),
            rng=rng, collect=collect)

    def encode_text_source(self, ids, rng=None, collect=None):
        return self.fuse_encode(src=(ids, None), rng=rng, collect=collect)

    # -- heads --------------------------------------------------------------

    def predict_tokens(self, fused, segment):
        """Vocabulary logits over one text segment of the fused states."""
        states = fused.segment_states(segment)
        if self.config.tie_embeddings:
            w = transpose(self.p("embed.tokens"))
        else:
            w = self.p("head.w")
        return add(matmul(states, w), self.p("head.mlm_bias"))

    def reconstruct_speech(self, fused, n_frames):
        """Upsample the speech segment back to exactly (n_frames, d_s)."""
        states = fused.segment_states("speech")
        t4 = states.shape[0]
        c = self.config.conv_channels
        h = self.recon_proj(states)
        h = reshape(h, (t4, c, self._f4))
        h = transpose(h, (1, 0, 2))
        h = relu(conv2d_transpose(h, self.p("recon.deconv0.w"),
                                  self.p("recon.deconv0.b"), stride=2))
        h = conv2d_transpose(h, self.p("recon.deconv1.w"),
                             self.p("recon.deconv1.b"), stride=2)
        if h.shape[1] < n_frames or h.shape[2] < self.config.d_s:
            raise ShapeError("reconstruct_speech", h.shape,
                             (1, n_frames, self.config.d_s),
                             detail="upsampled output too small to crop")
        h = slice_(h, 1, 0, n_frames)
        h = slice_(h, 2, 0, self.config.d_s)
        return reshape(h, (n_frames, self.config.d_s))

    def ctc_log_probs(self, acoustic_states):
        """Per-frame log distribution over vocab + blank (blank id = V)."""
        if self.config.kind != "fat_st":
            raise DataError("ctc_log_probs: model has no CTC head")
        return log_softmax(self.ctc_proj(acoustic_states))

    # -- decoder ------------------------------------------------------------

    def decoder_logits(self, prefix_ids, memory, rng=None,
                       collect_self=None, collect_cross=None):
        """Teacher-forced logits (len(prefix), V) over the next token at each slot."""
        if self.config.kind != "fat_st":
            raise DataError("decoder_logits: model has no decoder")
        if len(prefix_ids) == 0:
            raise ShapeError("decoder_logits", (0,), detail="empty prefix")
        x = embed_ids(self.p("embed.tokens"), prefix_ids, self.config.d_model)
        x = add(x, self._positions(len(prefix_ids)))
        x = dropout(x, self.config.dropout, rng)
        mask = causal_mask(len(prefix_ids), self.config.dtype)
        for layer in self.decoder:
            heads_self = [] if collect_self is not None else None
            heads_cross = [] if collect_cross is not None else None
            x = layer(x, memory.hidden, mask, rng=rng,
                      collect_self=heads_self, collect_cross=heads_cross)
            if collect_self is not None:
                collect_self.append(heads_self)
            if collect_cross is not None:
                collect_cross.append(heads_cross)
        x = self.dec_final(x)
        if self.config.tie_embeddings:
            w = transpose(self.p("embed.tokens"))
        else:
            w = self.p("head.w")
        return add(matmul(x, w), self.p("head.dec_bias"))

    def next_token_log_probs(self, prefix_ids, memory):
        """Log p(next token | prefix, source) as a numpy vector (V,)."""
        logits = self.decoder_logits(prefix_ids, memory)
        last = slice_(logits, 0, logits.shape[0] - 1, logits.shape[0])
        return log_softmax(last).data.reshape(-1)
