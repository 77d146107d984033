"""Manifests, examples, batching, and the multitask batch scheduler.

A manifest is JSON lines; each record may carry `audio` (16-bit mono WAV) or
`feats` (FATF file), plus `text_src`, `text_tgt`, and an `id`. Whichever
fields are present (empty strings count as absent) determine the example's
flavor: any subset of {speech, source text, target text}, written "s", "x",
"y" (e.g. "sxy", "sx", "y").

Batches are single-flavor, padded to the longest member, with per-example
lengths kept alongside; padding never reaches a loss because consumers slice
by length. Dynamic batching packs length-sorted examples while
(count * longest) stays under the frame budget (token budget for text-only
flavors).

Training draws batches round-robin over named streams; each stream reshuffles
per epoch from a seed, so the whole schedule is a pure function of (seed,
step). Decoupled views of a triplet share the underlying arrays with their
parent example, never copies.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import features as feats_mod
from .config import derive_seed
from .errors import DataError
from .subword import PAD


@dataclass
class Example:
    uid: str
    feats: object = None        # (T, d_s) float32 array or None
    src_ids: object = None      # list[int] or None
    tgt_ids: object = None
    src_text: str = None
    tgt_text: str = None

    @property
    def flavor(self):
        tag = ""
        if self.feats is not None:
            tag += "s"
        if self.src_ids is not None:
            tag += "x"
        if self.tgt_ids is not None:
            tag += "y"
        return tag

    @property
    def n_frames(self):
        return 0 if self.feats is None else self.feats.shape[0]

    @property
    def length_key(self):
        if self.feats is not None:
            return self.n_frames
        return max(len(self.src_ids or []), len(self.tgt_ids or []))


@dataclass
class Batch:
    flavor: str
    examples: list

    @property
    def size(self):
        return len(self.examples)

    @property
    def uids(self):
        return [ex.uid for ex in self.examples]

    def padded_feats(self):
        """(B, T_max, d_s) zero-padded features plus (B,) frame lengths."""
        if "s" not in self.flavor:
            return None, None
        lengths = np.array([ex.n_frames for ex in self.examples], dtype=np.int64)
        d = self.examples[0].feats.shape[1]
        out = np.zeros((len(self.examples), int(lengths.max()), d), dtype=np.float32)
        for i, ex in enumerate(self.examples):
            out[i, :ex.n_frames] = ex.feats
        return out, lengths

    def padded_ids(self, side):
        """(B, L_max) PAD-padded token ids plus (B,) lengths for 'src' or 'tgt'."""
        seqs = [getattr(ex, f"{side}_ids") for ex in self.examples]
        if any(s is None for s in seqs):
            return None, None
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        out = np.full((len(seqs), max(int(lengths.max()), 1)), PAD, dtype=np.int64)
        for i, s in enumerate(seqs):
            out[i, :len(s)] = s
        return out, lengths


def read_manifest_records(path):
    """Raw manifest records with line numbers, validated for field sanity."""
    records = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise DataError(f"{path}: cannot read manifest ({e})") from e
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{n}: invalid JSON ({e.msg})") from e
        if not isinstance(rec, dict):
            raise DataError(f"{path}:{n}: record must be a JSON object")
        known = {"id", "audio", "feats", "text_src", "text_tgt"}
        unknown = set(rec) - known
        if unknown:
            raise DataError(f"{path}:{n}: unknown fields {sorted(unknown)}")
        if "audio" in rec and "feats" in rec:
            raise DataError(f"{path}:{n}: record has both 'audio' and 'feats'")
        has_any = any(rec.get(k) for k in ("audio", "feats", "text_src", "text_tgt"))
        if not has_any:
            raise DataError(f"{path}:{n}: record has no usable fields")
        rec.setdefault("id", f"{path}:{n}")
        records.append((n, rec))
    if not records:
        raise DataError(f"{path}: manifest is empty")
    return records


def read_manifest_texts(path):
    """All (text_src, text_tgt) strings in a manifest, for vocabulary training."""
    texts = []
    for _, rec in read_manifest_records(path):
        for key in ("text_src", "text_tgt"):
            if rec.get(key):
                texts.append(rec[key])
    return texts


def load_manifest(path, vocab, d_s, cmvn=None):
    """Manifest records as Examples, with features loaded and text tokenized.

    cmvn is an optional (mean, std) pair applied to every feature matrix.
    """
    examples = []
    for n, rec in read_manifest_records(path):
        feats = None
        if rec.get("audio"):
            wave, rate = feats_mod.read_wav(rec["audio"])
            feats = feats_mod.log_mel_spectrogram(wave, rate, n_mels=d_s)
        elif rec.get("feats"):
            feats = feats_mod.load_features(rec["feats"])
            if feats.shape[1] != d_s:
                raise DataError(f"{path}:{n}: feature dim {feats.shape[1]} does not "
                                f"match configured d_s={d_s}")
        if feats is not None:
            if cmvn is not None:
                feats = feats_mod.apply_cmvn(feats, cmvn[0], cmvn[1])
            feats = np.ascontiguousarray(feats, dtype=np.float32)
        src_ids = vocab.encode(rec["text_src"]) if rec.get("text_src") else None
        tgt_ids = vocab.encode(rec["text_tgt"]) if rec.get("text_tgt") else None
        if src_ids is not None and not src_ids:
            raise DataError(f"{path}:{n}: text_src tokenized to nothing")
        if tgt_ids is not None and not tgt_ids:
            raise DataError(f"{path}:{n}: text_tgt tokenized to nothing")
        examples.append(Example(uid=str(rec["id"]), feats=feats,
                                src_ids=src_ids, tgt_ids=tgt_ids,
                                src_text=rec.get("text_src") or None,
                                tgt_text=rec.get("text_tgt") or None))
    return examples


def filter_long(examples, max_frames):
    """Drop utterances longer than max_frames; returns (kept, dropped_count)."""
    kept = [ex for ex in examples if ex.n_frames <= max_frames]
    return kept, len(examples) - len(kept)


def make_batches(examples, batch_frames, batch_tokens, seed=0):
    """Pack examples into single-flavor, length-sorted batches.

    Speech batches respect count * longest <= batch_frames; text-only batches
    use batch_tokens the same way. Batch order is shuffled from the seed.
    """
    by_flavor = {}
    for ex in examples:
        if not ex.flavor:
            continue
        by_flavor.setdefault(ex.flavor, []).append(ex)
    batches = []
    for flavor in sorted(by_flavor):
        group = sorted(by_flavor[flavor], key=lambda e: (e.length_key, e.uid))
        budget = batch_frames if "s" in flavor else batch_tokens
        current = []
        longest = 0
        for ex in group:
            new_longest = max(longest, ex.length_key)
            if current and (len(current) + 1) * new_longest > budget:
                batches.append(Batch(flavor, current))
                current, longest = [], 0
                new_longest = ex.length_key
            current.append(ex)
            longest = new_longest
        if current:
            batches.append(Batch(flavor, current))
    rng = np.random.default_rng(derive_seed(seed, 0xBA7C4))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def drop_modality(example, keep):
    """A view of `example` restricted to the modalities in `keep` ("s","x","y").

    Views alias the parent's arrays and token lists; nothing is copied.
    """
    return Example(
        uid=example.uid,
        feats=example.feats if "s" in keep else None,
        src_ids=example.src_ids if "x" in keep else None,
        tgt_ids=example.tgt_ids if "y" in keep else None,
        src_text=example.src_text if "x" in keep else None,
        tgt_text=example.tgt_text if "y" in keep else None,
    )


def build_pretrain_streams(examples, data_config, seed=0):
    """One batch stream per flavor present; examples enter unchanged."""
    streams = {}
    by_flavor = {}
    for ex in examples:
        by_flavor.setdefault(ex.flavor, []).append(ex)
    for flavor in sorted(by_flavor):
        streams[flavor] = make_batches(by_flavor[flavor], data_config.batch_frames,
                                       data_config.batch_tokens,
                                       seed=derive_seed(seed, flavor))
    return streams


def build_finetune_streams(st_examples, mt_examples, mlm_examples,
                           data_config, seed=0):
    """Streams for the composed objective: "st", "mt", "mlm".

    Triplets in st_examples feed all three streams: as-is for ST (the
    transcription rides along for the CTC term), as an (x, y) view for MT, and
    as an (s, x) view for the masked-reconstruction term. mt_examples and
    mlm_examples extend the latter two streams.
    """
    st, mt, mlm = [], list(mt_examples), list(mlm_examples)
    for ex in st_examples:
        fl = ex.flavor
        if "s" in fl and "y" in fl:
            st.append(ex)
        if "x" in fl and "y" in fl:
            mt.append(drop_modality(ex, "xy"))
        if "s" in fl and "x" in fl:
            mlm.append(drop_modality(ex, "sx"))
    streams = {}
    for name, group in (("st", st), ("mt", mt), ("mlm", mlm)):
        if group:
            streams[name] = make_batches(group, data_config.batch_frames,
                                         data_config.batch_tokens,
                                         seed=derive_seed(seed, name))
    return streams


def schedule(streams, seed, proportional=False):
    """Infinite deterministic generator of (stream_name, Batch).

    Round-robin over stream names in sorted order by default; with
    proportional=True, each step instead samples a stream with probability
    proportional to its batch count. Streams cycle independently and reshuffle
    every epoch from (seed, stream, epoch).
    """
    names = sorted(n for n, batches in streams.items() if batches)
    if not names:
        raise DataError("schedule: no non-empty streams")

    class _Cycler:
        def __init__(self, idx, batches):
            self.idx = idx
            self.batches = batches
            self.epoch = 0
            self.pos = 0
            self.order = self._new_order()

        def _new_order(self):
            rng = np.random.default_rng(derive_seed(seed, self.idx, self.epoch))
            return rng.permutation(len(self.batches))

        def next(self):
            if self.pos >= len(self.order):
                self.epoch += 1
                self.pos = 0
                self.order = self._new_order()
            batch = self.batches[self.order[self.pos]]
            self.pos += 1
            return batch

    cyclers = {name: _Cycler(i, streams[name]) for i, name in enumerate(names)}
    if proportional:
        weights = np.array([len(streams[n]) for n in names], dtype=np.float64)
        weights /= weights.sum()
        pick_rng = np.random.default_rng(derive_seed(seed, 0x9C7))
        while True:
            name = names[int(pick_rng.choice(len(names), p=weights))]
            yield name, cyclers[name].next()
    else:
        step = 0
        while True:
            name = names[step % len(names)]
            yield name, cyclers[name].next()
            step += 1
